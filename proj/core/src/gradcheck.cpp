#include "binaformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "binaformer/attention.hpp"
#include "binaformer/binarize.hpp"
#include "binaformer/encoders.hpp"
#include "binaformer/errors.hpp"
#include "binaformer/ops.hpp"
#include "binaformer/pretrain.hpp"

namespace binaformer {

namespace {

constexpr double kDenominatorFloor = 1e-8;
// Tensors whose true gradient vanishes (e.g. a key bias under softmax) are
// measured against this fraction of the case's largest gradient.
constexpr double kCaseScaleFloor = 1e-3;

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

double objective(const Tensor& out, const std::vector<double>& r) {
  const auto v = out.data();
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * r[i];
  return s;
}

Tensor leaf(Rng& rng, Shape shape, bool grad = true, double stddev = 1.0) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), rng.normal_vector(n, stddev), grad);
}

// Values pushed at least `margin` away from zero, for ops with a kink there.
Tensor away_from_zero(Rng& rng, Shape shape, double margin) {
  Tensor t = leaf(rng, std::move(shape));
  for (auto& v : t.mutable_data()) v = (v < 0.0 ? -1.0 : 1.0) * (std::abs(v) + margin);
  return t;
}

GradCase params_case(Tensor x, const ParameterList& params, std::function<Tensor()> forward) {
  GradCase c;
  c.inputs.push_back(std::move(x));
  for (const auto& p : params)
    if (p.trainable && p.tensor.requires_grad()) c.inputs.push_back(p.tensor);
  c.forward = std::move(forward);
  return c;
}

GradCase block_case(const EncoderConfig& cfg, std::size_t n, Rng& rng) {
  auto block = std::shared_ptr<Block>(make_block(cfg, PrecisionSpec::fp32(), rng));
  ParameterList params;
  block->collect("b", params);
  Tensor x = leaf(rng, {n, cfg.dim});
  return params_case(x, params, [block, x] { return block->forward(x, {}); });
}

std::vector<NamedGradCase> make_op_cases() {
  std::vector<NamedGradCase> v;
  auto unary = [&v](std::string name, std::function<Tensor(const Tensor&)> f, bool kink = false) {
    v.push_back({std::move(name), [f, kink](Rng& rng) {
                   Tensor x = kink ? away_from_zero(rng, {3, 4}, 1e-2) : leaf(rng, {3, 4});
                   return GradCase{{x}, [f, x] { return f(x); }};
                 }});
  };
  auto binary = [&v](std::string name, std::function<Tensor(const Tensor&, const Tensor&)> f) {
    v.push_back({std::move(name), [f](Rng& rng) {
                   Tensor a = leaf(rng, {3, 4});
                   Tensor b = leaf(rng, {3, 4});
                   return GradCase{{a, b}, [f, a, b] { return f(a, b); }};
                 }});
  };

  v.push_back({"matmul", [](Rng& rng) {
                 Tensor a = leaf(rng, {4, 5});
                 Tensor b = leaf(rng, {5, 3});
                 return GradCase{{a, b}, [a, b] { return matmul(a, b); }};
               }});
  binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); });
  binary("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); });
  binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); });
  unary("scale", [](const Tensor& x) { return scale(x, -1.7); });
  unary("add_scalar", [](const Tensor& x) { return add_scalar(x, 0.3); });
  v.push_back({"add_bias", [](Rng& rng) {
                 Tensor x = leaf(rng, {3, 4});
                 Tensor b = leaf(rng, {4});
                 return GradCase{{x, b}, [x, b] { return add_bias(x, b); }};
               }});
  unary("sigmoid", [](const Tensor& x) { return sigmoid(x); });
  unary("relu", [](const Tensor& x) { return relu(x); }, true);
  unary("swish", [](const Tensor& x) { return swish(x); });
  unary("gelu", [](const Tensor& x) { return gelu(x); });
  unary("glu", [](const Tensor& x) { return glu(x, 1); });
  unary("glu_rows", [](const Tensor& x) { return glu(transpose(x), 0); });
  unary("softmax", [](const Tensor& x) { return softmax(x, 1); });
  unary("softmax_rows", [](const Tensor& x) { return softmax(x, 0); });
  v.push_back({"softmax_vector", [](Rng& rng) {
                 Tensor x = leaf(rng, {6});
                 return GradCase{{x}, [x] { return softmax(x, 0); }};
               }});
  v.push_back({"layer_norm", [](Rng& rng) {
                 Tensor x = leaf(rng, {3, 5});
                 Tensor g = leaf(rng, {5});
                 Tensor b = leaf(rng, {5});
                 return GradCase{{x, g, b}, [x, g, b] { return layer_norm(x, g, b); }};
               }});
  v.push_back({"batch_norm_inference", [](Rng& rng) {
                 Tensor x = leaf(rng, {3, 6});
                 Tensor g = leaf(rng, {3});
                 Tensor b = leaf(rng, {3});
                 std::vector<double> mu = rng.normal_vector(3, 1.0);
                 std::vector<double> var = {rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)};
                 return GradCase{{x, g, b}, [x, g, b, mu, var] { return batch_norm_inference(x, mu, var, g, b); }};
               }});
  v.push_back({"mask_fill", [](Rng& rng) {
                 Tensor x = leaf(rng, {3, 4});
                 std::vector<bool> fill(12);
                 for (std::size_t i = 0; i < fill.size(); ++i) fill[i] = rng.bernoulli(0.4);
                 return GradCase{{x}, [x, fill] { return mask_fill(x, fill, -2.5); }};
               }});
  unary("transpose", [](const Tensor& x) { return transpose(x); });
  unary("reshape", [](const Tensor& x) { return reshape(x, {2, 6}); });
  unary("sum", [](const Tensor& x) { return sum(x); });
  unary("mean", [](const Tensor& x) { return mean(x); });
  v.push_back({"cross_entropy", [](Rng& rng) {
                 Tensor logits = leaf(rng, {6, 4});
                 std::vector<int> labels(6);
                 for (auto& y : labels) y = static_cast<int>(rng.index(4));
                 std::vector<bool> selected = {true, false, true, true, false, true};
                 return GradCase{{logits}, [logits, labels, selected] {
                                   return cross_entropy(logits, labels, selected);
                                 }};
               }});
  auto conv = [&v](std::string name, ConvMode mode, std::size_t c_in, std::size_t c_out, std::size_t k,
                   std::size_t stride) {
    v.push_back({std::move(name), [=](Rng& rng) {
                   Tensor x = leaf(rng, {c_in, 8});
                   Tensor w = leaf(rng, {c_out, mode == ConvMode::depthwise ? 1 : c_in, k});
                   return GradCase{{x, w}, [x, w, mode, stride] { return conv1d(x, w, mode, stride); }};
                 }});
  };
  conv("conv1d_full", ConvMode::full, 2, 3, 3, 1);
  conv("conv1d_pointwise", ConvMode::pointwise, 2, 3, 1, 1);
  conv("conv1d_depthwise", ConvMode::depthwise, 3, 3, 3, 1);
  conv("conv1d_stride2", ConvMode::full, 2, 3, 4, 2);
  unary("slice_cols", [](const Tensor& x) { return slice_cols(x, 1, 3); });
  binary("concat_cols", [](const Tensor& a, const Tensor& b) { return concat_cols({a, b}); });
  binary("concat_rows", [](const Tensor& a, const Tensor& b) { return concat_rows({a, b}); });
  v.push_back({"avg_pool_rows", [](Rng& rng) {
                 Tensor x = leaf(rng, {7, 3});
                 return GradCase{{x}, [x] { return avg_pool_rows(x, 2); }};
               }});
  v.push_back({"upsample_rows", [](Rng& rng) {
                 Tensor x = leaf(rng, {4, 3});
                 return GradCase{{x}, [x] { return upsample_rows(x, 2, 7); }};
               }});
  v.push_back({"replace_rows", [](Rng& rng) {
                 Tensor x = leaf(rng, {5, 3});
                 Tensor row = leaf(rng, {3});
                 const std::vector<bool> rep = {false, true, true, false, true};
                 return GradCase{{x, row}, [x, row, rep] { return replace_rows(x, rep, row); }};
               }});
  unary("mean_rows", [](const Tensor& x) { return mean_rows(x); });

  const SparsePattern pattern{PatternKind::strided, 2};
  v.push_back({"sparse_scores", [pattern](Rng& rng) {
                 Tensor q = leaf(rng, {6, 3});
                 Tensor k = leaf(rng, {6, 3});
                 const auto csr = pattern.csr(6);
                 return GradCase{{q, k}, [q, k, csr] { return sparse_scores(q, k, csr, 0.6); }};
               }});
  v.push_back({"segment_softmax", [pattern](Rng& rng) {
                 const auto csr = pattern.csr(6);
                 Tensor s = leaf(rng, {csr.nonzeros()});
                 return GradCase{{s}, [s, csr] { return segment_softmax(s, csr); }};
               }});
  v.push_back({"sparse_weighted_sum", [pattern](Rng& rng) {
                 const auto csr = pattern.csr(6);
                 Tensor p = leaf(rng, {csr.nonzeros()});
                 Tensor val = leaf(rng, {6, 3});
                 return GradCase{{p, val}, [p, val, csr] { return sparse_weighted_sum(p, val, csr); }};
               }});
  v.push_back({"dense_attention", [pattern](Rng& rng) {
                 Tensor q = leaf(rng, {6, 3});
                 Tensor k = leaf(rng, {6, 3});
                 Tensor val = leaf(rng, {6, 3});
                 const auto mask = pattern.mask(6);
                 return GradCase{{q, k, val}, [q, k, val, mask] { return dense_attention(q, k, val, 0.6, mask); }};
               }});
  v.push_back({"feature_extractor", [](Rng& rng) {
                 auto fx = std::make_shared<FeatureExtractor>(3, 4, rng);
                 ParameterList params;
                 fx->collect("fx", params);
                 for (auto& p : params)
                   for (auto& x : p.tensor.mutable_data())
                     if (p.name.ends_with("bias")) x = rng.normal(0.0, 0.1);
                 Tensor wave = leaf(rng, {1, 64});
                 return params_case(wave, params, [fx, wave] { return fx->forward(wave); });
               }});
  v.push_back({"binarize_weights_alpha", [](Rng& rng) {
                 Tensor w = leaf(rng, {4, 3}, false);
                 BinarizerState st = BinarizerState::for_weights(w, 1);
                 return GradCase{{st.alpha}, [w, st] { return binarize_weights(w, st, 1); }};
               }});
  auto activation_case = [&v](std::string name, SetKind set) {
    v.push_back({std::move(name), [set](Rng& rng) {
                   // Inputs outside the active range, where the elastic scale
                   // gradient is the exact derivative.
                   BinarizerState st = BinarizerState::for_activations(set);
                   st.alpha.mutable_data()[0] = rng.uniform(0.5, 1.5);
                   st.beta.mutable_data()[0] = rng.uniform(-0.2, 0.2);
                   const double a = st.alpha.item(), b = st.beta.item();
                   std::vector<double> xs(12);
                   for (std::size_t i = 0; i < xs.size(); ++i) {
                     const double u = rng.uniform(1.2, 3.0);
                     const bool below = set == SetKind::unsigned_set ? i % 2 == 0 : rng.bernoulli(0.5);
                     xs[i] = b + a * (below ? (set == SetKind::unsigned_set ? -u + 1.0 : -u) : u);
                   }
                   Tensor x({3, 4}, xs);
                   return GradCase{{st.alpha, st.beta}, [x, st] { return binarize_activations(x, st); }};
                 }});
  };
  activation_case("binarize_activations_signed", SetKind::signed_set);
  activation_case("binarize_activations_unsigned", SetKind::unsigned_set);
  return v;
}

std::vector<NamedGradCase> make_block_cases() {
  std::vector<NamedGradCase> v;
  v.push_back({"block_vanilla", [](Rng& rng) {
                 EncoderConfig cfg;
                 cfg.kind = EncoderKind::vanilla;
                 cfg.dim = 8;
                 cfg.heads = 2;
                 return block_case(cfg, 5, rng);
               }});
  v.push_back({"block_sparseformer", [](Rng& rng) {
                 EncoderConfig cfg;
                 cfg.kind = EncoderKind::sparseformer;
                 cfg.dim = 8;
                 cfg.heads = 2;
                 cfg.pattern = SparsePattern{PatternKind::strided, 2};
                 return block_case(cfg, 7, rng);
               }});
  v.push_back({"block_conformer", [](Rng& rng) {
                 EncoderConfig cfg;
                 cfg.kind = EncoderKind::conformer;
                 cfg.dim = 8;
                 cfg.heads = 2;
                 cfg.conv_kernel = 3;
                 return block_case(cfg, 6, rng);
               }});
  v.push_back({"block_squeezeformer", [](Rng& rng) {
                 EncoderConfig cfg;
                 cfg.kind = EncoderKind::squeezeformer;
                 cfg.dim = 8;
                 cfg.heads = 2;
                 cfg.conv_kernel = 3;
                 cfg.layers = 2;
                 cfg.subsample_factor = 2;
                 cfg.input_dim = 4;
                 auto enc = std::make_shared<Encoder>(cfg, PrecisionSpec::fp32(), rng.engine()());
                 Tensor x = leaf(rng, {7, 4});
                 return params_case(x, enc->parameters(), [enc, x] { return enc->encode(x); });
               }});
  return v;
}

}  // namespace

GradcheckResult check_gradients(const std::string& name, const GradCaseFactory& factory,
                                const GradcheckOptions& options) {
  Rng rng(options.seed ^ fnv1a(name));
  GradcheckResult result;
  result.name = name;
  const bool corrupt = options.corrupt == name;
  for (std::size_t point = 0; point < options.points; ++point) {
    GradCase c = factory(rng);
    for (auto& t : c.inputs) t.zero_grad();
    const Tensor out = c.forward();
    const std::vector<double> r = rng.normal_vector(out.numel(), 1.0);
    sum(mul(out, Tensor(out.shape(), r))).backward();

    std::vector<std::pair<double, double>> per_tensor;  // (max diff, max |numeric|)
    double case_scale = 0.0;
    for (std::size_t ti = 0; ti < c.inputs.size(); ++ti) {
      Tensor& t = c.inputs[ti];
      if (!t.requires_grad()) continue;
      std::vector<double> analytic(t.numel(), 0.0);
      if (t.has_grad()) {
        const auto g = t.grad();
        std::copy(g.begin(), g.end(), analytic.begin());
      }
      if (corrupt && ti == 0) {
        for (auto& a : analytic) a = 1.1 * a + 1e-3;
      }
      std::vector<std::size_t> coords(t.numel());
      std::iota(coords.begin(), coords.end(), 0);
      if (coords.size() > options.max_coords) {
        std::shuffle(coords.begin(), coords.end(), rng.engine());
        coords.resize(options.max_coords);
      }
      double max_diff = 0.0, max_numeric = 0.0;
      for (std::size_t idx : coords) {
        auto data = t.mutable_data();
        const double saved = data[idx];
        double f_plus, f_minus;
        {
          NoGradGuard no_grad;
          data[idx] = saved + options.step;
          f_plus = objective(c.forward(), r);
          data[idx] = saved - options.step;
          f_minus = objective(c.forward(), r);
        }
        data[idx] = saved;
        const double numeric = (f_plus - f_minus) / (2.0 * options.step);
        max_diff = std::max(max_diff, std::abs(numeric - analytic[idx]));
        max_numeric = std::max(max_numeric, std::abs(numeric));
        ++result.coords_checked;
      }
      per_tensor.emplace_back(max_diff, max_numeric);
      case_scale = std::max(case_scale, max_numeric);
    }
    for (const auto& [diff, numeric] : per_tensor) {
      const double denom = std::max({numeric, kCaseScaleFloor * case_scale, kDenominatorFloor});
      result.max_rel_error = std::max(result.max_rel_error, diff / denom);
    }
    ++result.points;
  }
  result.passed = result.max_rel_error < options.tolerance;
  return result;
}

const std::vector<NamedGradCase>& op_grad_cases() {
  static const std::vector<NamedGradCase> cases = make_op_cases();
  return cases;
}

const std::vector<NamedGradCase>& block_grad_cases() {
  static const std::vector<NamedGradCase> cases = make_block_cases();
  return cases;
}

std::vector<GradcheckResult> run_gradcheck(const std::vector<NamedGradCase>& cases, const GradcheckOptions& options) {
  std::vector<GradcheckResult> out;
  out.reserve(cases.size());
  for (const auto& c : cases) out.push_back(check_gradients(c.name, c.factory, options));
  return out;
}

const NamedGradCase& find_grad_case(const std::string& name) {
  for (const auto* list : {&op_grad_cases(), &block_grad_cases()})
    for (const auto& c : *list)
      if (c.name == name) return c;
  throw ConfigError("gradcheck: unknown case \"" + name + "\"");
}

}  // namespace binaformer
