#include <doctest.h>

#include <cmath>

#include "binaformer/binarize.hpp"
#include "binaformer/encoders.hpp"
#include "binaformer/errors.hpp"
#include "binaformer/optim.hpp"
#include "helpers.hpp"

using namespace binaformer;
using binaformer::test::random_tensor;

namespace {

BinarizerState scalar_state(double alpha, double beta, SetKind set) {
  BinarizerState s = BinarizerState::for_activations(set);
  s.alpha = Tensor({1}, {alpha}, true);
  s.beta = Tensor({1}, {beta}, true);
  return s;
}

LayerQuantizers conv_quantizers(const Tensor& w) {
  LayerQuantizers q;
  q.weight = BinarizerState::for_weights(w, 0);
  q.input = BinarizerState::for_activations(SetKind::signed_set);
  return q;
}

bool on_lattice(double v, double unit) {
  const double k = v / unit;
  return std::abs(k - std::round(k)) < 1e-9;
}

}  // namespace

TEST_CASE("weight binarizer signs around the mean") {
  const Tensor w({4}, {-2, -1, 1, 2}, true);
  auto state = BinarizerState::for_weights(w, 0, Granularity::per_tensor);
  state.alpha = Tensor({1}, {1.0}, true);
  const auto b = binarize_weights(w, state, 0);
  CHECK(test::to_vector(b.data()) == std::vector<double>{-1, -1, 1, 1});

  sum(b).backward();
  CHECK(state.alpha.grad()[0] == 0.0);
}

TEST_CASE("initial weight scale minimizes the sign-code error") {
  const Tensor w({4}, {-2, -1, 1, 2});
  const auto state = BinarizerState::for_weights(w, 0, Granularity::per_tensor);
  CHECK(state.alpha.at(0) == doctest::Approx(1.5));

  double best_alpha = 0.0, best_err = 1e300;
  for (int i = 1; i <= 4000; ++i) {
    const double a = i * 1e-3;
    double err = 0.0;
    for (double v : w.data()) err += (v - a * (v >= 0 ? 1 : -1)) * (v - a * (v >= 0 ? 1 : -1));
    if (err < best_err) best_err = err, best_alpha = a;
  }
  CHECK(best_alpha == doctest::Approx(1.5).epsilon(1e-3));
}

TEST_CASE("per-channel weight scales") {
  const Tensor w({2, 3}, {1, 2, 3, -4, 0, 4});
  const auto s = BinarizerState::for_weights(w, 1);
  REQUIRE(s.alpha.numel() == 3);
  const auto r = BinarizerState::for_weights(w, 0);
  REQUIRE(r.alpha.numel() == 2);
  CHECK(r.alpha.at(0) == doctest::Approx(2.0 / 3.0));
  CHECK(r.alpha.at(1) == doctest::Approx(8.0 / 3.0));
}

TEST_CASE("activation binarizer examples") {
  const auto u = binarize_activations(Tensor({3}, {-0.3, 0.2, 0.9}), scalar_state(1.0, 0.0, SetKind::unsigned_set));
  CHECK(test::to_vector(u.data()) == std::vector<double>{0, 0, 1});
  const auto s = binarize_activations(Tensor({2}, {-5, 0.1}), scalar_state(2.0, 0.0, SetKind::signed_set));
  CHECK(test::to_vector(s.data()) == std::vector<double>{-2, 2});
  const auto z = binarize_activations(Tensor({1}, {0.0}), scalar_state(1.0, 0.0, SetKind::signed_set));
  CHECK(z.at(0) == 1.0);
}

TEST_CASE("activation scale gradient matches finite differences off the pass-through range") {
  for (auto set : {SetKind::unsigned_set, SetKind::signed_set}) {
    const Tensor a({4}, {-1.7, 1.8, 2.6, -3.1});
    const Tensor r({4}, {0.3, -1.1, 0.7, 2.0});
    auto loss_at = [&](double alpha) {
      return sum(mul(binarize_activations(a, scalar_state(alpha, 0.1, set)), r)).item();
    };
    auto state = scalar_state(1.2, 0.1, set);
    sum(mul(binarize_activations(a, state), r)).backward();
    const double h = 1e-5;
    const double numeric = (loss_at(1.2 + h) - loss_at(1.2 - h)) / (2 * h);
    CHECK(std::abs(state.alpha.grad()[0] - numeric) <= 1e-3 * std::max(1.0, std::abs(numeric)));
  }
}

TEST_CASE("gradient is blocked outside the pass-through range") {
  const Tensor a({3}, {0.2, 3.0, -0.4}, true);
  const auto state = scalar_state(1.0, 0.0, SetKind::signed_set);
  sum(binarize_activations(a, state)).backward();
  const auto before = test::to_vector(a.grad());
  CHECK(before[1] == 0.0);

  const Tensor moved({3}, {0.2, 3.5, -0.4}, true);
  sum(binarize_activations(moved, scalar_state(1.0, 0.0, SetKind::signed_set))).backward();
  CHECK(test::to_vector(moved.grad()) == before);
}

TEST_CASE("binarized tensors take at most two values") {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const auto w = random_tensor({1 + rng.index(8), 1 + rng.index(8)}, rng, rng.uniform(0.1, 3.0));
    const auto ws = BinarizerState::for_weights(w, 0, Granularity::per_tensor);
    const auto bw = test::distinct_values(binarize_weights(w, ws, 0).data());
    REQUIRE(bw.size() <= 2);
    const double alpha = ws.alpha.at(0);
    for (double v : bw) CHECK(std::abs(std::abs(v) - alpha) < 1e-12);

    const double aa = rng.uniform(0.1, 2.0);
    const auto ba = test::distinct_values(
        binarize_activations(w, scalar_state(aa, rng.uniform(-0.5, 0.5), SetKind::unsigned_set)).data());
    REQUIRE(ba.size() <= 2);
    for (double v : ba) CHECK((std::abs(v) < 1e-12 || std::abs(v - aa) < 1e-12));
  }
}

TEST_CASE("alpha must stay positive") {
  auto s = scalar_state(0.0, 0.0, SetKind::signed_set);
  CHECK_THROWS_AS(s.validate(), InvalidStateError);
  s.clamp();
  CHECK(s.alpha.at(0) == kMinPositive);
  CHECK_NOTHROW(s.validate());
}

TEST_CASE("optimizer clamps positive parameters") {
  Tensor alpha({1}, {0.01}, true);
  ParameterList params{{"alpha", alpha, true, true}};
  OptimizerSettings settings;
  settings.kind = OptimizerKind::sgd;
  settings.lr = 1.0;
  settings.warmup_fraction = 0.0;
  Optimizer opt(params, settings);
  alpha.mutable_grad()[0] = 5.0;
  opt.step();
  CHECK(alpha.at(0) == kMinPositive);
}

TEST_CASE("precision labels") {
  const auto fp = PrecisionSpec::parse("FP32");
  CHECK(fp == PrecisionSpec::fp32());
  CHECK_FALSE(fp.any_quantized());
  const auto bq = PrecisionSpec::parse("FP32-W1A1");
  CHECK(bq == PrecisionSpec::w1a1());
  CHECK(bq.weight_bits_for(ModuleClass::linear) == 1);
  CHECK(bq.activation_bits_for(ModuleClass::attention_prob) == 1);
  CHECK(bq.label() == "FP32-W1A1");
  CHECK_THROWS_AS(PrecisionSpec::parse("W2A2"), ConfigError);
}

TEST_CASE("full precision layers are bitwise plain ops") {
  Rng rng(4);
  const auto x = random_tensor({5, 6}, rng);
  Linear lin(6, 3, rng);
  lin.bias = random_tensor({3}, rng);
  const auto a = lin.forward(x, PrecisionSpec::fp32());
  const auto b = add_bias(matmul(x, lin.weight), lin.bias);
  CHECK(test::bitwise_equal(a.data(), b.data()));

  const auto xc = random_tensor({3, 10}, rng);
  const auto wc = random_tensor({3, 1, 5}, rng);
  const auto c = binarized_conv1d(xc, wc, PrecisionSpec::fp32(), conv_quantizers(wc), ConvMode::depthwise);
  CHECK(test::bitwise_equal(c.data(), conv1d(xc, wc, ConvMode::depthwise).data()));
}

TEST_CASE("W1A1 linear on a sign pattern") {
  const Tensor x({1, 2}, {1, -1});
  const Tensor w({2, 2}, {1, -1, -1, 1});
  LayerQuantizers q;
  q.weight = BinarizerState::for_weights(w, 1);
  q.weight.alpha = Tensor({2}, {1.0, 1.0}, true);
  q.input = BinarizerState::for_activations(SetKind::signed_set);
  const auto y = binarized_linear(x, w, Tensor::zeros({2}), PrecisionSpec::w1a1(), q);
  CHECK(test::to_vector(y.data()) == std::vector<double>{2, -2});
}

TEST_CASE("W1A1 linear outputs lie on the scale lattice") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Linear lin(8, 8, rng);
    lin.bias = random_tensor({8}, rng);
    lin.quant.input.alpha = Tensor({1}, {rng.uniform(0.2, 2.0)}, true);
    const auto x = random_tensor({4, 8}, rng);
    const auto y = lin.forward(x, PrecisionSpec::w1a1());
    const double aa = lin.quant.input.alpha.at(0);
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 8; ++c)
        CHECK(on_lattice(y.at(r, c) - lin.bias.at(c), aa * lin.quant.weight.alpha.at(c)));
  }
}

TEST_CASE("W1A1 depthwise conv outputs lie on the scale lattice") {
  Rng rng(12);
  const auto x = random_tensor({4, 11}, rng);
  const auto w = random_tensor({4, 1, 5}, rng);
  const auto q = conv_quantizers(w);
  const auto y = binarized_conv1d(x, w, PrecisionSpec::w1a1(), q, ConvMode::depthwise);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t t = 0; t < 11; ++t) CHECK(on_lattice(y.at(c, t), q.weight.alpha.at(c)));
}

TEST_CASE("binarized pointwise conv equals binarized linear per time step") {
  Rng rng(13);
  const auto x = random_tensor({3, 7}, rng);
  const auto w = random_tensor({4, 3, 1}, rng);
  const auto conv = binarized_conv1d(x, w, PrecisionSpec::w1a1(), conv_quantizers(w), ConvMode::pointwise);

  const auto wl = transpose(reshape(w, {4, 3}));
  LayerQuantizers q;
  q.weight = BinarizerState::for_weights(wl, 1);
  q.input = BinarizerState::for_activations(SetKind::signed_set);
  const auto lin = binarized_linear(transpose(x), wl, Tensor::zeros({4}), PrecisionSpec::w1a1(), q);
  CHECK(test::max_abs_diff(transpose(lin).data(), conv.data()) < 1e-12);
}

TEST_CASE("binarized two-layer MLP fits a separable toy set") {
  // Eight inputs: with two, a mean-centred sign code per channel can only
  // express +-(x0 - x1).
  Rng rng(2024);
  const std::size_t n = 64, d = 8;
  const auto direction = rng.normal_vector(d, 1.0);
  std::vector<double> xs;
  std::vector<int> ys;
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      xs.push_back(rng.normal());
      dot += xs.back() * direction[j];
    }
    ys.push_back(dot > 0 ? 1 : 0);
  }
  const Tensor x({n, d}, xs);
  Linear l1(d, 16, rng), l2(16, 2, rng);
  ParameterList params;
  l1.collect("l1", params, true);
  l2.collect("l2", params, true);
  OptimizerSettings settings;
  settings.lr = 0.01;
  settings.total_steps = 500;
  Optimizer opt(params, settings);
  const auto spec = PrecisionSpec::w1a1();

  double accuracy = 0.0;
  for (std::size_t step = 0; step < 500 && accuracy < 0.9; ++step) {
    opt.zero_grad();
    const auto logits = l2.forward(l1.forward(x, spec, ModuleClass::linear, false), spec);
    cross_entropy(logits, ys).backward();
    opt.step();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) correct += (logits.at(i, 1) > logits.at(i, 0)) == (ys[i] == 1);
    accuracy = static_cast<double>(correct) / n;
  }
  CHECK(accuracy >= 0.9);
}
