// Acceptance suite: one pass/fail line per criterion.
//
//   acceptance            run all criteria
//   acceptance --only 5   run one criterion

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "binaformer/attention.hpp"
#include "binaformer/binarize.hpp"
#include "binaformer/costmodel.hpp"
#include "binaformer/encoders.hpp"
#include "binaformer/gradcheck.hpp"
#include "binaformer/ops.hpp"
#include "binaformer/pretrain.hpp"

using namespace binaformer;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradTolerance = 1e-4;
constexpr std::size_t kGradPoints = 10;
constexpr double kGradBudgetSeconds = 120.0;
constexpr double kSparseTolerance = 1e-10;
constexpr double kCodomainTolerance = 1e-12;
constexpr int kCodomainTensors = 1000;
constexpr int kCostConfigs = 20;
constexpr double kFlopRatioLow = 0.10;
constexpr double kFlopRatioHigh = 0.40;
constexpr double kReductionTolerance = 0.05;
constexpr double kTimeRelTolerance = 1e-6;
constexpr std::size_t kTrainSteps = 200;
constexpr std::uint64_t kTrainSeed = 42;
constexpr double kMaxLossRatio = 0.70;
constexpr double kInitialLossBand = 0.20;
constexpr double kTrainBudgetSeconds = 300.0;
constexpr std::size_t kFinalLossWindow = 10;
constexpr std::uint64_t kProbeSeeds[] = {1, 2, 3};
constexpr double kProbeMargin = 0.05;
constexpr int kKMeansInstances = 100;
constexpr double kMeanTolerance = 1e-12;

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor random_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), rng.normal_vector(n, stddev));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  GradcheckOptions opts;
  opts.points = kGradPoints;
  opts.tolerance = kGradTolerance;
  auto cases = op_grad_cases();
  const auto& blocks = block_grad_cases();
  cases.insert(cases.end(), blocks.begin(), blocks.end());

  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradcheck(cases, opts);
  const double elapsed = seconds_since(t0);

  double worst = 0.0;
  std::string worst_name, failing;
  for (const auto& r : results) {
    if (r.max_rel_error >= worst) worst = r.max_rel_error, worst_name = r.name;
    if (!r.passed) failing += " " + r.name;
  }
  Outcome o;
  o.passed = failing.empty() && elapsed < kGradBudgetSeconds;
  o.detail = std::to_string(results.size()) + " cases, worst " + worst_name + " " + fmt("%.2e", worst) + ", " +
             fmt("%.1f", elapsed) + " s";
  if (!failing.empty()) o.detail += ", failing:" + failing;
  return o;
}

Outcome sparse_oracle() {
  Rng rng(7);
  double worst = 0.0;
  bool full_exact = true;
  for (auto kind : {PatternKind::strided, PatternKind::fixed}) {
    for (std::size_t n : {8, 16, 32}) {
      const SparsePattern p{kind, 4};
      const auto csr = p.csr(n);
      const double scale = 1.0 / std::sqrt(8.0);
      const auto q = random_tensor({n, 8}, rng), k = random_tensor({n, 8}, rng), v = random_tensor({n, 8}, rng);
      const auto sparse = sparse_weighted_sum(segment_softmax(sparse_scores(q, k, csr, scale), csr), v, csr);
      worst = std::max(worst, max_abs_diff(sparse, dense_attention(q, k, v, scale, p.mask(n))));

      const MultiHeadAttention mha(16, 4, rng);
      const auto x = random_tensor({n, 16}, rng);
      const auto spec = PrecisionSpec::fp32();
      const auto a = mha.forward(x, p, spec);
      // Per-head dense reference under the explicit mask.
      const auto qp = mha.query().forward(x, spec), kp = mha.key().forward(x, spec),
                 vp = mha.value().forward(x, spec);
      std::vector<Tensor> heads;
      for (std::size_t h = 0; h < 4; ++h) {
        const auto cut = [&](const Tensor& t) { return slice_cols(t, h * 4, (h + 1) * 4); };
        heads.push_back(dense_attention(cut(qp), cut(kp), cut(vp), 0.5, p.mask(n)));
      }
      worst = std::max(worst, max_abs_diff(a, mha.output().forward(concat_cols(heads), spec)));

      const SparsePattern full{PatternKind::full, 4};
      full_exact &= bitwise_equal(mha.forward(x, full, spec), mha.forward(x, std::nullopt, spec));
      full_exact &= bitwise_equal(dense_attention(q, k, v, scale, full.mask(n)), dense_attention(q, k, v, scale));
    }
  }
  return {worst < kSparseTolerance && full_exact,
          "max |sparse - masked dense| " + fmt("%.2e", worst) + ", full pattern " +
              (full_exact ? "bitwise equal" : "DIFFERS")};
}

Outcome binarization_codomain() {
  Rng rng(11);
  int violations = 0;
  for (int t = 0; t < kCodomainTensors; ++t) {
    const std::size_t rows = 1 + rng.index(12), cols = 1 + rng.index(12);
    const auto x = random_tensor({rows, cols}, rng, rng.uniform(0.05, 4.0));

    // Weights, per output channel or per tensor: each channel in {-a_c, +a_c}.
    const auto gran = t % 2 ? Granularity::per_tensor : Granularity::per_output_channel;
    const auto ws = BinarizerState::for_weights(x, 1, gran);
    const auto bw = binarize_weights(x, ws, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const double a = ws.alpha.at(gran == Granularity::per_tensor ? 0 : c);
        if (std::abs(std::abs(bw.at(r, c)) - a) > kCodomainTolerance) ++violations;
      }
    }
    if (gran == Granularity::per_tensor) {
      std::vector<double> vals(bw.data().begin(), bw.data().end());
      std::sort(vals.begin(), vals.end());
      vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
      if (vals.size() > 2) ++violations;
    }

    // Activations, both sets, with random learned scale and threshold.
    for (auto set : {SetKind::signed_set, SetKind::unsigned_set}) {
      auto as = BinarizerState::for_activations(set);
      as.alpha = Tensor({1}, {rng.uniform(0.05, 3.0)}, true);
      as.beta = Tensor({1}, {rng.uniform(-1.0, 1.0)}, true);
      const double a = as.alpha.at(0);
      const auto ba = binarize_activations(x, as);
      std::vector<double> vals(ba.data().begin(), ba.data().end());
      std::sort(vals.begin(), vals.end());
      vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
      if (vals.size() > 2) ++violations;
      for (double v : vals) {
        const bool ok = set == SetKind::signed_set ? std::abs(std::abs(v) - a) <= kCodomainTolerance
                                                   : (std::abs(v) <= kCodomainTolerance ||
                                                      std::abs(v - a) <= kCodomainTolerance);
        if (!ok) ++violations;
      }
    }
  }

  // 32/32 precision against the plain ops.
  bool identical = true;
  const auto fp = PrecisionSpec::fp32();
  for (int t = 0; t < 20; ++t) {
    const auto x = random_tensor({5, 6}, rng), w = random_tensor({6, 4}, rng), b = random_tensor({4}, rng);
    LayerQuantizers q;
    q.weight = BinarizerState::for_weights(w, 1);
    q.input = BinarizerState::for_activations(SetKind::signed_set);
    identical &= bitwise_equal(binarized_linear(x, w, b, fp, q), add_bias(matmul(x, w), b));

    const auto xc = random_tensor({4, 9}, rng);
    for (auto mode : {ConvMode::pointwise, ConvMode::full, ConvMode::depthwise}) {
      const Shape ws = mode == ConvMode::pointwise ? Shape{3, 4, 1}
                       : mode == ConvMode::full    ? Shape{3, 4, 5}
                                                   : Shape{4, 1, 5};
      const auto wc = random_tensor(ws, rng);
      LayerQuantizers qc;
      qc.weight = BinarizerState::for_weights(wc, 0);
      qc.input = BinarizerState::for_activations(SetKind::signed_set);
      identical &= bitwise_equal(binarized_conv1d(xc, wc, fp, qc, mode), conv1d(xc, wc, mode));
    }
  }
  return {violations == 0 && identical, std::to_string(kCodomainTensors) + " tensors, " +
                                            std::to_string(violations) + " codomain violations, 32/32 path " +
                                            (identical ? "bitwise identical" : "DIFFERS")};
}

Outcome costmodel_consistency() {
  Rng rng(19);
  int sum_mismatch = 0, not_reduced = 0, sparse_not_cheaper = 0;
  for (int t = 0; t < kCostConfigs; ++t) {
    EncoderConfig cfg;
    const EncoderKind kinds[] = {EncoderKind::vanilla, EncoderKind::conformer, EncoderKind::squeezeformer,
                                 EncoderKind::sparseformer};
    cfg.kind = kinds[t % 4];
    cfg.heads = 1 + rng.index(8);
    cfg.dim = cfg.heads * (8 + 8 * rng.index(12));
    cfg.layers = 1 + rng.index(12);
    cfg.conv_kernel = 3 + 2 * rng.index(8);
    cfg.input_dim = 16 + rng.index(512);
    const std::size_t block = 2 + rng.index(31);
    if (cfg.kind == EncoderKind::sparseformer) cfg.pattern = SparsePattern{PatternKind::strided, block};
    if (cfg.kind == EncoderKind::squeezeformer) cfg.subsample_factor = 1 + rng.index(2);
    const std::size_t n = 16 + rng.index(1500);

    CostReport reports[2];
    int idx = 0;
    for (const auto& spec : {PrecisionSpec::fp32(), PrecisionSpec::w1a1()}) {
      const auto r = profile(cfg, spec, n);
      std::uint64_t bits = 0, nonq = 0, bq = 0;
      for (const auto& l : r.per_layer) {
        bits += l.params * static_cast<std::uint64_t>(l.param_bits);
        nonq += l.macs * 32u * 32u;
        bq += l.macs * static_cast<std::uint64_t>(l.weight_bits) * static_cast<std::uint64_t>(l.act_bits);
      }
      if (bits != r.storage_bits || nonq != r.bop_nonq || bq != r.bop_bq ||
          r.storage_mb != static_cast<double>(bits) / 8e6 || r.bop_bq_g != static_cast<double>(bq) / 1e9) {
        ++sum_mismatch;
      }
      reports[idx++] = r;
    }
    if (!(reports[1].storage_bits < reports[0].storage_bits && reports[1].bop_bq < reports[0].bop_bq)) ++not_reduced;

    // Strided against dense attention at n >= 4l.
    EncoderConfig dense = cfg;
    dense.kind = EncoderKind::vanilla;
    dense.pattern.reset();
    dense.subsample_factor = 1;
    EncoderConfig sparse = dense;
    sparse.kind = EncoderKind::sparseformer;
    sparse.pattern = SparsePattern{PatternKind::strided, block};
    const std::size_t ns = std::max(n, 4 * block);
    auto attention = [&](const EncoderConfig& c) {
      std::uint64_t m = 0;
      for (const auto& l : enumerate_layers(c, PrecisionSpec::fp32(), ns))
        if (l.kind == "attention_score" || l.kind == "attention_prob") m += l.macs;
      return m;
    };
    if (!(attention(sparse) < attention(dense))) ++sparse_not_cheaper;
  }
  return {sum_mismatch == 0 && not_reduced == 0 && sparse_not_cheaper == 0,
          std::to_string(kCostConfigs) + " configs: " + std::to_string(sum_mismatch) + " sum mismatches, " +
              std::to_string(not_reduced) + " W1A1 without reduction, " + std::to_string(sparse_not_cheaper) +
              " strided not cheaper"};
}

Outcome table_ordering() {
  std::map<std::string, CostReport> r;
  for (const auto& rc : reference_suite()) r[rc.name] = profile(rc.encoder, PrecisionSpec::fp32(), 1000);
  const double v = r["vanilla"].storage_mb, c = r["conformer_s"].storage_mb, sw = r["sparse_sw_s"].storage_mb,
               dn = r["sparse_dn_s"].storage_mb;
  const bool storage_ok = v > c && c > sw && sw > dn;
  const double ratio = r["conformer_s"].flop_g / r["vanilla"].flop_g;
  const bool flop_ok = r["conformer_s"].flop_g < r["vanilla"].flop_g && ratio >= kFlopRatioLow &&
                       ratio <= kFlopRatioHigh;
  std::string detail = "storage MB vanilla " + fmt("%.2f", v) + " > conformer_s " + fmt("%.2f", c) +
                       " > sparse_sw_s " + fmt("%.2f", sw) + " > sparse_dn_s " + fmt("%.2f", dn) + " " +
                       (storage_ok ? "holds" : "VIOLATED") + "; FLOP conformer_s/vanilla " + fmt("%.3f", ratio);
  return {storage_ok && flop_ok, detail};
}

Outcome reduction_arithmetic() {
  const double storage = reduction_percent(184.42, 12.10);
  const double bop = reduction_percent(15.94, 10.70);
  return {std::abs(storage - 93.4) <= kReductionTolerance && std::abs(bop - 32.9) <= kReductionTolerance,
          "(184.42, 12.10) -> " + fmt("%.3f", storage) + "%, (15.94, 10.70) -> " + fmt("%.3f", bop) + "%"};
}

Outcome device_time() {
  const double peak = fit_device_peak(kReferenceVanillaBop, kReferenceVanillaSeconds);
  const double t = estimate_seconds(1228.64e9, peak);
  const double rel = std::abs(t - 38.46e-4) / 38.46e-4;
  return {rel <= kTimeRelTolerance && std::abs(peak / 3.195e14 - 1.0) < 1e-3,
          "peak " + fmt("%.4e", peak) + " ops/s, est_time " + fmt("%.6e", t) + " s, rel err " + fmt("%.1e", rel)};
}

RunConfig tiny_config(const PrecisionSpec& spec) {
  auto rc = load_run_config(std::string(BINAFORMER_CONFIG_DIR) + "/tiny_vanilla.json");
  rc.precision = spec;
  return rc;
}

struct TrainSummary {
  double initial = 0.0;
  double final = 0.0;
  double seconds = 0.0;
  std::size_t skipped = 0;
};

TrainSummary train(HubertModel& model, const RunConfig& rc, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = pretrain(model, rc.train, kTrainSteps, seed);
  TrainSummary s;
  s.seconds = seconds_since(t0);
  s.skipped = result.skipped_steps;
  const auto first = std::find_if(result.losses.begin(), result.losses.end(), [](double l) { return !std::isnan(l); });
  s.initial = first == result.losses.end() ? std::nan("") : *first;
  const auto tail = result.losses.end() - static_cast<std::ptrdiff_t>(kFinalLossWindow);
  s.final = std::accumulate(tail, result.losses.end(), 0.0) / static_cast<double>(kFinalLossWindow);
  return s;
}

Outcome toy_pretraining() {
  const auto rc = tiny_config(PrecisionSpec::fp32());
  HubertModel model(rc, rc.train.clusters, kTrainSeed);
  const auto s = train(model, rc, kTrainSeed);
  const double ln_k = std::log(static_cast<double>(rc.train.clusters));
  const bool initial_ok = std::abs(s.initial - ln_k) <= kInitialLossBand * ln_k;
  const double ratio = s.final / s.initial;
  return {initial_ok && ratio <= kMaxLossRatio && s.seconds < kTrainBudgetSeconds,
          "initial " + fmt("%.4f", s.initial) + " (ln k " + fmt("%.4f", ln_k) + "), final " + fmt("%.4f", s.final) +
              ", ratio " + fmt("%.3f", ratio) + ", " + fmt("%.1f", s.seconds) + " s"};
}

Outcome probe_ordering() {
  const auto rc = tiny_config(PrecisionSpec::fp32());
  std::vector<double> margins;
  std::string per_seed;
  for (std::uint64_t seed : kProbeSeeds) {
    const HubertModel fresh(rc, rc.train.clusters, seed);
    HubertModel model(rc, rc.train.clusters, seed);
    train(model, rc, seed);
    const double pre = probe_eval(model, ProbeTask::frame_cls, seed);
    const double rnd = probe_eval(fresh, ProbeTask::frame_cls, seed);
    margins.push_back(pre - rnd);
    per_seed += " seed " + std::to_string(seed) + ": " + fmt("%.4f", pre) + " vs " + fmt("%.4f", rnd) + ";";
  }
  std::sort(margins.begin(), margins.end());
  const double median = margins[margins.size() / 2];
  return {median >= kProbeMargin, "median margin " + fmt("%+.4f", median) + " (" + per_seed.substr(1) + ")"};
}

Outcome kmeans_properties() {
  Rng rng(23);
  int increases = 0;
  double mean_err = 0.0;
  for (int t = 0; t < kKMeansInstances; ++t) {
    const std::size_t dim = 1 + rng.index(6), n = 5 + rng.index(80), k = 1 + rng.index(std::min<std::size_t>(n, 8));
    const auto pts = rng.normal_vector(n * dim, rng.uniform(0.5, 5.0));
    const auto fit = kmeans_fit(pts, dim, k, 100, static_cast<std::uint64_t>(t));
    for (std::size_t i = 1; i < fit.objective_log.size(); ++i)
      if (fit.objective_log[i] > fit.objective_log[i - 1]) ++increases;

    const auto one = kmeans_fit(pts, dim, 1, 100, static_cast<std::uint64_t>(t));
    for (std::size_t d = 0; d < dim; ++d) {
      long double s = 0.0L;
      for (std::size_t i = 0; i < n; ++i) s += pts[i * dim + d];
      const double exact = static_cast<double>(s / static_cast<long double>(n));
      mean_err = std::max(mean_err, std::abs(one.model.centroids[d] - exact) / std::max(1.0, std::abs(exact)));
    }
  }
  return {increases == 0 && mean_err <= kMeanTolerance,
          std::to_string(kKMeansInstances) + " instances, " + std::to_string(increases) +
              " objective increases, k=1 max mean error " + fmt("%.1e", mean_err)};
}

Outcome w1a1_direction() {
  const auto fp = tiny_config(PrecisionSpec::fp32());
  const auto bq = tiny_config(PrecisionSpec::w1a1());
  HubertModel fp_model(fp, fp.train.clusters, kTrainSeed);
  HubertModel bq_model(bq, bq.train.clusters, kTrainSeed);
  const auto a = train(fp_model, fp, kTrainSeed);
  const auto b = train(bq_model, bq, kTrainSeed);
  return {b.final >= a.final,
          "final loss FP32 " + fmt("%.4f", a.final) + ", FP32-W1A1 " + fmt("%.4f", b.final)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all = {
      {1, "gradient suite", gradient_suite},
      {2, "sparse attention oracle", sparse_oracle},
      {3, "binarization codomain", binarization_codomain},
      {4, "cost model consistency", costmodel_consistency},
      {5, "reference ordering", table_ordering},
      {6, "reduction arithmetic", reduction_arithmetic},
      {7, "device time", device_time},
      {8, "toy pretraining", toy_pretraining},
      {9, "probe ordering", probe_ordering},
      {10, "k-means", kmeans_properties},
      {11, "W1A1 degradation direction", w1a1_direction},
  };
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"binaformer acceptance suite"};
  int only = 0;
  app.add_option("--only", only, "Run a single criterion (1-11)")->check(CLI::Range(1, 11));
  CLI11_PARSE(app, argc, argv);

  bool all_passed = true;
  for (const auto& c : criteria()) {
    if (only != 0 && c.id != only) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::cout << (o.passed ? "PASS" : "FAIL") << "  criterion " << c.id << " (" << c.name << "): " << o.detail
              << std::endl;
    all_passed &= o.passed;
  }
  return all_passed ? 0 : 1;
}
