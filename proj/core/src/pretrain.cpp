#include "binaformer/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <set>

#include "binaformer/errors.hpp"
#include "binaformer/ops.hpp"

namespace binaformer {

namespace {

constexpr std::uint64_t kInventorySeed = 0x70686f6e656d65ULL;
constexpr std::size_t kMaxBin = 7;

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) { return transpose(add_bias(transpose(x), bias)); }

double squared_distance(const double* a, const double* b, std::size_t dim) {
  double s = 0.0;
  for (std::size_t j = 0; j < dim; ++j) {
    const double d = a[j] - b[j];
    s += d * d;
  }
  return s;
}

std::size_t nearest(const std::vector<double>& centroids, std::size_t k, const double* p, std::size_t dim,
                    double* best_distance = nullptr) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    const double d = squared_distance(centroids.data() + c * dim, p, dim);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  if (best_distance) *best_distance = best_d;
  return best;
}

}  // namespace

std::vector<Phoneme> phoneme_inventory(std::size_t classes) {
  if (classes == 0) throw ConfigError("phonemes: need at least one class");
  if (classes > 80) throw ConfigError("phonemes: at most 80 classes are supported");
  Rng rng(kInventorySeed);
  std::vector<Phoneme> out;
  std::set<std::vector<std::size_t>> seen;
  while (out.size() < classes) {
    const std::size_t count = 2 + rng.index(3);
    std::vector<std::size_t> pool;
    for (std::size_t b = 1; b <= kMaxBin; ++b) pool.push_back(b);
    std::shuffle(pool.begin(), pool.end(), rng.engine());
    std::vector<std::size_t> bins(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(count));
    std::sort(bins.begin(), bins.end());
    if (!seen.insert(bins).second) continue;
    Phoneme p;
    p.bins = bins;
    double total = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
      p.amplitudes.push_back(rng.uniform(0.3, 1.0));
      total += p.amplitudes.back();
    }
    for (auto& a : p.amplitudes) a /= total;
    out.push_back(std::move(p));
  }
  return out;
}

Corpus synthesize_corpus(const CorpusSettings& s, std::uint64_t seed) {
  if (s.clip_samples < kMinWaveSamples || s.clip_samples % kFrameSamples != 0) {
    throw ConfigError("clip_samples: must be a multiple of 8 and at least 64");
  }
  if (s.min_segment_frames == 0 || s.min_segment_frames > s.max_segment_frames) {
    throw ConfigError("segment frames: need 0 < min <= max");
  }
  const auto inventory = phoneme_inventory(s.phonemes);
  Rng rng(seed);
  Corpus corpus;
  corpus.phonemes = s.phonemes;
  const std::size_t frames = s.clip_samples / kFrameSamples;
  for (std::size_t c = 0; c < s.clips; ++c) {
    Clip clip;
    clip.wave.assign(s.clip_samples, 0.0);
    clip.frame_labels.assign(frames, 0);
    std::size_t f = 0;
    while (f < frames) {
      const std::size_t len = s.min_segment_frames + rng.index(s.max_segment_frames - s.min_segment_frames + 1);
      const int label = static_cast<int>(rng.index(s.phonemes));
      const auto& ph = inventory[static_cast<std::size_t>(label)];
      std::vector<double> phase(ph.bins.size());
      for (auto& p : phase) p = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const std::size_t end = std::min(frames, f + len);
      for (std::size_t t = f * kFrameSamples; t < end * kFrameSamples; ++t) {
        double v = 0.0;
        for (std::size_t i = 0; i < ph.bins.size(); ++i) {
          v += ph.amplitudes[i] * std::sin(2.0 * std::numbers::pi * static_cast<double>(ph.bins[i] * t) /
                                               static_cast<double>(kSpectrumBins) +
                                           phase[i]);
        }
        clip.wave[t] = v;
      }
      for (std::size_t g = f; g < end; ++g) clip.frame_labels[g] = label;
      f = end;
    }
    for (auto& v : clip.wave) v += rng.normal(0.0, s.noise);
    std::vector<std::size_t> counts(s.phonemes, 0);
    for (int l : clip.frame_labels) ++counts[static_cast<std::size_t>(l)];
    clip.clip_label = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    corpus.clips.push_back(std::move(clip));
  }
  return corpus;
}

std::size_t frame_count(std::size_t samples) { return (samples + kFrameSamples - 1) / kFrameSamples; }

FeatureExtractor::FeatureExtractor(std::size_t hidden, std::size_t out_dim, Rng& rng) : out_dim_(out_dim) {
  if (hidden == 0 || out_dim == 0) throw ConfigError("extractor_channels: must be positive");
  auto init = [&rng](std::size_t c_out, std::size_t c_in) {
    const double stddev = 1.0 / std::sqrt(static_cast<double>(c_in * kKernel));
    return Tensor({c_out, c_in, kKernel}, rng.normal_vector(c_out * c_in * kKernel, stddev), true);
  };
  w1_ = init(hidden, 1);
  w2_ = init(hidden, hidden);
  w3_ = init(out_dim, hidden);
  b1_ = Tensor::zeros({hidden}, true);
  b2_ = Tensor::zeros({hidden}, true);
  b3_ = Tensor::zeros({out_dim}, true);
}

Tensor FeatureExtractor::forward(const std::vector<double>& wave) const {
  if (wave.size() < kMinWaveSamples) {
    throw SequenceTooShortError("feature_extract: " + std::to_string(wave.size()) + " samples, need at least " +
                                std::to_string(kMinWaveSamples));
  }
  return forward(Tensor({1, wave.size()}, wave));
}

Tensor FeatureExtractor::forward(const Tensor& wave_row) const {
  if (wave_row.rank() != 2 || wave_row.dim(0) != 1) {
    throw DimensionError("feature_extract: expected [1 x T], got " + shape_string(wave_row.shape()));
  }
  if (wave_row.dim(1) < kMinWaveSamples) {
    throw SequenceTooShortError("feature_extract: " + std::to_string(wave_row.dim(1)) +
                                " samples, need at least " + std::to_string(kMinWaveSamples));
  }
  Tensor h = gelu(add_channel_bias(conv1d(wave_row, w1_, ConvMode::full, 2), b1_));
  h = gelu(add_channel_bias(conv1d(h, w2_, ConvMode::full, 2), b2_));
  h = add_channel_bias(conv1d(h, w3_, ConvMode::full, 2), b3_);
  return transpose(h);
}

void FeatureExtractor::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".conv1.weight", w1_});
  out.push_back({prefix + ".conv1.bias", b1_});
  out.push_back({prefix + ".conv2.weight", w2_});
  out.push_back({prefix + ".conv2.bias", b2_});
  out.push_back({prefix + ".conv3.weight", w3_});
  out.push_back({prefix + ".conv3.bias", b3_});
}

void FeatureExtractor::zero_biases() {
  for (Tensor b : {b1_, b2_, b3_})
    for (auto& v : b.mutable_data()) v = 0.0;
}

std::vector<double> window_power_spectrum(const std::vector<double>& wave, std::size_t frame) {
  const std::size_t start = frame * kFrameSamples;
  std::vector<double> power(kSpectrumBins);
  for (std::size_t k = 0; k < kSpectrumBins; ++k) {
    std::complex<double> acc = 0.0;
    for (std::size_t m = 0; m < kSpectrumBins; ++m) {
      const std::size_t t = start + m;
      if (t >= wave.size()) break;
      const double angle = -2.0 * std::numbers::pi * static_cast<double>(k * m) / static_cast<double>(kSpectrumBins);
      acc += wave[t] * std::polar(1.0, angle);
    }
    power[k] = std::norm(acc);
  }
  return power;
}

std::vector<double> mfcc_like(const std::vector<double>& wave) {
  if (wave.size() < kMinWaveSamples) {
    throw SequenceTooShortError("mfcc_like: " + std::to_string(wave.size()) + " samples, need at least " +
                                std::to_string(kMinWaveSamples));
  }
  const std::size_t frames = frame_count(wave.size());
  std::vector<double> out;
  out.reserve(frames * kSpectrumBins);
  for (std::size_t t = 0; t < frames; ++t) {
    for (double p : window_power_spectrum(wave, t)) out.push_back(std::log(std::sqrt(p) + 1e-6));
  }
  return out;
}

namespace {

KMeansFit kmeans_single(const std::vector<double>& points, std::size_t dim, std::size_t k, std::size_t max_iter,
                        std::uint64_t seed) {
  const std::size_t n = points.size() / dim;
  const double* P = points.data();
  Rng rng(seed);

  KMeansFit fit;
  auto& model = fit.model;
  model.k = k;
  model.dim = dim;
  model.centroids.assign(k * dim, 0.0);

  // k-means++ seeding.
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t pick = rng.index(n);
  for (std::size_t c = 0; c < k; ++c) {
    std::copy(P + pick * dim, P + (pick + 1) * dim, model.centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(P + i * dim, model.centroids.data() + c * dim, dim));
      total += d2[i];
    }
    if (c + 1 == k) break;
    if (total > 0.0) {
      double r = rng.uniform(0.0, total);
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        if (r < d2[i]) {
          pick = i;
          break;
        }
        r -= d2[i];
      }
    } else {
      pick = rng.index(n);
    }
  }

  auto assignment = kmeans_assign(model, points);
  fit.objective_log.push_back(kmeans_objective(model, points));
  std::vector<double> sums(k * dim);
  std::vector<std::size_t> counts(k);
  for (std::size_t it = 0; it < max_iter; ++it) {
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(assignment[i]);
      for (std::size_t j = 0; j < dim; ++j) sums[c * dim + j] += P[i * dim + j];
      ++counts[c];
    }
    bool reseeded = false;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t j = 0; j < dim; ++j) {
        model.centroids[c * dim + j] = sums[c * dim + j] / static_cast<double>(counts[c]);
      }
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      // Empty cluster: move it onto the point farthest from its centroid.
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto a = static_cast<std::size_t>(assignment[i]);
        if (counts[a] <= 1) continue;
        const double d = squared_distance(P + i * dim, model.centroids.data() + a * dim, dim);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      if (far_d < 0.0) continue;
      --counts[static_cast<std::size_t>(assignment[far])];
      assignment[far] = static_cast<int>(c);
      counts[c] = 1;
      std::copy(P + far * dim, P + (far + 1) * dim, model.centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
      reseeded = true;
    }
    auto next = kmeans_assign(model, points);
    fit.objective_log.push_back(kmeans_objective(model, points));
    ++fit.iterations;
    const bool converged = !reseeded && next == assignment;
    assignment = std::move(next);
    if (converged) break;
  }
  return fit;
}

}  // namespace

KMeansFit kmeans_fit(const std::vector<double>& points, std::size_t dim, std::size_t k, std::size_t max_iter,
                     std::uint64_t seed, std::size_t restarts) {
  if (dim == 0 || points.size() % dim != 0) throw DimensionError("kmeans_fit: points do not divide into rows");
  if (k == 0) throw ConfigError("k: must be positive");
  if (restarts == 0) throw ConfigError("restarts: must be positive");
  const std::size_t n = points.size() / dim;
  if (n < k) {
    throw ConfigError("k: " + std::to_string(n) + " points cannot form " + std::to_string(k) + " clusters");
  }
  KMeansFit best;
  for (std::size_t r = 0; r < restarts; ++r) {
    auto fit = kmeans_single(points, dim, k, max_iter, seed + r * 0x9e3779b97f4a7c15ULL);
    if (r == 0 || fit.objective_log.back() < best.objective_log.back()) best = std::move(fit);
  }
  return best;
}

std::vector<int> kmeans_assign(const KMeansModel& model, const std::vector<double>& points) {
  if (model.dim == 0 || points.size() % model.dim != 0) {
    throw DimensionError("kmeans_assign: points of width " + std::to_string(model.dim) + " expected");
  }
  const std::size_t n = points.size() / model.dim;
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(nearest(model.centroids, model.k, points.data() + i * model.dim, model.dim));
  }
  return labels;
}

double kmeans_objective(const KMeansModel& model, const std::vector<double>& points) {
  const std::size_t n = points.size() / model.dim;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0.0;
    nearest(model.centroids, model.k, points.data() + i * model.dim, model.dim, &d);
    total += d;
  }
  return total;
}

MaskedFeatures apply_mask_at(const Tensor& features, std::size_t span, const std::vector<std::size_t>& starts,
                             const Tensor& embedding) {
  if (features.rank() != 2) throw DimensionError("apply_mask: features must be [n x d]");
  const std::size_t n = features.dim(0);
  std::vector<bool> mask(n, false);
  for (std::size_t s : starts)
    for (std::size_t t = s; t < std::min(n, s + span); ++t) mask[t] = true;
  if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; })) return {features, std::move(mask)};
  return {replace_rows(features, mask, embedding), std::move(mask)};
}

MaskedFeatures apply_mask(const Tensor& features, const MaskSpec& spec, const Tensor& embedding, Rng& rng) {
  if (spec.span == 0) throw ConfigError("mask_span: must be positive");
  if (spec.prob < 0.0 || spec.prob >= 1.0) throw ConfigError("mask_prob: must lie in [0, 1)");
  if (features.rank() != 2) throw DimensionError("apply_mask: features must be [n x d]");
  std::vector<std::size_t> starts;
  for (std::size_t t = 0; t < features.dim(0); ++t)
    if (rng.bernoulli(spec.prob)) starts.push_back(t);
  return apply_mask_at(features, spec.span, starts, embedding);
}

MaskedFeatures apply_mask(const Tensor& features, const MaskSpec& spec, const Tensor& embedding,
                          std::uint64_t seed) {
  Rng rng(seed);
  return apply_mask(features, spec, embedding, rng);
}

double expected_mask_fraction(const MaskSpec& spec) {
  return 1.0 - std::pow(1.0 - spec.prob, static_cast<double>(spec.span));
}

HubertModel::HubertModel(const RunConfig& config, std::size_t clusters, std::uint64_t seed)
    : config_(config), clusters_(clusters), encoder_(config.encoder, config.precision, seed + 1) {
  if (clusters == 0) throw ConfigError("clusters: must be positive");
  Rng rng(seed);
  extractor_ = FeatureExtractor(config.train.extractor_channels, config.encoder.input_dim, rng);
  feature_norm_ = LayerNorm(config.encoder.input_dim);
  mask_embedding_ = Tensor({config.encoder.input_dim}, rng.normal_vector(config.encoder.input_dim, 0.1), true);
  head_ = Linear(config.encoder.dim, clusters, rng, 0.01);
}

Tensor HubertModel::features(const std::vector<double>& wave) const {
  return feature_norm_.forward(extractor_.forward(wave));
}

Tensor HubertModel::encode(const Tensor& features, const ForwardContext& ctx) const {
  return encoder_.encode(features, ctx);
}

Tensor HubertModel::logits(const Tensor& features, const ForwardContext& ctx) const {
  return head_.forward(encode(features, ctx), PrecisionSpec::fp32());
}

ParameterList HubertModel::parameters() const {
  ParameterList out;
  extractor_.collect("extractor", out);
  feature_norm_.collect("feature_norm", out);
  out.push_back({"mask_embedding", mask_embedding_});
  for (auto& p : encoder_.parameters()) out.push_back(p);
  head_.collect("head", out);
  return out;
}

namespace {

Labeling fit_labeling(const std::vector<std::vector<double>>& per_clip, std::size_t dim, std::size_t k,
                      std::uint64_t seed, std::size_t max_iter) {
  std::vector<double> all;
  for (const auto& rows : per_clip) all.insert(all.end(), rows.begin(), rows.end());
  auto fit = kmeans_fit(all, dim, k, max_iter, seed);
  Labeling out;
  out.kmeans = std::move(fit.model);
  out.objective_log = std::move(fit.objective_log);
  for (const auto& rows : per_clip) out.labels.push_back(kmeans_assign(out.kmeans, rows));
  return out;
}

}  // namespace

Labeling first_phase_labels(const Corpus& corpus, std::size_t k, std::uint64_t seed, std::size_t max_iter) {
  if (corpus.clips.empty()) throw EmptyInputError("first_phase_labels: empty corpus");
  std::vector<std::vector<double>> rows;
  for (const auto& clip : corpus.clips) rows.push_back(mfcc_like(clip.wave));
  return fit_labeling(rows, kSpectrumBins, k, seed, max_iter);
}

Labeling second_phase_relabel(const HubertModel& model, const Corpus& corpus, std::size_t layer_index,
                              std::size_t k, std::uint64_t seed, std::size_t max_iter) {
  const std::size_t layers = model.encoder().config().layers;
  if (layer_index > layers) {
    throw ConfigError("layer_index: " + std::to_string(layer_index) + " exceeds encoder depth " +
                      std::to_string(layers));
  }
  if (corpus.clips.empty()) throw EmptyInputError("second_phase_relabel: empty corpus");
  NoGradGuard no_grad;
  std::vector<std::vector<double>> rows;
  for (const auto& clip : corpus.clips) {
    const auto states = model.encoder().hidden_states(model.features(clip.wave));
    const auto d = states[layer_index].data();
    rows.emplace_back(d.begin(), d.end());
  }
  return fit_labeling(rows, model.encoder().config().dim, k, seed, max_iter);
}

StepResult hubert_step(HubertModel& model, const std::vector<const Clip*>& batch,
                       const std::vector<const std::vector<int>*>& labels, Optimizer& optimizer, const MaskSpec& mask,
                       Rng& rng, double previous_loss) {
  if (batch.empty() || batch.size() != labels.size()) {
    throw DimensionError("hubert_step: batch of " + std::to_string(batch.size()) + " clips with " +
                         std::to_string(labels.size()) + " label rows");
  }
  std::vector<Tensor> features;
  std::vector<MaskedFeatures> masked;
  std::size_t masked_frames = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    features.push_back(model.features(batch[i]->wave));
    if (labels[i]->size() != features.back().dim(0)) {
      throw DimensionError("hubert_step: " + std::to_string(labels[i]->size()) + " labels for " +
                           std::to_string(features.back().dim(0)) + " frames");
    }
    masked.push_back(apply_mask(features.back(), mask, model.mask_embedding(), rng));
    masked_frames += static_cast<std::size_t>(std::count(masked.back().mask.begin(), masked.back().mask.end(), true));
  }
  if (masked_frames == 0) return {previous_loss, true, 0};

  optimizer.zero_grad();
  std::vector<Tensor> logits;
  std::vector<int> all_labels;
  std::vector<bool> selected;
  const ForwardContext ctx{true};
  for (std::size_t i = 0; i < batch.size(); ++i) {
    logits.push_back(model.logits(masked[i].features, ctx));
    all_labels.insert(all_labels.end(), labels[i]->begin(), labels[i]->end());
    selected.insert(selected.end(), masked[i].mask.begin(), masked[i].mask.end());
  }
  Tensor loss = cross_entropy(concat_rows(logits), all_labels, selected);
  loss.backward();
  optimizer.step();
  return {loss.item(), false, masked_frames};
}

CorpusSettings corpus_settings(const TrainSettings& settings) {
  CorpusSettings c;
  c.clips = settings.corpus_clips;
  c.clip_samples = settings.clip_samples;
  c.phonemes = settings.phonemes;
  return c;
}

OptimizerSettings optimizer_settings(const TrainSettings& settings, std::size_t steps) {
  OptimizerSettings o;
  o.kind = parse_optimizer_kind(settings.optimizer);
  o.lr = settings.lr;
  o.warmup_fraction = settings.warmup_fraction;
  o.total_steps = steps;
  return o;
}

TrainResult pretrain(HubertModel& model, const TrainSettings& settings, std::size_t steps, std::uint64_t seed,
                     const StepCallback& on_step) {
  const Corpus corpus = synthesize_corpus(corpus_settings(settings), seed);
  if (corpus.clips.empty()) throw ConfigError("corpus_clips: must be positive");
  TrainResult result;
  result.labeling = first_phase_labels(corpus, model.clusters(), seed);
  Optimizer optimizer(model.parameters(), optimizer_settings(settings, steps));
  const MaskSpec mask{settings.mask_span, settings.mask_prob};
  Rng rng(seed ^ 0x6d61736bULL);

  const std::size_t frames_per_clip = frame_count(settings.clip_samples);
  const std::size_t per_batch =
      std::clamp<std::size_t>(settings.frame_budget / frames_per_clip, 1, corpus.clips.size());
  std::size_t cursor = 0;
  double previous = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<const Clip*> batch;
    std::vector<const std::vector<int>*> labels;
    for (std::size_t b = 0; b < per_batch; ++b) {
      batch.push_back(&corpus.clips[cursor]);
      labels.push_back(&result.labeling.labels[cursor]);
      cursor = (cursor + 1) % corpus.clips.size();
    }
    const StepResult r = hubert_step(model, batch, labels, optimizer, mask, rng, previous);
    if (r.skipped) ++result.skipped_steps;
    previous = r.loss;
    result.losses.push_back(r.loss);
    if (on_step) on_step(s, r);
  }
  return result;
}

ProbeTask parse_probe_task(const std::string& name) {
  if (name == "frame_cls") return ProbeTask::frame_cls;
  if (name == "seq_cls") return ProbeTask::seq_cls;
  throw ConfigError("task: unknown probe task \"" + name + "\"");
}

namespace {

struct ProbeData {
  std::vector<double> x;  // rows x dim
  std::vector<int> y;
  std::size_t rows = 0;
};

ProbeData probe_data(const HubertModel& model, const Corpus& corpus, ProbeTask task) {
  NoGradGuard no_grad;
  ProbeData data;
  const std::size_t dim = model.encoder().config().dim;
  for (const auto& clip : corpus.clips) {
    const Tensor h = model.encode(model.features(clip.wave));
    const auto H = h.data();
    const std::size_t n = h.dim(0);
    if (task == ProbeTask::frame_cls) {
      data.x.insert(data.x.end(), H.begin(), H.end());
      data.y.insert(data.y.end(), clip.frame_labels.begin(), clip.frame_labels.end());
      data.rows += n;
    } else {
      for (std::size_t j = 0; j < dim; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < n; ++t) s += H[t * dim + j];
        data.x.push_back(s / static_cast<double>(n));
      }
      data.y.push_back(clip.clip_label);
      ++data.rows;
    }
  }
  return data;
}

}  // namespace

double probe_eval(const HubertModel& model, ProbeTask task, std::uint64_t seed, const ProbeSettings& settings) {
  const auto& train = model.config().train;
  CorpusSettings cs;
  cs.clip_samples = train.clip_samples;
  cs.phonemes = train.phonemes;
  cs.clips = settings.train_clips;
  const Corpus train_corpus = synthesize_corpus(cs, seed ^ 0x70726f62ULL);
  cs.clips = settings.test_clips;
  const Corpus test_corpus = synthesize_corpus(cs, seed ^ 0x74657374ULL);
  if (train_corpus.clips.empty() || test_corpus.clips.empty()) throw ConfigError("probe: need train and test clips");

  ProbeData tr = probe_data(model, train_corpus, task);
  ProbeData te = probe_data(model, test_corpus, task);
  std::size_t classes = train.phonemes;
  if (settings.labels == ProbeLabels::single) {
    classes = 1;
    std::fill(tr.y.begin(), tr.y.end(), 0);
    std::fill(te.y.begin(), te.y.end(), 0);
  } else if (settings.labels == ProbeLabels::random) {
    Rng rng(seed ^ 0x72616e64ULL);
    for (auto& y : tr.y) y = static_cast<int>(rng.index(classes));
    for (auto& y : te.y) y = static_cast<int>(rng.index(classes));
  }

  const std::size_t dim = model.encoder().config().dim;
  std::vector<double> mu(dim, 0.0), sd(dim, 0.0);
  for (std::size_t i = 0; i < tr.rows; ++i)
    for (std::size_t j = 0; j < dim; ++j) mu[j] += tr.x[i * dim + j];
  for (auto& m : mu) m /= static_cast<double>(tr.rows);
  for (std::size_t i = 0; i < tr.rows; ++i)
    for (std::size_t j = 0; j < dim; ++j) sd[j] += (tr.x[i * dim + j] - mu[j]) * (tr.x[i * dim + j] - mu[j]);
  for (auto& s : sd) s = std::max(std::sqrt(s / static_cast<double>(tr.rows)), 1e-8);
  auto standardize = [&](std::vector<double>& x) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - mu[i % dim]) / sd[i % dim];
  };
  standardize(tr.x);
  standardize(te.x);

  Tensor weight = Tensor::zeros({dim, classes}, true);
  Tensor bias = Tensor::zeros({classes}, true);
  OptimizerSettings os;
  os.lr = settings.lr;
  os.warmup_fraction = 0.0;
  os.total_steps = settings.epochs;
  Optimizer opt({{"probe.weight", weight}, {"probe.bias", bias}}, os);
  const Tensor x_train({tr.rows, dim}, tr.x);
  for (std::size_t e = 0; e < settings.epochs; ++e) {
    opt.zero_grad();
    cross_entropy(add_bias(matmul(x_train, weight), bias), tr.y).backward();
    opt.step();
  }

  NoGradGuard no_grad;
  const Tensor logits = add_bias(matmul(Tensor({te.rows, dim}, te.x), weight), bias);
  const auto L = logits.data();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < te.rows; ++i) {
    const auto row = L.subspan(i * classes, classes);
    const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (pred == te.y[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(te.rows);
}

}  // namespace binaformer
