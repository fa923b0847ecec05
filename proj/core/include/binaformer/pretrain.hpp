#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "binaformer/config.hpp"
#include "binaformer/encoders.hpp"
#include "binaformer/optim.hpp"
#include "binaformer/parameters.hpp"
#include "binaformer/rng.hpp"
#include "binaformer/tensor.hpp"

namespace binaformer {

// ---------------------------------------------------------------------------
// Synthetic corpus

inline constexpr std::size_t kFrameSamples = 8;
inline constexpr std::size_t kMinWaveSamples = 64;
inline constexpr std::size_t kSpectrumBins = 16;

/// A phoneme is a fixed mixture of 2-4 sinusoids at DFT-bin frequencies.
struct Phoneme {
  std::vector<std::size_t> bins;    // cycles per kSpectrumBins samples
  std::vector<double> amplitudes;   // sum to 1
};

/// The phoneme inventory depends only on the class count, so corpora drawn
/// with different seeds share the same acoustic units.
std::vector<Phoneme> phoneme_inventory(std::size_t classes);

struct CorpusSettings {
  std::size_t clips = 64;
  std::size_t clip_samples = 512;
  std::size_t phonemes = 8;
  double noise = 0.05;
  std::size_t min_segment_frames = 6;
  std::size_t max_segment_frames = 16;
};

struct Clip {
  std::vector<double> wave;
  std::vector<int> frame_labels;  // phoneme of each kFrameSamples-sample frame
  int clip_label = 0;             // phoneme covering the most frames
};

struct Corpus {
  std::size_t phonemes = 0;
  std::vector<Clip> clips;
};

/// Piecewise-constant phoneme segments (whole frames) plus Gaussian noise.
Corpus synthesize_corpus(const CorpusSettings& settings, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Feature extraction and labeling features

std::size_t frame_count(std::size_t samples);

/// Three stride-2 convolutions with GELU between them, turning a waveform of
/// T samples into ceil(T / 8) frames of `out_dim` features.
class FeatureExtractor {
 public:
  static constexpr std::size_t kKernel = 9;

  FeatureExtractor() = default;
  FeatureExtractor(std::size_t hidden, std::size_t out_dim, Rng& rng);

  /// [frames x out_dim]. Throws SequenceTooShortError below kMinWaveSamples.
  Tensor forward(const std::vector<double>& wave) const;
  Tensor forward(const Tensor& wave_row) const;  // [1 x T]
  void collect(const std::string& prefix, ParameterList& out) const;
  void zero_biases();

  std::size_t out_dim() const { return out_dim_; }

 private:
  std::size_t out_dim_ = 0;
  Tensor w1_, w2_, w3_;
  Tensor b1_, b2_, b3_;
};

/// Squared magnitudes of the kSpectrumBins-point DFT of the window starting at
/// sample 8t (zero-padded past the end).
std::vector<double> window_power_spectrum(const std::vector<double>& wave, std::size_t frame);

/// log(|X| + 1e-6) per bin for every frame, [frames x kSpectrumBins] row-major.
std::vector<double> mfcc_like(const std::vector<double>& wave);

// ---------------------------------------------------------------------------
// k-means

struct KMeansModel {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> centroids;  // k x dim, row-major
};

struct KMeansFit {
  KMeansModel model;
  std::vector<double> objective_log;  // seeding objective, then one entry per Lloyd iteration
  std::size_t iterations = 0;
};

inline constexpr std::size_t kKMeansRestarts = 8;

/// Best of `restarts` k-means++ seeded Lloyd runs by final objective; the log
/// is that run's. `points` is row-major with `dim` columns.
KMeansFit kmeans_fit(const std::vector<double>& points, std::size_t dim, std::size_t k, std::size_t max_iter,
                     std::uint64_t seed, std::size_t restarts = kKMeansRestarts);
/// Nearest centroid under squared distance, lowest index on ties.
std::vector<int> kmeans_assign(const KMeansModel& model, const std::vector<double>& points);
double kmeans_objective(const KMeansModel& model, const std::vector<double>& points);

// ---------------------------------------------------------------------------
// Masking

struct MaskSpec {
  std::size_t span = 4;
  double prob = 0.08;
};

struct MaskedFeatures {
  Tensor features;
  std::vector<bool> mask;
};

/// Each frame starts a span with probability spec.prob; covered frames are
/// replaced by `embedding` ([d]).
MaskedFeatures apply_mask(const Tensor& features, const MaskSpec& spec, const Tensor& embedding, Rng& rng);
MaskedFeatures apply_mask(const Tensor& features, const MaskSpec& spec, const Tensor& embedding,
                          std::uint64_t seed);
/// Masks spans starting at the given frames.
MaskedFeatures apply_mask_at(const Tensor& features, std::size_t span, const std::vector<std::size_t>& starts,
                             const Tensor& embedding);
/// 1 - (1 - p)^span, the chance a frame away from the sequence start is covered.
double expected_mask_fraction(const MaskSpec& spec);

// ---------------------------------------------------------------------------
// Model

/// Feature extractor -> layer norm -> (mask) -> encoder -> linear head over k
/// clusters.
class HubertModel {
 public:
  HubertModel(const RunConfig& config, std::size_t clusters, std::uint64_t seed);

  Tensor features(const std::vector<double>& wave) const;
  /// Encoder output for already extracted (possibly masked) features.
  Tensor encode(const Tensor& features, const ForwardContext& ctx = {}) const;
  Tensor logits(const Tensor& features, const ForwardContext& ctx = {}) const;

  ParameterList parameters() const;

  const RunConfig& config() const { return config_; }
  std::size_t clusters() const { return clusters_; }
  const Encoder& encoder() const { return encoder_; }
  Encoder& encoder() { return encoder_; }
  const FeatureExtractor& extractor() const { return extractor_; }
  const Tensor& mask_embedding() const { return mask_embedding_; }

 private:
  RunConfig config_;
  std::size_t clusters_;
  FeatureExtractor extractor_;
  LayerNorm feature_norm_;
  Tensor mask_embedding_;
  Encoder encoder_;
  Linear head_;
};

// ---------------------------------------------------------------------------
// Pseudo-labels and training

struct Labeling {
  KMeansModel kmeans;
  std::vector<std::vector<int>> labels;  // per clip, per frame
  std::vector<double> objective_log;
};

/// k-means over mfcc_like frames of the whole corpus.
Labeling first_phase_labels(const Corpus& corpus, std::size_t k, std::uint64_t seed, std::size_t max_iter = 50);
/// k-means over hidden state `layer_index` (0 = input projection, L = last
/// block). Throws ConfigError when layer_index > L.
Labeling second_phase_relabel(const HubertModel& model, const Corpus& corpus, std::size_t layer_index,
                              std::size_t k, std::uint64_t seed, std::size_t max_iter = 50);

struct StepResult {
  double loss = 0.0;
  bool skipped = false;  // nothing was masked; loss repeats the previous value
  std::size_t masked_frames = 0;
};

/// Masked pseudo-label prediction on a batch of clips followed by one
/// optimizer step. Cross-entropy is averaged over masked frames only.
StepResult hubert_step(HubertModel& model, const std::vector<const Clip*>& batch,
                       const std::vector<const std::vector<int>*>& labels, Optimizer& optimizer, const MaskSpec& mask,
                       Rng& rng, double previous_loss);

struct TrainResult {
  std::vector<double> losses;  // NaN for skipped steps before the first real one
  std::size_t skipped_steps = 0;
  Labeling labeling;
};

using StepCallback = std::function<void(std::size_t step, const StepResult&)>;

/// Synthesizes the corpus, fits first-phase labels and runs `steps` steps of
/// hubert_step on consecutive batches of frame_budget frames.
TrainResult pretrain(HubertModel& model, const TrainSettings& settings, std::size_t steps, std::uint64_t seed,
                     const StepCallback& on_step = {});

CorpusSettings corpus_settings(const TrainSettings& settings);
OptimizerSettings optimizer_settings(const TrainSettings& settings, std::size_t steps);

// ---------------------------------------------------------------------------
// Linear probes

enum class ProbeTask { frame_cls, seq_cls };
enum class ProbeLabels { truth, random, single };

ProbeTask parse_probe_task(const std::string& name);

struct ProbeSettings {
  ProbeLabels labels = ProbeLabels::truth;
  std::size_t train_clips = 48;
  std::size_t test_clips = 24;
  std::size_t epochs = 300;
  double lr = 0.05;
};

/// Trains a softmax-regression probe on frozen encoder outputs of a fresh
/// synthetic corpus and returns held-out accuracy.
double probe_eval(const HubertModel& model, ProbeTask task, std::uint64_t seed, const ProbeSettings& settings = {});

}  // namespace binaformer
