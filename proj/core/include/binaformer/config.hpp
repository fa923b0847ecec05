#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "binaformer/binarize.hpp"

namespace binaformer {

enum class EncoderKind { vanilla, conformer, squeezeformer, sparseformer };

const char* encoder_kind_name(EncoderKind kind);
EncoderKind parse_encoder_kind(const std::string& name);

enum class PatternKind { strided, fixed, full };

/// Compressed row layout of an attention pattern: row i attends to
/// cols[row_ptr[i] .. row_ptr[i+1]), in increasing order.
struct CsrPattern {
  std::size_t n = 0;
  std::vector<std::size_t> row_ptr;
  std::vector<std::size_t> cols;

  std::size_t nonzeros() const { return cols.size(); }
};

/// Fixed attention pattern with block size l. The diagonal is always allowed.
///   strided: |i - j| < l  or  j mod l == l - 1
///   fixed:   i / l == j / l  or  j mod l == l - 1
///   full:    everything
struct SparsePattern {
  PatternKind kind = PatternKind::strided;
  std::size_t block = 4;

  bool allows(std::size_t i, std::size_t j) const;
  /// Row-major n x n boolean mask.
  std::vector<bool> mask(std::size_t n) const;
  CsrPattern csr(std::size_t n) const;
  std::size_t nonzeros(std::size_t n) const;

  bool operator==(const SparsePattern&) const = default;
};

const char* pattern_kind_name(PatternKind kind);

struct EncoderConfig {
  EncoderKind kind = EncoderKind::vanilla;
  std::size_t layers = 2;
  std::size_t dim = 64;
  std::size_t heads = 2;
  std::size_t ffn_expansion = 4;
  std::size_t conv_kernel = 7;
  std::optional<SparsePattern> pattern;
  std::size_t subsample_factor = 1;
  std::size_t input_dim = 512;
  std::size_t max_positions = 4000;

  /// Throws ConfigError on a violated invariant.
  void validate() const;
  std::string shape_label() const;  // "L / D / H"
};

/// Desk-scale pretraining knobs.
struct TrainSettings {
  std::size_t steps = 200;
  std::string optimizer = "adam";
  double lr = 5e-4;
  double warmup_fraction = 0.1;
  std::size_t frame_budget = 512;
  std::size_t clip_samples = 512;
  std::size_t clusters = 16;
  std::size_t mask_span = 4;
  double mask_prob = 0.08;
  std::size_t phonemes = 8;
  std::size_t corpus_clips = 64;
  std::size_t extractor_channels = 32;
};

/// One JSON config file: encoder + precision + optional profiling and
/// training knobs.
struct RunConfig {
  std::string name;
  EncoderConfig encoder;
  PrecisionSpec precision;
  std::optional<std::size_t> frames;
  std::optional<double> device_peak;
  TrainSettings train;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string to_json(const RunConfig& config);

}  // namespace binaformer
