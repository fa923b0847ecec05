#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "binaformer/binarize.hpp"
#include "binaformer/config.hpp"

namespace binaformer {

/// One costed layer. `kind` is one of: linear, conv, attention_score,
/// attention_prob, norm, activation, pool, positional, bias, scale.
struct LayerCost {
  std::string name;
  std::string kind;
  std::uint64_t params = 0;
  int param_bits = 32;
  std::uint64_t macs = 0;
  int weight_bits = 32;
  int act_bits = 32;
};

struct CostReport {
  double storage_mb = 0.0;
  double flop_g = 0.0;
  double bop_nonq_g = 0.0;
  double bop_bq_g = 0.0;
  double est_time_s = 0.0;

  // Exact integer totals the floating columns are derived from.
  std::uint64_t storage_bits = 0;
  std::uint64_t total_macs = 0;
  std::uint64_t flop = 0;
  std::uint64_t bop_nonq = 0;
  std::uint64_t bop_bq = 0;

  std::vector<LayerCost> per_layer;
  std::vector<std::string> assumptions;
};

/// Peak rate solved from the reference vanilla row: 1228.64 G BOP in
/// 38.46e-4 s.
inline constexpr double kReferenceVanillaBop = 1228.64e9;
inline constexpr double kReferenceVanillaSeconds = 38.46e-4;
inline constexpr double kFittedDevicePeak = kReferenceVanillaBop / kReferenceVanillaSeconds;

inline constexpr std::size_t kDefaultProfileFrames = 1000;

double fit_device_peak(double bop, double seconds);
double estimate_seconds(double bop, double device_peak);

/// Every costed layer of the encoder (input projection, positional table and
/// block stack) at sequence length n, with bit widths taken from `spec`.
std::vector<LayerCost> enumerate_layers(const EncoderConfig& cfg, const PrecisionSpec& spec, std::size_t n);

/// Totals over a layer list. Throws ProfilingError naming any layer whose
/// kind is unknown or whose bit widths are not 1 or 32.
CostReport summarize(std::vector<LayerCost> layers, double device_peak, std::vector<std::string> assumptions = {});

CostReport profile(const EncoderConfig& cfg, const PrecisionSpec& spec, std::size_t n = kDefaultProfileFrames,
                   double device_peak = kFittedDevicePeak);

/// Published reference values for one (config, precision) row.
struct ReferenceRow {
  double storage_mb;
  double flop_g;
  double bop_nonq_g;
  std::optional<double> bop_bq_g;
  double est_time_e4;
};

std::optional<ReferenceRow> reference_row(const std::string& config_name, const PrecisionSpec& spec);

/// The five reference encoder configurations, named vanilla, conformer_s,
/// squeeze_xs, sparse_dn_s and sparse_sw_s, all at FP32.
std::vector<RunConfig> reference_suite();
/// Human-readable row label, "BQ-" prefixed when quantized.
std::string display_name(const std::string& config_name, const PrecisionSpec& spec);

struct ProfileRow {
  std::string name;
  EncoderConfig config;
  PrecisionSpec precision;
  CostReport report;
  std::optional<ReferenceRow> reference;
};

enum class TableFormat { tsv, text };

/// Header plus one line per row, in the given order.
std::string profile_table(const std::vector<ProfileRow>& rows, TableFormat format, bool with_reference);

struct Reductions {
  double storage = 0.0;
  double flop = 0.0;
  double bop_nonq = 0.0;
  double bop_bq = 0.0;
  double est_time = 0.0;
};

/// 100 * (1 - candidate / baseline). Throws DivisionError on a zero baseline.
double reduction_percent(double baseline, double candidate);
/// Column-wise reduction_percent.
Reductions reduction_report(const CostReport& baseline, const CostReport& candidate);

}  // namespace binaformer
