#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "binaformer/config.hpp"
#include "binaformer/parameters.hpp"
#include "binaformer/pretrain.hpp"

namespace binaformer {

// Single-file layout, all integers little-endian:
//   "BFCK" | u32 version | u32 json_len | config JSON
//   u32 count | count x (u32 name_len | name | u32 rank | rank x u64 dim | f32 values)
//   u32 has_centroids | [u32 k | u32 dim | k*dim f32]

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  RunConfig config;
  std::uint64_t seed = 0;
  std::size_t clusters = 0;
  std::vector<StoredArray> arrays;
  std::optional<KMeansModel> centroids;
};

void save_checkpoint(const std::string& path, const RunConfig& config, std::uint64_t seed, std::size_t clusters,
                     const ParameterList& params, const std::optional<KMeansModel>& centroids);
/// Throws IoError when the file is missing, truncated or not a checkpoint.
Checkpoint load_checkpoint(const std::string& path);

/// Copies stored arrays into same-named parameters. Throws DimensionError on a
/// shape mismatch and IoError when a parameter has no stored array.
void restore_parameters(const Checkpoint& checkpoint, const ParameterList& params);

/// "step,loss" lines, one per step, no header.
void write_loss_csv(const std::string& path, const std::vector<double>& losses);

}  // namespace binaformer
