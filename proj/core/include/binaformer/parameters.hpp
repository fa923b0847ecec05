#pragma once

#include <string>
#include <vector>

#include "binaformer/tensor.hpp"

namespace binaformer {

/// A named model tensor. Buffers (e.g. running statistics) are stored and
/// checkpointed but never updated by the optimizer. Positive parameters are
/// clamped to kMinPositive after each optimizer step.
struct NamedParameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;
  bool positive = false;
};

inline constexpr double kMinPositive = 1e-8;

using ParameterList = std::vector<NamedParameter>;

inline std::size_t count_values(const ParameterList& params, bool trainable_only = true) {
  std::size_t n = 0;
  for (const auto& p : params)
    if (!trainable_only || p.trainable) n += p.tensor.numel();
  return n;
}

}  // namespace binaformer
