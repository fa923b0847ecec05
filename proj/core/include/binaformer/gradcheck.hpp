#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "binaformer/rng.hpp"
#include "binaformer/tensor.hpp"

namespace binaformer {

/// One differentiable computation to verify. `inputs` are leaves that are
/// perturbed in place; `forward` rebuilds the output from their current values.
struct GradCase {
  std::vector<Tensor> inputs;
  std::function<Tensor()> forward;
};

using GradCaseFactory = std::function<GradCase(Rng&)>;

struct GradcheckOptions {
  std::size_t points = 10;
  double step = 1e-5;
  double tolerance = 1e-4;
  // Coordinates sampled per input tensor and point; all when numel is smaller.
  std::size_t max_coords = 48;
  std::uint64_t seed = 42;
  // Name of a case whose analytic gradient is deliberately skewed.
  std::string corrupt;
};

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t points = 0;
  std::size_t coords_checked = 0;
  bool passed = false;
};

/// max |analytic - numeric| / max(max |numeric|, 1e-3 * case max |numeric|,
/// 1e-8) per input tensor, maximized over tensors and points. The scalar objective is
/// sum(output * r) with a fixed random r per point.
GradcheckResult check_gradients(const std::string& name, const GradCaseFactory& factory,
                                const GradcheckOptions& options);

struct NamedGradCase {
  std::string name;
  GradCaseFactory factory;
};

/// Every differentiable op of the library, one case each.
const std::vector<NamedGradCase>& op_grad_cases();
/// Whole blocks: vanilla, sparseformer, conformer, squeezeformer.
const std::vector<NamedGradCase>& block_grad_cases();

std::vector<GradcheckResult> run_gradcheck(const std::vector<NamedGradCase>& cases, const GradcheckOptions& options);
/// Looks a case up by name in both lists; throws ConfigError when unknown.
const NamedGradCase& find_grad_case(const std::string& name);

}  // namespace binaformer
