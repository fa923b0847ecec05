#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "binaformer/parameters.hpp"

namespace binaformer {

enum class OptimizerKind { adam, sgd };

OptimizerKind parse_optimizer_kind(const std::string& name);

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  // Fraction of total_steps spent ramping up to lr.
  double warmup_fraction = 0.1;
  std::size_t total_steps = 200;
};

/// Learning rate at zero-based step `step`: a linear ramp to lr over the
/// warmup steps, then a linear decay that would reach 0 at total_steps.
double scheduled_lr(const OptimizerSettings& settings, std::size_t step);

/// Adam or plain SGD over the trainable entries of a parameter list. After
/// every step, parameters flagged `positive` are clamped below at kMinPositive.
class Optimizer {
 public:
  Optimizer(ParameterList params, OptimizerSettings settings);

  void zero_grad();
  /// Applies one update using the gradients currently stored on the
  /// parameters. Parameters without a gradient are left untouched.
  void step();

  std::size_t steps_taken() const { return step_; }
  double current_lr() const { return scheduled_lr(settings_, step_); }
  const ParameterList& parameters() const { return params_; }
  const OptimizerSettings& settings() const { return settings_; }

 private:
  ParameterList params_;
  OptimizerSettings settings_;
  std::size_t step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace binaformer
