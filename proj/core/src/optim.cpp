#include "binaformer/optim.hpp"

#include <algorithm>
#include <cmath>

#include "binaformer/errors.hpp"

namespace binaformer {

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  throw ConfigError("optimizer: unknown optimizer \"" + name + "\"");
}

double scheduled_lr(const OptimizerSettings& settings, std::size_t step) {
  const auto warmup = static_cast<std::size_t>(std::ceil(settings.warmup_fraction * settings.total_steps));
  if (step < warmup) return settings.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (step >= settings.total_steps) return 0.0;
  const double remaining = static_cast<double>(settings.total_steps - step);
  return settings.lr * remaining / static_cast<double>(settings.total_steps - warmup);
}

Optimizer::Optimizer(ParameterList params, OptimizerSettings settings)
    : params_(std::move(params)), settings_(settings) {
  if (!(settings_.lr > 0.0)) throw ConfigError("lr: must be positive");
  if (settings_.warmup_fraction < 0.0 || settings_.warmup_fraction > 1.0) {
    throw ConfigError("warmup_fraction: must lie in [0, 1]");
  }
  if (settings_.kind == OptimizerKind::adam) {
    for (const auto& p : params_) {
      m_.emplace_back(p.trainable ? p.tensor.numel() : 0, 0.0);
      v_.emplace_back(p.trainable ? p.tensor.numel() : 0, 0.0);
    }
  }
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Optimizer::step() {
  const double lr = scheduled_lr(settings_, step_);
  ++step_;
  const double b1 = settings_.beta1, b2 = settings_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.trainable || !p.tensor.has_grad()) continue;
    auto w = p.tensor.mutable_data();
    const auto g = p.tensor.grad();
    if (settings_.kind == OptimizerKind::sgd) {
      for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * g[j];
    } else {
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
        w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + settings_.eps);
      }
    }
    if (p.positive) {
      for (auto& x : w) x = std::max(x, kMinPositive);
    }
  }
}

}  // namespace binaformer
