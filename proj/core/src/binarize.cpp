#include "binaformer/binarize.hpp"

#include <algorithm>
#include <cmath>

#include "binaformer/errors.hpp"

namespace binaformer {

using detail::make_result;
using detail::Node;

namespace {

struct ChannelLayout {
  std::size_t channels = 1;
  std::size_t inner = 1;

  std::size_t channel_of(std::size_t flat) const { return (flat / inner) % channels; }
};

ChannelLayout channel_layout(const Shape& shape, std::size_t axis, Granularity g) {
  ChannelLayout layout;
  if (g == Granularity::per_tensor) {
    layout.inner = shape_numel(shape);
    return layout;
  }
  if (axis >= shape.size()) {
    throw DimensionError("channel axis " + std::to_string(axis) + " out of range for " + shape_string(shape));
  }
  layout.channels = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) layout.inner *= shape[i];
  return layout;
}

std::vector<double> channel_means(std::span<const double> w, const ChannelLayout& layout) {
  std::vector<double> sums(layout.channels, 0.0);
  std::vector<std::size_t> counts(layout.channels, 0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const auto c = layout.channel_of(i);
    sums[c] += w[i];
    ++counts[c];
  }
  for (std::size_t c = 0; c < layout.channels; ++c) sums[c] /= static_cast<double>(counts[c]);
  return sums;
}

}  // namespace

BinarizerState BinarizerState::for_weights(const Tensor& w, std::size_t channel_axis, Granularity granularity) {
  const auto layout = channel_layout(w.shape(), channel_axis, granularity);
  const auto W = w.data();
  const auto means = channel_means(W, layout);
  std::vector<double> dev(layout.channels, 0.0);
  std::vector<std::size_t> counts(layout.channels, 0);
  for (std::size_t i = 0; i < W.size(); ++i) {
    const auto c = layout.channel_of(i);
    dev[c] += std::abs(W[i] - means[c]);
    ++counts[c];
  }
  for (std::size_t c = 0; c < layout.channels; ++c) {
    dev[c] = std::max(dev[c] / static_cast<double>(counts[c]), kMinPositive);
  }
  BinarizerState s;
  s.alpha = Tensor({layout.channels}, std::move(dev), true);
  s.beta = Tensor::scalar(0.0, false);
  s.set = SetKind::signed_set;
  s.granularity = granularity;
  return s;
}

BinarizerState BinarizerState::for_activations(SetKind set) {
  BinarizerState s;
  s.alpha = Tensor::scalar(1.0, true);
  s.beta = Tensor::scalar(0.0, true);
  s.set = set;
  s.granularity = Granularity::per_tensor;
  return s;
}

void BinarizerState::validate() const {
  if (!alpha.defined()) throw InvalidStateError("binarizer alpha is undefined");
  for (double a : alpha.data()) {
    if (!(a > 0.0)) throw InvalidStateError("binarizer alpha must be positive, got " + std::to_string(a));
  }
}

void BinarizerState::clamp() {
  for (double& a : alpha.mutable_data()) a = std::max(a, kMinPositive);
}

void BinarizerState::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".alpha", alpha, alpha.requires_grad(), true});
  if (beta.defined() && beta.requires_grad()) out.push_back({prefix + ".beta", beta, true, false});
}

Tensor binarize_weights(const Tensor& w, const BinarizerState& state, std::size_t channel_axis) {
  if (state.set != SetKind::signed_set) throw InvalidStateError("weight binarizer must use the signed set");
  state.validate();
  const auto layout = channel_layout(w.shape(), channel_axis, state.granularity);
  if (state.alpha.numel() != layout.channels) {
    throw DimensionError("weight binarizer has " + std::to_string(state.alpha.numel()) + " scales for " +
                         std::to_string(layout.channels) + " channels of " + shape_string(w.shape()));
  }
  const auto W = w.data();
  const auto A = state.alpha.data();
  const auto means = channel_means(W, layout);
  std::vector<double> out(W.size());
  std::vector<signed char> sign(W.size());
  std::vector<bool> pass(W.size());
  for (std::size_t i = 0; i < W.size(); ++i) {
    const auto c = layout.channel_of(i);
    const double centered = W[i] - means[c];
    sign[i] = centered >= 0.0 ? 1 : -1;
    out[i] = A[c] * sign[i];
    pass[i] = std::abs(centered / A[c]) <= 1.0;
  }
  return make_result(w.shape(), std::move(out), "binarize_weights", {w, state.alpha},
                     [layout, sign = std::move(sign), pass = std::move(pass)](Node& self) {
                       auto& win = *self.inputs[0];
                       auto& ain = *self.inputs[1];
                       const auto& g = self.grad;
                       if (win.requires_grad) {
                         auto& gw = win.ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i)
                           if (pass[i]) gw[i] += g[i];
                       }
                       if (ain.requires_grad) {
                         auto& ga = ain.ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) ga[layout.channel_of(i)] += g[i] * sign[i];
                       }
                     });
}

Tensor binarize_activations(const Tensor& a, const BinarizerState& state) {
  state.validate();
  if (state.alpha.numel() != 1 || !state.beta.defined() || state.beta.numel() != 1) {
    throw InvalidStateError("activation binarizer needs scalar alpha and beta");
  }
  const double alpha = state.alpha.item();
  const double beta = state.beta.item();
  const bool is_unsigned = state.set == SetKind::unsigned_set;
  const auto X = a.data();
  std::vector<double> out(X.size());
  std::vector<double> q(X.size());
  std::vector<double> u(X.size());
  std::vector<bool> in_range(X.size());
  for (std::size_t i = 0; i < X.size(); ++i) {
    u[i] = (X[i] - beta) / alpha;
    if (is_unsigned) {
      q[i] = std::clamp(std::round(u[i]), 0.0, 1.0);
      in_range[i] = u[i] >= 0.0 && u[i] <= 1.0;
    } else {
      q[i] = u[i] >= 0.0 ? 1.0 : -1.0;
      in_range[i] = std::abs(u[i]) <= 1.0;
    }
    out[i] = alpha * q[i];
  }
  return make_result(a.shape(), std::move(out), "binarize_activations", {a, state.alpha, state.beta},
                     [q = std::move(q), u = std::move(u), in_range = std::move(in_range)](Node& self) {
                       auto& xin = *self.inputs[0];
                       auto& ain = *self.inputs[1];
                       auto& bin = *self.inputs[2];
                       const auto& g = self.grad;
                       double g_alpha = 0.0, g_pass = 0.0;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const double through = in_range[i] ? g[i] : 0.0;
                         g_pass += through;
                         g_alpha += g[i] * (q[i] - (in_range[i] ? u[i] : 0.0));
                         if (xin.requires_grad) xin.ensure_grad()[i] += through;
                       }
                       if (ain.requires_grad) ain.ensure_grad()[0] += g_alpha;
                       if (bin.requires_grad) bin.ensure_grad()[0] -= g_pass;
                     });
}

const char* module_class_name(ModuleClass c) {
  switch (c) {
    case ModuleClass::linear:
      return "linear";
    case ModuleClass::conv:
      return "conv";
    case ModuleClass::attention_score:
      return "attention_score";
    case ModuleClass::attention_prob:
      return "attention_prob";
    case ModuleClass::ffn_activation:
      return "ffn_activation";
  }
  return "unknown";
}

PrecisionSpec::PrecisionSpec(int weight_bits, int activation_bits, std::set<ModuleClass> classes)
    : weight_bits_(weight_bits), activation_bits_(activation_bits), classes_(std::move(classes)) {
  auto ok = [](int b) { return b == 1 || b == 32; };
  if (!ok(weight_bits_) || !ok(activation_bits_)) {
    throw ConfigError("bit widths must be 1 or 32, got W" + std::to_string(weight_bits_) + "A" +
                      std::to_string(activation_bits_));
  }
}

PrecisionSpec PrecisionSpec::fp32() { return {}; }

PrecisionSpec PrecisionSpec::w1a1() {
  return PrecisionSpec(1, 1,
                       {ModuleClass::linear, ModuleClass::conv, ModuleClass::attention_score,
                        ModuleClass::attention_prob, ModuleClass::ffn_activation});
}

PrecisionSpec PrecisionSpec::parse(const std::string& label) {
  if (label == "FP32") return fp32();
  if (label == "FP32-W1A1") return w1a1();
  throw ConfigError("unknown precision \"" + label + "\" (expected \"FP32\" or \"FP32-W1A1\")");
}

std::string PrecisionSpec::label() const {
  if (!any_quantized()) return "FP32";
  if (*this == w1a1()) return "FP32-W1A1";
  std::string s = "FP32-W" + std::to_string(weight_bits_) + "A" + std::to_string(activation_bits_) + "[";
  bool first = true;
  for (auto c : classes_) {
    if (!first) s += ",";
    s += module_class_name(c);
    first = false;
  }
  return s + "]";
}

void LayerQuantizers::collect(const std::string& prefix, ParameterList& out) const {
  weight.collect(prefix + ".wq", out);
  input.collect(prefix + ".aq", out);
}

Tensor binarized_linear(const Tensor& x, const Tensor& w, const Tensor& b, const PrecisionSpec& spec,
                        const LayerQuantizers& q, ModuleClass cls, bool quantize_input) {
  const Tensor xin = quantize_input && spec.quantizes_activations(cls) ? binarize_activations(x, q.input) : x;
  const Tensor win = spec.quantizes_weights(cls) ? binarize_weights(w, q.weight, 1) : w;
  return add_bias(matmul(xin, win), b);
}

Tensor binarized_conv1d(const Tensor& x, const Tensor& w, const PrecisionSpec& spec, const LayerQuantizers& q,
                        ConvMode mode, std::size_t stride) {
  const Tensor xin = spec.quantizes_activations(ModuleClass::conv) ? binarize_activations(x, q.input) : x;
  const Tensor win = spec.quantizes_weights(ModuleClass::conv) ? binarize_weights(w, q.weight, 0) : w;
  return conv1d(xin, win, mode, stride);
}

}  // namespace binaformer
