#pragma once

#include <cstddef>
#include <set>
#include <string>

#include "binaformer/ops.hpp"
#include "binaformer/parameters.hpp"
#include "binaformer/tensor.hpp"

namespace binaformer {

// Two codomains: signed {-alpha, +alpha} and unsigned {0, alpha}.
enum class SetKind { signed_set, unsigned_set };
enum class Granularity { per_tensor, per_output_channel };

/// Learnable elastic-binarizer parameters. `alpha` is [1] per tensor or [C]
/// per output channel; `beta` is [1] and only used by activation binarizers.
struct BinarizerState {
  Tensor alpha;
  Tensor beta;
  SetKind set = SetKind::signed_set;
  Granularity granularity = Granularity::per_tensor;

  /// alpha_c = mean(|w - mean(w)|) over each output channel (signed set).
  static BinarizerState for_weights(const Tensor& w, std::size_t channel_axis,
                                    Granularity granularity = Granularity::per_output_channel);
  /// alpha = 1, beta = 0.
  static BinarizerState for_activations(SetKind set);

  /// Throws InvalidStateError unless every alpha is strictly positive.
  void validate() const;
  /// Lower-clamps alpha at kMinPositive.
  void clamp();

  void collect(const std::string& prefix, ParameterList& out) const;
};

/// alpha * sign(w - mean(w)) per channel, sign(0) = +1.
///
/// Backward is a clipped straight-through estimator: w receives g where
/// |(w - mean) / alpha| <= 1, alpha receives sum(g * sign(w - mean)). The
/// channel mean is treated as a constant.
Tensor binarize_weights(const Tensor& w, const BinarizerState& state, std::size_t channel_axis);

/// Elastic activation binarizer with u = (a - beta) / alpha:
///   unsigned: alpha * clip(round(u), 0, 1)   active range 0 <= u <= 1
///   signed:   alpha * sign(u)                active range |u| <= 1
/// a gets g inside the active range; alpha gets g * (q - u * [in range]);
/// beta gets minus the gradient that reaches a.
Tensor binarize_activations(const Tensor& a, const BinarizerState& state);

enum class ModuleClass { linear, conv, attention_score, attention_prob, ffn_activation };

const char* module_class_name(ModuleClass c);

/// Bit widths applied to a set of encoder module classes. Everything outside
/// the encoder (feature extractor, input projection, prediction head) always
/// runs at 32 bits.
class PrecisionSpec {
 public:
  PrecisionSpec() = default;
  PrecisionSpec(int weight_bits, int activation_bits, std::set<ModuleClass> classes);

  static PrecisionSpec fp32();
  static PrecisionSpec w1a1();
  /// Accepts exactly "FP32" and "FP32-W1A1"; anything else is a ConfigError.
  static PrecisionSpec parse(const std::string& label);

  int weight_bits() const { return weight_bits_; }
  int activation_bits() const { return activation_bits_; }
  const std::set<ModuleClass>& classes() const { return classes_; }

  bool quantizes_weights(ModuleClass c) const { return weight_bits_ == 1 && classes_.contains(c); }
  bool quantizes_activations(ModuleClass c) const { return activation_bits_ == 1 && classes_.contains(c); }
  bool any_quantized() const { return !classes_.empty() && (weight_bits_ == 1 || activation_bits_ == 1); }

  int weight_bits_for(ModuleClass c) const { return quantizes_weights(c) ? 1 : 32; }
  int activation_bits_for(ModuleClass c) const { return quantizes_activations(c) ? 1 : 32; }

  std::string label() const;

  bool operator==(const PrecisionSpec&) const = default;

 private:
  int weight_bits_ = 32;
  int activation_bits_ = 32;
  std::set<ModuleClass> classes_;
};

/// Weight and input binarizers belonging to one linear or conv layer.
struct LayerQuantizers {
  BinarizerState weight;
  BinarizerState input;

  void collect(const std::string& prefix, ParameterList& out) const;
};

/// x[n x d_in] w[d_in x d_out] + b[d_out]. Under a quantizing spec the weight
/// is binarized per output column and the input per tensor. With
/// `quantize_input == false` only the weight is binarized.
Tensor binarized_linear(const Tensor& x, const Tensor& w, const Tensor& b, const PrecisionSpec& spec,
                        const LayerQuantizers& q, ModuleClass cls = ModuleClass::linear, bool quantize_input = true);

/// conv1d with the same quantization rule; weight channels are along axis 0.
Tensor binarized_conv1d(const Tensor& x, const Tensor& w, const PrecisionSpec& spec, const LayerQuantizers& q,
                        ConvMode mode, std::size_t stride = 1);

}  // namespace binaformer
