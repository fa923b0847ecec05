#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "binaformer/binarize.hpp"
#include "binaformer/config.hpp"
#include "binaformer/parameters.hpp"
#include "binaformer/rng.hpp"
#include "binaformer/tensor.hpp"

namespace binaformer {

struct ForwardContext {
  // When set, conv-module batch norms fold the current batch into their
  // running statistics (momentum 0.1) after normalizing.
  bool training = false;
};

inline constexpr double kBatchNormMomentum = 0.1;

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
  LayerQuantizers quant;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, double stddev = -1.0);

  Tensor forward(const Tensor& x, const PrecisionSpec& spec, ModuleClass cls = ModuleClass::linear,
                 bool quantize_input = true) const;
  void collect(const std::string& prefix, ParameterList& out, bool with_quant = false) const;
  void zero();
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

enum class Activation { gelu, swish };

struct FeedForward {
  Linear in;
  Linear out;
  Activation activation = Activation::gelu;

  FeedForward() = default;
  FeedForward(std::size_t dim, std::size_t expansion, Activation act, Rng& rng);
  Tensor forward(const Tensor& x, const PrecisionSpec& spec) const;
  void collect(const std::string& prefix, ParameterList& out, bool with_quant = false) const;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t dim, std::size_t heads, Rng& rng);

  /// x[n x D] -> [n x D]. Without a pattern (or with the full pattern) this is
  /// dense attention; otherwise only the pattern's entries are computed.
  Tensor forward(const Tensor& x, const std::optional<SparsePattern>& pattern, const PrecisionSpec& spec) const;
  void collect(const std::string& prefix, ParameterList& out, bool with_quant = false) const;
  void zero_output_projection() { o_.zero(); }

  std::size_t heads() const { return heads_; }
  const Linear& query() const { return q_; }
  const Linear& key() const { return k_; }
  const Linear& value() const { return v_; }
  const Linear& output() const { return o_; }

 private:
  std::size_t dim_ = 0;
  std::size_t heads_ = 1;
  Linear q_, k_, v_, o_;
  BinarizerState q_act_, k_act_, v_act_, p_act_;
};

/// Pointwise -> (GLU | swish) -> depthwise(k) -> batch norm -> swish ->
/// pointwise, over the time axis of x[n x D].
class ConvModule {
 public:
  ConvModule() = default;
  ConvModule(std::size_t dim, std::size_t kernel, bool gated, Rng& rng);

  Tensor forward(const Tensor& x, const PrecisionSpec& spec, const ForwardContext& ctx) const;
  void collect(const std::string& prefix, ParameterList& out, bool with_quant = false) const;
  void zero_output_projection();

 private:
  bool gated_ = true;
  Tensor pw1_, dw_, pw2_;
  LayerQuantizers pw1_q_, dw_q_, pw2_q_;
  Tensor bn_gain_, bn_bias_, bn_mean_, bn_var_;
};

class Block {
 public:
  virtual ~Block() = default;
  virtual Tensor forward(const Tensor& x, const ForwardContext& ctx) const = 0;
  virtual void collect(const std::string& prefix, ParameterList& out) const = 0;
  /// Zeroes every module's last projection so each residual branch adds 0.
  virtual void zero_output_projections() = 0;
};

/// Pre-LN block: x + MHSA(LN(x)); x + FFN(LN(x)) with GELU. With a pattern
/// this is the sparse-attention block.
class TransformerBlock : public Block {
 public:
  TransformerBlock(const EncoderConfig& cfg, const PrecisionSpec& spec, Rng& rng);
  Tensor forward(const Tensor& x, const ForwardContext& ctx) const override;
  void collect(const std::string& prefix, ParameterList& out) const override;
  void zero_output_projections() override;

 private:
  std::optional<SparsePattern> pattern_;
  PrecisionSpec spec_;
  LayerNorm ln_attn_, ln_ffn_;
  MultiHeadAttention attn_;
  FeedForward ffn_;
};

/// Macaron block: x + FFN/2, x + MHSA, x + Conv (GLU gate), x + FFN/2, then a
/// final LN. Every module input is layer-normalized.
class ConformerBlock : public Block {
 public:
  ConformerBlock(const EncoderConfig& cfg, const PrecisionSpec& spec, Rng& rng);
  Tensor forward(const Tensor& x, const ForwardContext& ctx) const override;
  void collect(const std::string& prefix, ParameterList& out) const override;
  void zero_output_projections() override;
  const LayerNorm& final_norm() const { return ln_final_; }

 private:
  PrecisionSpec spec_;
  LayerNorm ln_ffn1_, ln_attn_, ln_conv_, ln_ffn2_, ln_final_;
  FeedForward ffn1_, ffn2_;
  MultiHeadAttention attn_;
  ConvModule conv_;
};

/// MHSA -> FFN -> Conv -> FFN, each as x + LN(module(x)); swish everywhere.
class SqueezeformerBlock : public Block {
 public:
  SqueezeformerBlock(const EncoderConfig& cfg, const PrecisionSpec& spec, Rng& rng);
  Tensor forward(const Tensor& x, const ForwardContext& ctx) const override;
  void collect(const std::string& prefix, ParameterList& out) const override;
  void zero_output_projections() override;

 private:
  PrecisionSpec spec_;
  LayerNorm ln_attn_, ln_ffn1_, ln_conv_, ln_ffn2_;
  MultiHeadAttention attn_;
  FeedForward ffn1_, ffn2_;
  ConvModule conv_;
};

std::unique_ptr<Block> make_block(const EncoderConfig& cfg, const PrecisionSpec& spec, Rng& rng);

/// Rows of absolute sinusoidal position codes, [n x dim].
Tensor sinusoidal_positions(std::size_t n, std::size_t dim);

/// Input projection + positional encoding + a stack of blocks. Squeezeformer
/// stacks with subsample factor 2 average-pool after layer L/2 and restore the
/// length at the end by nearest upsampling plus the pre-pool skip.
class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, const PrecisionSpec& spec, std::uint64_t seed);

  /// features[n x input_dim] -> [n x dim].
  Tensor encode(const Tensor& features, const ForwardContext& ctx = {}) const;
  /// Representation after the input projection (index 0) and after every
  /// block (index i), each at the input length n.
  std::vector<Tensor> hidden_states(const Tensor& features, const ForwardContext& ctx = {}) const;

  ParameterList parameters() const;
  /// Trainable values inside the block stack only.
  std::size_t block_parameter_count() const;

  const EncoderConfig& config() const { return cfg_; }
  const PrecisionSpec& precision() const { return spec_; }
  std::vector<std::unique_ptr<Block>>& blocks() { return blocks_; }

 private:
  Tensor run(const Tensor& features, const ForwardContext& ctx, std::vector<Tensor>* states) const;

  EncoderConfig cfg_;
  PrecisionSpec spec_;
  Linear input_;
  std::vector<std::unique_ptr<Block>> blocks_;
};

Encoder build_encoder(const EncoderConfig& cfg, const PrecisionSpec& spec, std::uint64_t seed);

}  // namespace binaformer
