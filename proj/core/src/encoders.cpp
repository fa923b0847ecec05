#include "binaformer/encoders.hpp"

#include <cmath>
#include <limits>

#include "binaformer/attention.hpp"
#include "binaformer/errors.hpp"
#include "binaformer/ops.hpp"

namespace binaformer {

namespace {

Tensor random_tensor(Shape shape, double stddev, Rng& rng) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), rng.normal_vector(n, stddev), true);
}

LayerQuantizers make_quantizers(const Tensor& weight, std::size_t channel_axis) {
  LayerQuantizers q;
  q.weight = BinarizerState::for_weights(weight, channel_axis);
  q.input = BinarizerState::for_activations(SetKind::signed_set);
  return q;
}

void collect_quantizers(const LayerQuantizers& q, const std::string& prefix, ParameterList& out) {
  if (q.weight.alpha.defined()) q.collect(prefix, out);
}

}  // namespace

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, double stddev) {
  if (stddev < 0.0) stddev = 1.0 / std::sqrt(static_cast<double>(in));
  weight = random_tensor({in, out}, stddev, rng);
  bias = Tensor::zeros({out}, true);
  quant = make_quantizers(weight, 1);
}

Tensor Linear::forward(const Tensor& x, const PrecisionSpec& spec, ModuleClass cls, bool quantize_input) const {
  return binarized_linear(x, weight, bias, spec, quant, cls, quantize_input);
}

void Linear::collect(const std::string& prefix, ParameterList& out, bool with_quant) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
  if (with_quant) collect_quantizers(quant, prefix, out);
}

void Linear::zero() {
  for (auto& v : weight.mutable_data()) v = 0.0;
  for (auto& v : bias.mutable_data()) v = 0.0;
}

LayerNorm::LayerNorm(std::size_t dim) : gain(Tensor::full({dim}, 1.0, true)), bias(Tensor::zeros({dim}, true)) {}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gain, bias); }

void LayerNorm::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".gain", gain});
  out.push_back({prefix + ".bias", bias});
}

FeedForward::FeedForward(std::size_t dim, std::size_t expansion, Activation act, Rng& rng)
    : in(dim, dim * expansion, rng), out(dim * expansion, dim, rng), activation(act) {}

Tensor FeedForward::forward(const Tensor& x, const PrecisionSpec& spec) const {
  Tensor h = in.forward(x, spec);
  h = activation == Activation::gelu ? gelu(h) : swish(h);
  return out.forward(h, spec, ModuleClass::linear, spec.quantizes_activations(ModuleClass::ffn_activation));
}

void FeedForward::collect(const std::string& prefix, ParameterList& params, bool with_quant) const {
  in.collect(prefix + ".in", params, with_quant);
  out.collect(prefix + ".out", params, with_quant);
}

MultiHeadAttention::MultiHeadAttention(std::size_t dim, std::size_t heads, Rng& rng)
    : dim_(dim),
      heads_(heads),
      q_(dim, dim, rng),
      k_(dim, dim, rng),
      v_(dim, dim, rng),
      o_(dim, dim, rng),
      q_act_(BinarizerState::for_activations(SetKind::signed_set)),
      k_act_(BinarizerState::for_activations(SetKind::signed_set)),
      v_act_(BinarizerState::for_activations(SetKind::signed_set)),
      p_act_(BinarizerState::for_activations(SetKind::unsigned_set)) {
  if (heads == 0 || dim % heads != 0) throw ConfigError("heads: dim must be divisible by the head count");
}

Tensor MultiHeadAttention::forward(const Tensor& x, const std::optional<SparsePattern>& pattern,
                                   const PrecisionSpec& spec) const {
  if (x.rank() != 2 || x.dim(1) != dim_) {
    throw DimensionError("attention: input " + shape_string(x.shape()) + " for model dim " + std::to_string(dim_));
  }
  const std::size_t n = x.dim(0);
  const std::size_t head_dim = dim_ / heads_;
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Tensor q = q_.forward(x, spec);
  Tensor k = k_.forward(x, spec);
  Tensor v = v_.forward(x, spec);
  if (spec.quantizes_activations(ModuleClass::attention_score)) {
    q = binarize_activations(q, q_act_);
    k = binarize_activations(k, k_act_);
  }
  ProbTransform prob_transform;
  if (spec.quantizes_activations(ModuleClass::attention_prob)) {
    v = binarize_activations(v, v_act_);
    prob_transform = [this](const Tensor& p) { return binarize_activations(p, p_act_); };
  }

  const bool sparse = pattern && pattern->kind != PatternKind::full;
  CsrPattern csr;
  if (sparse) csr = pattern->csr(n);

  std::vector<Tensor> heads;
  heads.reserve(heads_);
  for (std::size_t h = 0; h < heads_; ++h) {
    const Tensor qh = slice_cols(q, h * head_dim, (h + 1) * head_dim);
    const Tensor kh = slice_cols(k, h * head_dim, (h + 1) * head_dim);
    const Tensor vh = slice_cols(v, h * head_dim, (h + 1) * head_dim);
    if (sparse) {
      Tensor p = segment_softmax(sparse_scores(qh, kh, csr, score_scale), csr);
      if (prob_transform) p = prob_transform(p);
      heads.push_back(sparse_weighted_sum(p, vh, csr));
    } else {
      heads.push_back(dense_attention(qh, kh, vh, score_scale, std::nullopt, prob_transform));
    }
  }
  return o_.forward(concat_cols(heads), spec);
}

void MultiHeadAttention::collect(const std::string& prefix, ParameterList& out, bool with_quant) const {
  q_.collect(prefix + ".q", out, with_quant);
  k_.collect(prefix + ".k", out, with_quant);
  v_.collect(prefix + ".v", out, with_quant);
  o_.collect(prefix + ".o", out, with_quant);
  if (with_quant) {
    q_act_.collect(prefix + ".q_act", out);
    k_act_.collect(prefix + ".k_act", out);
    v_act_.collect(prefix + ".v_act", out);
    p_act_.collect(prefix + ".p_act", out);
  }
}

ConvModule::ConvModule(std::size_t dim, std::size_t kernel, bool gated, Rng& rng) : gated_(gated) {
  const std::size_t expanded = gated ? 2 * dim : dim;
  const double pw_std = 1.0 / std::sqrt(static_cast<double>(dim));
  pw1_ = random_tensor({expanded, dim, 1}, pw_std, rng);
  dw_ = random_tensor({dim, 1, kernel}, 1.0 / std::sqrt(static_cast<double>(kernel)), rng);
  pw2_ = random_tensor({dim, dim, 1}, pw_std, rng);
  pw1_q_ = make_quantizers(pw1_, 0);
  dw_q_ = make_quantizers(dw_, 0);
  pw2_q_ = make_quantizers(pw2_, 0);
  bn_gain_ = Tensor::full({dim}, 1.0, true);
  bn_bias_ = Tensor::zeros({dim}, true);
  bn_mean_ = Tensor::zeros({dim});
  bn_var_ = Tensor::full({dim}, 1.0);
}

Tensor ConvModule::forward(const Tensor& x, const PrecisionSpec& spec, const ForwardContext& ctx) const {
  Tensor h = binarized_conv1d(transpose(x), pw1_, spec, pw1_q_, ConvMode::pointwise);
  h = gated_ ? glu(h, 0) : swish(h);
  h = binarized_conv1d(h, dw_, spec, dw_q_, ConvMode::depthwise);
  Tensor normalized = batch_norm_inference(h, bn_mean_.data(), bn_var_.data(), bn_gain_, bn_bias_);
  if (ctx.training) {
    const std::size_t c = h.dim(0), n = h.dim(1);
    const auto H = h.data();
    Tensor running_mean = bn_mean_;
    Tensor running_var = bn_var_;
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double mu = 0.0;
      for (std::size_t t = 0; t < n; ++t) mu += H[ch * n + t];
      mu /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t t = 0; t < n; ++t) var += (H[ch * n + t] - mu) * (H[ch * n + t] - mu);
      var /= static_cast<double>(n);
      rm[ch] = (1.0 - kBatchNormMomentum) * rm[ch] + kBatchNormMomentum * mu;
      rv[ch] = (1.0 - kBatchNormMomentum) * rv[ch] + kBatchNormMomentum * var;
    }
  }
  h = swish(normalized);
  h = binarized_conv1d(h, pw2_, spec, pw2_q_, ConvMode::pointwise);
  return transpose(h);
}

void ConvModule::collect(const std::string& prefix, ParameterList& out, bool with_quant) const {
  out.push_back({prefix + ".pw1", pw1_});
  out.push_back({prefix + ".dw", dw_});
  out.push_back({prefix + ".pw2", pw2_});
  if (with_quant) {
    collect_quantizers(pw1_q_, prefix + ".pw1", out);
    collect_quantizers(dw_q_, prefix + ".dw", out);
    collect_quantizers(pw2_q_, prefix + ".pw2", out);
  }
  out.push_back({prefix + ".bn.gain", bn_gain_});
  out.push_back({prefix + ".bn.bias", bn_bias_});
  out.push_back({prefix + ".bn.running_mean", bn_mean_, false});
  out.push_back({prefix + ".bn.running_var", bn_var_, false});
}

void ConvModule::zero_output_projection() {
  for (auto& v : pw2_.mutable_data()) v = 0.0;
}

TransformerBlock::TransformerBlock(const EncoderConfig& cfg, const PrecisionSpec& spec, Rng& rng)
    : pattern_(cfg.kind == EncoderKind::sparseformer ? cfg.pattern : std::nullopt),
      spec_(spec),
      ln_attn_(cfg.dim),
      ln_ffn_(cfg.dim),
      attn_(cfg.dim, cfg.heads, rng),
      ffn_(cfg.dim, cfg.ffn_expansion, Activation::gelu, rng) {}

Tensor TransformerBlock::forward(const Tensor& x, const ForwardContext&) const {
  Tensor h = add(x, attn_.forward(ln_attn_.forward(x), pattern_, spec_));
  return add(h, ffn_.forward(ln_ffn_.forward(h), spec_));
}

void TransformerBlock::collect(const std::string& prefix, ParameterList& out) const {
  ln_attn_.collect(prefix + ".ln_attn", out);
  attn_.collect(prefix + ".attn", out, spec_.any_quantized());
  ln_ffn_.collect(prefix + ".ln_ffn", out);
  ffn_.collect(prefix + ".ffn", out, spec_.any_quantized());
}

void TransformerBlock::zero_output_projections() {
  attn_.zero_output_projection();
  ffn_.out.zero();
}

ConformerBlock::ConformerBlock(const EncoderConfig& cfg, const PrecisionSpec& spec, Rng& rng)
    : spec_(spec),
      ln_ffn1_(cfg.dim),
      ln_attn_(cfg.dim),
      ln_conv_(cfg.dim),
      ln_ffn2_(cfg.dim),
      ln_final_(cfg.dim),
      ffn1_(cfg.dim, cfg.ffn_expansion, Activation::swish, rng),
      ffn2_(cfg.dim, cfg.ffn_expansion, Activation::swish, rng),
      attn_(cfg.dim, cfg.heads, rng),
      conv_(cfg.dim, cfg.conv_kernel, true, rng) {}

Tensor ConformerBlock::forward(const Tensor& x, const ForwardContext& ctx) const {
  Tensor h = add(x, scale(ffn1_.forward(ln_ffn1_.forward(x), spec_), 0.5));
  h = add(h, attn_.forward(ln_attn_.forward(h), std::nullopt, spec_));
  h = add(h, conv_.forward(ln_conv_.forward(h), spec_, ctx));
  h = add(h, scale(ffn2_.forward(ln_ffn2_.forward(h), spec_), 0.5));
  return ln_final_.forward(h);
}

void ConformerBlock::collect(const std::string& prefix, ParameterList& out) const {
  ln_ffn1_.collect(prefix + ".ln_ffn1", out);
  ffn1_.collect(prefix + ".ffn1", out, spec_.any_quantized());
  ln_attn_.collect(prefix + ".ln_attn", out);
  attn_.collect(prefix + ".attn", out, spec_.any_quantized());
  ln_conv_.collect(prefix + ".ln_conv", out);
  conv_.collect(prefix + ".conv", out, spec_.any_quantized());
  ln_ffn2_.collect(prefix + ".ln_ffn2", out);
  ffn2_.collect(prefix + ".ffn2", out, spec_.any_quantized());
  ln_final_.collect(prefix + ".ln_final", out);
}

void ConformerBlock::zero_output_projections() {
  ffn1_.out.zero();
  attn_.zero_output_projection();
  conv_.zero_output_projection();
  ffn2_.out.zero();
}

SqueezeformerBlock::SqueezeformerBlock(const EncoderConfig& cfg, const PrecisionSpec& spec, Rng& rng)
    : spec_(spec),
      ln_attn_(cfg.dim),
      ln_ffn1_(cfg.dim),
      ln_conv_(cfg.dim),
      ln_ffn2_(cfg.dim),
      attn_(cfg.dim, cfg.heads, rng),
      ffn1_(cfg.dim, cfg.ffn_expansion, Activation::swish, rng),
      ffn2_(cfg.dim, cfg.ffn_expansion, Activation::swish, rng),
      conv_(cfg.dim, cfg.conv_kernel, false, rng) {}

Tensor SqueezeformerBlock::forward(const Tensor& x, const ForwardContext& ctx) const {
  Tensor h = add(x, ln_attn_.forward(attn_.forward(x, std::nullopt, spec_)));
  h = add(h, ln_ffn1_.forward(ffn1_.forward(h, spec_)));
  h = add(h, ln_conv_.forward(conv_.forward(h, spec_, ctx)));
  return add(h, ln_ffn2_.forward(ffn2_.forward(h, spec_)));
}

void SqueezeformerBlock::collect(const std::string& prefix, ParameterList& out) const {
  attn_.collect(prefix + ".attn", out, spec_.any_quantized());
  ln_attn_.collect(prefix + ".ln_attn", out);
  ffn1_.collect(prefix + ".ffn1", out, spec_.any_quantized());
  ln_ffn1_.collect(prefix + ".ln_ffn1", out);
  conv_.collect(prefix + ".conv", out, spec_.any_quantized());
  ln_conv_.collect(prefix + ".ln_conv", out);
  ffn2_.collect(prefix + ".ffn2", out, spec_.any_quantized());
  ln_ffn2_.collect(prefix + ".ln_ffn2", out);
}

void SqueezeformerBlock::zero_output_projections() {
  attn_.zero_output_projection();
  ffn1_.out.zero();
  conv_.zero_output_projection();
  ffn2_.out.zero();
}

std::unique_ptr<Block> make_block(const EncoderConfig& cfg, const PrecisionSpec& spec, Rng& rng) {
  switch (cfg.kind) {
    case EncoderKind::vanilla:
    case EncoderKind::sparseformer:
      return std::make_unique<TransformerBlock>(cfg, spec, rng);
    case EncoderKind::conformer:
      return std::make_unique<ConformerBlock>(cfg, spec, rng);
    case EncoderKind::squeezeformer:
      return std::make_unique<SqueezeformerBlock>(cfg, spec, rng);
  }
  throw ConfigError("kind: unknown encoder kind");
}

Tensor sinusoidal_positions(std::size_t n, std::size_t dim) {
  std::vector<double> pe(n * dim);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      pe[t * dim + i] = std::sin(static_cast<double>(t) * freq);
      if (i + 1 < dim) pe[t * dim + i + 1] = std::cos(static_cast<double>(t) * freq);
    }
  return Tensor({n, dim}, std::move(pe));
}

Encoder::Encoder(const EncoderConfig& cfg, const PrecisionSpec& spec, std::uint64_t seed) : cfg_(cfg), spec_(spec) {
  cfg_.validate();
  Rng rng(seed);
  input_ = Linear(cfg_.input_dim, cfg_.dim, rng);
  blocks_.reserve(cfg_.layers);
  for (std::size_t i = 0; i < cfg_.layers; ++i) blocks_.push_back(make_block(cfg_, spec_, rng));
}

Tensor Encoder::run(const Tensor& features, const ForwardContext& ctx, std::vector<Tensor>* states) const {
  if (features.rank() != 2 || features.dim(1) != cfg_.input_dim) {
    throw DimensionError("encode: features " + shape_string(features.shape()) + " for input_dim " +
                         std::to_string(cfg_.input_dim));
  }
  const std::size_t n = features.dim(0);
  if (n > cfg_.max_positions) {
    throw DimensionError("encode: " + std::to_string(n) + " frames exceed max_positions " +
                         std::to_string(cfg_.max_positions));
  }
  // Input projection and positional encoding stay at full precision.
  Tensor x = add(input_.forward(features, PrecisionSpec::fp32()), sinusoidal_positions(n, cfg_.dim));
  if (states) states->push_back(x);

  const std::size_t factor = cfg_.subsample_factor;
  const bool subsample = cfg_.kind == EncoderKind::squeezeformer && factor > 1 && !blocks_.empty();
  const std::size_t pool_at = subsample ? cfg_.layers / 2 : std::numeric_limits<std::size_t>::max();
  if (subsample && n < factor) {
    throw SequenceTooShortError("encode: " + std::to_string(n) + " frames cannot be subsampled by " +
                                std::to_string(factor));
  }
  Tensor skip;
  bool pooled = false;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (i == pool_at) {
      skip = x;
      x = avg_pool_rows(x, factor);
      pooled = true;
    }
    x = blocks_[i]->forward(x, ctx);
    if (states) states->push_back(pooled ? upsample_rows(x, factor, n) : x);
  }
  if (pooled) x = add(upsample_rows(x, factor, n), skip);
  return x;
}

Tensor Encoder::encode(const Tensor& features, const ForwardContext& ctx) const { return run(features, ctx, nullptr); }

std::vector<Tensor> Encoder::hidden_states(const Tensor& features, const ForwardContext& ctx) const {
  std::vector<Tensor> states;
  run(features, ctx, &states);
  return states;
}

ParameterList Encoder::parameters() const {
  ParameterList out;
  input_.collect("encoder.input", out);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i]->collect("encoder.block" + std::to_string(i), out);
  return out;
}

std::size_t Encoder::block_parameter_count() const {
  ParameterList out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i]->collect("b" + std::to_string(i), out);
  return count_values(out, true);
}

Encoder build_encoder(const EncoderConfig& cfg, const PrecisionSpec& spec, std::uint64_t seed) {
  return Encoder(cfg, spec, seed);
}

}  // namespace binaformer
