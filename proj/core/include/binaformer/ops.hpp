#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "binaformer/tensor.hpp"

namespace binaformer {

// Differentiable primitives used by the encoder blocks. All ops check shapes
// and throw DimensionError naming the offending shapes. Broadcasting is limited
// to scalars (scale/add_scalar) and trailing-axis bias vectors (add_bias).

Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
/// x[..., d] + bias[d]
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor swish(const Tensor& x);
/// Exact (erf-based) GELU.
Tensor gelu(const Tensor& x);
/// Splits `axis` into halves [a | b] and returns a * sigmoid(b).
Tensor glu(const Tensor& x, std::size_t axis);

/// Softmax along `axis`, max-subtracted. -inf entries are allowed (they get
/// probability 0) as long as every slice keeps one finite entry; NaN and +inf
/// raise NumericError.
Tensor softmax(const Tensor& x, std::size_t axis);

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes over the last axis, then applies gain and bias (both [d]).
/// A constant row normalizes to zero, so its output is `bias`.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps);

/// Per-channel affine normalization of x[c x n] with fixed running statistics.
/// Statistics receive no gradient.
Tensor batch_norm_inference(const Tensor& x, std::span<const double> running_mean,
                            std::span<const double> running_var, const Tensor& gain, const Tensor& bias,
                            double eps = kLayerNormEps);

/// Replaces entries where fill[i] is true by `value`. Gradient flows only
/// through entries that are kept.
Tensor mask_fill(const Tensor& x, const std::vector<bool>& fill, double value);

Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Mean negative log-likelihood of labels under softmax(logits) over the rows
/// where `selected` is true (all rows when empty). Throws EmptyInputError if
/// no row is selected.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, const std::vector<bool>& selected = {});

enum class ConvMode { pointwise, full, depthwise };

/// Same-padded 1-D cross-correlation of x[c_in x n].
///   pointwise: w[c_out x c_in x 1]
///   full:      w[c_out x c_in x k]
///   depthwise: w[c x 1 x k]
/// stride 2 yields ceil(n / 2) outputs.
Tensor conv1d(const Tensor& x, const Tensor& w, ConvMode mode, std::size_t stride = 1);

// Row/column plumbing for multi-head attention and sequence resampling.
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
/// Average of consecutive groups of `factor` rows; the last group may be short.
Tensor avg_pool_rows(const Tensor& x, std::size_t factor);
/// Nearest-neighbour upsampling: out[t] = x[t / factor], t < out_rows.
Tensor upsample_rows(const Tensor& x, std::size_t factor, std::size_t out_rows);
/// Rows i with replace[i] set are replaced by `row` (shape [d]).
Tensor replace_rows(const Tensor& x, const std::vector<bool>& replace, const Tensor& row);
/// Mean over rows, giving shape [1 x d].
Tensor mean_rows(const Tensor& x);

}  // namespace binaformer
