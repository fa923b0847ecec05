#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "binaformer/config.hpp"
#include "binaformer/tensor.hpp"

namespace binaformer {

// Sparse attention decomposed into three differentiable sub-computations over
// a CSR pattern: scores on the allowed entries only, a per-row softmax over
// those entries, and the probability-weighted sum of value rows.

/// s[e] = scale * <q[i], k[j]> for every allowed entry e = (i, j). Result [nnz].
Tensor sparse_scores(const Tensor& q, const Tensor& k, const CsrPattern& pattern, double scale);
/// Softmax within each row's segment of a [nnz] score vector.
Tensor segment_softmax(const Tensor& scores, const CsrPattern& pattern);
/// out[i] = sum_e p[e] * v[j(e)] over row i's entries. Result [n x d].
Tensor sparse_weighted_sum(const Tensor& probs, const Tensor& v, const CsrPattern& pattern);

/// Applied to attention probabilities before they weight the values
/// (binarization under W1A1).
using ProbTransform = std::function<Tensor(const Tensor&)>;

/// Single-head dense attention softmax(q k^T * scale) v. When `allowed` is
/// given (row-major n x n), disallowed scores are filled with -inf first; the
/// diagonal is always kept so no row is empty.
Tensor dense_attention(const Tensor& q, const Tensor& k, const Tensor& v, double score_scale,
                       const std::optional<std::vector<bool>>& allowed = std::nullopt,
                       const ProbTransform& prob_transform = {});

}  // namespace binaformer
