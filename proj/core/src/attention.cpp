#include "binaformer/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "binaformer/errors.hpp"
#include "binaformer/ops.hpp"

namespace binaformer {

using detail::make_result;
using detail::Node;

namespace {

void check_rows(const Tensor& t, const CsrPattern& p, const char* op) {
  if (t.rank() != 2 || t.dim(0) != p.n) {
    throw DimensionError(std::string(op) + ": tensor " + shape_string(t.shape()) + " for pattern over " +
                         std::to_string(p.n) + " positions");
  }
}

void check_nnz(const Tensor& t, const CsrPattern& p, const char* op) {
  if (t.numel() != p.nonzeros()) {
    throw DimensionError(std::string(op) + ": " + std::to_string(t.numel()) + " entries for pattern with " +
                         std::to_string(p.nonzeros()) + " nonzeros");
  }
}

}  // namespace

Tensor sparse_scores(const Tensor& q, const Tensor& k, const CsrPattern& pattern, double scale) {
  check_rows(q, pattern, "sparse_scores");
  check_rows(k, pattern, "sparse_scores");
  if (q.dim(1) != k.dim(1)) {
    throw DimensionError("sparse_scores: query " + shape_string(q.shape()) + " vs key " + shape_string(k.shape()));
  }
  if (pattern.nonzeros() == 0) throw EmptyInputError("sparse_scores: empty pattern");
  const std::size_t d = q.dim(1);
  const auto Q = q.data();
  const auto K = k.data();
  std::vector<double> out(pattern.nonzeros());
  for (std::size_t i = 0; i < pattern.n; ++i)
    for (std::size_t e = pattern.row_ptr[i]; e < pattern.row_ptr[i + 1]; ++e) {
      const std::size_t j = pattern.cols[e];
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += Q[i * d + c] * K[j * d + c];
      out[e] = acc * scale;
    }
  return make_result({pattern.nonzeros()}, std::move(out), "sparse_scores", {q, k},
                     [pattern, d, scale](Node& self) {
                       auto& qn = *self.inputs[0];
                       auto& kn = *self.inputs[1];
                       double* gq = qn.requires_grad ? qn.ensure_grad().data() : nullptr;
                       double* gk = kn.requires_grad ? kn.ensure_grad().data() : nullptr;
                       for (std::size_t i = 0; i < pattern.n; ++i)
                         for (std::size_t e = pattern.row_ptr[i]; e < pattern.row_ptr[i + 1]; ++e) {
                           const std::size_t j = pattern.cols[e];
                           const double g = self.grad[e] * scale;
                           for (std::size_t c = 0; c < d; ++c) {
                             if (gq) gq[i * d + c] += g * kn.value[j * d + c];
                             if (gk) gk[j * d + c] += g * qn.value[i * d + c];
                           }
                         }
                     });
}

Tensor segment_softmax(const Tensor& scores, const CsrPattern& pattern) {
  check_nnz(scores, pattern, "segment_softmax");
  const auto S = scores.data();
  std::vector<double> out(S.size());
  for (std::size_t i = 0; i < pattern.n; ++i) {
    const std::size_t lo = pattern.row_ptr[i], hi = pattern.row_ptr[i + 1];
    if (lo == hi) throw NumericError("segment_softmax: row " + std::to_string(i) + " has no allowed entries");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t e = lo; e < hi; ++e) {
      if (!std::isfinite(S[e])) throw NumericError("segment_softmax: non-finite score");
      mx = std::max(mx, S[e]);
    }
    double total = 0.0;
    for (std::size_t e = lo; e < hi; ++e) {
      out[e] = std::exp(S[e] - mx);
      total += out[e];
    }
    for (std::size_t e = lo; e < hi; ++e) out[e] /= total;
  }
  return make_result(scores.shape(), std::move(out), "segment_softmax", {scores}, [pattern](Node& self) {
    auto& sn = *self.inputs[0];
    if (!sn.requires_grad) return;
    auto& gs = sn.ensure_grad();
    for (std::size_t i = 0; i < pattern.n; ++i) {
      const std::size_t lo = pattern.row_ptr[i], hi = pattern.row_ptr[i + 1];
      double dot = 0.0;
      for (std::size_t e = lo; e < hi; ++e) dot += self.grad[e] * self.value[e];
      for (std::size_t e = lo; e < hi; ++e) gs[e] += self.value[e] * (self.grad[e] - dot);
    }
  });
}

Tensor sparse_weighted_sum(const Tensor& probs, const Tensor& v, const CsrPattern& pattern) {
  check_nnz(probs, pattern, "sparse_weighted_sum");
  check_rows(v, pattern, "sparse_weighted_sum");
  const std::size_t d = v.dim(1);
  const auto P = probs.data();
  const auto V = v.data();
  std::vector<double> out(pattern.n * d, 0.0);
  for (std::size_t i = 0; i < pattern.n; ++i)
    for (std::size_t e = pattern.row_ptr[i]; e < pattern.row_ptr[i + 1]; ++e) {
      const std::size_t j = pattern.cols[e];
      for (std::size_t c = 0; c < d; ++c) out[i * d + c] += P[e] * V[j * d + c];
    }
  return make_result({pattern.n, d}, std::move(out), "sparse_weighted_sum", {probs, v}, [pattern, d](Node& self) {
    auto& pn = *self.inputs[0];
    auto& vn = *self.inputs[1];
    double* gp = pn.requires_grad ? pn.ensure_grad().data() : nullptr;
    double* gv = vn.requires_grad ? vn.ensure_grad().data() : nullptr;
    for (std::size_t i = 0; i < pattern.n; ++i)
      for (std::size_t e = pattern.row_ptr[i]; e < pattern.row_ptr[i + 1]; ++e) {
        const std::size_t j = pattern.cols[e];
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double g = self.grad[i * d + c];
          acc += g * vn.value[j * d + c];
          if (gv) gv[j * d + c] += pn.value[e] * g;
        }
        if (gp) gp[e] += acc;
      }
  });
}

Tensor dense_attention(const Tensor& q, const Tensor& k, const Tensor& v, double score_scale,
                       const std::optional<std::vector<bool>>& allowed, const ProbTransform& prob_transform) {
  Tensor scores = scale(matmul(q, transpose(k)), score_scale);
  if (allowed) {
    const std::size_t n = q.dim(0);
    std::vector<bool> fill(allowed->size());
    for (std::size_t i = 0; i < fill.size(); ++i) fill[i] = !(*allowed)[i] && (i / n != i % n);
    scores = mask_fill(scores, fill, -std::numeric_limits<double>::infinity());
  }
  Tensor probs = softmax(scores, 1);
  if (prob_transform) probs = prob_transform(probs);
  return matmul(probs, v);
}

}  // namespace binaformer
