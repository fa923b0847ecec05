#include "binaformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "binaformer/errors.hpp"

namespace binaformer {

using detail::make_result;
using detail::Node;

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                         shape_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Elementwise unary op with derivative expressed through input and output.
template <typename F, typename D>
Tensor unary(const Tensor& x, const char* name, F f, D dfdx) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return make_result(x.shape(), std::move(out), name, {x}, [dfdx](Node& self) {
    auto& xin = *self.inputs[0];
    if (!xin.requires_grad) return;
    auto& gx = xin.ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * dfdx(xin.value[i], self.value[i]);
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const auto A = a.data();
  const auto B = b.data();
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return make_result({m, n}, std::move(c), "matmul", {a, b}, [m, k, n](Node& self) {
    auto& an = *self.inputs[0];
    auto& bn = *self.inputs[1];
    const auto& g = self.grad;
    if (an.requires_grad) {
      auto& ga = an.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = bn.value.data() + p * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (bn.requires_grad) {
      auto& gb = bn.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = an.value[i * k + p];
          if (aip == 0.0) continue;
          double* gbrow = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
        }
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto A = a.data();
  const auto B = b.data();
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
  return make_result(a.shape(), std::move(out), "add", {a, b}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto A = a.data();
  const auto B = b.data();
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
  return make_result(a.shape(), std::move(out), "sub", {a, b}, [](Node& self) {
    if (self.inputs[0]->requires_grad) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto A = a.data();
  const auto B = b.data();
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  return make_result(a.shape(), std::move(out), "mul", {a, b}, [](Node& self) {
    auto& an = *self.inputs[0];
    auto& bn = *self.inputs[1];
    if (an.requires_grad) {
      auto& g = an.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn.value[i];
    }
    if (bn.requires_grad) {
      auto& g = bn.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an.value[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      x, "add_scalar", [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank(bias, 1, "add_bias");
  const std::size_t d = bias.dim(0);
  if (x.shape().back() != d) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match trailing axis of " +
                         shape_string(x.shape()));
  }
  const auto X = x.data();
  const auto B = bias.data();
  std::vector<double> out(X.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = X[i] + B[i % d];
  return make_result(x.shape(), std::move(out), "add_bias", {x, bias}, [d](Node& self) {
    if (self.inputs[0]->requires_grad) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % d] += self.grad[i];
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, "sigmoid", sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor swish(const Tensor& x) {
  return unary(
      x, "swish", [](double v) { return v * sigmoid_scalar(v); },
      [](double v, double) {
        const double s = sigmoid_scalar(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

Tensor glu(const Tensor& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis, "glu");
  if (s.len % 2 != 0) {
    throw DimensionError("glu: axis " + std::to_string(axis) + " of " + shape_string(x.shape()) + " is odd");
  }
  const std::size_t half = s.len / 2;
  Shape out_shape = x.shape();
  out_shape[axis] = half;
  const auto X = x.data();
  std::vector<double> out(s.outer * half * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < half; ++i)
      for (std::size_t j = 0; j < s.inner; ++j) {
        const double a = X[(o * s.len + i) * s.inner + j];
        const double b = X[(o * s.len + i + half) * s.inner + j];
        out[(o * half + i) * s.inner + j] = a * sigmoid_scalar(b);
      }
  return make_result(std::move(out_shape), std::move(out), "glu", {x}, [s, half](Node& self) {
    auto& xin = *self.inputs[0];
    if (!xin.requires_grad) return;
    auto& gx = xin.ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < half; ++i)
        for (std::size_t j = 0; j < s.inner; ++j) {
          const std::size_t ia = (o * s.len + i) * s.inner + j;
          const std::size_t ib = (o * s.len + i + half) * s.inner + j;
          const double g = self.grad[(o * half + i) * s.inner + j];
          const double sg = sigmoid_scalar(xin.value[ib]);
          gx[ia] += g * sg;
          gx[ib] += g * xin.value[ia] * sg * (1.0 - sg);
        }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis, "softmax");
  const auto X = x.data();
  std::vector<double> out(X.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.inner; ++j) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < s.len; ++i) {
        const double v = X[(o * s.len + i) * s.inner + j];
        if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
          throw NumericError("softmax: non-finite input");
        }
        mx = std::max(mx, v);
      }
      if (!std::isfinite(mx)) throw NumericError("softmax: every entry of a slice is -inf");
      double total = 0.0;
      for (std::size_t i = 0; i < s.len; ++i) {
        const std::size_t idx = (o * s.len + i) * s.inner + j;
        out[idx] = std::exp(X[idx] - mx);
        total += out[idx];
      }
      for (std::size_t i = 0; i < s.len; ++i) out[(o * s.len + i) * s.inner + j] /= total;
    }
  return make_result(x.shape(), std::move(out), "softmax", {x}, [s](Node& self) {
    auto& xin = *self.inputs[0];
    if (!xin.requires_grad) return;
    auto& gx = xin.ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t j = 0; j < s.inner; ++j) {
        double dot = 0.0;
        for (std::size_t i = 0; i < s.len; ++i) {
          const std::size_t idx = (o * s.len + i) * s.inner + j;
          dot += self.grad[idx] * self.value[idx];
        }
        for (std::size_t i = 0; i < s.len; ++i) {
          const std::size_t idx = (o * s.len + i) * s.inner + j;
          gx[idx] += self.value[idx] * (self.grad[idx] - dot);
        }
      }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank(gain, 1, "layer_norm");
  require_rank(bias, 1, "layer_norm");
  const std::size_t d = x.shape().back();
  if (gain.dim(0) != d || bias.dim(0) != d) {
    throw DimensionError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " +
                         shape_string(bias.shape()) + " vs input " + shape_string(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const auto X = x.data();
  const auto G = gain.data();
  const auto B = bias.data();
  std::vector<double> out(X.size());
  std::vector<double> xhat(X.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data() + r * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += xr[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      xhat[r * d + i] = (xr[i] - mu) * inv_std[r];
      out[r * d + i] = xhat[r * d + i] * G[i] + B[i];
    }
  }
  return make_result(x.shape(), std::move(out), "layer_norm", {x, gain, bias},
                     [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       auto& xin = *self.inputs[0];
                       auto& gn = *self.inputs[1];
                       auto& bn = *self.inputs[2];
                       const auto& g = self.grad;
                       if (gn.requires_grad) {
                         auto& gg = gn.ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * xhat[i];
                       }
                       if (bn.requires_grad) {
                         auto& gb = bn.ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
                       }
                       if (!xin.requires_grad) return;
                       auto& gx = xin.ensure_grad();
                       std::vector<double> dxhat(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double m1 = 0.0, m2 = 0.0;
                         for (std::size_t i = 0; i < d; ++i) {
                           dxhat[i] = g[r * d + i] * gn.value[i];
                           m1 += dxhat[i];
                           m2 += dxhat[i] * xhat[r * d + i];
                         }
                         m1 /= static_cast<double>(d);
                         m2 /= static_cast<double>(d);
                         for (std::size_t i = 0; i < d; ++i) {
                           gx[r * d + i] += inv_std[r] * (dxhat[i] - m1 - xhat[r * d + i] * m2);
                         }
                       }
                     });
}

Tensor batch_norm_inference(const Tensor& x, std::span<const double> running_mean,
                            std::span<const double> running_var, const Tensor& gain, const Tensor& bias,
                            double eps) {
  require_rank(x, 2, "batch_norm_inference");
  const std::size_t c = x.dim(0), n = x.dim(1);
  if (running_mean.size() != c || running_var.size() != c || gain.numel() != c || bias.numel() != c) {
    throw DimensionError("batch_norm_inference: channel statistics do not match input " +
                         shape_string(x.shape()));
  }
  std::vector<double> inv(c);
  for (std::size_t ch = 0; ch < c; ++ch) inv[ch] = 1.0 / std::sqrt(running_var[ch] + eps);
  std::vector<double> mu(running_mean.begin(), running_mean.end());
  const auto X = x.data();
  const auto G = gain.data();
  const auto B = bias.data();
  std::vector<double> out(X.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t t = 0; t < n; ++t) out[ch * n + t] = (X[ch * n + t] - mu[ch]) * inv[ch] * G[ch] + B[ch];
  return make_result(x.shape(), std::move(out), "batch_norm_inference", {x, gain, bias},
                     [c, n, inv = std::move(inv), mu = std::move(mu)](Node& self) {
                       auto& xin = *self.inputs[0];
                       auto& gn = *self.inputs[1];
                       auto& bn = *self.inputs[2];
                       const auto& g = self.grad;
                       for (std::size_t ch = 0; ch < c; ++ch) {
                         double sg = 0.0, sgx = 0.0;
                         for (std::size_t t = 0; t < n; ++t) {
                           const std::size_t idx = ch * n + t;
                           sg += g[idx];
                           sgx += g[idx] * (xin.value[idx] - mu[ch]) * inv[ch];
                           if (xin.requires_grad) xin.ensure_grad()[idx] += g[idx] * inv[ch] * gn.value[ch];
                         }
                         if (gn.requires_grad) gn.ensure_grad()[ch] += sgx;
                         if (bn.requires_grad) bn.ensure_grad()[ch] += sg;
                       }
                     });
}

Tensor mask_fill(const Tensor& x, const std::vector<bool>& fill, double value) {
  if (fill.size() != x.numel()) {
    throw DimensionError("mask_fill: mask of " + std::to_string(fill.size()) + " entries for tensor " +
                         shape_string(x.shape()));
  }
  const auto X = x.data();
  std::vector<double> out(X.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fill[i] ? value : X[i];
  return make_result(x.shape(), std::move(out), "mask_fill", {x}, [fill](Node& self) {
    auto& xin = *self.inputs[0];
    if (!xin.requires_grad) return;
    auto& gx = xin.ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (!fill[i]) gx[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  const auto X = x.data();
  std::vector<double> out(X.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = X[i * c + j];
  return make_result({c, r}, std::move(out), "transpose", {x}, [r, c](Node& self) {
    auto& xin = *self.inputs[0];
    if (!xin.requires_grad) return;
    auto& gx = xin.ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += self.grad[j * r + i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), "reshape", {x}, [](Node& self) {
    auto& xin = *self.inputs[0];
    if (!xin.requires_grad) return;
    auto& gx = xin.ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result({1}, {total}, "sum", {x}, [](Node& self) {
    auto& xin = *self.inputs[0];
    if (!xin.requires_grad) return;
    auto& gx = xin.ensure_grad();
    for (auto& g : gx) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, const std::vector<bool>& selected) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_string(logits.shape()));
  }
  if (!selected.empty() && selected.size() != n) {
    throw DimensionError("cross_entropy: selection of " + std::to_string(selected.size()) + " rows for logits " +
                         shape_string(logits.shape()));
  }
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < n; ++i)
    if (selected.empty() || selected[i]) rows.push_back(i);
  if (rows.empty()) throw EmptyInputError("cross_entropy: no selected rows");

  const auto L = logits.data();
  std::vector<double> probs(rows.size() * k);
  std::vector<int> targets(rows.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::size_t i = rows[r];
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw DimensionError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
    }
    targets[r] = y;
    const double* row = L.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += std::exp(row[j] - mx);
    const double log_z = mx + std::log(total);
    loss += log_z - row[y];
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(row[j] - log_z);
  }
  const double count = static_cast<double>(rows.size());
  loss /= count;
  return make_result({1}, {loss}, "cross_entropy", {logits},
                     [k, count, rows = std::move(rows), probs = std::move(probs),
                      targets = std::move(targets)](Node& self) {
                       auto& lin = *self.inputs[0];
                       if (!lin.requires_grad) return;
                       auto& gl = lin.ensure_grad();
                       const double g = self.grad[0] / count;
                       for (std::size_t r = 0; r < rows.size(); ++r) {
                         for (std::size_t j = 0; j < k; ++j) {
                           const double indicator = static_cast<int>(j) == targets[r] ? 1.0 : 0.0;
                           gl[rows[r] * k + j] += g * (probs[r * k + j] - indicator);
                         }
                       }
                     });
}

Tensor conv1d(const Tensor& x, const Tensor& w, ConvMode mode, std::size_t stride) {
  require_rank(x, 2, "conv1d");
  require_rank(w, 3, "conv1d");
  if (stride != 1 && stride != 2) throw DimensionError("conv1d: stride must be 1 or 2");
  const std::size_t c_in = x.dim(0), n = x.dim(1);
  const std::size_t c_out = w.dim(0), k = w.dim(2);
  switch (mode) {
    case ConvMode::pointwise:
      if (k != 1 || w.dim(1) != c_in) {
        throw DimensionError("conv1d(pointwise): weight " + shape_string(w.shape()) + " for input " +
                             shape_string(x.shape()));
      }
      break;
    case ConvMode::full:
      if (w.dim(1) != c_in) {
        throw DimensionError("conv1d: weight " + shape_string(w.shape()) + " for input " + shape_string(x.shape()));
      }
      break;
    case ConvMode::depthwise:
      if (w.dim(1) != 1 || c_out != c_in) {
        throw DimensionError("conv1d(depthwise): weight " + shape_string(w.shape()) + " for input " +
                             shape_string(x.shape()));
      }
      break;
  }
  const std::size_t pad_left = (k - 1) / 2;
  const std::size_t pad_right = k - 1 - pad_left;
  if (k > n + pad_left + pad_right) {
    throw DimensionError("conv1d: kernel " + std::to_string(k) + " wider than padded input " +
                         shape_string(x.shape()));
  }
  const std::size_t n_out = (n + stride - 1) / stride;
  const bool depthwise = mode == ConvMode::depthwise;
  const std::size_t w_cin = depthwise ? 1 : c_in;
  const auto X = x.data();
  const auto W = w.data();
  std::vector<double> out(c_out * n_out, 0.0);

  // Visits every (out channel, in channel, tap, out step) with a valid input
  // position. `body(o, c, j, t, src)` gets flat indices into w, x and out.
  auto for_each_tap = [=](auto&& body) {
    for (std::size_t o = 0; o < c_out; ++o) {
      for (std::size_t ci = 0; ci < w_cin; ++ci) {
        const std::size_t c = depthwise ? o : ci;
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t widx = (o * w_cin + ci) * k + j;
          for (std::size_t t = 0; t < n_out; ++t) {
            const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * stride + j) - static_cast<std::ptrdiff_t>(pad_left);
            if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(n)) continue;
            body(widx, c * n + static_cast<std::size_t>(pos), o * n_out + t);
          }
        }
      }
    }
  };
  for_each_tap([&](std::size_t wi, std::size_t xi, std::size_t oi) { out[oi] += W[wi] * X[xi]; });

  return make_result({c_out, n_out}, std::move(out), "conv1d", {x, w}, [for_each_tap](Node& self) {
    auto& xin = *self.inputs[0];
    auto& win = *self.inputs[1];
    double* gx = xin.requires_grad ? xin.ensure_grad().data() : nullptr;
    double* gw = win.requires_grad ? win.ensure_grad().data() : nullptr;
    const auto& g = self.grad;
    for_each_tap([&](std::size_t wi, std::size_t xi, std::size_t oi) {
      if (gx) gx[xi] += g[oi] * win.value[wi];
      if (gw) gw[wi] += g[oi] * xin.value[xi];
    });
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_cols");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (begin >= end || end > c) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) + ") outside " +
                         shape_string(x.shape()));
  }
  const std::size_t w = end - begin;
  const auto X = x.data();
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = X[i * c + begin + j];
  return make_result({r, w}, std::move(out), "slice_cols", {x}, [r, c, w, begin](Node& self) {
    auto& xin = *self.inputs[0];
    if (!xin.requires_grad) return;
    auto& gx = xin.ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) gx[i * c + begin + j] += self.grad[i * w + j];
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw EmptyInputError("concat_cols: no inputs");
  const std::size_t r = parts[0].dim(0);
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != r) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(parts[0].shape()) + " vs " +
                           shape_string(p.shape()));
    }
    offsets.push_back(total);
    total += p.dim(1);
  }
  std::vector<double> out(r * total);
  for (std::size_t q = 0; q < parts.size(); ++q) {
    const auto P = parts[q].data();
    const std::size_t w = parts[q].dim(1);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + offsets[q] + j] = P[i * w + j];
  }
  return make_result({r, total}, std::move(out), "concat_cols", parts, [r, total, offsets](Node& self) {
    for (std::size_t q = 0; q < self.inputs.size(); ++q) {
      auto& in = *self.inputs[q];
      if (!in.requires_grad) continue;
      auto& g = in.ensure_grad();
      const std::size_t w = in.shape[1];
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * total + offsets[q] + j];
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw EmptyInputError("concat_rows: no inputs");
  const std::size_t c = parts[0].dim(1);
  std::size_t rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != c) {
      throw DimensionError("concat_rows: column mismatch " + shape_string(parts[0].shape()) + " vs " +
                           shape_string(p.shape()));
    }
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return make_result({rows, c}, std::move(out), "concat_rows", parts, [](Node& self) {
    std::size_t offset = 0;
    for (auto& in : self.inputs) {
      const std::size_t len = in->value.size();
      if (in->requires_grad) {
        auto& g = in->ensure_grad();
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offset + i];
      }
      offset += len;
    }
  });
}

Tensor avg_pool_rows(const Tensor& x, std::size_t factor) {
  require_rank(x, 2, "avg_pool_rows");
  if (factor == 0) throw DimensionError("avg_pool_rows: factor must be positive");
  const std::size_t n = x.dim(0), d = x.dim(1);
  const std::size_t m = (n + factor - 1) / factor;
  const auto X = x.data();
  std::vector<double> out(m * d, 0.0);
  for (std::size_t t = 0; t < m; ++t) {
    const std::size_t lo = t * factor, hi = std::min(n, lo + factor);
    const double inv = 1.0 / static_cast<double>(hi - lo);
    for (std::size_t s = lo; s < hi; ++s)
      for (std::size_t j = 0; j < d; ++j) out[t * d + j] += X[s * d + j] * inv;
  }
  return make_result({m, d}, std::move(out), "avg_pool_rows", {x}, [n, d, m, factor](Node& self) {
    auto& xin = *self.inputs[0];
    if (!xin.requires_grad) return;
    auto& gx = xin.ensure_grad();
    for (std::size_t t = 0; t < m; ++t) {
      const std::size_t lo = t * factor, hi = std::min(n, lo + factor);
      const double inv = 1.0 / static_cast<double>(hi - lo);
      for (std::size_t s = lo; s < hi; ++s)
        for (std::size_t j = 0; j < d; ++j) gx[s * d + j] += self.grad[t * d + j] * inv;
    }
  });
}

Tensor upsample_rows(const Tensor& x, std::size_t factor, std::size_t out_rows) {
  require_rank(x, 2, "upsample_rows");
  const std::size_t m = x.dim(0), d = x.dim(1);
  if (factor == 0 || (out_rows + factor - 1) / factor > m) {
    throw DimensionError("upsample_rows: cannot produce " + std::to_string(out_rows) + " rows from " +
                         shape_string(x.shape()) + " with factor " + std::to_string(factor));
  }
  const auto X = x.data();
  std::vector<double> out(out_rows * d);
  for (std::size_t t = 0; t < out_rows; ++t)
    for (std::size_t j = 0; j < d; ++j) out[t * d + j] = X[(t / factor) * d + j];
  return make_result({out_rows, d}, std::move(out), "upsample_rows", {x}, [d, factor, out_rows](Node& self) {
    auto& xin = *self.inputs[0];
    if (!xin.requires_grad) return;
    auto& gx = xin.ensure_grad();
    for (std::size_t t = 0; t < out_rows; ++t)
      for (std::size_t j = 0; j < d; ++j) gx[(t / factor) * d + j] += self.grad[t * d + j];
  });
}

Tensor replace_rows(const Tensor& x, const std::vector<bool>& replace, const Tensor& row) {
  require_rank(x, 2, "replace_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (replace.size() != n || row.numel() != d) {
    throw DimensionError("replace_rows: mask/row do not match " + shape_string(x.shape()));
  }
  const auto X = x.data();
  const auto R = row.data();
  std::vector<double> out(X.begin(), X.end());
  for (std::size_t i = 0; i < n; ++i)
    if (replace[i]) std::copy(R.begin(), R.end(), out.begin() + static_cast<std::ptrdiff_t>(i * d));
  return make_result(x.shape(), std::move(out), "replace_rows", {x, row}, [n, d, replace](Node& self) {
    auto& xin = *self.inputs[0];
    auto& rin = *self.inputs[1];
    double* gx = xin.requires_grad ? xin.ensure_grad().data() : nullptr;
    double* gr = rin.requires_grad ? rin.ensure_grad().data() : nullptr;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double g = self.grad[i * d + j];
        if (replace[i]) {
          if (gr) gr[j] += g;
        } else if (gx) {
          gx[i * d + j] += g;
        }
      }
  });
}

Tensor mean_rows(const Tensor& x) {
  require_rank(x, 2, "mean_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  const auto X = x.data();
  std::vector<double> out(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += X[i * d + j];
  for (auto& v : out) v /= static_cast<double>(n);
  return make_result({1, d}, std::move(out), "mean_rows", {x}, [n, d](Node& self) {
    auto& xin = *self.inputs[0];
    if (!xin.requires_grad) return;
    auto& gx = xin.ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += self.grad[j] / static_cast<double>(n);
  });
}

}  // namespace binaformer
