#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <span>
#include <vector>

#include "binaformer/rng.hpp"
#include "binaformer/tensor.hpp"

namespace binaformer::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), rng.normal_vector(n, stddev), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

inline std::vector<double> to_vector(std::span<const double> s) { return {s.begin(), s.end()}; }

// Distinct values after grouping entries closer than tol.
inline std::vector<double> distinct_values(std::span<const double> v, double tol = 1e-12) {
  std::vector<double> sorted(v.begin(), v.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> out;
  for (double x : sorted)
    if (out.empty() || x - out.back() > tol) out.push_back(x);
  return out;
}

}  // namespace binaformer::test
