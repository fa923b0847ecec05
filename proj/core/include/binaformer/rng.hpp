#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace binaformer {

/// Seeded generator shared by initializers, corpus synthesis and masking.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
  bool bernoulli(double p) { return uniform() < p; }

  std::vector<double> normal_vector(std::size_t n, double stddev) {
    std::vector<double> v(n);
    for (auto& x : v) x = normal(0.0, stddev);
    return v;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace binaformer
