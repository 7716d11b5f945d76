#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>

#include "fedsim/matrix.hpp"

namespace testutil {

inline fedsim::Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed,
                                    double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  fedsim::Matrix m(r, c);
  for (double& v : m.values()) v = dist(rng);
  return m;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

inline double max_abs_diff(const fedsim::Matrix& a, const fedsim::Matrix& b) {
  return max_abs_diff(a.values(), b.values());
}

}  // namespace testutil
