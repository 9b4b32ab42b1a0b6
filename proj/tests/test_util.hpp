#pragma once

#include "imdiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace imdiff::test {

inline Vector random_vector(Index n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

/// max_i |a_i - b_i| / max(max_i |b_i|, floor)
inline double rel_diff(const Vector& a, const Vector& b, double floor = 1e-300) {
  const double scale = std::max(b.cwiseAbs().maxCoeff(), floor);
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

inline double rel_diff(double a, double b, double floor = 1e-300) {
  return std::abs(a - b) / std::max(std::abs(b), floor);
}

}  // namespace imdiff::test
