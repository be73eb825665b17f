// Copyright 2026 The besa authors
// Licensed under the Apache License, Version 2.0
//
// Shared test utilities: deterministic RNG and finite-difference oracles.
// Everything here is independent of the library's backward implementations.

#ifndef BESA_TESTS_SUPPORT_HPP
#define BESA_TESTS_SUPPORT_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "besa/tensor.hpp"

namespace besa::testing {

inline std::mt19937_64 rng(std::uint64_t seed) { return std::mt19937_64(seed); }

inline double uniform(std::mt19937_64& g, double lo, double hi) {
  return lo + (hi - lo) * (static_cast<double>(g() >> 11) * 0x1.0p-53);
}

inline std::vector<double> random_values(std::mt19937_64& g, std::size_t n, double lo = -1.0,
                                         double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = uniform(g, lo, hi);
  return v;
}

inline Tensor random_tensor(std::mt19937_64& g, std::vector<std::size_t> shape, double lo = -1.0,
                            double hi = 1.0) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return Tensor::from(std::move(shape), random_values(g, n, lo, hi));
}

/// Central finite differences of a scalar function of one flat parameter
/// vector. The function must be re-evaluable from scratch on each call.
inline std::vector<double> central_differences(
    const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
    double step = 1e-5) {
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + step;
    const double hi = f(x);
    x[i] = keep - step;
    const double lo = f(x);
    x[i] = keep;
    grad[i] = (hi - lo) / (2.0 * step);
  }
  return grad;
}

/// Largest relative error between two gradient vectors, with an absolute
/// floor so near-zero entries compare sanely.
inline double max_rel_error(const std::vector<double>& got, const std::vector<double>& want,
                            double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double denom = std::max({std::fabs(got[i]), std::fabs(want[i]), floor});
    worst = std::max(worst, std::fabs(got[i] - want[i]) / denom);
  }
  return worst;
}

}  // namespace besa::testing

#endif  // BESA_TESTS_SUPPORT_HPP
