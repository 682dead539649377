// Shared oracles and helpers for the test suites.
#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "gcct/autodiff.hpp"
#include "gcct/tensor.hpp"

namespace testutil {

using gcct::Tensor;
using gcct::Var;

// Central finite differences of a scalar-valued function wrt every element of x.
// The function receives a fresh tensor; it must not cache state across calls.
inline Tensor<double> fd_gradient(const std::function<double(const Tensor<double>&)>& f,
                                  const Tensor<double>& x, double eps = 1e-6) {
  Tensor<double> g(x.shape());
  Tensor<double> probe = x.clone();
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double hi = f(probe);
    probe[i] = orig - eps;
    const double lo = f(probe);
    probe[i] = orig;
    g[i] = (hi - lo) / (2.0 * eps);
  }
  return g;
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs(const Tensor<double>& a) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i]));
  return m;
}

template <typename T>
double rel_err(T got, T want) {
  const double denom = std::max(1e-12, std::abs(static_cast<double>(want)));
  return std::abs(static_cast<double>(got - want)) / denom;
}

}  // namespace testutil
