#pragma once

#include <cmath>
#include <random>
#include <span>
#include <algorithm>
#include <vector>

#include "crcnet/tensor.hpp"

namespace crcnet::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

inline Tensor random_param(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = random_tensor(std::move(shape), rng, lo, hi);
  t.set_requires_grad(true);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Elementwise tolerance max(abs_floor, rel * |g|) between analytic and numeric gradients.
inline bool gradients_close(std::span<const double> analytic, const std::vector<double>& numeric, double rel,
                            double abs_floor, double* worst = nullptr) {
  bool ok = true;
  double w = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double err = std::abs(analytic[i] - numeric[i]);
    const double tol = std::max(abs_floor, rel * std::abs(numeric[i]));
    w = std::max(w, err / std::max(tol, 1e-300));
    if (err > tol) ok = false;
  }
  if (worst) *worst = w;
  return ok;
}

}  // namespace crcnet::testing
