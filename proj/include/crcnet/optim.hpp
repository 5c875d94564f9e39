#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "crcnet/tensor.hpp"

namespace crcnet {

/// Momentum SGD: v <- momentum * v + g; w <- w - lr * v. Gradients are
/// released after each step, so every step needs a fresh backward pass.
class SgdOptimizer {
 public:
  SgdOptimizer(double learning_rate, double momentum = 0.9) : lr_(learning_rate), momentum_(momentum) {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("sgd: learning rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("sgd: momentum must lie in [0, 1)");
  }

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) {
    if (!(lr > 0.0)) throw std::invalid_argument("sgd: learning rate must be positive");
    lr_ = lr;
  }
  double momentum() const { return momentum_; }

  /// Tensors with requires_grad == false are skipped (frozen).
  void step(const std::vector<Tensor>& params) {
    if (velocity_.empty()) velocity_.resize(params.size());
    if (velocity_.size() != params.size()) throw std::logic_error("sgd: parameter list changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor& p = params[i];
      if (!p.requires_grad()) continue;
      if (!p.has_grad()) throw std::logic_error("sgd: missing gradient for parameter " + std::to_string(i));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor p = params[i];
      if (!p.requires_grad()) continue;
      auto g = p.grad();
      auto w = p.data();
      auto& v = velocity_[i];
      if (v.size() != w.size()) v.assign(w.size(), 0.0);
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = momentum_ * v[j] + g[j];
        w[j] -= lr_ * v[j];
      }
      p.clear_grad();
    }
  }

 private:
  double lr_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

/// Central-difference gradient of `f` with respect to every element of
/// `params`, perturbing values in place and restoring them afterwards.
inline std::vector<std::vector<double>> finite_diff_gradient(const std::function<double()>& f,
                                                             const std::vector<Tensor>& params, double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("finite_diff_gradient: epsilon must be positive");
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (Tensor p : params) {
    auto w = p.data();
    std::vector<double> g(w.size());
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double saved = w[j];
      w[j] = saved + epsilon;
      const double up = f();
      w[j] = saved - epsilon;
      const double down = f();
      w[j] = saved;
      g[j] = (up - down) / (2.0 * epsilon);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace crcnet
