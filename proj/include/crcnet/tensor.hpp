#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace crcnet {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// A Tensor is a cheap handle: copies share storage, the way autograd
/// frameworks pass nodes around. Use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) {
    check_shape(shape);
    const std::size_t n = numel(shape);
    d_ = std::make_shared<Storage>(Storage{std::move(shape), std::vector<double>(n, fill), {}, false});
  }

  Tensor(Shape shape, std::vector<double> values) {
    check_shape(shape);
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + to_string(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    }
    d_ = std::make_shared<Storage>(Storage{std::move(shape), std::move(values), {}, false});
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t dim(std::size_t i) const { return d_->shape.at(i); }
  std::size_t size() const { return d_->values.size(); }

  std::span<const double> values() const { return d_->values; }
  std::span<double> data() { return d_->values; }
  double operator[](std::size_t i) const { return d_->values[i]; }

  double item() const {
    if (size() != 1) throw ShapeError("item(): tensor " + to_string(shape()) + " is not a scalar");
    return d_->values[0];
  }

  bool requires_grad() const { return d_ && d_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    d_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !d_->grad.empty(); }

  /// Gradient buffer, allocated as zeros on first access.
  std::span<double> grad() const {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
    return d_->grad;
  }

  void zero_grad() const { d_->grad.assign(d_->values.size(), 0.0); }
  void clear_grad() const {
    d_->grad.clear();
    d_->grad.shrink_to_fit();
  }

  /// Deep copy carrying the requires_grad flag but no gradient.
  Tensor clone() const {
    Tensor t(d_->shape, d_->values);
    t.d_->requires_grad = d_->requires_grad;
    return t;
  }

  /// Deep copy that is a constant for the tape.
  Tensor detach() const { return Tensor(d_->shape, d_->values); }

  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad;
  };

  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor: empty shape");
    for (std::size_t d : shape)
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + to_string(shape));
  }

  std::shared_ptr<Storage> d_;
};

/// Ordered record of backward closures for one forward pass.
class Tape {
 public:
  void record(std::function<void()> backward_fn) { entries_.push_back(std::move(backward_fn)); }

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Reverse accumulation from a scalar loss recorded on this tape.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw ShapeError("backward: loss must be a scalar");
    }
    if (!loss.requires_grad()) {
      throw std::logic_error("backward: loss was not produced through a recording tape");
    }
    loss.grad()[0] = 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> entries_;
};

namespace detail {
inline thread_local Tape* active_tape = nullptr;
}

/// Makes `tape` the recording tape of the current thread for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(detail::active_tape) { detail::active_tape = &tape; }
  ~TapeScope() { detail::active_tape = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording on the current thread (inference, detached branches).
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape) { detail::active_tape = nullptr; }
  ~NoGradScope() { detail::active_tape = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

/// Tape an op should record on, or nullptr when no input needs a gradient.
template <typename... Ts>
Tape* recording_tape(const Ts&... inputs) {
  if (detail::active_tape == nullptr) return nullptr;
  return (inputs.requires_grad() || ...) ? detail::active_tape : nullptr;
}

}  // namespace crcnet
