#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "crcnet/tensor.hpp"

namespace crcnet {

enum class Activation { relu, sigmoid, softmax_rows };

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> values, Tape* tape) {
  Tensor out(std::move(shape), std::move(values));
  if (tape) out.set_requires_grad(true);
  return out;
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

// C(MxN) += A(MxK) * B(KxN)
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
  MutMap(c, M, N).noalias() += ConstMap(a, M, K) * ConstMap(b, K, N);
}

// C(MxN) += A(MxK) * B(NxK)^T
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
  MutMap(c, M, N).noalias() += ConstMap(a, M, K) * ConstMap(b, N, K).transpose();
}

// C(MxN) += A(KxM)^T * B(KxN)
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
  MutMap(c, M, N).noalias() += ConstMap(a, K, M).transpose() * ConstMap(b, K, N);
}

inline void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(x.shape()));
  }
}

// True when `small` is C x 1 x 1 and `big` is C x H x W.
inline bool is_channel_broadcast(const Tensor& big, const Tensor& small) {
  return big.rank() == 3 && small.rank() == 3 && small.dim(0) == big.dim(0) && small.dim(1) == 1 &&
         small.dim(2) == 1 && (big.dim(1) != 1 || big.dim(2) != 1);
}

struct ResizeTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w;
};

// Corner-aligned sampling positions: output 0 maps to input 0, output n-1 to input N-1.
inline ResizeTaps resize_taps(std::size_t in, std::size_t out) {
  ResizeTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.w.resize(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double src =
        out > 1 ? static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
    std::size_t lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in - 1);
    t.w[i] = src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace detail

inline Tensor relu(const Tensor& x) {
  Tape* tape = recording_tape(x);
  std::vector<double> v(x.values().begin(), x.values().end());
  for (double& e : v) e = e > 0.0 ? e : 0.0;
  Tensor out = detail::make_result(x.shape(), std::move(v), tape);
  if (tape) {
    tape->record([x, out] {
      if (!out.has_grad() || !x.requires_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      auto xv = x.values();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv[i] > 0.0) gx[i] += g[i];
    });
  }
  return out;
}

inline Tensor sigmoid(const Tensor& x) {
  Tape* tape = recording_tape(x);
  std::vector<double> v(x.values().begin(), x.values().end());
  for (double& e : v) e = e >= 0.0 ? 1.0 / (1.0 + std::exp(-e)) : std::exp(e) / (1.0 + std::exp(e));
  Tensor out = detail::make_result(x.shape(), std::move(v), tape);
  if (tape) {
    tape->record([x, out] {
      if (!out.has_grad() || !x.requires_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      auto y = out.values();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
    });
  }
  return out;
}

/// Row-wise softmax of a 2-D tensor, with max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("softmax_rows: expected 2-D input, got " + to_string(x.shape()));
  Tape* tape = recording_tape(x);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  auto xv = x.values();
  std::vector<double> v(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * cols;
    double* o = v.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sum += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= sum;
  }
  Tensor out = detail::make_result(x.shape(), std::move(v), tape);
  if (tape) {
    tape->record([x, out, rows, cols] {
      if (!out.has_grad() || !x.requires_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      auto y = out.values();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += g[base + c] * y[base + c];
        for (std::size_t c = 0; c < cols; ++c) gx[base + c] += y[base + c] * (g[base + c] - dot);
      }
    });
  }
  return out;
}

inline Tensor activate(const Tensor& x, Activation kind) {
  switch (kind) {
    case Activation::relu: return relu(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::softmax_rows: return softmax_rows(x);
  }
  throw std::invalid_argument("activate: unknown activation");
}

/// Per-pixel softmax across the channel axis of a C x H x W map.
inline Tensor softmax_channels(const Tensor& x) {
  detail::require_rank(x, 3, "softmax_channels");
  Tape* tape = recording_tape(x);
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  auto xv = x.values();
  std::vector<double> v(x.size());
  for (std::size_t p = 0; p < plane; ++p) {
    double mx = xv[p];
    for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, xv[k * plane + p]);
    double sum = 0.0;
    for (std::size_t k = 0; k < c; ++k) sum += (v[k * plane + p] = std::exp(xv[k * plane + p] - mx));
    for (std::size_t k = 0; k < c; ++k) v[k * plane + p] /= sum;
  }
  Tensor out = detail::make_result(x.shape(), std::move(v), tape);
  if (tape) {
    tape->record([x, out, c, plane] {
      if (!out.has_grad() || !x.requires_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      auto y = out.values();
      for (std::size_t p = 0; p < plane; ++p) {
        double dot = 0.0;
        for (std::size_t k = 0; k < c; ++k) dot += g[k * plane + p] * y[k * plane + p];
        for (std::size_t k = 0; k < c; ++k) gx[k * plane + p] += y[k * plane + p] * (g[k * plane + p] - dot);
      }
    });
  }
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  Tape* tape = recording_tape(a, b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(m * n, 0.0);
  detail::gemm_nn(m, n, k, a.values().data(), b.values().data(), v.data());
  Tensor out = detail::make_result({m, n}, std::move(v), tape);
  if (tape) {
    tape->record([a, b, out, m, n, k] {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      if (a.requires_grad()) detail::gemm_nt(m, k, n, g, b.values().data(), a.grad().data());
      if (b.requires_grad()) detail::gemm_tn(k, n, m, a.values().data(), g, b.grad().data());
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  Tape* tape = recording_tape(a);
  const std::size_t r = a.dim(0), c = a.dim(1);
  auto av = a.values();
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[j * r + i] = av[i * c + j];
  Tensor out = detail::make_result({c, r}, std::move(v), tape);
  if (tape) {
    tape->record([a, out, r, c] {
      if (!out.has_grad() || !a.requires_grad()) return;
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    });
  }
  return out;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Tape* tape = recording_tape(x);
  Tensor out = detail::make_result(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()), tape);
  if (tape) {
    tape->record([x, out] {
      if (!out.has_grad() || !x.requires_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
  std::size_t dilation = 1;
};

/// Cross-correlation of a C_in x H x W map with a C_out x C_in x kh x kw kernel,
/// zero padding. Lowered to im2col + GEMM.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Conv2dOptions& opt) {
  detail::require_rank(input, 3, "conv2d input");
  detail::require_rank(kernel, 4, "conv2d kernel");
  if (opt.stride == 0 || opt.dilation == 0) throw std::invalid_argument("conv2d: stride and dilation must be positive");
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != cin) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) + " input channels, got " +
                     std::to_string(cin));
  }
  const long span_h = static_cast<long>(h + 2 * opt.pad_h) - static_cast<long>(opt.dilation * (kh - 1)) - 1;
  const long span_w = static_cast<long>(w + 2 * opt.pad_w) - static_cast<long>(opt.dilation * (kw - 1)) - 1;
  if (span_h < 0 || span_w < 0) {
    throw ShapeError("conv2d: empty output for input " + to_string(input.shape()) + " and kernel " +
                     to_string(kernel.shape()));
  }
  const std::size_t oh = static_cast<std::size_t>(span_h) / opt.stride + 1;
  const std::size_t ow = static_cast<std::size_t>(span_w) / opt.stride + 1;
  const std::size_t kdim = cin * kh * kw, positions = oh * ow;

  auto in = input.values();
  std::vector<double> col(kdim * positions, 0.0);
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        double* row = col.data() + ((c * kh + ki) * kw + kj) * positions;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * opt.stride + ki * opt.dilation) - static_cast<long>(opt.pad_h);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          const double* src = in.data() + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * opt.stride + kj * opt.dilation) - static_cast<long>(opt.pad_w);
            if (ix >= 0 && ix < static_cast<long>(w)) row[oy * ow + ox] = src[ix];
          }
        }
      }
    }
  }

  Tape* tape = recording_tape(input, kernel);
  std::vector<double> v(cout * positions, 0.0);
  detail::gemm_nn(cout, positions, kdim, kernel.values().data(), col.data(), v.data());
  Tensor out = detail::make_result({cout, oh, ow}, std::move(v), tape);
  if (tape) {
    tape->record([input, kernel, out, opt, col = std::move(col), cin, h, w, cout, kh, kw, oh, ow, kdim, positions] {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      if (kernel.requires_grad()) detail::gemm_nt(cout, kdim, positions, g, col.data(), kernel.grad().data());
      if (!input.requires_grad()) return;
      std::vector<double> dcol(kdim * positions, 0.0);
      detail::gemm_tn(kdim, positions, cout, kernel.values().data(), g, dcol.data());
      auto gin = input.grad();
      for (std::size_t c = 0; c < cin; ++c) {
        for (std::size_t ki = 0; ki < kh; ++ki) {
          for (std::size_t kj = 0; kj < kw; ++kj) {
            const double* row = dcol.data() + ((c * kh + ki) * kw + kj) * positions;
            for (std::size_t oy = 0; oy < oh; ++oy) {
              const long iy = static_cast<long>(oy * opt.stride + ki * opt.dilation) - static_cast<long>(opt.pad_h);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              double* dst = gin.data() + (c * h + static_cast<std::size_t>(iy)) * w;
              for (std::size_t ox = 0; ox < ow; ++ox) {
                const long ix = static_cast<long>(ox * opt.stride + kj * opt.dilation) - static_cast<long>(opt.pad_w);
                if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += row[oy * ow + ox];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding,
                     std::size_t dilation = 1) {
  return conv2d(input, kernel, Conv2dOptions{stride, padding, padding, dilation});
}

inline Tensor global_avg_pool(const Tensor& x) {
  detail::require_rank(x, 3, "global_avg_pool");
  Tape* tape = recording_tape(x);
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  auto xv = x.values();
  std::vector<double> v(c, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += xv[k * plane + p];
    v[k] = s / static_cast<double>(plane);
  }
  Tensor out = detail::make_result({c, 1, 1}, std::move(v), tape);
  if (tape) {
    tape->record([x, out, c, plane] {
      if (!out.has_grad() || !x.requires_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t k = 0; k < c; ++k) {
        const double share = g[k] / static_cast<double>(plane);
        for (std::size_t p = 0; p < plane; ++p) gx[k * plane + p] += share;
      }
    });
  }
  return out;
}

/// Corner-aligned bilinear resize of a C x H x W map (or an H x W plane).
inline Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 2 && x.rank() != 3) throw ShapeError("bilinear_resize: expected H x W or C x H x W");
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: target size must be positive");
  const bool planar = x.rank() == 2;
  const std::size_t c = planar ? 1 : x.dim(0);
  const std::size_t h = x.dim(planar ? 0 : 1), w = x.dim(planar ? 1 : 2);
  const auto ty = detail::resize_taps(h, out_h);
  const auto tx = detail::resize_taps(w, out_w);
  Tape* tape = recording_tape(x);
  auto xv = x.values();
  std::vector<double> v(c * out_h * out_w);
  for (std::size_t k = 0; k < c; ++k) {
    const double* src = xv.data() + k * h * w;
    double* dst = v.data() + k * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const double wy = ty.w[i];
      const double* r0 = src + ty.lo[i] * w;
      const double* r1 = src + ty.hi[i] * w;
      for (std::size_t j = 0; j < out_w; ++j) {
        const double wx = tx.w[j];
        const double top = r0[tx.lo[j]] * (1.0 - wx) + r0[tx.hi[j]] * wx;
        const double bot = r1[tx.lo[j]] * (1.0 - wx) + r1[tx.hi[j]] * wx;
        dst[i * out_w + j] = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  Shape shape = planar ? Shape{out_h, out_w} : Shape{c, out_h, out_w};
  Tensor out = detail::make_result(std::move(shape), std::move(v), tape);
  if (tape) {
    tape->record([x, out, ty, tx, c, h, w, out_h, out_w] {
      if (!out.has_grad() || !x.requires_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t k = 0; k < c; ++k) {
        double* dst = gx.data() + k * h * w;
        const double* src = g.data() + k * out_h * out_w;
        for (std::size_t i = 0; i < out_h; ++i) {
          const double wy = ty.w[i];
          for (std::size_t j = 0; j < out_w; ++j) {
            const double wx = tx.w[j];
            const double gv = src[i * out_w + j];
            dst[ty.lo[i] * w + tx.lo[j]] += gv * (1.0 - wy) * (1.0 - wx);
            dst[ty.lo[i] * w + tx.hi[j]] += gv * (1.0 - wy) * wx;
            dst[ty.hi[i] * w + tx.lo[j]] += gv * wy * (1.0 - wx);
            dst[ty.hi[i] * w + tx.hi[j]] += gv * wy * wx;
          }
        }
      }
    });
  }
  return out;
}

namespace detail {

enum class BinaryKind { add, sub, mul };

inline Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  // Layout: `big` is the full operand, `small` may be a C x 1 x 1 broadcast.
  const bool same = a.shape() == b.shape();
  const bool b_bcast = !same && is_channel_broadcast(a, b);
  const bool a_bcast = !same && !b_bcast && kind != BinaryKind::sub && is_channel_broadcast(b, a);
  if (!same && !a_bcast && !b_bcast) {
    throw ShapeError(std::string(name) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const Tensor& big = a_bcast ? b : a;
  const Tensor& small = a_bcast ? a : b;
  const bool bcast = a_bcast || b_bcast;
  const std::size_t plane = bcast ? big.dim(1) * big.dim(2) : 1;

  Tape* tape = recording_tape(a, b);
  auto bv = big.values();
  auto sv = small.values();
  std::vector<double> v(big.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double s = sv[bcast ? i / plane : i];
    switch (kind) {
      case BinaryKind::add: v[i] = bv[i] + s; break;
      case BinaryKind::sub: v[i] = bv[i] - s; break;
      case BinaryKind::mul: v[i] = bv[i] * s; break;
    }
  }
  Tensor out = make_result(big.shape(), std::move(v), tape);
  if (tape) {
    tape->record([big, small, out, kind, bcast, plane] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto bv = big.values();
      auto sv = small.values();
      if (big.requires_grad()) {
        auto gb = big.grad();
        for (std::size_t i = 0; i < g.size(); ++i)
          gb[i] += kind == BinaryKind::mul ? g[i] * sv[bcast ? i / plane : i] : g[i];
      }
      if (small.requires_grad()) {
        auto gs = small.grad();
        const double sign = kind == BinaryKind::sub ? -1.0 : 1.0;
        for (std::size_t i = 0; i < g.size(); ++i)
          gs[bcast ? i / plane : i] += kind == BinaryKind::mul ? g[i] * bv[i] : sign * g[i];
      }
    });
  }
  return out;
}

}  // namespace detail

/// Elementwise sum; either operand may be a C x 1 x 1 vector broadcast over C x H x W.
inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::add, "add"); }
/// Elementwise product; either operand may be a C x 1 x 1 vector broadcast over C x H x W.
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::mul, "mul"); }
/// a - b; only b may broadcast.
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::sub, "sub"); }

inline Tensor scale(const Tensor& x, double factor) {
  Tape* tape = recording_tape(x);
  std::vector<double> v(x.values().begin(), x.values().end());
  for (double& e : v) e *= factor;
  Tensor out = detail::make_result(x.shape(), std::move(v), tape);
  if (tape) {
    tape->record([x, out, factor] {
      if (!out.has_grad() || !x.requires_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
    });
  }
  return out;
}

inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: nothing to concatenate");
  for (const auto& p : parts) detail::require_rank(p, 3, "concat_channels");
  const std::size_t h = parts[0].dim(1), w = parts[0].dim(2);
  std::size_t channels = 0;
  for (const auto& p : parts) {
    if (p.dim(1) != h || p.dim(2) != w) {
      throw ShapeError("concat_channels: spatial mismatch " + to_string(parts[0].shape()) + " vs " +
                       to_string(p.shape()));
    }
    channels += p.dim(0);
  }
  Tape* tape = nullptr;
  for (const auto& p : parts)
    if (Tape* t = recording_tape(p)) tape = t;
  std::vector<double> v;
  v.reserve(channels * h * w);
  for (const auto& p : parts) v.insert(v.end(), p.values().begin(), p.values().end());
  Tensor out = detail::make_result({channels, h, w}, std::move(v), tape);
  if (tape) {
    tape->record([parts, out] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      std::size_t offset = 0;
      for (const auto& p : parts) {
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
        }
        offset += p.size();
      }
    });
  }
  return out;
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) { return concat_channels(std::vector<Tensor>{a, b}); }

inline Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count) {
  detail::require_rank(x, 3, "slice_channels");
  if (count == 0 || begin + count > x.dim(0)) throw ShapeError("slice_channels: range out of bounds");
  Tape* tape = recording_tape(x);
  const std::size_t plane = x.dim(1) * x.dim(2);
  auto xv = x.values();
  std::vector<double> v(xv.begin() + static_cast<long>(begin * plane),
                        xv.begin() + static_cast<long>((begin + count) * plane));
  Tensor out = detail::make_result({count, x.dim(1), x.dim(2)}, std::move(v), tape);
  if (tape) {
    tape->record([x, out, begin, plane] {
      if (!out.has_grad() || !x.requires_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[begin * plane + i] += g[i];
    });
  }
  return out;
}

/// Per-channel mean of a C x H x W map weighted by a constant H x W map:
/// v_c = sum_p x_c(p) w(p) / sum_p w(p). Returns C x 1 x 1.
inline Tensor spatial_weighted_mean(const Tensor& x, std::span<const double> weights) {
  detail::require_rank(x, 3, "spatial_weighted_mean");
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  if (weights.size() != plane) throw ShapeError("spatial_weighted_mean: weight map size mismatch");
  double total = 0.0;
  for (double wv : weights) total += wv;
  if (total <= 0.0) throw std::invalid_argument("spatial_weighted_mean: weights sum to zero");
  Tape* tape = recording_tape(x);
  auto xv = x.values();
  std::vector<double> v(c, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += xv[k * plane + p] * weights[p];
    v[k] = s / total;
  }
  Tensor out = detail::make_result({c, 1, 1}, std::move(v), tape);
  if (tape) {
    std::vector<double> wcopy(weights.begin(), weights.end());
    tape->record([x, out, wcopy = std::move(wcopy), total, c, plane] {
      if (!out.has_grad() || !x.requires_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t p = 0; p < plane; ++p) gx[k * plane + p] += g[k] * wcopy[p] / total;
    });
  }
  return out;
}

/// Mean of all elements, as a scalar tensor.
inline Tensor mean(const Tensor& x) {
  Tape* tape = recording_tape(x);
  double s = 0.0;
  for (double e : x.values()) s += e;
  const double n = static_cast<double>(x.size());
  Tensor out = detail::make_result({1}, {s / n}, tape);
  if (tape) {
    tape->record([x, out, n] {
      if (!out.has_grad() || !x.requires_grad()) return;
      const double g = out.grad()[0] / n;
      for (double& e : x.grad()) e += g;
    });
  }
  return out;
}

}  // namespace crcnet
