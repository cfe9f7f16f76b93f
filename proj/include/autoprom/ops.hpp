#pragma once

// Stateless forward/backward kernels on NCHW tensors. Layer classes in
// layers.hpp wrap these with parameters and saved activations.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "autoprom/error.hpp"
#include "autoprom/tensor.hpp"

namespace autoprom {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstRowMap = Eigen::Map<const RowMatrix<T>>;

/// Sign-pattern probe for finite-difference checks: when enabled, every
/// piecewise primitive mixes the branch it took into a running signature.
/// Two evaluations with different signatures straddle a kink.
namespace kink {
inline thread_local bool enabled = false;
inline thread_local std::uint64_t signature = 0;
inline thread_local std::uint64_t calls = 0;

inline void reset() {
  signature = 0;
  calls = 0;
}

/// Distinct salt for every probed primitive invocation.
inline std::uint64_t next_salt() { return (++calls) << 40; }

inline void mix(std::uint64_t bit_index, bool taken) {
  if (!taken) return;
  std::uint64_t z = bit_index + 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  signature += z ^ (z >> 31);
}
}  // namespace kink

struct ConvGeometry {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  /// Output extent for an input extent; rejects non-exact or empty results.
  std::size_t out_extent(std::size_t in) const {
    const std::size_t padded = in + 2 * padding;
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    if (padded < kernel)
      throw ShapeError("conv2d: kernel " + std::to_string(kernel) + " larger than padded input " +
                       std::to_string(padded));
    if ((padded - kernel) % stride != 0)
      throw ShapeError("conv2d: output extent not exact for input " + std::to_string(in) +
                       ", kernel " + std::to_string(kernel) + ", stride " +
                       std::to_string(stride) + ", padding " + std::to_string(padding));
    return (padded - kernel) / stride + 1;
  }
};

namespace detail {

/// Output columns [first, last) whose input column ox * stride + kj - pad is
/// inside [0, w).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t wo, std::size_t w, std::size_t stride,
                                                       std::size_t kj, std::size_t pad) {
  std::size_t first = 0;
  if (pad > kj) first = (pad - kj + stride - 1) / stride;
  std::size_t last = 0;
  if (w + pad > kj) last = std::min(wo, (w - 1 + pad - kj) / stride + 1);
  return {std::min(first, last), last};
}

/// Per-thread reusable buffer; avoids page-faulting a fresh unfolded matrix
/// on every call. Contents are unspecified on return.
template <typename T>
T* scratch(int slot, std::size_t size) {
  thread_local AlignedVector<T> buffers[2];
  auto& b = buffers[slot];
  if (b.size() < size) b.resize(size);
  return b.data();
}

/// Unfolds x [N,C,H,W] into a [C*k*k, N*Ho*Wo] row-major matrix held in
/// scratch slot 0.
template <typename T>
T* im2col(const Tensor<T>& x, const ConvGeometry& g, std::size_t ho, std::size_t wo) {
  const std::size_t n_batch = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t k = g.kernel, s = g.stride, pad = g.padding, plane = ho * wo, cols = n_batch * plane;
  T* out = scratch<T>(0, channels * k * k * cols);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const auto [first, last] = valid_range(wo, w, s, kj, pad);
        T* row = out + ((c * k + ki) * k + kj) * cols;
        for (std::size_t n = 0; n < n_batch; ++n) {
          const T* src = x.data() + (n * channels + c) * h * w;
          T* dst = row + n * plane;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            T* drow = dst + oy * wo;
            const std::size_t iy = oy * s + ki;
            if (iy < pad || iy - pad >= h) {
              std::fill(drow, drow + wo, T{0});
              continue;
            }
            std::fill(drow, drow + first, T{0});
            std::fill(drow + last, drow + wo, T{0});
            const T* srow = src + (iy - pad) * w + (first * s + kj - pad);
            if (s == 1) {
              std::copy(srow, srow + (last - first), drow + first);
            } else {
              for (std::size_t ox = first; ox < last; ++ox) drow[ox] = srow[(ox - first) * s];
            }
          }
        }
      }
    }
  }
  return out;
}

/// Adjoint of im2col: scatters column gradients back into dx.
template <typename T>
void col2im(const T* cols_data, const ConvGeometry& g, std::size_t ho,
            std::size_t wo, Tensor<T>& dx) {
  const std::size_t n_batch = dx.dim(0), channels = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
  const std::size_t k = g.kernel, s = g.stride, pad = g.padding, plane = ho * wo, cols = n_batch * plane;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const auto [first, last] = valid_range(wo, w, s, kj, pad);
        const T* row = cols_data + ((c * k + ki) * k + kj) * cols;
        for (std::size_t n = 0; n < n_batch; ++n) {
          T* dst = dx.data() + (n * channels + c) * h * w;
          const T* src = row + n * plane;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::size_t iy = oy * s + ki;
            if (iy < pad || iy - pad >= h) continue;
            T* drow = dst + (iy - pad) * w + (first * s + kj - pad);
            const T* srow = src + oy * wo;
            if (s == 1) {
              for (std::size_t ox = first; ox < last; ++ox) drow[ox - first] += srow[ox];
            } else {
              for (std::size_t ox = first; ox < last; ++ox) drow[(ox - first) * s] += srow[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Output shape of a convolution, validated before any data is touched.
inline Shape conv2d_output_shape(const Shape& in, const Shape& weight_shape, const ConvGeometry& g) {
  if (in.size() != 4) throw ShapeError("conv2d: input must be NCHW, got " + shape_str(in));
  if (weight_shape.size() != 4 || weight_shape[2] != g.kernel || weight_shape[3] != g.kernel)
    throw ShapeError("conv2d: weight shape " + shape_str(weight_shape) + " does not match kernel");
  if (in[1] != weight_shape[1])
    throw ShapeError("conv2d: input has " + std::to_string(in[1]) + " channels, weight expects " +
                     std::to_string(weight_shape[1]));
  return {in[0], weight_shape[0], g.out_extent(in[2]), g.out_extent(in[3])};
}

/// Cross-correlation: y[n,o] = b[o] + sum_c w[o,c] (*) x[n,c].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                 const ConvGeometry& g) {
  const Shape out_shape = conv2d_output_shape(x.shape(), weight.shape(), g);
  if (bias && (bias->rank() != 1 || bias->dim(0) != weight.dim(0)))
    throw ShapeError("conv2d: bias shape " + shape_str(bias->shape()) + " mismatch");
  const std::size_t n_batch = out_shape[0], co = out_shape[1], ho = out_shape[2], wo = out_shape[3];
  const std::size_t plane = ho * wo, cols = n_batch * plane;
  const std::size_t inner = x.dim(1) * g.kernel * g.kernel;
  Tensor<T> y(out_shape);
  if (y.empty()) return y;

  const T* col = detail::im2col(x, g, ho, wo);
  RowMatrix<T> prod(co, cols);
  prod.noalias() = ConstRowMap<T>(weight.data(), co, inner) * ConstRowMap<T>(col, inner, cols);
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t o = 0; o < co; ++o) {
      const T b = bias ? (*bias)[o] : T{0};
      const T* src = prod.data() + o * cols + n * plane;
      T* dst = y.data() + (n * co + o) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + b;
    }
  return y;
}

/// Gradients of conv2d. Accumulates into dweight/dbias when non-null and
/// returns dx (empty tensor when need_input_grad is false).
template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy,
                          const ConvGeometry& g, Tensor<T>* dweight, Tensor<T>* dbias,
                          bool need_input_grad) {
  const Shape out_shape = conv2d_output_shape(x.shape(), weight.shape(), g);
  if (dy.shape() != out_shape)
    throw ShapeError("conv2d_backward: upstream gradient " + shape_str(dy.shape()) +
                     " does not match output " + shape_str(out_shape));
  const std::size_t n_batch = out_shape[0], co = out_shape[1], ho = out_shape[2], wo = out_shape[3];
  const std::size_t plane = ho * wo, cols = n_batch * plane;
  const std::size_t inner = x.dim(1) * g.kernel * g.kernel;

  RowMatrix<T> dym(co, cols);
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t o = 0; o < co; ++o) {
      const T* src = dy.data() + (n * co + o) * plane;
      std::copy(src, src + plane, dym.data() + o * cols + n * plane);
    }

  if (dbias) {
    for (std::size_t o = 0; o < co; ++o) (*dbias)[o] += dym.row(static_cast<Eigen::Index>(o)).sum();
  }
  if (dweight) {
    const T* col = detail::im2col(x, g, ho, wo);
    RowMap<T> dw(dweight->data(), co, inner);
    dw.noalias() += dym * ConstRowMap<T>(col, inner, cols).transpose();
  }
  if (!need_input_grad) return Tensor<T>();

  T* dcol = detail::scratch<T>(1, inner * cols);
  RowMap<T>(dcol, inner, cols).noalias() = ConstRowMap<T>(weight.data(), co, inner).transpose() * dym;
  Tensor<T> dx(x.shape());
  detail::col2im(dcol, g, ho, wo, dx);
  return dx;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const std::uint64_t salt = kink::enabled ? kink::next_salt() : 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const bool on = x[i] > T{0};
    y[i] = on ? x[i] : T{0};
    if (kink::enabled) kink::mix(salt + i, on);
  }
  return y;
}

/// Nearest-neighbour 2x upsampling on the two trailing axes.
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("upsample2x: need at least 2 axes");
  Shape out = x.shape();
  const std::size_t h = out[out.size() - 2], w = out[out.size() - 1];
  out[out.size() - 2] = 2 * h;
  out[out.size() - 1] = 2 * w;
  Tensor<T> y(out);
  const std::size_t planes = x.numel() / (h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data() + p * h * w;
    T* dst = y.data() + p * 4 * h * w;
    for (std::size_t r = 0; r < 2 * h; ++r)
      for (std::size_t c = 0; c < 2 * w; ++c) dst[r * 2 * w + c] = src[(r / 2) * w + c / 2];
  }
  return y;
}

template <typename T>
Tensor<T> upsample2x_backward(const Tensor<T>& dy) {
  Shape out = dy.shape();
  const std::size_t h2 = out[out.size() - 2], w2 = out[out.size() - 1];
  out[out.size() - 2] = h2 / 2;
  out[out.size() - 1] = w2 / 2;
  Tensor<T> dx(out);
  const std::size_t h = h2 / 2, w = w2 / 2, planes = dx.numel() / (h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = dy.data() + p * h2 * w2;
    T* dst = dx.data() + p * h * w;
    for (std::size_t r = 0; r < h2; ++r)
      for (std::size_t c = 0; c < w2; ++c) dst[(r / 2) * w + c / 2] += src[r * w2 + c];
  }
  return dx;
}

/// Strided decimation by `factor` on the two trailing axes (keeps the top-left
/// sample of every factor x factor cell). Used to align skip connections.
template <typename T>
Tensor<T> subsample(const Tensor<T>& x, std::size_t factor) {
  Shape out = x.shape();
  const std::size_t h = out[out.size() - 2], w = out[out.size() - 1];
  if (factor == 0 || h % factor || w % factor)
    throw ShapeError("subsample: extent " + shape_str(x.shape()) + " not divisible by " +
                     std::to_string(factor));
  out[out.size() - 2] = h / factor;
  out[out.size() - 1] = w / factor;
  Tensor<T> y(out);
  const std::size_t ho = h / factor, wo = w / factor, planes = x.numel() / (h * w);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t r = 0; r < ho; ++r)
      for (std::size_t c = 0; c < wo; ++c)
        y[p * ho * wo + r * wo + c] = x[p * h * w + r * factor * w + c * factor];
  return y;
}

template <typename T>
Tensor<T> subsample_backward(const Tensor<T>& dy, const Shape& input_shape, std::size_t factor) {
  Tensor<T> dx(input_shape);
  const std::size_t h = input_shape[input_shape.size() - 2], w = input_shape[input_shape.size() - 1];
  const std::size_t ho = h / factor, wo = w / factor, planes = dx.numel() / (h * w);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t r = 0; r < ho; ++r)
      for (std::size_t c = 0; c < wo; ++c)
        dx[p * h * w + r * factor * w + c * factor] += dy[p * ho * wo + r * wo + c];
  return dx;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) y[i] = a[i] + b[i];
  return y;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] += b[i];
}

/// Concatenate NCHW tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: nothing to concatenate");
  const Shape& s0 = parts.front().shape();
  require_rank(parts.front(), 4, "concat_channels");
  std::size_t channels = 0;
  for (const auto& p : parts) {
    if (p.rank() != 4 || p.dim(0) != s0[0] || p.dim(2) != s0[2] || p.dim(3) != s0[3])
      throw ShapeError("concat_channels: incompatible " + shape_str(p.shape()) + " vs " +
                       shape_str(s0));
    channels += p.dim(1);
  }
  Tensor<T> y({s0[0], channels, s0[2], s0[3]});
  const std::size_t plane = s0[2] * s0[3];
  for (std::size_t n = 0; n < s0[0]; ++n) {
    T* dst = y.data() + n * channels * plane;
    for (const auto& p : parts) {
      const T* src = p.data() + n * p.dim(1) * plane;
      dst = std::copy(src, src + p.dim(1) * plane, dst);
    }
  }
  return y;
}

}  // namespace autoprom
