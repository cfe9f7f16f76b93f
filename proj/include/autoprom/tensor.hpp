#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "autoprom/error.hpp"

namespace autoprom {

using Shape = std::vector<std::size_t>;

/// 64-byte aligned storage. Vectorised kernels peel differently depending on
/// the start address, so fixed alignment keeps results independent of where
/// the allocator happens to place a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array. The shape is fixed at construction; use reshaped()
/// to obtain a differently shaped copy over the same values. A zero extent is
/// allowed so that an empty batch (e.g. zero masks) is representable.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (shape_numel(shape_) != data_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// 4-D accessor for NCHW tensors.
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  Tensor reshaped(Shape shape) const& {
    if (shape_numel(shape) != numel())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }
  Tensor reshaped(Shape shape) && {
    if (shape_numel(shape) != numel())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data_);
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  AlignedVector<T> data_;
};

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
}

/// Bitwise comparison, distinguishing -0.0 from +0.0 and NaN payloads.
template <typename T>
bool bit_identical(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(reinterpret_cast<const unsigned char*>(a.data()),
                    reinterpret_cast<const unsigned char*>(a.data() + a.numel()),
                    reinterpret_cast<const unsigned char*>(b.data()));
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
  T m{0};
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max<T>(m, std::abs(a[i] - b[i]));
  return m;
}

/// Stack equally shaped tensors along a new leading axis.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
  if (items.empty()) throw ShapeError("stack: no tensors");
  Shape shape = items.front().shape();
  std::vector<T> data;
  data.reserve(items.size() * items.front().numel());
  for (const auto& t : items) {
    if (t.shape() != shape) throw ShapeError("stack: shape mismatch " + shape_str(t.shape()));
    data.insert(data.end(), t.values().begin(), t.values().end());
  }
  shape.insert(shape.begin(), items.size());
  return Tensor<T>(std::move(shape), std::move(data));
}

/// Item i along the leading axis.
template <typename T>
Tensor<T> slice_leading(const Tensor<T>& t, std::size_t i) {
  Shape shape(t.shape().begin() + 1, t.shape().end());
  const std::size_t n = shape_numel(shape);
  if (i >= t.dim(0)) throw ShapeError("slice_leading: index out of range");
  std::vector<T> data(t.data() + i * n, t.data() + (i + 1) * n);
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace autoprom
