#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "densemapnet/errors.hpp"

namespace dmn {

/// Extent of a 4-D NHWC tensor. Convolution kernels reuse it as
/// [k, k, Cin, Cout].
struct Shape {
  int n = 0;
  int h = 0;
  int w = 0;
  int c = 0;

  std::int64_t numel() const {
    return static_cast<std::int64_t>(n) * h * w * c;
  }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Dense row-major NHWC array. The shape is fixed at construction.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{});
  Tensor(Shape shape, std::vector<T> values);

  const Shape& shape() const noexcept { return shape_; }
  std::int64_t size() const noexcept { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  std::int64_t offset(int n, int y, int x, int c) const {
    return ((static_cast<std::int64_t>(n) * shape_.h + y) * shape_.w + x) * shape_.c + c;
  }
  T& operator()(int n, int y, int x, int c) { return data_[offset(n, y, x, c)]; }
  const T& operator()(int n, int y, int x, int c) const { return data_[offset(n, y, x, c)]; }

  /// First element of image row (n, y); the row holds w*c contiguous values.
  T* row(int n, int y) { return data_.data() + offset(n, y, 0, 0); }
  const T* row(int n, int y) const { return data_.data() + offset(n, y, 0, 0); }

  void fill(T value);

  /// Copy with element type converted.
  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

 private:
  Shape shape_{};
  std::vector<T> data_;
};

/// Throws ShapeError with `what` and both shapes when they differ.
void require_same_shape(const Shape& a, const Shape& b, const std::string& what);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace dmn
