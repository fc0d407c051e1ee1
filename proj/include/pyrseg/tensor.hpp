#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pyrseg/error.hpp"

namespace pyrseg {

using Index = std::int64_t;

enum class Mode { train, infer };

// (batch, channels, depth, height, width)
struct Shape5 {
  Index n = 0, c = 0, d = 0, h = 0, w = 0;

  Index spatial() const { return d * h * w; }
  Index numel() const { return n * c * d * h * w; }
  std::array<Index, 3> dhw() const { return {d, h, w}; }
  bool operator==(const Shape5&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(d) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

// Dense rank-5 array, contiguous, index (((n*C + c)*D + z)*H + y)*W + x.
template <typename T>
class Tensor5 {
 public:
  using value_type = T;

  Tensor5() = default;
  explicit Tensor5(Shape5 shape, T fill = T(0)) : shape_(shape), data_(checked_numel(shape), fill) {}
  Tensor5(Index n, Index c, Index d, Index h, Index w, T fill = T(0)) : Tensor5(Shape5{n, c, d, h, w}, fill) {}
  Tensor5(Shape5 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (static_cast<Index>(data_.size()) != checked_numel(shape))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape.str());
  }

  const Shape5& shape() const { return shape_; }
  Index n() const { return shape_.n; }
  Index c() const { return shape_.c; }
  Index d() const { return shape_.d; }
  Index h() const { return shape_.h; }
  Index w() const { return shape_.w; }
  Index size() const { return static_cast<Index>(data_.size()); }
  bool empty() const { return data_.empty(); }

  Index offset(Index n, Index c, Index z, Index y, Index x) const {
    return (((n * shape_.c + c) * shape_.d + z) * shape_.h + y) * shape_.w + x;
  }
  T& operator()(Index n, Index c, Index z, Index y, Index x) { return data_[offset(n, c, z, y, x)]; }
  const T& operator()(Index n, Index c, Index z, Index y, Index x) const { return data_[offset(n, c, z, y, x)]; }
  T& operator[](Index i) { return data_[i]; }
  const T& operator[](Index i) const { return data_[i]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& vec() & { return data_; }
  const std::vector<T>& vec() const& { return data_; }
  std::vector<T> vec() && { return std::move(data_); }

  // Contiguous (C, D, H, W) block of one batch item.
  std::span<T> item(Index n) { return {data_.data() + n * shape_.c * shape_.spatial(), static_cast<std::size_t>(shape_.c * shape_.spatial())}; }
  std::span<const T> item(Index n) const {
    return {data_.data() + n * shape_.c * shape_.spatial(), static_cast<std::size_t>(shape_.c * shape_.spatial())};
  }
  // Contiguous (D, H, W) block of one channel of one batch item.
  std::span<T> plane(Index n, Index c) {
    return {data_.data() + (n * shape_.c + c) * shape_.spatial(), static_cast<std::size_t>(shape_.spatial())};
  }
  std::span<const T> plane(Index n, Index c) const {
    return {data_.data() + (n * shape_.c + c) * shape_.spatial(), static_cast<std::size_t>(shape_.spatial())};
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor5<U> cast() const {
    Tensor5<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  Tensor5& operator+=(const Tensor5& o) {
    require_same_shape(o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor5& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  bool operator==(const Tensor5&) const = default;

  void require_same_shape(const Tensor5& o, const char* op) const {
    if (!(shape_ == o.shape_))
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_.str() + " vs " + o.shape_.str());
  }

 private:
  static Index checked_numel(const Shape5& s) {
    if (s.n < 0 || s.c < 0 || s.d < 0 || s.h < 0 || s.w < 0) throw ShapeError("negative tensor dimension " + s.str());
    return s.numel();
  }

  Shape5 shape_{};
  std::vector<T> data_;
};

template <typename T>
T dot(const Tensor5<T>& a, const Tensor5<T>& b) {
  a.require_same_shape(b, "dot");
  T acc = T(0);
  for (Index i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
T max_abs_diff(const Tensor5<T>& a, const Tensor5<T>& b) {
  a.require_same_shape(b, "max_abs_diff");
  T m = T(0);
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, a[i] > b[i] ? a[i] - b[i] : b[i] - a[i]);
  return m;
}

}  // namespace pyrseg
