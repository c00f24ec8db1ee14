#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "retgrade/error.hpp"

namespace retgrade {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape &shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape &shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i)
      s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

// Dense row-major array. T is float for training and double for gradient checks.
template <typename T = float> class Tensor {
public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_string(shape_));
  }
  static Tensor from_values(std::initializer_list<T> values) { return Tensor(Shape{values.size()}, std::vector<T>(values)); }

  const Shape &shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }

  T &operator[](std::size_t i) { return data_[i]; }
  const T &operator[](std::size_t i) const { return data_[i]; }

  T *ptr() noexcept { return data_.data(); }
  const T *ptr() const noexcept { return data_.data(); }
  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T> &vec() noexcept { return data_; }
  const std::vector<T> &vec() const noexcept { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U> Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor &, const Tensor &) = default;

private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T> void require_shape(const Tensor<T> &t, const Shape &expected, const char *what) {
  if (t.shape() != expected)
    throw ShapeError(std::string(what) + ": expected shape " + shape_string(expected) + ", got " +
                     shape_string(t.shape()));
}

template <typename T> void require_rank(const Tensor<T> &t, std::size_t rank, const char *what) {
  if (t.rank() != rank)
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_string(t.shape()));
}

// a += b, elementwise.
template <typename T> void add_inplace(Tensor<T> &a, const Tensor<T> &b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  for (std::size_t i = 0; i < a.size(); ++i)
    a[i] += b[i];
}

} // namespace retgrade
