#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "evtrack/errors.hpp"

namespace evtrack {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major array of f32 or f64 scalars. Reductions performed on these
// arrays walk indices in ascending row-major order per output element, so
// results are bit-identical across runs and thread counts.
template <typename T>
class NdArray {
 public:
  NdArray() = default;
  explicit NdArray(Shape shape)
      : shape_(std::move(shape)), data_(shape_numel(shape_), T{0}) {}
  NdArray(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static NdArray zeros(Shape shape) { return NdArray(std::move(shape)); }
  static NdArray full(Shape shape, T v) {
    NdArray a(std::move(shape));
    std::fill(a.data_.begin(), a.data_.end(), v);
    return a;
  }
  static NdArray ones(Shape shape) { return full(std::move(shape), T{1}); }
  static NdArray scalar(T v) { return NdArray({1}, {v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return {data_.data(), data_.size()}; }
  std::span<const T> span() const { return {data_.data(), data_.size()}; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i) { return data_[i]; }
  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  T& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  T& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  const T& at(std::size_t i) const { return data_[i]; }
  const T& at(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k,
              std::size_t l) const {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  // View-free reshape: same data, new extents, element count preserved.
  NdArray reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw ShapeError("reshape " + shape_str(shape_) + " -> " +
                       shape_str(shape) + " changes element count");
    }
    return NdArray(std::move(shape), data_);
  }

  template <typename U>
  NdArray<U> cast() const {
    NdArray<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i)
      out[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool same_shape(const NdArray& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (const T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill_normal(std::mt19937_64& rng, T stddev, T mean = T{0}) {
    std::normal_distribution<double> dist(static_cast<double>(mean),
                                          static_cast<double>(stddev));
    for (T& v : data_) v = static_cast<T>(dist(rng));
  }
  void fill_uniform(std::mt19937_64& rng, T lo, T hi) {
    std::uniform_real_distribution<double> dist(static_cast<double>(lo),
                                                static_cast<double>(hi));
    for (T& v : data_) v = static_cast<T>(dist(rng));
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
void require_shape(const NdArray<T>& a, const Shape& want,
                   const char* what) {
  if (a.shape() != want) {
    throw ShapeError(std::string(what) + ": expected " + shape_str(want) +
                     ", got " + shape_str(a.shape()));
  }
}

template <typename T>
T max_abs(const NdArray<T>& a) {
  T m = 0;
  for (const T v : a.span()) m = std::max(m, std::abs(v));
  return m;
}

template <typename T>
double rel_error(T a, T b) {
  const double denom =
      std::max({std::abs(static_cast<double>(a)),
                std::abs(static_cast<double>(b)), 1e-8});
  return std::abs(static_cast<double>(a) - static_cast<double>(b)) / denom;
}

template <typename T>
double max_rel_error(const NdArray<T>& a, const NdArray<T>& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("max_rel_error: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, rel_error(a[i], b[i]));
  return m;
}

}  // namespace evtrack
