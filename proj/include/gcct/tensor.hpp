// Dense row-major tensor of rank <= 6, the value type of the autodiff graph.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gcct {

struct shape_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    out += std::to_string(s[i]);
    if (i + 1 < s.size()) out += ",";
  }
  return out + ")";
}

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    numel_ = checked_numel(shape_);
    data_ = std::shared_ptr<T[]>(new T[numel_]());
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data(), t.data() + t.numel(), v);
    return t;
  }

  static Tensor ones(std::vector<int> shape) { return full(std::move(shape), T(1)); }

  static Tensor scalar(T v) { return full({1}, v); }

  static Tensor from(std::vector<int> shape, const std::vector<T>& values) {
    Tensor t(std::move(shape));
    if (static_cast<std::int64_t>(values.size()) != t.numel())
      throw shape_error("Tensor::from: value count does not match shape " + shape_str(t.shape()));
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  template <typename Rng>
  static Tensor randn(std::vector<int> shape, Rng& rng, T stddev = T(1)) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(dist(rng)) * stddev;
    return t;
  }

  template <typename Rng>
  static Tensor uniform(std::vector<int> shape, Rng& rng, T lo, T hi) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(dist(rng));
    return t;
  }

  bool defined() const { return data_ != nullptr; }
  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  std::int64_t numel() const { return numel_; }

  T* data() { return data_.get(); }
  const T* data() const { return data_.get(); }
  T& operator[](std::int64_t i) { return data_[i]; }
  const T& operator[](std::int64_t i) const { return data_[i]; }

  T& at(std::initializer_list<int> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<int> idx) const { return data_[offset(idx)]; }

  Tensor clone() const {
    Tensor t(shape_);
    std::copy(data(), data() + numel_, t.data());
    return t;
  }

  // Shares storage; -1 wildcard infers one dimension.
  Tensor reshaped(std::vector<int> shape) const {
    std::int64_t known = 1;
    int wild = -1;
    for (size_t i = 0; i < shape.size(); ++i) {
      if (shape[i] == -1) {
        if (wild >= 0) throw shape_error("reshaped: more than one -1");
        wild = static_cast<int>(i);
      } else {
        known *= shape[i];
      }
    }
    if (wild >= 0) {
      if (known == 0 || numel_ % known != 0) throw shape_error("reshaped: cannot infer dimension");
      shape[static_cast<size_t>(wild)] = static_cast<int>(numel_ / known);
    }
    if (checked_numel(shape) != numel_)
      throw shape_error("reshaped: " + shape_str(shape_) + " -> " + shape_str(shape) + " changes element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.numel_ = numel_;
    t.data_ = data_;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t(shape_);
    for (std::int64_t i = 0; i < numel_; ++i) t[i] = static_cast<U>(data_[i]);
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (std::int64_t i = 0; i < numel_; ++i)
      if (!std::isfinite(static_cast<double>(data_[i]))) return false;
    return true;
  }

  T min_value() const { return *std::min_element(data(), data() + numel_); }
  T max_value() const { return *std::max_element(data(), data() + numel_); }

  T sum_value() const {
    double acc = 0.0;
    for (std::int64_t i = 0; i < numel_; ++i) acc += static_cast<double>(data_[i]);
    return static_cast<T>(acc);
  }

  void fill(T v) { std::fill(data(), data() + numel_, v); }

 private:
  static std::int64_t checked_numel(const std::vector<int>& shape) {
    if (shape.empty()) throw shape_error("tensor must have rank >= 1");
    std::int64_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw shape_error("tensor dims must be positive, got " + shape_str(shape));
      n *= d;
    }
    return n;
  }

  std::int64_t offset(std::initializer_list<int> idx) const {
    std::int64_t off = 0;
    size_t i = 0;
    for (int v : idx) {
      off = off * shape_[i] + v;
      ++i;
    }
    return off;
  }

  std::vector<int> shape_;
  std::int64_t numel_ = 0;
  std::shared_ptr<T[]> data_;
};

// argmax over the last axis, one result per leading row
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& t) {
  const int cols = t.dim(t.rank() - 1);
  const std::int64_t rows = t.numel() / cols;
  std::vector<int> out(static_cast<size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* p = t.data() + r * cols;
    out[static_cast<size_t>(r)] = static_cast<int>(std::max_element(p, p + cols) - p);
  }
  return out;
}

}  // namespace gcct
