#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace modabs {

/// Dense row-major array of 64-bit floats. A scalar is shape {1}.
/// Arrays are plain values: copying copies the data.
class Array {
 public:
  Array() = default;

  explicit Array(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(check_shape(shape_)), 0.0);
  }

  Array(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (check_shape(shape_) != static_cast<long long>(data_.size())) {
      throw std::invalid_argument("Array: shape does not match data length");
    }
  }

  static Array scalar(double v) { return Array({1}, {v}); }

  static Array zeros(std::vector<int> shape) { return Array(std::move(shape)); }

  static Array full(std::vector<int> shape, double v) {
    Array a(std::move(shape));
    for (double& x : a.data_) x = v;
    return a;
  }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int numel() const { return static_cast<int>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  double& at(int i) { return data_[static_cast<size_t>(i)]; }
  double at(int i) const { return data_[static_cast<size_t>(i)]; }

  // 2-D accessors; valid only when ndim() == 2.
  double& at2(int r, int c) { return data_[static_cast<size_t>(r) * dim(1) + c]; }
  double at2(int r, int c) const { return data_[static_cast<size_t>(r) * dim(1) + c]; }

  double item() const {
    if (numel() != 1) throw std::invalid_argument("Array::item: not a scalar");
    return data_[0];
  }

  /// Same data under a new shape (row-major order preserved).
  Array reshaped(std::vector<int> new_shape) const {
    if (check_shape(new_shape) != static_cast<long long>(data_.size())) {
      throw std::invalid_argument("Array::reshaped: element count mismatch");
    }
    return Array(std::move(new_shape), data_);
  }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  bool same_shape(const Array& other) const { return shape_ == other.shape_; }

  bool operator==(const Array& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

  static std::string shape_string(const std::vector<int>& shape) {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ", ";
      s += std::to_string(shape[i]);
    }
    return s + ")";
  }

 private:
  static long long check_shape(const std::vector<int>& shape) {
    if (shape.empty()) throw std::invalid_argument("Array: empty shape");
    long long n = 1;
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("Array: non-positive dimension");
      n *= d;
    }
    return n;
  }

  std::vector<int> shape_;
  std::vector<double> data_;
};

}  // namespace modabs
