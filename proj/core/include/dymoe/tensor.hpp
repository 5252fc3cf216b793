// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dymoe {

/// Dense row-major tensor of 64-bit floats. The engine only needs rank 1
/// and rank 2; a scalar is represented as shape {1}.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

  Tensor(std::vector<std::int64_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != checked_numel(shape_)) {
      throw std::invalid_argument("Tensor: data size does not match shape");
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor zeros(std::vector<std::int64_t> shape) {
    return Tensor(std::move(shape));
  }

  static Tensor full(std::vector<std::int64_t> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  const std::vector<std::int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  /// Row/column view of a rank-2 tensor; a rank-1 tensor of length n is
  /// treated as a single row (1 x n).
  std::int64_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  std::int64_t cols() const {
    return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 0);
  }

  double& at(std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  double at(std::int64_t i) const { return data_[static_cast<size_t>(i)]; }
  double& at(std::int64_t r, std::int64_t c) {
    return data_[static_cast<size_t>(r * cols() + c)];
  }
  double at(std::int64_t r, std::int64_t c) const {
    return data_[static_cast<size_t>(r * cols() + c)];
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool b) { requires_grad_ = b; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

 private:
  static std::int64_t checked_numel(const std::vector<std::int64_t>& shape) {
    if (shape.empty()) throw std::invalid_argument("Tensor: empty shape");
    std::int64_t n = 1;
    for (auto d : shape) {
      if (d <= 0) throw std::invalid_argument("Tensor: non-positive dim");
      n *= d;
    }
    return n;
  }

  std::vector<std::int64_t> shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
};

}  // namespace dymoe
