// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dynadepth {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Raised when operand shapes are incompatible with an op signature.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const std::string& detail)
      : std::invalid_argument(op + ": " + detail), op_(op) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

/// Dense row-major array of doubles.
///
/// A rank-0 tensor (empty shape) holds a single scalar. The gradient buffer is
/// optional and, when present, always matches the element count.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor", "element count " + std::to_string(data_.size()) +
                                     " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  /// Size of the trailing dimension (1 for scalars).
  std::size_t last_dim() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  /// Product of all leading dimensions.
  std::size_t outer() const noexcept { return numel() / (last_dim() ? last_dim() : 1); }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }
  double* raw() noexcept { return data_.data(); }
  const double* raw() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * last_dim() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * last_dim() + c]; }

  double item() const {
    if (numel() != 1) throw ShapeError("item", "tensor " + shape_str(shape_) + " is not a scalar");
    return data_[0];
  }

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on) noexcept { requires_grad_ = on; }

  const std::optional<std::vector<double>>& grad() const noexcept { return grad_; }
  void set_grad(std::vector<double> g) {
    if (g.size() != numel()) {
      throw ShapeError("set_grad", "gradient size " + std::to_string(g.size()) +
                                       " does not match " + shape_str(shape_));
    }
    grad_ = std::move(g);
  }
  void clear_grad() noexcept { grad_.reset(); }

  /// Returns a copy with a new shape of the same element count.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw ShapeError("reshape", shape_str(shape_) + " -> " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool same_values(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::optional<std::vector<double>> grad_;
};

}  // namespace dynadepth
