// include/speechalign/tensor.hpp

// Copyright 2026  The speechalign Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace speechalign {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string to_string(const Shape& shape);

/// Dense row-major array of 64-bit reals.
///
/// Every operation in this library works on rank-2 tensors; vectors are
/// 1 x n (or n x 1) and scalars are 1 x 1. Other ranks can be stored but
/// only element access and reshaping are defined for them.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor scalar(double v) { return Tensor({1, 1}, v); }
  static Tensor row_vector(std::vector<double> v);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  /// Rows and columns of a rank-2 tensor.
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator()(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<double> row(std::size_t r) { return {values_.data() + r * shape_[1], shape_[1]}; }
  std::span<const double> row(std::size_t r) const {
    return {values_.data() + r * shape_[1], shape_[1]};
  }

  /// The single value of a 1 x 1 tensor.
  double item() const;

  bool all_finite() const;
  Tensor reshaped(Shape shape) const;
  Tensor transposed() const;

  void fill(double v);
  /// this += other (same shape).
  void add_in_place(const Tensor& other);

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

std::size_t shape_product(const Shape& shape);

/// Rejects non-rank-2 operands with a diagnostic naming the operation.
void require_matrix(const Tensor& t, const char* op);

/// Largest |a - b| over all entries; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace speechalign
