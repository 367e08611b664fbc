// src/tensor.cpp

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

#include "speechalign/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace speechalign {

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), values_(shape_product(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_product(shape_) != values_.size()) {
    throw ShapeError("tensor: shape " + to_string(shape_) + " holds " +
                     std::to_string(shape_product(shape_)) + " values, got " +
                     std::to_string(values_.size()));
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> v;
  v.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("tensor: ragged row list");
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(v));
}

Tensor Tensor::row_vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({1, n}, std::move(v));
}

std::size_t Tensor::rows() const {
  require_matrix(*this, "rows");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  require_matrix(*this, "cols");
  return shape_[1];
}

double Tensor::item() const {
  if (values_.size() != 1) {
    throw ShapeError("item: expected a single value, shape is " + to_string(shape_));
  }
  return values_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), values_);
}

Tensor Tensor::transposed() const {
  require_matrix(*this, "transpose");
  const std::size_t r = shape_[0], c = shape_[1];
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.values_[j * r + i] = values_[i * c + j];
  return out;
}

void Tensor::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

void Tensor::add_in_place(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw ShapeError("add_in_place: " + to_string(shape_) + " vs " + to_string(other.shape_));
  }
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got shape " +
                     to_string(t.shape()));
  }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace speechalign
