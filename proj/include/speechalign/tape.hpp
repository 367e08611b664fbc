// include/speechalign/tape.hpp

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

// Tape-based reverse-mode differentiation over rank-2 tensors.
//
// A Tape owns every intermediate value. Vars are lightweight handles into
// it and are only valid while their tape lives. Each recorded op stores a
// closure that pushes the output adjoint back onto its inputs; backward()
// replays those closures once each, newest first.

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "speechalign/tensor.hpp"

namespace speechalign {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
  /// Shorthand for value().item().
  double item() const { return value().item(); }

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Adjoints produced by Tape::backward, indexed by node.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}

  /// d(scalar)/d(v). Zeros of v's shape when v did not influence the scalar.
  Tensor of(const Var& v) const;
  bool reached(const Var& v) const;

 private:
  std::vector<Tensor> grads_;
};

/// Passed to an op's backward closure: read the output adjoint, accumulate
/// into input adjoints.
class BackwardContext {
 public:
  BackwardContext(const Tensor& out_grad, std::span<const std::size_t> inputs,
                  std::vector<Tensor>& grads, const Tape& tape)
      : out_grad_(out_grad), inputs_(inputs), grads_(grads), tape_(tape) {}

  const Tensor& out_grad() const { return out_grad_; }
  /// Adjoint buffer of the k-th input (zero-initialised on first touch), or
  /// nullptr when that input does not require a gradient.
  Tensor* in_grad(std::size_t k);

 private:
  const Tensor& out_grad_;
  std::span<const std::size_t> inputs_;
  std::vector<Tensor>& grads_;
  const Tape& tape_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A trainable input.
  Var leaf(Tensor value) { return push(std::move(value), true, {}, nullptr); }
  /// An input that never receives a gradient.
  Var constant(Tensor value) { return push(std::move(value), false, {}, nullptr); }

  /// Records an op result. The backward closure is kept only when at least
  /// one input requires a gradient.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a 1 x 1 output.
  Gradients backward(const Var& scalar) const;

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, std::vector<std::size_t> inputs, BackwardFn fn);

  // deque: references to earlier values stay valid while new nodes append.
  std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable operations. All operands must live on the same tape.

enum class Axis { kRows = 0, kCols = 1 };

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
/// Elementwise product.
Var mul(const Var& a, const Var& b);
/// Elementwise quotient.
Var div(const Var& a, const Var& b);
Var transpose(const Var& a);

/// Softmax along an axis: kCols normalises each row, kRows each column.
/// Max-subtracted.
Var softmax(const Var& a, Axis axis);
Var log_softmax(const Var& a, Axis axis);

/// kRows averages over rows (result 1 x C); kCols over columns (R x 1).
Var mean(const Var& a, Axis axis);
/// Sum of every entry, 1 x 1.
Var sum(const Var& a);
/// Euclidean norm along an axis; same result shapes as mean(). The
/// gradient at a zero vector is taken as zero.
Var l2norm(const Var& a, Axis axis);

Var concat(std::span<const Var> parts, Axis axis);
/// Rows [begin, end) for kRows, columns [begin, end) for kCols.
Var slice(const Var& a, Axis axis, std::size_t begin, std::size_t end);

/// a + row, with row 1 x C added to every row of a.
Var add_row(const Var& a, const Var& row);
/// Multiplies row i of a by v(i, 0); v is R x 1.
Var scale_rows(const Var& a, const Var& v);
/// out(i, 0) = a(i, index[i]).
Var pick(const Var& a, std::span<const std::size_t> index);
/// L^p distances between every row of a and every row of b: R_a x R_b.
/// Zero-distance pairs get a zero gradient.
Var pairwise_lp(const Var& a, const Var& b, double p);

// ---------------------------------------------------------------------------
// Uniform entry point over the core op kinds, used by generic checks.

enum class OpKind {
  kMatmul,
  kAdd,
  kScale,
  kExp,
  kLog,
  kSoftmax,
  kMean,
  kL2Norm,
  kConcat,
  kSlice,
  kMul,
  kTranspose,
};

struct OpArgs {
  double factor = 1.0;         // kScale
  Axis axis = Axis::kCols;     // kSoftmax, kMean, kL2Norm, kConcat, kSlice
  std::size_t begin = 0;       // kSlice
  std::size_t end = 0;         // kSlice
};

const char* op_name(OpKind kind);
Var forward_op(OpKind kind, std::span<const Var> inputs, const OpArgs& args = {});

}  // namespace speechalign
