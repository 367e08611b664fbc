// src/tape.cpp

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

#include "speechalign/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace speechalign {

namespace {

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " +
                   to_string(b));
}

Tape* common_tape(const Var& a, const Var& b, const char* op) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument(std::string(op) + ": empty Var");
  if (a.tape() != b.tape()) {
    throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
  }
  return a.tape();
}

// c += a * b, a: n x k, b: k x m.
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = c + i * m;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

// c += a * b^T, a: n x k, b: m x k.
void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * m + j] += s;
    }
  }
}

// c += a^T * b, a: k x n, b: k x m.
void gemm_tn(const double* a, const double* b, double* c, std::size_t k, std::size_t n,
             std::size_t m) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * n;
    const double* bp = b + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c + i * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename F>
Var unary(const Var& a, const char* op, F f, BackwardFn bw) {
  require_matrix(a.value(), op);
  Tensor out = a.value();
  for (auto& v : out.values()) v = f(v);
  return a.tape()->record(std::move(out), {a}, std::move(bw));
}

}  // namespace

// ---------------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Tensor Gradients::of(const Var& v) const {
  if (v.id() < grads_.size() && !grads_[v.id()].empty()) return grads_[v.id()];
  return Tensor(v.shape(), 0.0);
}

bool Gradients::reached(const Var& v) const {
  return v.id() < grads_.size() && !grads_[v.id()].empty();
}

Tensor* BackwardContext::in_grad(std::size_t k) {
  const std::size_t id = inputs_[k];
  if (!tape_.requires_grad(id)) return nullptr;
  Tensor& g = grads_[id];
  if (g.empty()) g = Tensor(tape_.value(id).shape(), 0.0);
  return &g;
}

Var Tape::push(Tensor value, bool requires_grad, std::vector<std::size_t> inputs,
               BackwardFn fn) {
  nodes_.push_back(Node{std::move(value), requires_grad, std::move(inputs), std::move(fn)});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  bool any = false;
  std::vector<std::size_t> ids;
  ids.reserve(inputs.size());
  for (const auto& v : inputs) {
    if (v.tape() != this) throw std::invalid_argument("record: input from another tape");
    ids.push_back(v.id());
    any = any || nodes_[v.id()].requires_grad;
  }
  if (!any) return push(std::move(value), false, {}, nullptr);
  return push(std::move(value), true, std::move(ids), std::move(backward));
}

Gradients Tape::backward(const Var& scalar) const {
  if (scalar.tape() != this) throw std::invalid_argument("backward: Var from another tape");
  if (scalar.value().size() != 1) {
    throw ShapeError("backward: output must be a scalar, shape is " +
                     to_string(scalar.value().shape()));
  }
  std::vector<Tensor> grads(nodes_.size());
  if (!nodes_[scalar.id()].requires_grad) return Gradients(std::move(grads));
  grads[scalar.id()] = Tensor(scalar.value().shape(), 1.0);
  for (std::size_t id = scalar.id() + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.backward || grads[id].empty()) continue;
    // Adjoint of a node is complete here: every consumer has a larger id.
    const Tensor& out_grad = grads[id];
    BackwardContext ctx(out_grad, n.inputs, grads, *this);
    n.backward(ctx);
  }
  return Gradients(std::move(grads));
}

// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tape* t = common_tape(a, b, "matmul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_matrix(A, "matmul");
  require_matrix(B, "matmul");
  if (A.cols() != B.rows()) shape_mismatch("matmul", A.shape(), B.shape());
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  Tensor out({n, m});
  gemm_nn(A.values().data(), B.values().data(), out.values().data(), n, k, m);
  return t->record(std::move(out), {a, b}, [a, b, n, k, m](BackwardContext& ctx) {
    const double* g = ctx.out_grad().values().data();
    if (Tensor* ga = ctx.in_grad(0)) gemm_nt(g, b.value().values().data(), ga->values().data(), n, m, k);
    if (Tensor* gb = ctx.in_grad(1)) gemm_tn(a.value().values().data(), g, gb->values().data(), n, k, m);
  });
}

Var add(const Var& a, const Var& b) {
  Tape* t = common_tape(a, b, "add");
  if (a.shape() != b.shape()) shape_mismatch("add", a.shape(), b.shape());
  Tensor out = a.value();
  out.add_in_place(b.value());
  return t->record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    for (std::size_t k = 0; k < 2; ++k)
      if (Tensor* g = ctx.in_grad(k)) g->add_in_place(ctx.out_grad());
  });
}

Var sub(const Var& a, const Var& b) {
  Tape* t = common_tape(a, b, "sub");
  if (a.shape() != b.shape()) shape_mismatch("sub", a.shape(), b.shape());
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  return t->record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    if (Tensor* ga = ctx.in_grad(0)) ga->add_in_place(g);
    if (Tensor* gb = ctx.in_grad(1))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

Var scale(const Var& a, double s) {
  return unary(a, "scale", [s](double v) { return v * s; }, [s](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    if (Tensor* ga = ctx.in_grad(0))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += s * g[i];
  });
}

Var exp(const Var& a) {
  return unary(a, "exp", [](double v) { return std::exp(v); }, [a](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& x = a.value();
    if (Tensor* ga = ctx.in_grad(0))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * std::exp(x[i]);
  });
}

Var log(const Var& a) {
  return unary(a, "log", [](double v) { return std::log(v); }, [a](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& x = a.value();
    if (Tensor* ga = ctx.in_grad(0))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / x[i];
  });
}

Var tanh(const Var& a) {
  return unary(a, "tanh", [](double v) { return std::tanh(v); }, [a](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& x = a.value();
    if (Tensor* ga = ctx.in_grad(0))
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = std::tanh(x[i]);
        (*ga)[i] += g[i] * (1.0 - y * y);
      }
  });
}

Var mul(const Var& a, const Var& b) {
  Tape* t = common_tape(a, b, "mul");
  if (a.shape() != b.shape()) shape_mismatch("mul", a.shape(), b.shape());
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return t->record(std::move(out), {a, b}, [a, b](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    if (Tensor* ga = ctx.in_grad(0)) {
      const Tensor& B = b.value();
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * B[i];
    }
    if (Tensor* gb = ctx.in_grad(1)) {
      const Tensor& A = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * A[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  Tape* t = common_tape(a, b, "div");
  if (a.shape() != b.shape()) shape_mismatch("div", a.shape(), b.shape());
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= B[i];
  return t->record(std::move(out), {a, b}, [a, b](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (Tensor* ga = ctx.in_grad(0))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / B[i];
    if (Tensor* gb = ctx.in_grad(1))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i] * A[i] / (B[i] * B[i]);
  });
}

Var transpose(const Var& a) {
  require_matrix(a.value(), "transpose");
  return a.tape()->record(a.value().transposed(), {a}, [](BackwardContext& ctx) {
    if (Tensor* ga = ctx.in_grad(0)) ga->add_in_place(ctx.out_grad().transposed());
  });
}

namespace {

// Row-wise (kCols) or column-wise (kRows) softmax / log-softmax of x.
Tensor softmax_value(const Tensor& x, Axis axis, bool log_space) {
  require_matrix(x, log_space ? "log_softmax" : "softmax");
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out({r, c});
  const bool by_row = axis == Axis::kCols;
  const std::size_t lines = by_row ? r : c, len = by_row ? c : r;
  for (std::size_t l = 0; l < lines; ++l) {
    auto at = [&](std::size_t q) -> std::size_t { return by_row ? l * c + q : q * c + l; };
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t q = 0; q < len; ++q) mx = std::max(mx, x[at(q)]);
    double z = 0.0;
    for (std::size_t q = 0; q < len; ++q) z += std::exp(x[at(q)] - mx);
    const double lz = std::log(z);
    for (std::size_t q = 0; q < len; ++q) {
      const double lp = x[at(q)] - mx - lz;
      out[at(q)] = log_space ? lp : std::exp(lp);
    }
  }
  return out;
}

}  // namespace

Var softmax(const Var& a, Axis axis) {
  Tensor y = softmax_value(a.value(), axis, false);
  Tensor y_copy = a.requires_grad() ? y : Tensor();
  return a.tape()->record(std::move(y), {a}, [axis, y = std::move(y_copy)](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    if (!ga) return;
    const Tensor& g = ctx.out_grad();
    const std::size_t r = y.rows(), c = y.cols();
    const bool by_row = axis == Axis::kCols;
    const std::size_t lines = by_row ? r : c, len = by_row ? c : r;
    for (std::size_t l = 0; l < lines; ++l) {
      auto at = [&](std::size_t q) -> std::size_t { return by_row ? l * c + q : q * c + l; };
      double dot = 0.0;
      for (std::size_t q = 0; q < len; ++q) dot += g[at(q)] * y[at(q)];
      for (std::size_t q = 0; q < len; ++q) (*ga)[at(q)] += y[at(q)] * (g[at(q)] - dot);
    }
  });
}

Var log_softmax(const Var& a, Axis axis) {
  Tensor y = softmax_value(a.value(), axis, true);
  Tensor y_copy = a.requires_grad() ? y : Tensor();
  return a.tape()->record(std::move(y), {a}, [axis, y = std::move(y_copy)](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    if (!ga) return;
    const Tensor& g = ctx.out_grad();
    const std::size_t r = y.rows(), c = y.cols();
    const bool by_row = axis == Axis::kCols;
    const std::size_t lines = by_row ? r : c, len = by_row ? c : r;
    for (std::size_t l = 0; l < lines; ++l) {
      auto at = [&](std::size_t q) -> std::size_t { return by_row ? l * c + q : q * c + l; };
      double gs = 0.0;
      for (std::size_t q = 0; q < len; ++q) gs += g[at(q)];
      for (std::size_t q = 0; q < len; ++q) (*ga)[at(q)] += g[at(q)] - std::exp(y[at(q)]) * gs;
    }
  });
}

Var mean(const Var& a, Axis axis) {
  const Tensor& x = a.value();
  require_matrix(x, "mean");
  const std::size_t r = x.rows(), c = x.cols();
  if ((axis == Axis::kRows ? r : c) == 0) throw ShapeError("mean: empty axis in " + to_string(x.shape()));
  Tensor out = axis == Axis::kRows ? Tensor({1, c}) : Tensor({r, 1});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      if (axis == Axis::kRows)
        out[j] += x(i, j) / static_cast<double>(r);
      else
        out[i] += x(i, j) / static_cast<double>(c);
    }
  return a.tape()->record(std::move(out), {a}, [axis, r, c](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    if (!ga) return;
    const Tensor& g = ctx.out_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        (*ga)(i, j) += axis == Axis::kRows ? g[j] / static_cast<double>(r)
                                           : g[i] / static_cast<double>(c);
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape()->record(Tensor::scalar(s), {a}, [](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    if (!ga) return;
    const double g = ctx.out_grad()[0];
    for (auto& v : ga->values()) v += g;
  });
}

Var l2norm(const Var& a, Axis axis) {
  const Tensor& x = a.value();
  require_matrix(x, "l2norm");
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out = axis == Axis::kRows ? Tensor({1, c}) : Tensor({r, 1});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[axis == Axis::kRows ? j : i] += x(i, j) * x(i, j);
  for (auto& v : out.values()) v = std::sqrt(v);
  Tensor n = a.requires_grad() ? out : Tensor();
  return a.tape()->record(std::move(out), {a}, [a, axis, r, c, n = std::move(n)](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    if (!ga) return;
    const Tensor& g = ctx.out_grad();
    const Tensor& x = a.value();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const std::size_t k = axis == Axis::kRows ? j : i;
        if (n[k] > 0.0) (*ga)(i, j) += g[k] * x(i, j) / n[k];
      }
  });
}

Var concat(std::span<const Var> parts, Axis axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Tape* t = parts[0].tape();
  std::size_t total = 0;
  const std::size_t fixed = axis == Axis::kRows ? parts[0].cols() : parts[0].rows();
  for (const auto& p : parts) {
    common_tape(parts[0], p, "concat");
    require_matrix(p.value(), "concat");
    const std::size_t f = axis == Axis::kRows ? p.cols() : p.rows();
    if (f != fixed) shape_mismatch("concat", parts[0].shape(), p.shape());
    total += axis == Axis::kRows ? p.rows() : p.cols();
  }
  Tensor out = axis == Axis::kRows ? Tensor({total, fixed}) : Tensor({fixed, total});
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor& x = p.value();
    offsets.push_back(off);
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) {
        if (axis == Axis::kRows)
          out(off + i, j) = x(i, j);
        else
          out(i, off + j) = x(i, j);
      }
    off += axis == Axis::kRows ? x.rows() : x.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t->record(std::move(out), inputs, [inputs, offsets, axis](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      Tensor* gk = ctx.in_grad(k);
      if (!gk) continue;
      for (std::size_t i = 0; i < gk->rows(); ++i)
        for (std::size_t j = 0; j < gk->cols(); ++j)
          (*gk)(i, j) += axis == Axis::kRows ? g(offsets[k] + i, j) : g(i, offsets[k] + j);
    }
  });
}

Var slice(const Var& a, Axis axis, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  require_matrix(x, "slice");
  const std::size_t extent = axis == Axis::kRows ? x.rows() : x.cols();
  if (begin > end || end > extent) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + to_string(x.shape()));
  }
  const std::size_t n = end - begin;
  Tensor out = axis == Axis::kRows ? Tensor({n, x.cols()}) : Tensor({x.rows(), n});
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j)
      out(i, j) = axis == Axis::kRows ? x(begin + i, j) : x(i, begin + j);
  return a.tape()->record(std::move(out), {a}, [axis, begin](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    if (!ga) return;
    const Tensor& g = ctx.out_grad();
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) {
        if (axis == Axis::kRows)
          (*ga)(begin + i, j) += g(i, j);
        else
          (*ga)(i, begin + j) += g(i, j);
      }
  });
}

Var add_row(const Var& a, const Var& row) {
  Tape* t = common_tape(a, row, "add_row");
  const Tensor& x = a.value();
  const Tensor& b = row.value();
  require_matrix(x, "add_row");
  require_matrix(b, "add_row");
  if (b.rows() != 1 || b.cols() != x.cols()) shape_mismatch("add_row", x.shape(), b.shape());
  Tensor out = x;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) += b[j];
  return t->record(std::move(out), {a, row}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    if (Tensor* ga = ctx.in_grad(0)) ga->add_in_place(g);
    if (Tensor* gb = ctx.in_grad(1))
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*gb)[j] += g(i, j);
  });
}

Var scale_rows(const Var& a, const Var& v) {
  Tape* t = common_tape(a, v, "scale_rows");
  const Tensor& x = a.value();
  const Tensor& s = v.value();
  require_matrix(x, "scale_rows");
  require_matrix(s, "scale_rows");
  if (s.cols() != 1 || s.rows() != x.rows()) shape_mismatch("scale_rows", x.shape(), s.shape());
  Tensor out = x;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) *= s[i];
  return t->record(std::move(out), {a, v}, [a, v](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& x = a.value();
    const Tensor& s = v.value();
    if (Tensor* ga = ctx.in_grad(0))
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*ga)(i, j) += g(i, j) * s[i];
    if (Tensor* gv = ctx.in_grad(1))
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*gv)[i] += g(i, j) * x(i, j);
  });
}

Var pick(const Var& a, std::span<const std::size_t> index) {
  const Tensor& x = a.value();
  require_matrix(x, "pick");
  if (index.size() != x.rows()) {
    throw ShapeError("pick: " + std::to_string(index.size()) + " indices for " + to_string(x.shape()));
  }
  Tensor out({x.rows(), 1});
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (index[i] >= x.cols()) throw ShapeError("pick: column index out of range");
    out[i] = x(i, index[i]);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return a.tape()->record(std::move(out), {a}, [idx = std::move(idx)](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    if (!ga) return;
    const Tensor& g = ctx.out_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) (*ga)(i, idx[i]) += g[i];
  });
}

Var pairwise_lp(const Var& a, const Var& b, double p) {
  Tape* t = common_tape(a, b, "pairwise_lp");
  const Tensor& X = a.value();
  const Tensor& Y = b.value();
  require_matrix(X, "pairwise_lp");
  require_matrix(Y, "pairwise_lp");
  if (X.cols() != Y.cols()) shape_mismatch("pairwise_lp", X.shape(), Y.shape());
  if (!(p >= 1.0)) throw std::invalid_argument("pairwise_lp: exponent must be >= 1");
  const std::size_t n = X.rows(), m = Y.rows(), h = X.cols();
  Tensor out({n, m});
  const bool euclid = p == 2.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < h; ++k) {
        const double d = std::abs(X(i, k) - Y(j, k));
        s += euclid ? d * d : std::pow(d, p);
      }
      out(i, j) = euclid ? std::sqrt(s) : std::pow(s, 1.0 / p);
    }
  Tensor dist = (a.requires_grad() || b.requires_grad()) ? out : Tensor();
  return t->record(std::move(out), {a, b}, [a, b, p, n, m, h, dist = std::move(dist)](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& X = a.value();
    const Tensor& Y = b.value();
    Tensor* ga = ctx.in_grad(0);
    Tensor* gb = ctx.in_grad(1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double dij = dist(i, j);
        if (dij <= 0.0 || g(i, j) == 0.0) continue;
        // d/dx_k ||x - y||_p = sign(d_k) |d_k|^(p-1) / ||d||_p^(p-1)
        const double denom = std::pow(dij, p - 1.0);
        for (std::size_t k = 0; k < h; ++k) {
          const double d = X(i, k) - Y(j, k);
          const double w = (p == 2.0 ? d : std::copysign(std::pow(std::abs(d), p - 1.0), d)) / denom;
          if (ga) (*ga)(i, k) += g(i, j) * w;
          if (gb) (*gb)(j, k) -= g(i, j) * w;
        }
      }
  });
}

// ---------------------------------------------------------------------------

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kScale: return "scale";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kMean: return "mean";
    case OpKind::kL2Norm: return "l2norm";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kMul: return "mul";
    case OpKind::kTranspose: return "transpose";
  }
  return "?";
}

Var forward_op(OpKind kind, std::span<const Var> in, const OpArgs& args) {
  const std::size_t arity = [&] {
    switch (kind) {
      case OpKind::kMatmul:
      case OpKind::kAdd:
      case OpKind::kMul: return std::size_t{2};
      case OpKind::kConcat: return in.size();
      default: return std::size_t{1};
    }
  }();
  if (in.size() != arity || in.empty()) {
    throw std::invalid_argument(std::string(op_name(kind)) + ": wrong number of inputs (" +
                                std::to_string(in.size()) + ")");
  }
  switch (kind) {
    case OpKind::kMatmul: return matmul(in[0], in[1]);
    case OpKind::kAdd: return add(in[0], in[1]);
    case OpKind::kScale: return scale(in[0], args.factor);
    case OpKind::kExp: return exp(in[0]);
    case OpKind::kLog: return log(in[0]);
    case OpKind::kSoftmax: return softmax(in[0], args.axis);
    case OpKind::kMean: return mean(in[0], args.axis);
    case OpKind::kL2Norm: return l2norm(in[0], args.axis);
    case OpKind::kConcat: return concat(in, args.axis);
    case OpKind::kSlice: return slice(in[0], args.axis, args.begin, args.end);
    case OpKind::kMul: return mul(in[0], in[1]);
    case OpKind::kTranspose: return transpose(in[0]);
  }
  throw std::invalid_argument("forward_op: unknown kind");
}

}  // namespace speechalign
