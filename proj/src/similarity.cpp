// src/similarity.cpp

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

#include "speechalign/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>

namespace speechalign {

Var mean_pool(const Var& seq, std::span<const std::uint8_t> mask) {
  const std::size_t len = seq.rows();
  if (!mask.empty() && mask.size() != len) {
    throw ShapeError("mean_pool: mask of length " + std::to_string(mask.size()) + " for " +
                     to_string(seq.shape()));
  }
  std::size_t live = 0;
  for (std::size_t i = 0; i < len; ++i) live += mask.empty() || mask[i] ? 1 : 0;
  if (live == 0) throw std::invalid_argument("mean_pool: every position is masked");
  if (mask.empty()) return mean(seq, Axis::kRows);
  Tensor w({1, len});
  for (std::size_t i = 0; i < len; ++i) w[i] = mask[i] ? 1.0 / static_cast<double>(live) : 0.0;
  return matmul(seq.tape()->constant(std::move(w)), seq);
}

Var cosine_sim(const Var& a, const Var& b) {
  if (a.rows() != 1 || b.rows() != 1 || a.cols() != b.cols())
    throw ShapeError("cosine_sim: expected two 1 x H vectors, got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  const Var na = l2norm(a, Axis::kCols);
  const Var nb = l2norm(b, Axis::kCols);
  if (na.item() == 0.0 || nb.item() == 0.0) throw std::invalid_argument("cosine_sim: zero-norm input");
  return div(matmul(a, transpose(b)), mul(na, nb));
}

Var normalize_rows(const Var& x) {
  const Var n = l2norm(x, Axis::kCols);
  for (double v : n.value().values())
    if (v == 0.0) throw std::invalid_argument("normalize_rows: zero-norm row");
  const Var one = x.tape()->constant(Tensor(n.shape(), 1.0));
  return scale_rows(x, div(one, n));
}

Var cost_matrix(const Var& t, const Var& s, double p) {
  if (t.cols() != s.cols())
    throw ShapeError("cost_matrix: embedding dims differ, " + to_string(t.shape()) + " vs " +
                     to_string(s.shape()));
  if (!(p >= 1.0)) throw std::invalid_argument("cost_matrix: p must be >= 1");
  return pairwise_lp(t, s, p);
}

// ---------------------------------------------------------------------------

namespace {

// out_i = -eps * LSE_j(log_w_j + (pot_j - C(i, j)) / eps) along rows (by_row)
// or the transposed reduction along columns.
void soft_min(const Tensor& c, const std::vector<double>& pot, double log_w, double eps, bool by_row,
              std::vector<double>& out) {
  const std::size_t n = c.rows(), m = c.cols();
  const std::size_t lines = by_row ? n : m, len = by_row ? m : n;
  out.assign(lines, 0.0);
  std::vector<double> z(len);
  for (std::size_t l = 0; l < lines; ++l) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t q = 0; q < len; ++q) {
      const double cij = by_row ? c(l, q) : c(q, l);
      z[q] = log_w + (pot[q] - cij) / eps;
      mx = std::max(mx, z[q]);
    }
    double acc = 0.0;
    for (std::size_t q = 0; q < len; ++q) acc += std::exp(z[q] - mx);
    out[l] = -eps * (mx + std::log(acc));
  }
}

// Softmax weights of the soft_min above: W(i, j) summing to one along the
// reduced axis.
void soft_min_weights(const Tensor& c, const std::vector<double>& pot, double log_w, double eps,
                      bool by_row, Tensor& w) {
  const std::size_t n = c.rows(), m = c.cols();
  w = Tensor({n, m});
  const std::size_t lines = by_row ? n : m, len = by_row ? m : n;
  for (std::size_t l = 0; l < lines; ++l) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t q = 0; q < len; ++q) {
      const double cij = by_row ? c(l, q) : c(q, l);
      mx = std::max(mx, log_w + (pot[q] - cij) / eps);
    }
    double acc = 0.0;
    for (std::size_t q = 0; q < len; ++q) {
      const double cij = by_row ? c(l, q) : c(q, l);
      const double e = std::exp(log_w + (pot[q] - cij) / eps - mx);
      (by_row ? w(l, q) : w(q, l)) = e;
      acc += e;
    }
    for (std::size_t q = 0; q < len; ++q) (by_row ? w(l, q) : w(q, l)) /= acc;
  }
}

struct Iterates {
  // f[k] = T_f(g_prev[k]); g[k] = T_g(f[k]).
  std::vector<std::vector<double>> f;
  std::vector<std::vector<double>> g_prev;
};

}  // namespace

TransportResult entropic_transport(const Var& cost, double blur, std::size_t max_iter, double tol) {
  const Tensor& c = cost.value();
  require_matrix(c, "entropic_transport");
  const std::size_t n = c.rows(), m = c.cols();
  if (n == 0 || m == 0) throw std::invalid_argument("entropic_transport: empty point set");
  if (!(blur > 0.0)) throw std::invalid_argument("entropic_transport: blur must be > 0");
  if (max_iter == 0) throw std::invalid_argument("entropic_transport: max_iter must be >= 1");
  const double eps = blur;
  const double log_a = -std::log(static_cast<double>(n));
  const double log_b = -std::log(static_cast<double>(m));
  const bool keep = cost.requires_grad();

  TransportResult res;
  auto hist = std::make_shared<Iterates>();
  std::vector<double> g(m, 0.0), f, f_next;
  soft_min(c, g, log_b, eps, true, f);
  if (keep) {
    hist->g_prev.push_back(g);
    hist->f.push_back(f);
  }
  for (std::size_t k = 1;; ++k) {
    soft_min(c, f, log_a, eps, false, g);
    soft_min(c, g, log_b, eps, true, f_next);
    // Row sums of the current plan are a_i * exp((f_i - f_next_i) / eps).
    double viol = 0.0;
    for (std::size_t i = 0; i < n; ++i) viol += std::abs(std::exp((f[i] - f_next[i]) / eps) - 1.0);
    viol /= static_cast<double>(n);
    res.violations.push_back(viol);
    res.iterations = k;
    if (viol < tol) {
      res.converged = true;
      break;
    }
    if (k == max_iter) break;
    f.swap(f_next);
    if (keep) {
      hist->g_prev.push_back(g);
      hist->f.push_back(f);
    }
  }

  double value = 0.0;
  for (double v : f) value += v / static_cast<double>(n);
  for (double v : g) value += v / static_cast<double>(m);

  res.plan = Tensor({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      res.plan(i, j) = std::exp(log_a + log_b + (f[i] + g[j] - c(i, j)) / eps);

  res.value = cost.tape()->record(Tensor::scalar(value), {cost}, [cost, hist, eps, log_a, log_b, n, m](BackwardContext& ctx) {
    Tensor* gc = ctx.in_grad(0);
    if (!gc) return;
    const Tensor& c = cost.value();
    const double seed = ctx.out_grad()[0];
    std::vector<double> gbar(m, seed / static_cast<double>(m));
    std::vector<double> fbar(n, seed / static_cast<double>(n));
    std::vector<double> g_k;
    Tensor w;
    for (std::size_t k = hist->f.size(); k-- > 0;) {
      // g_k = T_g(f_k): column-normalised weights Q.
      soft_min_weights(c, hist->f[k], log_a, eps, false, w);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double q = w(i, j);
          fbar[i] -= gbar[j] * q;
          (*gc)(i, j) += gbar[j] * q;
        }
      // f_k = T_f(g_{k-1}): row-normalised weights P.
      soft_min_weights(c, hist->g_prev[k], log_b, eps, true, w);
      std::fill(gbar.begin(), gbar.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double pij = w(i, j);
          (*gc)(i, j) += fbar[i] * pij;
          gbar[j] -= fbar[i] * pij;
        }
      std::fill(fbar.begin(), fbar.end(), 0.0);
    }
  });
  return res;
}

TransportResult entropic_self_transport(const Var& cost, double blur, std::size_t max_iter, double tol) {
  const Tensor& c = cost.value();
  require_matrix(c, "entropic_self_transport");
  const std::size_t n = c.rows();
  if (n == 0 || c.cols() != n) throw ShapeError("entropic_self_transport: expected a square cost, got " + to_string(c.shape()));
  if (!(blur > 0.0)) throw std::invalid_argument("entropic_self_transport: blur must be > 0");
  if (max_iter == 0) throw std::invalid_argument("entropic_self_transport: max_iter must be >= 1");
  const double eps = blur;
  const double log_a = -std::log(static_cast<double>(n));
  const bool keep = cost.requires_grad();

  // f <- (f + T(f)) / 2 from f = 0. The reported pair is (f, T(f)).
  TransportResult res;
  auto hist = std::make_shared<std::vector<std::vector<double>>>();
  std::vector<double> f(n, 0.0), g, h;
  for (std::size_t k = 1;; ++k) {
    if (keep) hist->push_back(f);
    soft_min(c, f, log_a, eps, false, g);
    soft_min(c, g, log_a, eps, true, h);
    double viol = 0.0;
    for (std::size_t i = 0; i < n; ++i) viol += std::abs(std::exp((f[i] - h[i]) / eps) - 1.0);
    viol /= static_cast<double>(n);
    res.violations.push_back(viol);
    res.iterations = k;
    if (viol < tol) {
      res.converged = true;
      break;
    }
    if (k == max_iter) break;
    for (std::size_t i = 0; i < n; ++i) f[i] = 0.5 * (f[i] + g[i]);
  }

  double value = 0.0;
  for (std::size_t i = 0; i < n; ++i) value += (f[i] + g[i]) / static_cast<double>(n);
  res.plan = Tensor({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) res.plan(i, j) = std::exp(2.0 * log_a + (f[i] + g[j] - c(i, j)) / eps);

  res.value = cost.tape()->record(Tensor::scalar(value), {cost}, [cost, hist, eps, log_a, n](BackwardContext& ctx) {
    Tensor* gc = ctx.in_grad(0);
    if (!gc) return;
    const Tensor& c = cost.value();
    const double seed = ctx.out_grad()[0] / static_cast<double>(n);
    Tensor w;
    // Last step: value = <a, f_K> + <a, T(f_K)>.
    std::vector<double> fbar(n, seed), next(n);
    soft_min_weights(c, hist->back(), log_a, eps, false, w);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        fbar[i] -= seed * w(i, j);
        (*gc)(i, j) += seed * w(i, j);
      }
    // f_{k+1} = f_k / 2 + T(f_k) / 2.
    for (std::size_t k = hist->size() - 1; k-- > 0;) {
      soft_min_weights(c, (*hist)[k], log_a, eps, false, w);
      for (std::size_t i = 0; i < n; ++i) next[i] = 0.5 * fbar[i];
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double q = 0.5 * fbar[j] * w(i, j);
          next[i] -= q;
          (*gc)(i, j) += q;
        }
      fbar.swap(next);
    }
  });
  return res;
}

namespace {

bool is_symmetric(const Tensor& c) {
  if (c.rows() != c.cols()) return false;
  for (std::size_t i = 0; i < c.rows(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (c(i, j) != c(j, i)) return false;
  return true;
}

}  // namespace

DivergenceResult sinkhorn_divergence(const Var& t, const Var& s, const SinkhornParams& params) {
  if (t.rows() == 0 || s.rows() == 0) throw std::invalid_argument("sinkhorn_divergence: empty sequence");
  const Var c_ts = cost_matrix(t, s, params.p);
  const Var c_tt = cost_matrix(t, t, params.p);
  const Var c_ss = cost_matrix(s, s, params.p);
  // A symmetric cross cost (t and s hold the same points) gets the averaged
  // solver too; alternating updates oscillate there and stop early.
  TransportResult ts = is_symmetric(c_ts.value())
                           ? entropic_self_transport(c_ts, params.blur, params.max_iter, params.tol)
                           : entropic_transport(c_ts, params.blur, params.max_iter, params.tol);
  TransportResult tt = entropic_self_transport(c_tt, params.blur, params.max_iter, params.tol);
  TransportResult ss = entropic_self_transport(c_ss, params.blur, params.max_iter, params.tol);
  DivergenceResult out;
  out.value = sub(ts.value, scale(add(tt.value, ss.value), 0.5));
  out.plan = std::move(ts.plan);
  out.converged = ts.converged && tt.converged && ss.converged;
  out.iterations = ts.iterations;
  return out;
}

MarginalError marginal_error(const Tensor& plan) {
  MarginalError e;
  const std::size_t n = plan.rows(), m = plan.cols();
  std::vector<double> col(m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      row += plan(i, j);
      col[j] += plan(i, j);
    }
    e.rows = std::max(e.rows, std::abs(row - 1.0 / static_cast<double>(n)));
  }
  for (double v : col) e.cols = std::max(e.cols, std::abs(v - 1.0 / static_cast<double>(m)));
  return e;
}

}  // namespace speechalign
