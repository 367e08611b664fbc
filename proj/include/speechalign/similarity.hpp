// include/speechalign/similarity.hpp

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

// Sequence-level similarity kernels between embedding sequences (L x H Vars):
// mean-pooled cosine, and the debiased entropic optimal-transport divergence
// between uniformly weighted point sets.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "speechalign/tape.hpp"

namespace speechalign {

/// Mean over the rows of `seq` whose mask entry is nonzero (all rows when
/// the mask is empty). Returns 1 x H.
Var mean_pool(const Var& seq, std::span<const std::uint8_t> mask = {});

/// a . b / (|a| |b|) for two 1 x H vectors; 1 x 1.
Var cosine_sim(const Var& a, const Var& b);

/// Scales every row to unit Euclidean norm. Rejects zero rows.
Var normalize_rows(const Var& x);

/// C(i, j) = || t_i - s_j ||_p for an N x H text and M x H speech sequence.
Var cost_matrix(const Var& t, const Var& s, double p);

struct SinkhornParams {
  /// Exponent of the ground distance.
  double p = 2.0;
  /// Entropic regularisation strength (epsilon).
  double blur = 0.5;
  std::size_t max_iter = 500;
  /// Stop once the L1 row-marginal violation drops below this.
  double tol = 1e-6;
};

struct TransportResult {
  /// Entropic transport cost <a, f> + <b, g> at the returned potentials, 1 x 1.
  Var value;
  /// N x M plan with column sums exactly 1/M and row sums within tol of 1/N.
  Tensor plan;
  bool converged = false;
  std::size_t iterations = 0;
  /// L1 row-marginal violation after each iteration.
  std::vector<double> violations;
};

/// Log-domain Sinkhorn on an N x M cost matrix with uniform marginals
/// (1/N, 1/M). The gradient with respect to the cost is the exact adjoint
/// of the unrolled iterations that were run.
TransportResult entropic_transport(const Var& cost, double blur, std::size_t max_iter, double tol);

/// The same problem for a symmetric N x N cost (a point set against
/// itself), iterated with the averaged update f <- (f + T(f)) / 2, which
/// avoids the slow oscillation of alternating updates on symmetric inputs.
TransportResult entropic_self_transport(const Var& cost, double blur, std::size_t max_iter, double tol);

struct DivergenceResult {
  /// OT(t, s) - OT(t, t) / 2 - OT(s, s) / 2, 1 x 1.
  Var value;
  /// Plan of the cross term.
  Tensor plan;
  /// All three transport problems met the tolerance.
  bool converged = false;
  std::size_t iterations = 0;
};

DivergenceResult sinkhorn_divergence(const Var& t, const Var& s, const SinkhornParams& params = {});

/// Max |row_sum - 1/N| and max |col_sum - 1/M| of a plan.
struct MarginalError {
  double rows = 0.0;
  double cols = 0.0;
};
MarginalError marginal_error(const Tensor& plan);

}  // namespace speechalign
