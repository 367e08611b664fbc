// tests/gradcheck.hpp

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

// Central finite-difference oracle. Evaluates the function on fresh tapes
// with perturbed inputs; shares nothing with the reverse sweep it checks.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

#include "speechalign/tape.hpp"

namespace speechalign::testing {

using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps coordinates whose true
/// gradient is ~0 from dividing roundoff by roundoff.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

inline double evaluate(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  return f(tape, leaves).item();
}

/// Checks up to `max_coords` coordinates per input (all when 0), chosen by
/// `seed` when sampling is needed.
inline GradCheckResult gradcheck(const ScalarFn& f, const std::vector<Tensor>& inputs,
                                 double step = 1e-5, std::size_t max_coords = 0,
                                 unsigned seed = 1, double floor = 1e-6) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  const Var out = f(tape, leaves);
  const Gradients grads = tape.backward(out);

  GradCheckResult res;
  std::mt19937 rng(seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = grads.of(leaves[k]);
    std::vector<std::size_t> coords(inputs[k].size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_coords && coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    for (std::size_t c : coords) {
      std::vector<Tensor> plus = inputs, minus = inputs;
      plus[k][c] += step;
      minus[k][c] -= step;
      const double numeric = (evaluate(f, plus) - evaluate(f, minus)) / (2.0 * step);
      res.max_rel_error = std::max(res.max_rel_error, relative_error(analytic[c], numeric, floor));
      res.max_abs_error = std::max(res.max_abs_error, std::abs(analytic[c] - numeric));
      ++res.checked;
    }
  }
  return res;
}

inline Tensor random_tensor(std::mt19937_64& rng, std::size_t rows, std::size_t cols,
                            double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t({rows, cols});
  for (auto& v : t.values()) v = u(rng);
  return t;
}

}  // namespace speechalign::testing
