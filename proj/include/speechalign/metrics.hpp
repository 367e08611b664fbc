// include/speechalign/metrics.hpp

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

// Evaluation metrics and score reports.

#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "speechalign/data.hpp"
#include "speechalign/losses.hpp"
#include "speechalign/model.hpp"

namespace speechalign {

using Words = std::vector<std::string>;

/// Lowercases and splits on whitespace.
Words tokenize_words(const std::string& text);

/// Word-level Levenshtein distance over the reference length (a fraction,
/// not a percentage). Throws on an empty reference.
double wer(const Words& reference, const Words& hypothesis);
/// Raw edit distance.
std::size_t edit_distance(const Words& a, const Words& b);

/// Lowercase, drop punctuation and the articles a/an/the, collapse spaces.
std::string normalize_answer(const std::string& s);
/// 100 when the normalized strings match, else 0.
double exact_match(const std::string& reference, const std::string& hypothesis);
/// Harmonic mean of token precision and recall after normalization, x100.
/// Two empty answers score 100.
double token_f1(const std::string& reference, const std::string& hypothesis);

/// Corpus BLEU in percent: geometric mean of clipped n-gram precisions
/// times the brevity penalty. Orders n >= 2 with no matches use
/// (0 + 1) / (total + 1); unigram precision is never smoothed.
double corpus_bleu(const std::vector<Words>& references, const std::vector<Words>& hypotheses, std::size_t max_n = 4);

/// Percentage of rows whose largest entry is on the diagonal; ties go to
/// the lowest column index.
double retrieval_at_1(const Tensor& similarity);
double retrieval_at_1(std::span<const Var> speech, std::span<const Var> text, SimilarityKind kind,
                      const SinkhornParams& sinkhorn = {});

struct Bound {
  double lb = 0.0;
  double ub = 100.0;
};

/// Mean over tasks of (score - lb) / (ub - lb), x100. Lower-is-better
/// tasks take ub < lb. Every score needs a bound with lb != ub.
double norm_avg(const std::map<std::string, double>& scores, const std::map<std::string, Bound>& bounds);

/// Bounds of the reference systems used for the published comparison
/// table: lb from the specialised models, ub from the full-data system.
std::map<std::string, Bound> reference_bounds();

struct HeldoutOptions {
  std::vector<SimilarityKind> kinds{SimilarityKind::kCosine, SimilarityKind::kWasserstein};
  LayerSet layers{0};
  std::size_t batch_size = 8;
  double tau = 0.1;
  SinkhornParams sinkhorn;
};

/// kind -> layer -> mean info_nce over consecutive fixed-size batches of
/// the corpus (a trailing partial batch is dropped unless it is the only
/// one).
using HeldoutLosses = std::map<SimilarityKind, std::map<std::size_t, double>>;
HeldoutLosses heldout_contrastive(const Corpus& corpus, const FrozenStack& stack, const ProjectorParams& params,
                                  const HeldoutOptions& options = {});

/// Task scores and bounds as a JSON object and as CSV rows
/// (metric,value,lb,ub).
struct ScoreReport {
  std::map<std::string, double> scores;
  std::map<std::string, Bound> bounds;
  /// Report-only metrics.
  std::map<std::string, double> extra;

  double normalized() const { return norm_avg(scores, bounds); }
  std::string to_json() const;
  std::string to_csv() const;
};

}  // namespace speechalign
