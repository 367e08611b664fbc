// src/metrics.cpp

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

#include "speechalign/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace speechalign {

namespace {

[[noreturn]] void invalid(const std::string& what) { throw std::invalid_argument(what); }

std::map<std::vector<std::string>, std::size_t> ngram_counts(const Words& w, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> out;
  for (std::size_t i = 0; i + n <= w.size(); ++i) ++out[Words(w.begin() + long(i), w.begin() + long(i + n))];
  return out;
}

}  // namespace

Words tokenize_words(const std::string& text) {
  Words out;
  std::istringstream in(text);
  for (std::string w; in >> w;) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
    out.push_back(std::move(w));
  }
  return out;
}

std::size_t edit_distance(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double wer(const Words& reference, const Words& hypothesis) {
  if (reference.empty()) invalid("wer: empty reference");
  return double(edit_distance(reference, hypothesis)) / double(reference.size());
}

std::string normalize_answer(const std::string& s) {
  std::string cleaned;
  for (unsigned char c : s) {
    if (std::ispunct(c)) continue;
    cleaned.push_back(static_cast<char>(std::tolower(c)));
  }
  std::string out;
  for (const std::string& w : tokenize_words(cleaned)) {
    if (w == "a" || w == "an" || w == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

double exact_match(const std::string& reference, const std::string& hypothesis) {
  return normalize_answer(reference) == normalize_answer(hypothesis) ? 100.0 : 0.0;
}

double token_f1(const std::string& reference, const std::string& hypothesis) {
  const Words ref = tokenize_words(normalize_answer(reference));
  const Words hyp = tokenize_words(normalize_answer(hypothesis));
  if (ref.empty() || hyp.empty()) return ref.empty() && hyp.empty() ? 100.0 : 0.0;
  std::map<std::string, long> counts;
  for (const auto& w : ref) ++counts[w];
  std::size_t common = 0;
  for (const auto& w : hyp)
    if (counts[w]-- > 0) ++common;
  if (common == 0) return 0.0;
  const double p = double(common) / double(hyp.size());
  const double r = double(common) / double(ref.size());
  return 100.0 * 2.0 * p * r / (p + r);
}

double corpus_bleu(const std::vector<Words>& references, const std::vector<Words>& hypotheses, std::size_t max_n) {
  if (references.size() != hypotheses.size())
    invalid("corpus_bleu: " + std::to_string(references.size()) + " references for " +
            std::to_string(hypotheses.size()) + " hypotheses");
  if (references.empty()) invalid("corpus_bleu: empty corpus");
  if (max_n == 0) invalid("corpus_bleu: max_n must be >= 1");
  std::vector<std::size_t> matches(max_n, 0), totals(max_n, 0);
  std::size_t ref_len = 0, hyp_len = 0;
  for (std::size_t s = 0; s < references.size(); ++s) {
    ref_len += references[s].size();
    hyp_len += hypotheses[s].size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      const auto ref = ngram_counts(references[s], n);
      for (const auto& [gram, count] : ngram_counts(hypotheses[s], n)) {
        totals[n - 1] += count;
        const auto it = ref.find(gram);
        if (it != ref.end()) matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  if (hyp_len == 0 || matches[0] == 0) return 0.0;
  double log_p = 0.0;
  for (std::size_t n = 0; n < max_n; ++n) {
    const double p = matches[n] ? double(matches[n]) / double(totals[n]) : 1.0 / double(totals[n] + 1);
    log_p += std::log(p) / double(max_n);
  }
  const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - double(ref_len) / double(hyp_len));
  return 100.0 * bp * std::exp(log_p);
}

double retrieval_at_1(const Tensor& s) {
  const std::size_t b = s.rows();
  if (b < 2 || s.cols() != b) invalid("retrieval_at_1: expected a square matrix with at least 2 rows");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < b; ++j)
      if (s(i, j) > s(i, best)) best = j;
    hits += best == i;
  }
  return 100.0 * double(hits) / double(b);
}

double retrieval_at_1(std::span<const Var> speech, std::span<const Var> text, SimilarityKind kind,
                      const SinkhornParams& sinkhorn) {
  return retrieval_at_1(similarity_matrix(speech, text, kind, sinkhorn).value());
}

double norm_avg(const std::map<std::string, double>& scores, const std::map<std::string, Bound>& bounds) {
  if (scores.empty()) invalid("norm_avg: no scores");
  double total = 0.0;
  for (const auto& [task, score] : scores) {
    const auto it = bounds.find(task);
    if (it == bounds.end()) invalid("norm_avg: no bounds for task '" + task + "'");
    const Bound& b = it->second;
    if (b.lb == b.ub) invalid("norm_avg: lb equals ub for task '" + task + "'");
    total += (score - b.lb) / (b.ub - b.lb);
  }
  return 100.0 * total / double(scores.size());
}

std::map<std::string, Bound> reference_bounds() {
  return {{"asr", {18.38, 6.54}}, {"st", {73.92, 80.02}}, {"sqa", {54.76, 77.10}}};
}

HeldoutLosses heldout_contrastive(const Corpus& corpus, const FrozenStack& stack, const ProjectorParams& params,
                                  const HeldoutOptions& options) {
  if (corpus.size() < 2) invalid("heldout_contrastive: need at least 2 examples");
  if (options.batch_size < 2) invalid("heldout_contrastive: batch size must be >= 2");
  const LayerSet layers = normalize_layers(options.layers, stack.depth());
  const std::size_t bs = std::min(options.batch_size, corpus.size());
  const std::size_t batches = corpus.size() / bs;

  HeldoutLosses sums;
  for (std::size_t k = 0; k < batches; ++k) {
    Tape tape;
    const ProjectorVars pv = bind(tape, params, false);
    std::vector<Var> speech, text;
    for (std::size_t i = k * bs; i < (k + 1) * bs; ++i) {
      speech.push_back(project(pv, corpus.examples[i].speech.frames, stack.config()));
      text.push_back(stack.embed(tape, corpus.examples[i].text.tokens));
    }
    for (SimilarityKind kind : options.kinds) {
      ContrastiveParams cp{kind, options.tau, options.sinkhorn, false};
      const LayerLosses l = multi_layer_contrastive(stack, speech, text, layers, cp);
      for (std::size_t j = 0; j < layers.size(); ++j) sums[kind][layers[j]] += l.per_layer[j].item() / double(batches);
    }
  }
  return sums;
}

std::string ScoreReport::to_json() const {
  nlohmann::ordered_json j;
  for (const auto& [task, score] : scores) {
    j["scores"][task] = score;
    const auto it = bounds.find(task);
    if (it != bounds.end()) j["bounds"][task] = {{"lb", it->second.lb}, {"ub", it->second.ub}};
  }
  for (const auto& [name, value] : extra) j["extra"][name] = value;
  if (!scores.empty()) j["norm_avg"] = normalized();
  return j.dump(2) + "\n";
}

std::string ScoreReport::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "metric,value,lb,ub\n";
  for (const auto& [task, score] : scores) {
    out << task << ',' << score;
    const auto it = bounds.find(task);
    if (it != bounds.end()) out << ',' << it->second.lb << ',' << it->second.ub;
    else out << ",,";
    out << '\n';
  }
  for (const auto& [name, value] : extra) out << name << ',' << value << ",,\n";
  if (!scores.empty()) out << "norm_avg," << normalized() << ",,\n";
  return out.str();
}

}  // namespace speechalign
