// src/losses.cpp

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

#include "speechalign/losses.hpp"

#include <array>
#include <numeric>
#include <stdexcept>

#include "speechalign/logging.hpp"

namespace speechalign {

namespace {

[[noreturn]] void invalid(const std::string& what) { throw std::invalid_argument(what); }

Var assemble(const std::vector<std::vector<Var>>& entries) {
  std::vector<Var> rows;
  rows.reserve(entries.size());
  for (const auto& row : entries) rows.push_back(row.size() == 1 ? row[0] : concat(row, Axis::kCols));
  return rows.size() == 1 ? rows[0] : concat(rows, Axis::kRows);
}

Var cosine_matrix(std::span<const Var> speech, std::span<const Var> text) {
  std::vector<Var> s, t;
  for (const Var& v : speech) s.push_back(mean_pool(v));
  for (const Var& v : text) t.push_back(mean_pool(v));
  const Var sn = normalize_rows(concat(s, Axis::kRows));
  const Var tn = normalize_rows(concat(t, Axis::kRows));
  return matmul(sn, transpose(tn));
}

Var wasserstein_matrix(std::span<const Var> speech, std::span<const Var> text, const SinkhornParams& sp) {
  const std::size_t b = speech.size();
  bool converged = true;
  auto self_term = [&](const Var& x) {
    TransportResult r = entropic_self_transport(cost_matrix(x, x, sp.p), sp.blur, sp.max_iter, sp.tol);
    converged = converged && r.converged;
    return r.value;
  };
  std::vector<Var> ss, tt;
  for (std::size_t i = 0; i < b; ++i) {
    ss.push_back(self_term(speech[i]));
    tt.push_back(self_term(text[i]));
  }
  std::vector<std::vector<Var>> entries(b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      TransportResult ts = entropic_transport(cost_matrix(text[j], speech[i], sp.p), sp.blur, sp.max_iter, sp.tol);
      converged = converged && ts.converged;
      // -(OT(t, s) - OT(t, t) / 2 - OT(s, s) / 2)
      entries[i].push_back(sub(scale(add(tt[j], ss[i]), 0.5), ts.value));
    }
  }
  if (!converged) {
    // Reported on the 1st, 10th, 100th, ... occurrence so long runs stay readable.
    static std::size_t count = 0, next = 1;
    if (++count == next) {
      next *= 10;
      warn("similarity_matrix: a Sinkhorn solve stopped at max_iter before reaching tol (" + std::to_string(count) +
           " batch" + (count == 1 ? "" : "es") + " so far)");
    }
  }
  return assemble(entries);
}

void check_batch(std::span<const Var> speech, std::size_t text_size, const char* who) {
  if (speech.size() != text_size)
    invalid(std::string(who) + ": " + std::to_string(speech.size()) + " speech vs " + std::to_string(text_size) +
            " text sequences");
  if (speech.size() < 2) invalid(std::string(who) + ": a batch needs at least 2 pairs for negatives");
}

Var mean_picked_log_prob(const Var& logits, std::span<const std::size_t> index, std::span<const double> weight) {
  const Var picked = pick(log_softmax(logits, Axis::kCols), index);
  Tensor w({1, weight.size()});
  std::copy(weight.begin(), weight.end(), w.values().begin());
  return scale(matmul(picked.tape()->constant(std::move(w)), picked), -1.0);
}

}  // namespace

const char* to_string(SimilarityKind kind) { return kind == SimilarityKind::kCosine ? "cosine" : "wasserstein"; }

SimilarityKind parse_similarity_kind(const std::string& name) {
  if (name == "cos" || name == "cosine") return SimilarityKind::kCosine;
  if (name == "wasser" || name == "wasserstein") return SimilarityKind::kWasserstein;
  invalid("unknown similarity kind '" + name + "' (expected cos or wasser)");
}

Var similarity_matrix(std::span<const Var> speech, std::span<const Var> text, SimilarityKind kind,
                      const SinkhornParams& sinkhorn) {
  check_batch(speech, text.size(), "similarity_matrix");
  return kind == SimilarityKind::kCosine ? cosine_matrix(speech, text) : wasserstein_matrix(speech, text, sinkhorn);
}

Var info_nce(const Var& similarity, double tau, bool symmetric) {
  if (!(tau > 0.0)) invalid("info_nce: temperature must be positive, got " + std::to_string(tau));
  const std::size_t b = similarity.rows();
  if (b == 0 || similarity.cols() != b) throw ShapeError("info_nce: expected a square matrix, got " +
                                                         to_string(similarity.shape()));
  std::vector<std::size_t> diag(b);
  std::iota(diag.begin(), diag.end(), std::size_t{0});
  const Var scaled = scale(similarity, 1.0 / tau);
  const Var speech_anchor = scale(mean(pick(log_softmax(scaled, Axis::kCols), diag), Axis::kRows), -1.0);
  if (!symmetric) return speech_anchor;
  const Var text_anchor = scale(mean(pick(log_softmax(transpose(scaled), Axis::kCols), diag), Axis::kRows), -1.0);
  return scale(add(speech_anchor, text_anchor), 0.5);
}

LayerLosses multi_layer_contrastive(const FrozenStack& stack, std::span<const Var> speech, std::span<const Var> text,
                                    const LayerSet& layers, const ContrastiveParams& params,
                                    std::span<const std::size_t> offsets) {
  check_batch(speech, text.size(), "multi_layer_contrastive");
  const LayerSet set = normalize_layers(layers, stack.depth());
  std::vector<std::vector<Var>> text_layers(set.size());
  for (std::size_t b = 0; b < text.size(); ++b) {
    const std::vector<Var> reprs = stack.layer_reprs(text[b], set, offsets.empty() ? 0 : offsets[b]);
    for (std::size_t k = 0; k < set.size(); ++k) text_layers[k].push_back(reprs[k]);
  }
  return multi_layer_contrastive(stack, speech, text_layers, set, params, offsets);
}

LayerLosses multi_layer_contrastive(const FrozenStack& stack, std::span<const Var> speech,
                                    const std::vector<std::vector<Var>>& text_layers, const LayerSet& layers,
                                    const ContrastiveParams& params, std::span<const std::size_t> offsets) {
  if (layers.empty()) invalid("multi_layer_contrastive: empty layer set");
  const LayerSet set = normalize_layers(layers, stack.depth());
  if (set != layers) invalid("multi_layer_contrastive: layers must be sorted and unique");
  if (text_layers.size() != set.size()) invalid("multi_layer_contrastive: text reprs for a different layer count");
  for (const auto& row : text_layers) check_batch(speech, row.size(), "multi_layer_contrastive");
  if (!offsets.empty() && offsets.size() != speech.size())
    invalid("multi_layer_contrastive: one offset per example required");

  std::vector<std::vector<Var>> speech_layers(set.size());
  for (std::size_t b = 0; b < speech.size(); ++b) {
    const std::vector<Var> reprs = stack.layer_reprs(speech[b], set, offsets.empty() ? 0 : offsets[b]);
    for (std::size_t k = 0; k < set.size(); ++k) speech_layers[k].push_back(reprs[k]);
  }
  LayerLosses out;
  out.layers = set;
  for (std::size_t k = 0; k < set.size(); ++k) {
    const Var s = similarity_matrix(speech_layers[k], text_layers[k], params.kind, params.sinkhorn);
    out.per_layer.push_back(info_nce(s, params.tau, params.symmetric));
    out.total = k == 0 ? out.per_layer[0] : add(out.total, out.per_layer[k]);
  }
  return out;
}

Var nwp_loss(const FrozenStack& stack, const Var& sequence, std::span<const std::uint8_t> mask,
             std::span<const int> targets, std::size_t offset) {
  const std::size_t len = sequence.rows();
  if (mask.size() != len || targets.size() != len)
    throw ShapeError("nwp_loss: mask/targets of length " + std::to_string(mask.size()) + "/" +
                     std::to_string(targets.size()) + " for a sequence of " + std::to_string(len));
  std::size_t count = 0;
  for (std::size_t p = 1; p < len; ++p) count += mask[p] ? 1 : 0;
  if (count == 0) invalid("nwp_loss: no predictable text position");
  const auto vocab = static_cast<int>(stack.config().vocab);
  std::vector<std::size_t> index(len, 0);
  std::vector<double> weight(len, 0.0);
  for (std::size_t p = 1; p < len; ++p) {
    if (!mask[p]) continue;
    if (targets[p] < 0 || targets[p] >= vocab) invalid("nwp_loss: target id out of range at position " +
                                                       std::to_string(p));
    index[p - 1] = static_cast<std::size_t>(targets[p]);
    weight[p - 1] = 1.0 / static_cast<double>(count);
  }
  return mean_picked_log_prob(stack.lm_logits(sequence, offset), index, weight);
}

Var transcription_loss(const FrozenStack& stack, const Var& speech, const std::vector<int>& targets, int marker,
                       std::size_t offset) {
  if (targets.empty()) invalid("transcription_loss: empty target sequence");
  Tape& tape = *speech.tape();
  std::vector<int> prefix{marker};
  prefix.insert(prefix.end(), targets.begin(), targets.end() - 1);
  const std::array<Var, 2> parts{speech, stack.embed(tape, prefix)};
  const Var x = concat(parts, Axis::kRows);
  const std::size_t start = speech.rows();
  std::vector<std::size_t> index(x.rows(), 0);
  std::vector<double> weight(x.rows(), 0.0);
  for (std::size_t k = 0; k < targets.size(); ++k) {
    index[start + k] = static_cast<std::size_t>(targets[k]);
    weight[start + k] = 1.0 / static_cast<double>(targets.size());
  }
  return mean_picked_log_prob(stack.lm_logits(x, offset), index, weight);
}

Var asr_loss(const FrozenStack& stack, const Var& speech, const std::vector<int>& transcript, std::size_t offset) {
  return transcription_loss(stack, speech, transcript, kAsrMarker, offset);
}

Var st_loss(const FrozenStack& stack, const Var& speech, const std::vector<int>& transcript, std::size_t offset) {
  if (transcript.empty()) invalid("st_loss: empty transcript");
  return transcription_loss(stack, speech, stack.translate(transcript), kStMarker, offset);
}

const char* to_string(LossPart part) {
  switch (part) {
    case LossPart::kContrastive: return "contrastive";
    case LossPart::kAsr: return "asr";
    case LossPart::kNwp: return "nwp";
    case LossPart::kSt: return "st";
  }
  return "?";
}

LossWeights equal_weights(const std::map<LossPart, Var>& parts) {
  LossWeights w;
  for (const auto& [part, loss] : parts) w[part] = 1.0;
  return w;
}

Var combined_loss(const std::map<LossPart, Var>& parts, const LossWeights& weights) {
  if (parts.empty()) invalid("combined_loss: no loss parts");
  bool any_positive = false;
  for (const auto& [part, w] : weights) {
    if (!parts.count(part)) invalid(std::string("combined_loss: weight for absent part ") + to_string(part));
    if (!(w >= 0.0)) invalid(std::string("combined_loss: negative weight for ") + to_string(part));
    any_positive = any_positive || w > 0.0;
  }
  Var total;
  for (const auto& [part, loss] : parts) {
    const auto it = weights.find(part);
    if (it == weights.end()) invalid(std::string("combined_loss: missing weight for ") + to_string(part));
    const Var term = it->second == 1.0 ? loss : scale(loss, it->second);
    total = total.valid() ? add(total, term) : term;
  }
  if (!any_positive) invalid("combined_loss: every weight is zero");
  return total;
}

}  // namespace speechalign
