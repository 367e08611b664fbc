// include/speechalign/losses.hpp

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

// Training objectives: in-batch InfoNCE over cosine or negative Sinkhorn
// similarities (one or many layers), next-token loss on text positions of
// mixed sequences, and teacher-forced transcription loss.

#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "speechalign/model.hpp"
#include "speechalign/similarity.hpp"
#include "speechalign/tape.hpp"

namespace speechalign {

enum class SimilarityKind { kCosine, kWasserstein };

const char* to_string(SimilarityKind kind);
/// "cos" / "cosine" or "wasser" / "wasserstein".
SimilarityKind parse_similarity_kind(const std::string& name);

/// B x B matrix with S(i, j) = sim(speech_i, text_j). Cosine compares
/// mean-pooled sequences; Wasserstein uses the negated Sinkhorn divergence,
/// solving each sequence's self term once rather than once per pair.
Var similarity_matrix(std::span<const Var> speech, std::span<const Var> text, SimilarityKind kind,
                      const SinkhornParams& sinkhorn = {});

/// Mean over rows of -log softmax(S / tau)(i, i): speech anchors, text
/// negatives, the matched pair included in the denominator. `symmetric`
/// averages in the text-anchored direction as well.
Var info_nce(const Var& similarity, double tau, bool symmetric = false);

struct ContrastiveParams {
  SimilarityKind kind = SimilarityKind::kCosine;
  double tau = 0.1;
  SinkhornParams sinkhorn;
  bool symmetric = false;
};

struct LayerLosses {
  /// Sum of the per-layer losses, 1 x 1.
  Var total;
  LayerSet layers;
  std::vector<Var> per_layer;
};

/// Sum over `layers` of info_nce at that layer. `speech` and `text` are the
/// layer-0 sequences of a batch; `offsets` (empty means all zero) gives each
/// example's rotary start, shared by both sides.
LayerLosses multi_layer_contrastive(const FrozenStack& stack, std::span<const Var> speech, std::span<const Var> text,
                                    const LayerSet& layers, const ContrastiveParams& params,
                                    std::span<const std::size_t> offsets = {});

/// Same, with the text side already run through the stack:
/// text_layers[k][b] is example b at layers[k].
LayerLosses multi_layer_contrastive(const FrozenStack& stack, std::span<const Var> speech,
                                    const std::vector<std::vector<Var>>& text_layers, const LayerSet& layers,
                                    const ContrastiveParams& params, std::span<const std::size_t> offsets = {});

/// Mean next-token cross-entropy at positions p with mask[p] = 1, predicted
/// from position p - 1. targets[p] is the token at p.
Var nwp_loss(const FrozenStack& stack, const Var& sequence, std::span<const std::uint8_t> mask,
             std::span<const int> targets, std::size_t offset = 0);

/// Teacher-forced cross-entropy of `targets` given projected speech followed
/// by `marker` and the target prefix.
Var transcription_loss(const FrozenStack& stack, const Var& speech, const std::vector<int>& targets, int marker,
                       std::size_t offset = 0);

inline constexpr int kAsrMarker = 0;
inline constexpr int kStMarker = 1;

/// Transcription loss against the transcript, after the ASR marker.
Var asr_loss(const FrozenStack& stack, const Var& speech, const std::vector<int>& transcript, std::size_t offset = 0);
/// Transcription loss against the translated transcript, after the ST marker.
Var st_loss(const FrozenStack& stack, const Var& speech, const std::vector<int>& transcript, std::size_t offset = 0);

enum class LossPart { kContrastive, kAsr, kNwp, kSt };

const char* to_string(LossPart part);

using LossWeights = std::map<LossPart, double>;

/// Weight 1 for every part present.
LossWeights equal_weights(const std::map<LossPart, Var>& parts);

/// Sum of w_k * loss_k. Weights must cover exactly the present parts, be
/// nonnegative, and not all be zero.
Var combined_loss(const std::map<LossPart, Var>& parts, const LossWeights& weights);

}  // namespace speechalign
