// include/speechalign/mixing.hpp

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

// Interleaved speech/text sequences over alternating word spans.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "speechalign/data.hpp"
#include "speechalign/model.hpp"

namespace speechalign {

enum class Modality : std::uint8_t { kText, kSpeech };
enum class StartModality { kText, kSpeech, kBalanced };

const char* to_string(Modality m);

struct WordSpan {
  Modality modality = Modality::kText;
  /// Word range [begin, end).
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  friend bool operator==(const WordSpan&, const WordSpan&) = default;
};

struct SpanLimits {
  std::size_t speech_min = 2, speech_max = 5;
  std::size_t text_min = 4, text_max = 10;
};

struct SpanPlan {
  std::size_t word_count = 0;
  std::vector<WordSpan> spans;
  friend bool operator==(const SpanPlan&, const SpanPlan&) = default;
};

/// Throws std::invalid_argument naming the first broken invariant: spans
/// tile [0, word_count) in order, modalities alternate, and lengths respect
/// the limits except for a final span cut short by the end of the words.
void validate(const SpanPlan& plan, const SpanLimits& limits = {});

/// Draws span lengths uniformly within each modality's limits. With
/// kBalanced the first modality is a fair coin from the seed.
SpanPlan sample_span_plan(std::size_t word_count, std::uint64_t seed,
                          StartModality start = StartModality::kBalanced, const SpanLimits& limits = {});

/// A plan covering all words with one span of the given modality.
SpanPlan single_span_plan(std::size_t word_count, Modality m);

struct MixedSequence {
  /// Concatenated embeddings in span order.
  Var embeddings;
  std::vector<Modality> modality;
  /// Word id of every position.
  std::vector<int> word_index;
  /// Token id at text positions, -1 at speech positions.
  std::vector<int> tokens;
  /// 1 where next-word prediction is scored: a text position whose
  /// predecessor is also text.
  std::vector<std::uint8_t> nwp_mask;

  std::size_t size() const { return modality.size(); }
  std::size_t predictable() const;
};

/// Frame range a speech span [a, b) draws from: it starts where word a - 1
/// ends (0 for the first word), absorbing any unassigned frames before word
/// a, and ends at word b - 1's end (the sequence end for a final span).
FrameSpan speech_frame_range(const FrameSequence& speech, std::size_t first_word, std::size_t end_word);

/// Text spans contribute token embeddings; speech spans their projected
/// frames. The plan must cover exactly the example's words.
MixedSequence build_mixed(const PairedExample& example, const SpanPlan& plan, const FrozenStack& stack,
                          const ProjectorVars& projector);

/// The mixed sequence and the pure-text embedding sequence of one example.
std::pair<MixedSequence, Var> mixed_contrastive_pair(const PairedExample& example, const SpanPlan& plan,
                                                     const FrozenStack& stack, const ProjectorVars& projector);

}  // namespace speechalign
