// src/mixing.cpp

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

#include "speechalign/mixing.hpp"

#include <random>
#include <stdexcept>

#include "speechalign/random.hpp"

namespace speechalign {

namespace {

constexpr std::uint64_t kTagSpans = 201;

[[noreturn]] void invalid(const std::string& what) { throw std::invalid_argument(what); }

Modality other(Modality m) { return m == Modality::kText ? Modality::kSpeech : Modality::kText; }

}  // namespace

const char* to_string(Modality m) { return m == Modality::kText ? "text" : "speech"; }

void validate(const SpanPlan& plan, const SpanLimits& limits) {
  if (plan.spans.empty()) invalid("span plan: no spans");
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < plan.spans.size(); ++i) {
    const WordSpan& s = plan.spans[i];
    const std::string where = "span plan: span " + std::to_string(i) + " ";
    if (s.begin != cursor || s.end <= s.begin) invalid(where + "breaks the partition");
    if (i && s.modality == plan.spans[i - 1].modality) invalid(where + "repeats the previous modality");
    const bool speech = s.modality == Modality::kSpeech;
    const std::size_t lo = speech ? limits.speech_min : limits.text_min;
    const std::size_t hi = speech ? limits.speech_max : limits.text_max;
    const bool last = i + 1 == plan.spans.size();
    if (s.size() > hi) invalid(where + "is longer than " + std::to_string(hi) + " words");
    if (s.size() < lo && !(last && s.end == plan.word_count)) invalid(where + "is shorter than " + std::to_string(lo) + " words");
    cursor = s.end;
  }
  if (cursor != plan.word_count) invalid("span plan: spans end at word " + std::to_string(cursor) + " of " +
                                         std::to_string(plan.word_count));
}

SpanPlan sample_span_plan(std::size_t word_count, std::uint64_t seed, StartModality start, const SpanLimits& limits) {
  if (limits.speech_min < 1 || limits.text_min < 1 || limits.speech_min > limits.speech_max ||
      limits.text_min > limits.text_max)
    invalid("sample_span_plan: inconsistent span limits");
  Rng rng(derive_seed(seed, {kTagSpans, word_count}));
  Modality m = start == StartModality::kText ? Modality::kText : Modality::kSpeech;
  if (start == StartModality::kBalanced) m = std::bernoulli_distribution(0.5)(rng) ? Modality::kText : Modality::kSpeech;
  SpanPlan plan;
  plan.word_count = word_count;
  std::size_t cursor = 0;
  while (cursor < word_count) {
    const bool speech = m == Modality::kSpeech;
    std::uniform_int_distribution<std::size_t> len(speech ? limits.speech_min : limits.text_min,
                                                   speech ? limits.speech_max : limits.text_max);
    const std::size_t end = std::min(word_count, cursor + len(rng));
    plan.spans.push_back({m, cursor, end});
    cursor = end;
    m = other(m);
  }
  return plan;
}

SpanPlan single_span_plan(std::size_t word_count, Modality m) {
  if (word_count == 0) invalid("single_span_plan: no words");
  return {word_count, {{m, 0, word_count}}};
}

std::size_t MixedSequence::predictable() const {
  std::size_t n = 0;
  for (auto v : nwp_mask) n += v;
  return n;
}

FrameSpan speech_frame_range(const FrameSequence& speech, std::size_t first_word, std::size_t end_word) {
  const auto& ws = speech.word_spans;
  if (first_word >= end_word || end_word > ws.size()) invalid("speech_frame_range: bad word range");
  const std::size_t begin = first_word == 0 ? 0 : ws[first_word - 1].end;
  const std::size_t end = end_word == ws.size() ? speech.size() : ws[end_word - 1].end;
  return {begin, end};
}

MixedSequence build_mixed(const PairedExample& example, const SpanPlan& plan, const FrozenStack& stack,
                          const ProjectorVars& projector) {
  const TokenSequence& text = example.text;
  if (plan.word_count != text.word_count() || plan.word_count != example.speech.word_spans.size())
    invalid("build_mixed: plan covers " + std::to_string(plan.word_count) + " words, example '" + example.id +
            "' has " + std::to_string(text.word_count()));
  validate(plan, SpanLimits{1, plan.word_count, 1, plan.word_count});
  Tape& tape = *projector.queries().tape();
  const ModelConfig& cfg = stack.config();

  MixedSequence out;
  std::vector<Var> parts;
  for (const WordSpan& s : plan.spans) {
    if (s.modality == Modality::kText) {
      std::vector<int> toks;
      for (std::size_t i = 0; i < text.size(); ++i) {
        const auto w = static_cast<std::size_t>(text.word_index[i]);
        if (w < s.begin || w >= s.end) continue;
        toks.push_back(text.tokens[i]);
        out.modality.push_back(Modality::kText);
        out.word_index.push_back(text.word_index[i]);
        out.tokens.push_back(text.tokens[i]);
      }
      parts.push_back(stack.embed(tape, toks));
    } else {
      const FrameSpan range = speech_frame_range(example.speech, s.begin, s.end);
      Tensor frames({range.size(), cfg.frame_dim});
      for (std::size_t r = 0; r < range.size(); ++r)
        for (std::size_t c = 0; c < cfg.frame_dim; ++c) frames(r, c) = example.speech.frames(range.begin + r, c);
      const Var projected = project(projector, frames, cfg);
      // Output rows of one window inherit the word of the window's first frame.
      const auto& ws = example.speech.word_spans;
      std::size_t word = s.begin;
      for (std::size_t r = 0; r < projected.rows(); ++r) {
        const std::size_t frame = range.begin + (r / cfg.queries) * cfg.window;
        while (word + 1 < s.end && frame >= ws[word].end) ++word;
        out.modality.push_back(Modality::kSpeech);
        out.word_index.push_back(static_cast<int>(word));
        out.tokens.push_back(-1);
      }
      parts.push_back(projected);
    }
  }
  out.embeddings = parts.size() == 1 ? parts[0] : concat(parts, Axis::kRows);
  out.nwp_mask.assign(out.size(), 0);
  for (std::size_t p = 1; p < out.size(); ++p)
    out.nwp_mask[p] = out.modality[p] == Modality::kText && out.modality[p - 1] == Modality::kText;
  return out;
}

std::pair<MixedSequence, Var> mixed_contrastive_pair(const PairedExample& example, const SpanPlan& plan,
                                                     const FrozenStack& stack, const ProjectorVars& projector) {
  MixedSequence mixed = build_mixed(example, plan, stack, projector);
  Var text = stack.embed(*projector.queries().tape(), example.text.tokens);
  return {std::move(mixed), text};
}

}  // namespace speechalign
