// include/speechalign/data.hpp

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

// Paired speech/text corpora: the synthetic generator, on-disk format and
// batching.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "speechalign/tensor.hpp"

namespace speechalign {

/// Raised on malformed or truncated corpus files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Token id layout shared by the generator and the model.
///
///   0                      begin-of-transcript marker for the ASR task
///   1                      begin-of-transcript marker for the ST task
///   [2, 2 + initial)       word-initial pieces
///   [2 + initial, V)       continuation pieces (attach to the previous word)
struct Vocabulary {
  static constexpr int kAsrMarker = 0;
  static constexpr int kStMarker = 1;
  static constexpr int kFirstContent = 2;

  explicit Vocabulary(std::size_t size);

  std::size_t size() const { return size_; }
  std::size_t initial_count() const { return initial_; }
  bool is_marker(int id) const { return id >= 0 && id < kFirstContent; }
  bool is_initial(int id) const {
    return id >= kFirstContent && id < kFirstContent + static_cast<int>(initial_);
  }
  bool is_continuation(int id) const {
    return id >= kFirstContent + static_cast<int>(initial_) && id < static_cast<int>(size_);
  }

  /// Groups pieces into words ("t12 t40" for a two-piece word renders as
  /// "t12+t40"). Markers are dropped; a leading continuation starts a word.
  std::vector<std::string> words(const std::vector<int>& tokens) const;

 private:
  std::size_t size_;
  std::size_t initial_;
};

struct TokenSequence {
  std::vector<int> tokens;
  /// Per-token word id: starts at 0, non-decreasing, unit steps.
  std::vector<int> word_index;

  std::size_t size() const { return tokens.size(); }
  std::size_t word_count() const { return word_index.empty() ? 0 : word_index.back() + 1; }
};

struct FrameSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  friend bool operator==(const FrameSpan&, const FrameSpan&) = default;
};

struct FrameSequence {
  /// M x d_enc simulated encoder output.
  Tensor frames;
  /// One contiguous frame range per word id.
  std::vector<FrameSpan> word_spans;

  std::size_t size() const { return frames.empty() ? 0 : frames.rows(); }
};

struct PairedExample {
  std::string id;
  TokenSequence text;
  FrameSequence speech;
};

struct Corpus {
  std::size_t vocab = 0;
  std::size_t frame_dim = 0;
  std::vector<PairedExample> examples;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
};

/// Rejects an example whose token or span tables break their invariants:
/// word ids start at 0 with unit steps, spans tile [0, M) in word order,
/// and both modalities carry the same word set.
void validate(const PairedExample& ex, std::size_t vocab, std::size_t frame_dim);

// ---------------------------------------------------------------------------
// The fixed "world": a token embedding table standing in for the host LM's
// input embeddings, and a linear speech encoder that renders each token as
// a frame prototype. Both derive from world_seed only, so every corpus and
// every model built with the same world seed agree on them.

/// V x H rows of unit norm.
Tensor world_embedding_table(std::uint64_t world_seed, std::size_t vocab, std::size_t embed_dim);
/// V x d_enc prototypes, row v = A * e_v for a fixed Gaussian A (d_enc x H).
Tensor world_frame_prototypes(std::uint64_t world_seed, std::size_t vocab, std::size_t embed_dim,
                              std::size_t frame_dim);

struct GeneratorConfig {
  std::uint64_t seed = 7;
  std::uint64_t world_seed = 1234;
  std::size_t count = 100;
  std::size_t vocab = 64;
  std::size_t embed_dim = 32;
  std::size_t frame_dim = 48;
  /// Frames per token drawn uniformly from [min_expansion, max_expansion].
  std::size_t min_expansion = 2;
  std::size_t max_expansion = 4;
  /// Standard deviation of Gaussian frame noise.
  double noise = 0.1;
  std::size_t min_words = 4;
  std::size_t max_words = 12;
  /// Probability that a word gets a second (continuation) piece.
  double subword_prob = 0.2;
  /// Probability of 1-2 silent frames before a word; they are attributed
  /// to the following word's span.
  double pause_prob = 0.0;
  /// Prefix for example ids.
  std::string id_prefix = "utt";
};

/// Rejects out-of-range generator settings.
void validate(const GeneratorConfig& cfg);

/// Deterministic under cfg.seed. Frames of a token are its prototype
/// repeated expansion-many times plus N(0, noise^2) per entry.
Corpus generate_corpus(const GeneratorConfig& cfg);

/// Generates a copy corpus: each transcript is a random run of `half_words`
/// distinct single-piece words followed by the same run again.
Corpus generate_copy_corpus(const GeneratorConfig& cfg, std::size_t half_words);

struct CorpusStats {
  std::size_t count = 0;
  std::size_t vocab = 0;
  double mean_tokens = 0.0;
  double mean_frames = 0.0;
  /// Mean over examples of M / N.
  double mean_frames_per_token = 0.0;
};

CorpusStats corpus_stats(const Corpus& corpus);

// ---------------------------------------------------------------------------
// On-disk format.
//
// Manifest: UTF-8 text, '#' comments, a header of "key value" lines
// (format, vocab, frame_dim, count) and then one tab-separated record per
// example:
//
//   id <TAB> token ids <TAB> word indices <TAB> spans
//
// token ids and word indices are space separated; spans are "begin:end"
// pairs in word order.
//
// Frame file: 8-byte magic "SPALFRMS", one version byte, then per example
// in manifest order: M and d_enc as little-endian uint32 followed by M * d_enc
// little-endian IEEE-754 binary32 values, row major.

inline constexpr char kFrameMagic[8] = {'S', 'P', 'A', 'L', 'F', 'R', 'M', 'S'};
inline constexpr std::uint8_t kFrameVersion = 1;

void write_corpus(const Corpus& corpus, const std::filesystem::path& manifest,
                  const std::filesystem::path& frames);
Corpus read_corpus(const std::filesystem::path& manifest, const std::filesystem::path& frames);

/// Round-trips a value through binary32, as the frame file does.
double to_stored_precision(double v);

// ---------------------------------------------------------------------------

struct Batch {
  std::vector<const PairedExample*> examples;
  /// text_mask[b][n] is 1 for real token positions, 0 for padding.
  std::vector<std::vector<std::uint8_t>> text_mask;
  std::vector<std::vector<std::uint8_t>> frame_mask;

  std::size_t size() const { return examples.size(); }
};

/// Shuffles by seed and cuts into batches of `batch_size`. The corpus must
/// outlive the batches.
std::vector<Batch> make_batches(const Corpus& corpus, std::size_t batch_size, std::uint64_t seed,
                                bool drop_last);

/// Builds one batch (with masks) from explicit corpus indices.
Batch make_batch(const Corpus& corpus, const std::vector<std::size_t>& indices);

/// The first round(fraction * n) entries of a seeded permutation of [0, n).
/// Prefixes of one permutation, so smaller fractions nest inside larger ones.
std::vector<std::size_t> subset_indices(std::size_t n, double fraction, std::uint64_t seed);

}  // namespace speechalign
