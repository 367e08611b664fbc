// include/speechalign/model.hpp

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

// The speech LM: a trainable window-level query projector in front of a
// frozen, seed-constructed language-model stack.
//
// The frozen stack stands in for a pretrained LLM. Every layer applies a
// random dense map with rotary position phases and a small residual gain.
// Two layers also carry fixed attention heads so the stack can use its
// context:
//
//   layer 1  "previous different content": each position looks back to the
//            nearest earlier position whose content differs from its own
//            (a learned-free analogue of a previous-token head that skips
//            repeated frames) and writes it into a prev role.
//   layer 2  induction lookup: each position finds earlier positions whose
//            prev role matches its own content and copies their content into
//            an output role. A second, dictionary-mapped copy of the head is
//            gated on by the ST marker, so the same stack also "translates".
//
// The tied head reads the output role, so an untrained stack predicts close
// to uniformly and the only way to lower ASR or NWP loss is for the
// projector to emit content the lookup can match.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "speechalign/tape.hpp"

namespace speechalign {

/// Fixed constants of the frozen stack's attention heads and readout.
struct CircuitConfig {
  /// Sharpness of the vocabulary read-out used by the lookup head.
  double cleanup_sharpness = 10.0;
  /// Layer 1: penalty for attending to same-content positions, its
  /// sharpness, and the per-step recency penalty.
  double same_penalty = 30.0;
  double same_sharpness = 6.0;
  double recency = 4.0;
  double prev_gain = 1.0;
  /// Layer 2: match sharpness, no-match threshold (in units of a perfect
  /// match) and output gain.
  double match_sharpness = 12.0;
  double null_threshold = 0.6;
  double copy_gain = 4.0;
  /// ST-marker gate slope.
  double gate_slope = 4.0;
  /// Residual gain of the random dense maps.
  double dense_gain = 0.05;
  /// Scale of the tied output logits.
  double logit_scale = 1.5;
};

struct ModelConfig {
  std::size_t vocab = 64;
  std::size_t embed_dim = 32;
  std::size_t frame_dim = 48;
  std::size_t depth = 10;
  std::uint64_t world_seed = 1234;
  /// Projector: learned queries per window, frames per window, width.
  std::size_t queries = 4;
  std::size_t window = 6;
  std::size_t proj_dim = 32;
  /// Hidden width of the frozen dense maps.
  std::size_t ffn_dim = 64;
  /// Rotary start offsets are sampled from [0, max_offset) when enabled.
  std::size_t max_offset = 32;
  CircuitConfig circuit;
};

/// Rejects inconsistent configurations.
void validate(const ModelConfig& cfg);

/// Fingerprint of every architecture field; stored in checkpoints.
std::uint64_t config_hash(const ModelConfig& cfg);

/// Sorted unique layer indices; 0 is the embedding layer.
using LayerSet = std::vector<std::size_t>;

/// {0, 5, 10, ...} up to depth.
LayerSet every_fifth_layer(std::size_t depth);
/// Sorts, dedups and range-checks against depth.
LayerSet normalize_layers(LayerSet layers, std::size_t depth);

// ---------------------------------------------------------------------------

class FrozenStack {
 public:
  explicit FrozenStack(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  std::size_t depth() const { return cfg_.depth; }
  const Tensor& embeddings() const { return embed_; }
  /// Toy-ST mapping on token ids (markers map to themselves).
  const std::vector<int>& translation() const { return perm_; }
  std::vector<int> translate(const std::vector<int>& tokens) const;

  /// Embedding-table lookup as a constant on `tape`.
  Var embed(Tape& tape, const std::vector<int>& tokens) const;

  /// Representations after every layer in `layers` (ascending), for
  /// positions starting at `offset`. Layer 0 returns `x` itself.
  std::vector<Var> layer_reprs(const Var& x, const LayerSet& layers, std::size_t offset = 0) const;
  Var layer_repr(const Var& x, std::size_t layer, std::size_t offset = 0) const;

  /// Tied-head logits (L x V) from a final-layer representation.
  Var head(const Var& final_repr) const;
  /// head(layer_repr(x, depth, offset)).
  Var lm_logits(const Var& x, std::size_t offset = 0) const;

  /// Hash of every frozen parameter, for frozen-ness checks.
  std::uint64_t fingerprint() const;

  /// Longest sequence (plus offset) the rotary tables cover.
  static constexpr std::size_t kMaxPositions = 2048;

 private:
  Var dense(const Var& x, std::size_t layer, std::size_t offset) const;
  Var prev_content_head(const Var& x) const;
  Var lookup_head(const Var& x) const;
  Var rope(const Var& x, std::size_t offset) const;

  ModelConfig cfg_;
  Tensor embed_;
  std::vector<int> perm_;
  std::vector<Tensor> dense_in_, dense_out_;
  Tensor prev_role_, out_role_;
  Tensor begin_;             // 1 x H content of the virtual begin slot
  Tensor key_table_;         // (V+1) x H: embeddings plus the begin vector
  Tensor query_map_;         // (V+1) x H: markers and begin map to begin
  Tensor query_map_st_;      // query_map_ with source ids translated back
  Tensor value_map_;         // (V+1) x H
  Tensor value_map_st_;      // value_map_ with ids translated forward
  Tensor rope_cos_, rope_sin_, rope_swap_;
};

// ---------------------------------------------------------------------------

/// Trainable window-level query projector. Per window of `window` frames,
/// `queries` learned vectors cross-attend to the window's frames (keys carry
/// a learned within-window position embedding), and the attended values are
/// mapped to the embedding width.
struct ProjectorParams {
  Tensor queries;    // Q x Hp
  Tensor pos_keys;   // W x Hp
  Tensor wq;         // Hp x Hp
  Tensor wk;         // d_enc x Hp
  Tensor wv;         // d_enc x Hp
  Tensor wo;         // Hp x Hp
  Tensor wout;       // Hp x H
  Tensor bout;       // 1 x H

  static constexpr std::size_t kTensors = 8;
  std::array<Tensor*, kTensors> tensors();
  std::array<const Tensor*, kTensors> tensors() const;
  static const std::array<const char*, kTensors>& names();
  std::size_t count() const;
  std::uint64_t fingerprint() const;
  friend bool operator==(const ProjectorParams&, const ProjectorParams&) = default;
};

ProjectorParams init_projector(const ModelConfig& cfg, std::uint64_t seed);

/// Projector parameters placed on a tape.
struct ProjectorVars {
  std::array<Var, ProjectorParams::kTensors> vars;
  const Var& queries() const { return vars[0]; }
  const Var& pos_keys() const { return vars[1]; }
  const Var& wq() const { return vars[2]; }
  const Var& wk() const { return vars[3]; }
  const Var& wv() const { return vars[4]; }
  const Var& wo() const { return vars[5]; }
  const Var& wout() const { return vars[6]; }
  const Var& bout() const { return vars[7]; }
};

/// Leaves when `trainable`, constants otherwise.
ProjectorVars bind(Tape& tape, const ProjectorParams& params, bool trainable);

/// ceil(M / W) * Q rows of width H.
Var project(const ProjectorVars& p, const Tensor& frames, const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Checkpoints: "SPALCKPT", u32 version, u64 config hash, u64 step, u64 value
// count, the projector tensors in declaration order as little-endian binary32,
// then an optional exact-resume section (u8 flag; when set, the parameters,
// both optimizer moments as binary64 and the optimizer step count).

struct OptimizerState {
  ProjectorParams m;
  ProjectorParams v;
  std::uint64_t step = 0;
};

struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::uint64_t step = 0;
  ProjectorParams params;
  std::optional<OptimizerState> optimizer;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// `shape_of` supplies tensor shapes; the file must match them exactly.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& shape_of);

}  // namespace speechalign
