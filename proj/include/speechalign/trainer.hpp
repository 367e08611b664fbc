// include/speechalign/trainer.hpp

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

// Two-stage training: task-agnostic pretraining of the projector under a
// loss recipe, then joint finetuning on toy ASR and toy ST. Only projector
// parameters are ever updated.

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "speechalign/data.hpp"
#include "speechalign/losses.hpp"
#include "speechalign/metrics.hpp"
#include "speechalign/model.hpp"

namespace speechalign {

enum class Stage { kPretrain, kFinetune };

const char* to_string(Stage stage);

/// A pretraining objective. Names are '+'-joined parts:
///   asr                       transcription loss
///   nwp-mixed                 next-token loss on mixed speech/text sequences
///   contr-cos, contr-wasser   contrastive loss on the embedding layer;
///                             an "-emb" suffix says so explicitly, "-all"
///                             uses every fifth layer
///   mixed-contr               cosine contrastive loss, mixed vs text
/// plus the shorthands contr+asr (contr-cos-all+asr) and contr+nwp
/// (contr-cos-all+nwp-mixed).
struct Recipe {
  std::string name;
  std::optional<SimilarityKind> contrastive;
  bool mixed_contrastive = false;
  bool asr = false;
  bool nwp = false;
  LayerSet layers;
  double tau = 0.1;
};

Recipe parse_recipe(const std::string& name, std::size_t depth);

struct OptimizerConfig {
  double lr = 1e-4;
  double warmup_ratio = 0.03;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip = 1.0;
};

struct TrainConfig {
  Stage stage = Stage::kPretrain;
  /// Ignored when finetuning, which always trains toy ASR + toy ST.
  std::string recipe = "contr-cos-all";
  /// Override the recipe's layer set / temperature.
  std::optional<LayerSet> layers;
  std::optional<double> tau;
  SinkhornParams sinkhorn;
  OptimizerConfig optim;
  std::size_t batch_size = 8;
  std::size_t epochs = 5;
  std::size_t grad_accum = 1;
  std::uint64_t seed = 1;
  /// Finetuning subset fraction in (0, 1].
  double fraction = 0.1;
  /// Sample a rotary start offset per example from [0, max_offset).
  bool position_offsets = false;
  /// Batch size of the per-epoch held-out contrastive evaluation.
  std::size_t heldout_batch = 8;
  /// Stop after this many optimizer steps (0 runs to completion).
  std::size_t max_steps = 0;
};

/// Pretraining and finetuning defaults (5 and 2 epochs).
TrainConfig default_train_config(Stage stage);

void validate(const TrainConfig& cfg);
std::uint64_t config_hash(const TrainConfig& cfg, const ModelConfig& model);

/// Linear warmup over ceil(warmup_ratio * total) steps, then cosine decay
/// to zero at `total`.
double lr_at(std::size_t step, std::size_t total, const OptimizerConfig& cfg);

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ClipResult {
  double norm = 0.0;
  bool clipped = false;
};

/// Global-norm clipping in place. Throws NonFiniteError on NaN or Inf.
ClipResult clip_gradients(std::vector<Tensor>& grads, double max_norm);

/// Decoupled weight decay Adam.
class AdamW {
 public:
  AdamW(const OptimizerConfig& cfg, const ProjectorParams& like);
  void step(ProjectorParams& params, const std::vector<Tensor>& grads, double lr);
  const OptimizerState& state() const { return state_; }
  void load(const OptimizerState& state) { state_ = state; }

 private:
  OptimizerConfig cfg_;
  OptimizerState state_;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::map<std::string, double> parts;
  double grad_norm = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::map<std::string, double> metrics;
};

struct RunRecord {
  std::string stage;
  std::string recipe;
  std::uint64_t config_hash = 0;
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  /// Not part of any export, so exports stay reproducible.
  double wall_seconds = 0.0;

  std::string to_jsonl() const;
  std::string steps_csv() const;
  std::string epochs_csv() const;
};

struct TrainResult {
  ProjectorParams params;
  OptimizerState optimizer;
  std::size_t step = 0;
  std::size_t total_steps = 0;
  RunRecord record;

  bool finished() const { return step == total_steps; }
  /// Checkpoint with the exact-resume section.
  Checkpoint checkpoint(const ModelConfig& model) const;
};

/// Raised when a loss or gradient turns non-finite; carries the state
/// before the failing step.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, TrainResult last_good)
      : std::runtime_error(what), last_good_(std::move(last_good)) {}
  const TrainResult& last_good() const { return last_good_; }

 private:
  TrainResult last_good_;
};

/// Optimizes the projector on `corpus` under cfg.recipe, starting from
/// `init` or from `resume` (which must carry optimizer state). Records
/// held-out contrastive losses after every epoch when `heldout` is given.
TrainResult pretrain(const TrainConfig& cfg, const Corpus& corpus, const FrozenStack& stack,
                     const ProjectorParams& init, const Corpus* heldout = nullptr,
                     const Checkpoint* resume = nullptr);

/// The pretraining objective of `cfg` on one batch of corpus examples, as
/// the first step of a run sees it (epoch 0, step 0). Training minimizes
/// exactly this function, so gradient checks on it cover the trainer.
Var pretrain_batch_loss(const TrainConfig& cfg, const Corpus& corpus, const FrozenStack& stack,
                        const ProjectorVars& projector, const std::vector<std::size_t>& examples);

/// The first round(fraction * n) examples of a seeded shuffle, so smaller
/// fractions are prefixes of larger ones under the same seed.
Corpus finetune_subset(const Corpus& corpus, double fraction, std::uint64_t seed);

/// Joint shuffled toy-ASR and toy-ST training on finetune_subset(corpus).
TrainResult finetune(const TrainConfig& cfg, const Corpus& corpus, const FrozenStack& stack,
                     const ProjectorParams& init, const Corpus* heldout = nullptr,
                     const Checkpoint* resume = nullptr);

// ---------------------------------------------------------------------------
// Evaluation.

/// Greedy continuation of `speech` + `marker`, exactly `length` tokens,
/// never emitting a marker id.
std::vector<int> greedy_decode(const FrozenStack& stack, const Tensor& speech, int marker, std::size_t length);

struct EvalOptions {
  /// Retrieval batch size; 0 ranks the whole corpus as one batch.
  std::size_t retrieval_batch = 0;
  HeldoutOptions heldout;
  /// Bounds for the normalized average over asr (WER %), st (token
  /// accuracy %) and retrieval (%).
  std::map<std::string, Bound> bounds{{"asr", {100.0, 0.0}}, {"st", {0.0, 100.0}}, {"retrieval", {0.0, 100.0}}};
};

struct TaskScores {
  /// Corpus WER in percent.
  double asr_wer = 0.0;
  double asr_em = 0.0;
  double asr_f1 = 0.0;
  /// Token accuracy in percent.
  double st_accuracy = 0.0;
  double st_bleu = 0.0;
  double retrieval = 0.0;
  HeldoutLosses heldout;
};

TaskScores evaluate_tasks(const Corpus& corpus, const FrozenStack& stack, const ProjectorParams& params,
                          const EvalOptions& options = {});

ScoreReport make_report(const TaskScores& scores, const EvalOptions& options = {});

}  // namespace speechalign
