// tools/experiment.hpp

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

// Experiment configuration for the command-line front-end. Config files are
// YAML mappings of sections to scalar settings; docs/config-format.md lists
// every key.

#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "speechalign/data.hpp"
#include "speechalign/metrics.hpp"
#include "speechalign/model.hpp"
#include "speechalign/trainer.hpp"

namespace speechalign::cli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat "section.key" -> value view of a config file, in file order.
/// Sequences become comma-joined values.
struct KeyValues {
  std::vector<std::pair<std::string, std::string>> entries;
};

/// Throws ConfigError on YAML syntax errors and on nesting deeper than
/// section.key.
KeyValues parse_key_values(const std::string& text, const std::string& origin = "<config>");
KeyValues read_key_values(const std::filesystem::path& path);

struct ExperimentConfig {
  /// Training seed (data order, projector init, span plans, offsets).
  std::uint64_t seed = 1;
  std::string out;

  GeneratorConfig data;
  std::size_t test_count = 200;
  std::uint64_t test_seed = 99;
  /// Corpus manifests (".tsv"; frames sit next to them as ".frames").
  std::string train_path;
  std::string test_path;

  ModelConfig model;
  TrainConfig pretrain = default_train_config(Stage::kPretrain);
  TrainConfig finetune = default_train_config(Stage::kFinetune);
  /// Checkpoint to finetune from, or "scratch".
  std::string finetune_init = "scratch";

  EvalOptions eval;
  /// "desk" (asr/st/retrieval) or "reference" (asr/st/sqa) bound preset.
  std::string bounds_preset = "desk";
  std::map<std::string, Bound> bound_overrides;
};

/// Applies entries in order; unknown keys and bad values throw ConfigError.
void apply(ExperimentConfig& cfg, const KeyValues& kv);
void apply(ExperimentConfig& cfg, const std::string& key, const std::string& value);

/// Copies shared settings across sections (seed, corpus dimensions into
/// the model) and validates everything. Throws ConfigError.
void resolve(ExperimentConfig& cfg);

/// Every key with its current value as YAML; feeding it back through
/// apply() reproduces the config.
std::string dump(const ExperimentConfig& cfg);

/// Bounds after applying the preset and any overrides.
std::map<std::string, Bound> bounds_of(const ExperimentConfig& cfg);

/// "<stem>.tsv" -> "<stem>.frames".
std::filesystem::path frames_path(const std::filesystem::path& manifest);

/// $SPEECHALIGN_OUT, or "runs" when unset.
std::filesystem::path default_output_root();

}  // namespace speechalign::cli
