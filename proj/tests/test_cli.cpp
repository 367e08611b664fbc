// tests/test_cli.cpp

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

#include <cstdlib>

#include "doctest.h"
#include "experiment.hpp"

using namespace speechalign;
using namespace speechalign::cli;

namespace {

ExperimentConfig from_text(const std::string& yaml) {
  ExperimentConfig cfg;
  apply(cfg, parse_key_values(yaml));
  resolve(cfg);
  return cfg;
}

}  // namespace

TEST_CASE("config files flatten to section.key entries in file order") {
  const KeyValues kv = parse_key_values("seed: 3\ndata:\n  count: 50\n  noise: 0.2\nloss:\n  layers: [0, 5]\n");
  REQUIRE(kv.entries.size() == 4);
  CHECK(kv.entries[0] == std::pair<std::string, std::string>{"seed", "3"});
  CHECK(kv.entries[1] == std::pair<std::string, std::string>{"data.count", "50"});
  CHECK(kv.entries[3] == std::pair<std::string, std::string>{"loss.layers", "0,5"});
}

TEST_CASE("malformed config files are rejected") {
  CHECK_THROWS_AS(parse_key_values("data: [1, 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_key_values("data:\n  inner:\n    deep: 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_key_values("seed: 1\nseed: 2\n"), ConfigError);
  ExperimentConfig cfg;
  CHECK_THROWS_AS(apply(cfg, "data.colour", "red"), ConfigError);
  CHECK_THROWS_AS(apply(cfg, "data.count", "many"), ConfigError);
  CHECK_THROWS_AS(apply(cfg, "data.count", "-3"), ConfigError);
  CHECK_THROWS_AS(apply(cfg, "pretrain.position_offsets", "maybe"), ConfigError);
  CHECK_THROWS_AS(read_key_values("/nonexistent/config.yaml"), ConfigError);
}

TEST_CASE("resolve shares settings across sections and validates them") {
  const ExperimentConfig cfg =
      from_text("seed: 11\ndata:\n  vocab: 40\n  embed_dim: 16\n  frame_dim: 20\nloss:\n  recipe: contr+asr\n  blur: 0.7\n");
  CHECK(cfg.pretrain.seed == 11);
  CHECK(cfg.finetune.seed == 11);
  CHECK(cfg.model.vocab == 40);
  CHECK(cfg.model.embed_dim == 16);
  CHECK(cfg.model.frame_dim == 20);
  CHECK(cfg.model.world_seed == cfg.data.world_seed);
  CHECK(cfg.pretrain.sinkhorn.blur == 0.7);
  CHECK(cfg.eval.heldout.sinkhorn.blur == 0.7);

  ExperimentConfig bad;
  apply(bad, "pretrain.warmup_ratio", "1.5");
  CHECK_THROWS_AS(resolve(bad), ConfigError);
  ExperimentConfig bad_recipe;
  apply(bad_recipe, "loss.recipe", "contr-cos-all+contr-wasser-all");
  CHECK_THROWS_AS(resolve(bad_recipe), ConfigError);
  ExperimentConfig bad_fraction;
  apply(bad_fraction, "finetune.fraction", "0");
  CHECK_THROWS_AS(resolve(bad_fraction), ConfigError);
}

TEST_CASE("a dumped config reads back to the same run") {
  ExperimentConfig cfg = from_text(
      "seed: 5\ndata:\n  count: 123\n  noise: 0.15\npretrain:\n  lr: 0.003\n  position_offsets: true\n"
      "loss:\n  recipe: contr-wasser-all\n  tau: 0.2\nbounds:\n  asr: [90, 5]\n");
  const std::string text = dump(cfg);
  ExperimentConfig back;
  apply(back, parse_key_values(text));
  resolve(back);
  CHECK(dump(back) == text);
  CHECK(config_hash(back.pretrain, back.model) == config_hash(cfg.pretrain, cfg.model));
  CHECK(back.data.noise == 0.15);
  CHECK(back.pretrain.optim.lr == 0.003);
  CHECK(back.pretrain.position_offsets);
  CHECK(back.eval.bounds.at("asr").lb == 90.0);
}

TEST_CASE("bound presets and overrides") {
  ExperimentConfig desk = from_text("");
  CHECK(desk.eval.bounds.count("retrieval") == 1);
  ExperimentConfig ref = from_text("eval:\n  bounds: reference\n");
  CHECK(ref.eval.bounds.count("sqa") == 1);
  CHECK(ref.eval.bounds.at("asr").lb == 18.38);
  CHECK(ref.eval.bounds.at("asr").ub == 6.54);
  ExperimentConfig bad;
  apply(bad, "eval.bounds", "lenient");
  CHECK_THROWS_AS(resolve(bad), ConfigError);
  CHECK_THROWS_AS(apply(bad, "bounds.asr", "[1]"), ConfigError);
  ExperimentConfig flat;
  apply(flat, "bounds.asr", "[1, 1]");
  CHECK_THROWS_AS(resolve(flat), ConfigError);
}

TEST_CASE("paths") {
  CHECK(frames_path("out/train.tsv") == "out/train.frames");
  ::setenv("SPEECHALIGN_OUT", "/tmp/somewhere", 1);
  CHECK(default_output_root() == "/tmp/somewhere");
  ::unsetenv("SPEECHALIGN_OUT");
  CHECK(default_output_root() == "runs");
}
