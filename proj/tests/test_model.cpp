// tests/test_model.cpp

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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "doctest.h"
#include "gradcheck.hpp"
#include "speechalign/data.hpp"
#include "speechalign/model.hpp"

using namespace speechalign;
using speechalign::testing::gradcheck;
using speechalign::testing::random_tensor;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "speechalign_test_model";
  std::filesystem::create_directories(dir);
  return dir / name;
}

Tensor random_frames(std::size_t m, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor(rng, m, d);
}

Tensor project_value(const ProjectorParams& p, const Tensor& frames, const ModelConfig& cfg) {
  Tape tape;
  return project(bind(tape, p, false), frames, cfg).value();
}

}  // namespace

TEST_CASE("projector output length is ceil(M / W) * Q") {
  ModelConfig cfg;
  cfg.window = 10;
  cfg.queries = 4;
  const ProjectorParams p = init_projector(cfg, 1);
  CHECK(project_value(p, random_frames(30, cfg.frame_dim, 1), cfg).rows() == 12);
  CHECK(project_value(p, random_frames(25, cfg.frame_dim, 2), cfg).rows() == 12);
  CHECK(project_value(p, random_frames(1, cfg.frame_dim, 3), cfg).rows() == 4);
  CHECK(project_value(p, random_frames(25, cfg.frame_dim, 2), cfg).cols() == cfg.embed_dim);
  CHECK_THROWS_AS(project_value(p, Tensor({0, cfg.frame_dim}), cfg), std::invalid_argument);
  CHECK_THROWS_AS(project_value(p, random_frames(5, cfg.frame_dim + 1, 4), cfg), ShapeError);
}

TEST_CASE("uniform attention yields the value-projected window mean") {
  ModelConfig cfg;
  cfg.window = 5;
  ProjectorParams p = init_projector(cfg, 2);
  for (auto& v : p.queries.values()) v = 0.0;  // every logit is zero
  const Tensor frames = random_frames(13, cfg.frame_dim, 9);
  const Tensor out = project_value(p, frames, cfg);
  const std::size_t hp = cfg.proj_dim;
  for (std::size_t b = 0, win = 0; b < 13; b += cfg.window, ++win) {
    const std::size_t e = std::min<std::size_t>(13, b + cfg.window);
    std::vector<double> pooled(hp, 0.0);
    for (std::size_t r = b; r < e; ++r)
      for (std::size_t k = 0; k < hp; ++k) {
        double v = 0.0;
        for (std::size_t d = 0; d < cfg.frame_dim; ++d) v += frames(r, d) * p.wv(d, k);
        pooled[k] += v / double(e - b);
      }
    std::vector<double> mid(hp, 0.0);
    for (std::size_t k = 0; k < hp; ++k)
      for (std::size_t j = 0; j < hp; ++j) mid[k] += pooled[j] * p.wo(j, k);
    std::vector<double> expected(cfg.embed_dim);
    for (std::size_t c = 0; c < cfg.embed_dim; ++c) {
      expected[c] = p.bout(0, c);
      for (std::size_t k = 0; k < hp; ++k) expected[c] += mid[k] * p.wout(k, c);
    }
    for (std::size_t c = 0; c < cfg.embed_dim; ++c)
      for (std::size_t q = 0; q < cfg.queries; ++q)
        CHECK(std::abs(out(win * cfg.queries + q, c) - expected[c]) < 1e-12);
  }
}

TEST_CASE("permuting whole windows permutes output blocks") {
  ModelConfig cfg;
  const std::size_t w = cfg.window, q = cfg.queries, windows = 4;
  const ProjectorParams p = init_projector(cfg, 3);
  const Tensor frames = random_frames(windows * w, cfg.frame_dim, 4);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  Tensor permuted(frames.shape());
  for (std::size_t k = 0; k < windows; ++k)
    for (std::size_t r = 0; r < w; ++r)
      for (std::size_t d = 0; d < cfg.frame_dim; ++d) permuted(k * w + r, d) = frames(perm[k] * w + r, d);
  const Tensor a = project_value(p, frames, cfg);
  const Tensor b = project_value(p, permuted, cfg);
  for (std::size_t k = 0; k < windows; ++k)
    for (std::size_t r = 0; r < q; ++r)
      for (std::size_t c = 0; c < cfg.embed_dim; ++c) CHECK(std::abs(b(k * q + r, c) - a(perm[k] * q + r, c)) < 1e-12);
}

TEST_CASE("projector parameter count is stable across seeds") {
  const ModelConfig cfg;
  const std::size_t count = init_projector(cfg, 1).count();
  CHECK(count == init_projector(cfg, 99).count());
  const std::size_t hp = cfg.proj_dim;
  CHECK(count == cfg.queries * hp + cfg.window * hp + hp * hp + 2 * cfg.frame_dim * hp + hp * hp +
                     hp * cfg.embed_dim + cfg.embed_dim);
  CHECK(init_projector(cfg, 1) == init_projector(cfg, 1));
  CHECK_FALSE(init_projector(cfg, 1) == init_projector(cfg, 2));
}

TEST_CASE("embedding lookup") {
  const ModelConfig cfg;
  const FrozenStack stack(cfg);
  Tape tape;
  const Var x = stack.embed(tape, {5, 9, 5});
  for (std::size_t c = 0; c < cfg.embed_dim; ++c) {
    CHECK(x.value()(0, c) == x.value()(2, c));
    CHECK(x.value()(1, c) == stack.embeddings()(9, c));
  }
  CHECK_FALSE(x.requires_grad());
  CHECK(stack.layer_repr(x, 0).value() == x.value());
  CHECK(stack.embeddings() == world_embedding_table(cfg.world_seed, cfg.vocab, cfg.embed_dim));
  CHECK_THROWS_AS(stack.embed(tape, {64}), std::invalid_argument);
  CHECK_THROWS_AS(stack.embed(tape, {-1}), std::invalid_argument);
}

TEST_CASE("layer representations") {
  const ModelConfig cfg;
  const FrozenStack stack(cfg);
  Tape tape;
  const Var x = stack.embed(tape, {3, 17, 22, 8, 17, 40});
  const auto all = stack.layer_reprs(x, {0, 5, 10}, 4);
  REQUIRE(all.size() == 3);
  CHECK(all[1].value() == stack.layer_repr(x, 5, 4).value());
  CHECK(stack.lm_logits(x, 4).value() == stack.head(all[2]).value());
  CHECK(stack.layer_repr(x, 7, 0).value() == stack.layer_repr(x, 7, 0).value());
  CHECK_FALSE(stack.layer_repr(x, 7, 0).value() == stack.layer_repr(x, 7, 3).value());
  const Tensor logits = stack.lm_logits(x).value();
  CHECK(logits.rows() == 6);
  CHECK(logits.cols() == cfg.vocab);
  for (double v : logits.values()) CHECK(std::isfinite(v));
  CHECK_THROWS_AS(stack.layer_repr(x, 11), std::invalid_argument);
  CHECK_THROWS_AS(stack.layer_reprs(x, {5, 0}), std::invalid_argument);
  CHECK(every_fifth_layer(10) == LayerSet{0, 5, 10});
  CHECK(every_fifth_layer(12) == LayerSet{0, 5, 10});
  CHECK(normalize_layers({10, 0, 5, 5}, 10) == LayerSet{0, 5, 10});
  CHECK_THROWS_AS(normalize_layers({12}, 10), std::invalid_argument);
}

TEST_CASE("the frozen stack is deterministic and seed-dependent") {
  ModelConfig a;
  const FrozenStack s1(a), s2(a);
  CHECK(s1.fingerprint() == s2.fingerprint());
  ModelConfig b = a;
  b.world_seed = 99;
  CHECK(FrozenStack(b).fingerprint() != s1.fingerprint());
  CHECK(config_hash(a) != config_hash(b));
  CHECK(config_hash(a) == config_hash(ModelConfig{}));
}

TEST_CASE("the translation map is a class-preserving permutation") {
  const ModelConfig cfg;
  const FrozenStack stack(cfg);
  const Vocabulary vocab(cfg.vocab);
  const auto& pi = stack.translation();
  REQUIRE(pi.size() == cfg.vocab);
  CHECK(std::set<int>(pi.begin(), pi.end()).size() == cfg.vocab);
  std::size_t moved = 0;
  for (std::size_t v = 0; v < cfg.vocab; ++v) {
    const int id = static_cast<int>(v);
    if (vocab.is_marker(id)) CHECK(pi[v] == id);
    CHECK(vocab.is_initial(pi[v]) == vocab.is_initial(id));
    moved += pi[v] != id;
  }
  CHECK(moved > cfg.vocab / 2);
  CHECK(stack.translate({2, 3}) == std::vector<int>{pi[2], pi[3]});
}

TEST_CASE("layer 5 gradient with respect to the input sequence") {
  const ModelConfig cfg;
  const FrozenStack stack(cfg);
  std::mt19937_64 rng(17);
  Tensor seq = stack.embeddings();
  Tensor x({7, cfg.embed_dim});
  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t c = 0; c < cfg.embed_dim; ++c) x(r, c) = seq(3 + 5 * r % 40, c);
  const Tensor weights = random_tensor(rng, 7, cfg.embed_dim);
  for (auto& v : x.values()) v += 0.05 * std::normal_distribution<double>()(rng);
  auto f = [&](Tape& tape, const std::vector<Var>& in) {
    return sum(mul(stack.layer_repr(in[0], 5, 2), tape.constant(weights)));
  };
  CHECK(gradcheck(f, {x}, 1e-5, 60).max_rel_error < 1e-4);
}

TEST_CASE("checkpoint round trip") {
  const ModelConfig cfg;
  Checkpoint ck;
  ck.config_hash = config_hash(cfg);
  ck.step = 42;
  ck.params = init_projector(cfg, 7);
  const auto path = scratch("plain.ckpt");
  save_checkpoint(path, ck);
  CHECK(std::filesystem::file_size(path) == 8 + 4 + 8 + 8 + 8 + 4 * ck.params.count() + 1);
  const Checkpoint back = load_checkpoint(path, cfg);
  CHECK(back.config_hash == ck.config_hash);
  CHECK(back.step == 42);
  CHECK_FALSE(back.optimizer.has_value());
  const auto src = ck.params.tensors();
  const auto dst = back.params.tensors();
  for (std::size_t k = 0; k < src.size(); ++k)
    for (std::size_t i = 0; i < src[k]->size(); ++i)
      CHECK(dst[k]->values()[i] == to_stored_precision(src[k]->values()[i]));

  ck.optimizer = OptimizerState{init_projector(cfg, 8), init_projector(cfg, 9), 17};
  const auto full = scratch("resume.ckpt");
  save_checkpoint(full, ck);
  const Checkpoint exact = load_checkpoint(full, cfg);
  CHECK(exact.params == ck.params);
  REQUIRE(exact.optimizer.has_value());
  CHECK(exact.optimizer->m == ck.optimizer->m);
  CHECK(exact.optimizer->v == ck.optimizer->v);
  CHECK(exact.optimizer->step == 17);
}

TEST_CASE("checkpoint loading rejects damaged files") {
  const ModelConfig cfg;
  Checkpoint ck;
  ck.params = init_projector(cfg, 7);
  const auto path = scratch("damaged.ckpt");
  save_checkpoint(path, ck);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(b.data(), std::streamsize(b.size()));
  };
  std::string bad = bytes;
  bad[0] = 'X';
  write(bad);
  CHECK_THROWS_AS(load_checkpoint(path, cfg), FormatError);
  bad = bytes;
  bad[8] = 9;
  write(bad);
  CHECK_THROWS_AS(load_checkpoint(path, cfg), FormatError);
  write(bytes.substr(0, bytes.size() - 10));
  CHECK_THROWS_AS(load_checkpoint(path, cfg), FormatError);
  write(bytes + "x");
  CHECK_THROWS_AS(load_checkpoint(path, cfg), FormatError);
  write(bytes);
  ModelConfig other = cfg;
  other.queries = 2;
  CHECK_THROWS_AS(load_checkpoint(path, other), FormatError);
  CHECK_THROWS_AS(load_checkpoint(scratch("missing.ckpt"), cfg), std::runtime_error);
}

TEST_CASE("model config validation") {
  ModelConfig cfg;
  cfg.embed_dim = 31;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
  cfg = {};
  cfg.window = 0;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
  cfg = {};
  cfg.vocab = 3;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
}
