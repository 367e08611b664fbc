// tests/test_trainer.cpp

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

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "speechalign/logging.hpp"
#include "speechalign/mixing.hpp"
#include "speechalign/random.hpp"
#include "speechalign/trainer.hpp"

using namespace speechalign;

namespace {

struct World {
  ModelConfig cfg;
  FrozenStack stack{cfg};
  Corpus corpus, heldout;
  ProjectorParams init = init_projector(cfg, 5);

  World() {
    GeneratorConfig g;
    g.count = 32;
    g.seed = 3;
    corpus = generate_corpus(g);
    g.count = 8;
    g.seed = 4;
    heldout = generate_corpus(g);
  }
};

const World& world() {
  static const World w;
  return w;
}

TrainConfig quick(const std::string& recipe) {
  TrainConfig cfg = default_train_config(Stage::kPretrain);
  cfg.recipe = recipe;
  cfg.batch_size = 4;
  cfg.epochs = 2;
  cfg.optim.lr = 1e-2;
  cfg.seed = 9;
  return cfg;
}

double max_abs_diff(const ProjectorParams& a, const ProjectorParams& b) {
  double d = 0.0;
  const auto ta = a.tensors(), tb = b.tensors();
  for (std::size_t k = 0; k < ta.size(); ++k)
    for (std::size_t i = 0; i < ta[k]->size(); ++i) d = std::max(d, std::abs((*ta[k])[i] - (*tb[k])[i]));
  return d;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("speechalign_test_trainer_" + name);
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  OptimizerConfig o;
  o.lr = 2.0;
  o.warmup_ratio = 0.03;
  // 100 steps: ceil(3) warmup steps.
  CHECK(lr_at(0, 100, o) == 0.0);
  CHECK(lr_at(1, 100, o) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(lr_at(3, 100, o) == 2.0);
  CHECK(lr_at(100, 100, o) == doctest::Approx(0.0).epsilon(1e-15));
  const double mid = 3 + 97 / 2.0;
  CHECK(lr_at(std::size_t(mid), 100, o) ==
        doctest::Approx(1.0 + std::cos(std::numbers::pi * (std::size_t(mid) - 3) / 97.0)).epsilon(1e-12));
  for (std::size_t s = 4; s <= 100; ++s) CHECK(lr_at(s, 100, o) < lr_at(s - 1, 100, o));
  // 10 steps round the warmup up to one step.
  CHECK(lr_at(1, 10, o) == 2.0);
  CHECK_THROWS_AS(lr_at(11, 10, o), std::invalid_argument);
}

TEST_CASE("gradient clipping") {
  std::vector<Tensor> g{Tensor({1, 2}), Tensor({2, 1})};
  g[0](0, 0) = 0.3;
  g[1](1, 0) = 0.4;
  ClipResult r = clip_gradients(g, 1.0);
  CHECK(r.norm == doctest::Approx(0.5));
  CHECK_FALSE(r.clipped);
  CHECK(g[0](0, 0) == 0.3);

  g[0](0, 0) = 1.2;
  g[1](1, 0) = 1.6;
  r = clip_gradients(g, 1.0);
  CHECK(r.norm == doctest::Approx(2.0));
  CHECK(r.clipped);
  CHECK(g[0](0, 0) == doctest::Approx(0.6));
  CHECK(g[1](1, 0) == doctest::Approx(0.8));

  g[1](0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(clip_gradients(g, 1.0), NonFiniteError);
  g[1](0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(clip_gradients(g, 1.0), NonFiniteError);
  CHECK_THROWS_AS(clip_gradients(g, 0.0), std::invalid_argument);
}

TEST_CASE("AdamW matches a hand-rolled update") {
  const World& w = world();
  OptimizerConfig o;
  o.weight_decay = 0.1;
  AdamW opt(o, w.init);
  ProjectorParams p = w.init;
  std::vector<Tensor> g1, g2;
  Rng rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  for (const Tensor* t : p.tensors()) {
    g1.emplace_back(t->shape());
    g2.emplace_back(t->shape());
    for (std::size_t i = 0; i < t->size(); ++i) g1.back()[i] = n(rng), g2.back()[i] = n(rng);
  }
  const double lr1 = 0.01, lr2 = 0.02;
  opt.step(p, g1, lr1);
  opt.step(p, g2, lr2);
  CHECK(opt.state().step == 2);
  const auto before = w.init.tensors();
  const auto after = p.tensors();
  for (std::size_t k = 0; k < before.size(); ++k) {
    for (std::size_t i = 0; i < before[k]->size(); ++i) {
      double x = (*before[k])[i], m = 0.0, v = 0.0;
      const double gs[2] = {g1[k][i], g2[k][i]}, lrs[2] = {lr1, lr2};
      for (int t = 1; t <= 2; ++t) {
        const double g = gs[t - 1], lr = lrs[t - 1];
        x -= lr * o.weight_decay * x;
        m = o.beta1 * m + (1 - o.beta1) * g;
        v = o.beta2 * v + (1 - o.beta2) * g * g;
        x -= lr * (m / (1 - std::pow(o.beta1, t))) / (std::sqrt(v / (1 - std::pow(o.beta2, t))) + o.eps);
      }
      REQUIRE((*after[k])[i] == doctest::Approx(x).epsilon(1e-13));
    }
  }
}

TEST_CASE("recipe grammar") {
  Recipe r = parse_recipe("contr-cos-all", 10);
  CHECK(r.contrastive == SimilarityKind::kCosine);
  CHECK(r.layers == LayerSet{0, 5, 10});
  CHECK(r.tau == 0.1);
  r = parse_recipe("contr-wasser", 10);
  CHECK(r.contrastive == SimilarityKind::kWasserstein);
  CHECK(r.layers == LayerSet{0});
  CHECK(parse_recipe("contr-wasser-emb", 10).layers == LayerSet{0});
  r = parse_recipe("contr+asr", 10);
  CHECK((r.asr && r.contrastive == SimilarityKind::kCosine && r.layers.size() == 3));
  r = parse_recipe("contr+nwp", 10);
  CHECK((r.nwp && r.contrastive && r.tau == 0.5));
  r = parse_recipe("mixed-contr", 10);
  CHECK((r.mixed_contrastive && !r.contrastive && r.tau == 0.5 && r.layers == LayerSet{0}));
  r = parse_recipe("asr", 10);
  CHECK((r.asr && !r.contrastive && !r.nwp));
  CHECK(parse_recipe("nwp-mixed", 10).nwp);
  for (const char* bad : {"", "contr", "contr-l2", "contr-cos-mid", "asr+asr", "contr-cos+contr-wasser",
                          "contr-cos+mixed-contr", "ctc"})
    CHECK_THROWS_AS(parse_recipe(bad, 10), std::invalid_argument);
}

TEST_CASE("config validation and hashing") {
  TrainConfig cfg = default_train_config(Stage::kPretrain);
  CHECK(cfg.epochs == 5);
  CHECK(default_train_config(Stage::kFinetune).epochs == 2);
  CHECK_NOTHROW(validate(cfg));
  const ModelConfig m;
  const std::uint64_t h = config_hash(cfg, m);
  CHECK(config_hash(cfg, m) == h);
  TrainConfig other = cfg;
  other.seed = 2;
  CHECK(config_hash(other, m) != h);
  other = cfg;
  other.max_steps = 3;  // a stopping point is not part of the run's identity
  CHECK(config_hash(other, m) == h);

  auto rejects = [&](auto mutate) {
    TrainConfig c = cfg;
    mutate(c);
    CHECK_THROWS_AS(validate(c), std::invalid_argument);
  };
  rejects([](TrainConfig& c) { c.optim.lr = -1; });
  rejects([](TrainConfig& c) { c.optim.warmup_ratio = 1.0; });
  rejects([](TrainConfig& c) { c.optim.clip = 0; });
  rejects([](TrainConfig& c) { c.fraction = 0; });
  rejects([](TrainConfig& c) { c.fraction = 1.5; });
  rejects([](TrainConfig& c) { c.batch_size = 0; });
  rejects([](TrainConfig& c) { c.grad_accum = 0; });
  rejects([](TrainConfig& c) { c.tau = 0.0; });
}

TEST_CASE("zero learning rate leaves the projector unchanged") {
  const World& w = world();
  TrainConfig cfg = quick("contr-cos-emb+asr");
  cfg.optim.lr = 0.0;
  const TrainResult r = pretrain(cfg, w.corpus, w.stack, w.init);
  CHECK(r.finished());
  CHECK(r.step == 16);  // 32 examples, batch 4, 2 epochs
  CHECK(r.params == w.init);
}

TEST_CASE("training is deterministic and keeps the stack frozen") {
  const World& w = world();
  const std::uint64_t stack_print = w.stack.fingerprint();
  const TrainConfig cfg = quick("contr-wasser-emb+nwp-mixed");
  const TrainResult a = pretrain(cfg, w.corpus, w.stack, w.init, &w.heldout);
  const TrainResult b = pretrain(cfg, w.corpus, w.stack, w.init, &w.heldout);
  CHECK(a.params == b.params);
  CHECK(a.record.to_jsonl() == b.record.to_jsonl());
  CHECK_FALSE(a.params == w.init);
  CHECK(w.stack.fingerprint() == stack_print);

  TrainConfig reseeded = cfg;
  reseeded.seed = 10;
  CHECK_FALSE(pretrain(reseeded, w.corpus, w.stack, w.init).params == a.params);
}

TEST_CASE("resume from a checkpoint equals straight-through training") {
  const World& w = world();
  TrainConfig cfg = quick("contr-cos-all");
  cfg.position_offsets = true;
  const TrainResult full = pretrain(cfg, w.corpus, w.stack, w.init, &w.heldout);

  // Stop mid-epoch, go through a checkpoint file, and continue.
  TrainConfig first = cfg;
  first.max_steps = 5;
  const TrainResult part = pretrain(first, w.corpus, w.stack, w.init, &w.heldout);
  CHECK(part.step == 5);
  CHECK_FALSE(part.finished());
  const auto path = temp_path("resume.ckpt");
  save_checkpoint(path, part.checkpoint(w.cfg));
  const Checkpoint ck = load_checkpoint(path, w.cfg);
  std::filesystem::remove(path);
  const TrainResult rest = pretrain(cfg, w.corpus, w.stack, w.init, &w.heldout, &ck);

  CHECK(rest.finished());
  CHECK(rest.params == full.params);
  CHECK(rest.optimizer.m == full.optimizer.m);
  CHECK(rest.optimizer.v == full.optimizer.v);
  CHECK(rest.optimizer.step == full.optimizer.step);
  REQUIRE(part.record.steps.size() + rest.record.steps.size() == full.record.steps.size());
  for (std::size_t s = 0; s < full.record.steps.size(); ++s) {
    const StepRecord& x = s < 5 ? part.record.steps[s] : rest.record.steps[s - 5];
    CHECK(x.step == full.record.steps[s].step);
    CHECK(x.loss == full.record.steps[s].loss);
    CHECK(x.lr == full.record.steps[s].lr);
  }
  CHECK(rest.record.epochs.back().metrics == full.record.epochs.back().metrics);

  Checkpoint no_state = ck;
  no_state.optimizer.reset();
  CHECK_THROWS_AS(pretrain(cfg, w.corpus, w.stack, w.init, nullptr, &no_state), std::invalid_argument);
}

TEST_CASE("gradient accumulation averages micro-batches") {
  // Per-example losses make two batches of 4 the same step as one of 8.
  const World& w = world();
  TrainConfig big = quick("asr");
  big.batch_size = 8;
  big.epochs = 1;
  TrainConfig accum = big;
  accum.batch_size = 4;
  accum.grad_accum = 2;
  const TrainResult a = pretrain(big, w.corpus, w.stack, w.init);
  const TrainResult b = pretrain(accum, w.corpus, w.stack, w.init);
  CHECK(a.step == 4);
  CHECK(b.step == 4);
  for (std::size_t s = 0; s < 4; ++s) {
    CHECK(a.record.steps[s].loss == doctest::Approx(b.record.steps[s].loss).epsilon(1e-12));
    CHECK(a.record.steps[s].grad_norm == doctest::Approx(b.record.steps[s].grad_norm).epsilon(1e-10));
  }
  CHECK(max_abs_diff(a.params, b.params) < 1e-10);
}

TEST_CASE("run records export as JSON lines and CSV") {
  const World& w = world();
  const TrainResult r = pretrain(quick("contr-cos-emb+asr"), w.corpus, w.stack, w.init, &w.heldout);
  REQUIRE(r.record.epochs.size() == 2);
  CHECK(r.record.epochs[0].metrics.count("heldout_cos_l0"));
  CHECK(r.record.epochs[0].metrics.count("heldout_wasser_l0"));

  std::istringstream lines(r.record.to_jsonl());
  std::vector<nlohmann::json> parsed;
  for (std::string line; std::getline(lines, line);) parsed.push_back(nlohmann::json::parse(line));
  REQUIRE(parsed.size() == 1 + 16 + 2);
  CHECK(parsed[0]["type"] == "run");
  CHECK(parsed[0]["recipe"] == "contr-cos-emb+asr");
  CHECK(parsed[0]["config_hash"] == hex64(r.record.config_hash));
  CHECK(parsed[1]["type"] == "step");
  CHECK(parsed[1]["loss"].get<double>() == r.record.steps[0].loss);
  const auto& parts = parsed[1]["parts"];
  CHECK(parts["contrastive"].get<double>() + parts["asr"].get<double>() ==
        doctest::Approx(r.record.steps[0].loss).epsilon(1e-12));
  CHECK(parsed.back()["type"] == "epoch");

  const std::string steps = r.record.steps_csv();
  CHECK(steps.substr(0, steps.find('\n')) == "step,epoch,lr,loss,grad_norm,asr,contrastive");
  CHECK(std::count(steps.begin(), steps.end(), '\n') == 17);
  const std::string epochs = r.record.epochs_csv();
  CHECK(epochs.substr(0, epochs.find('\n')) == "epoch,heldout_cos_l0,heldout_wasser_l0");
}

TEST_CASE("a non-finite loss raises with the last good state") {
  const World& w = world();
  Corpus broken = w.corpus;
  for (auto& ex : broken.examples) ex.speech.frames(0, 0) = std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg = quick("asr");
  try {
    pretrain(cfg, broken, w.stack, w.init);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.last_good().step == 0);
    CHECK(e.last_good().params == w.init);
  }
}

TEST_CASE("finetuning subset and joint tasks") {
  GeneratorConfig g;
  g.count = 2000;
  g.max_words = 4;
  const Corpus big = generate_corpus(g);
  const Corpus tenth = finetune_subset(big, 0.1, 5);
  CHECK(tenth.size() == 200);
  const Corpus twentieth = finetune_subset(big, 0.05, 5);
  REQUIRE(twentieth.size() == 100);
  for (std::size_t i = 0; i < 100; ++i) CHECK(twentieth.examples[i].id == tenth.examples[i].id);
  CHECK_FALSE(finetune_subset(big, 0.1, 6).examples[0].id == tenth.examples[0].id);

  const World& w = world();
  TrainConfig cfg = default_train_config(Stage::kFinetune);
  cfg.fraction = 0.25;
  cfg.batch_size = 4;
  cfg.optim.lr = 1e-2;
  const TrainResult r = finetune(cfg, w.corpus, w.stack, w.init);
  // 8 examples x 2 tasks = 16 instances, 4 batches, 2 epochs.
  CHECK(r.step == 8);
  bool both = false;
  for (const StepRecord& s : r.record.steps) both = both || (s.parts.count("asr") && s.parts.count("st"));
  CHECK(both);
  CHECK(r.record.stage == "finetune");
  CHECK_THROWS_AS(finetune(quick("asr"), w.corpus, w.stack, w.init), std::invalid_argument);
  CHECK_THROWS_AS(pretrain(cfg, w.corpus, w.stack, w.init), std::invalid_argument);
}

TEST_CASE("greedy decoding and task evaluation") {
  const World& w = world();
  Tape tape;
  const Tensor speech = project(bind(tape, w.init, false), w.corpus.examples[0].speech.frames, w.cfg).value();
  const std::vector<int> out = greedy_decode(w.stack, speech, kAsrMarker, 7);
  REQUIRE(out.size() == 7);
  const Vocabulary vocab(w.cfg.vocab);
  for (int t : out) CHECK_FALSE(vocab.is_marker(t));

  EvalOptions opt;
  opt.retrieval_batch = 4;
  const TaskScores s = evaluate_tasks(w.heldout, w.stack, w.init, opt);
  CHECK(s.asr_wer >= 0.0);
  CHECK((s.st_accuracy >= 0.0 && s.st_accuracy <= 100.0));
  CHECK((s.retrieval >= 0.0 && s.retrieval <= 100.0));
  CHECK(s.heldout.at(SimilarityKind::kCosine).count(0));
  const ScoreReport report = make_report(s, opt);
  CHECK(report.scores.at("asr") == s.asr_wer);
  // WER is lower-is-better: its bound runs from 100 down to 0.
  CHECK(report.normalized() ==
        doctest::Approx(((100.0 - s.asr_wer) + s.st_accuracy + s.retrieval) / 3.0).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// Training probes on noise-free speech.

namespace {

// One word per projector window: three frames per word, windows of three.
struct ProbeWorld {
  ModelConfig cfg;
  GeneratorConfig gen;
  ProbeWorld() {
    cfg.window = 3;
    cfg.queries = 1;
    gen.noise = 0.0;
    gen.min_expansion = gen.max_expansion = 3;
    gen.subword_prob = 0.0;
  }
};

double mean_asr_loss(const Corpus& c, const FrozenStack& stack, const ProjectorParams& p) {
  double total = 0.0;
  for (const PairedExample& ex : c.examples) {
    Tape tape;
    total += asr_loss(stack, project(bind(tape, p, false), ex.speech.frames, stack.config()), ex.text.tokens).item();
  }
  return total / double(c.size());
}

}  // namespace

TEST_CASE("copy probe: speech then its text copy becomes predictable") {
  const ProbeWorld pw;
  const FrozenStack stack(pw.cfg);
  GeneratorConfig g = pw.gen;
  g.count = 256;
  g.seed = 8;
  const Corpus warm = generate_corpus(g);
  g.count = 32;
  g.seed = 7;
  const Corpus copies = generate_copy_corpus(g, 5);

  // Stage one aligns pooled speech with text; stage two fits next-word
  // prediction on sequences whose first half is speech and second half text.
  TrainConfig tc = default_train_config(Stage::kPretrain);
  tc.recipe = "contr-cos-emb";
  tc.optim.lr = 1e-2;
  ProjectorParams p = pretrain(tc, warm, stack, init_projector(pw.cfg, 3)).params;

  SpanPlan plan;
  plan.word_count = 10;
  plan.spans = {{Modality::kSpeech, 0, 5}, {Modality::kText, 5, 10}};
  OptimizerConfig oc;
  oc.weight_decay = 0.0;
  AdamW opt(oc, p);
  double loss = 0.0;
  std::size_t hits = 0, predicted = 0;
  for (int it = 0; it <= 60; ++it) {
    Tape tape;
    const ProjectorVars pv = bind(tape, p, true);
    Var sum;
    hits = predicted = 0;
    for (const PairedExample& ex : copies.examples) {
      const MixedSequence m = build_mixed(ex, plan, stack, pv);
      const Var l = nwp_loss(stack, m.embeddings, m.nwp_mask, m.tokens);
      sum = sum.valid() ? add(sum, l) : l;
      const Tensor logits = stack.lm_logits(m.embeddings).value();
      for (std::size_t q = 1; q < m.size(); ++q) {
        if (!m.nwp_mask[q]) continue;
        std::size_t best = 0;
        for (std::size_t v = 1; v < logits.cols(); ++v)
          if (logits(q - 1, v) > logits(q - 1, best)) best = v;
        hits += int(best) == m.tokens[q];
        ++predicted;
      }
    }
    const Var mean = scale(sum, 1.0 / double(copies.size()));
    loss = mean.item();
    if (it == 60) break;
    const Gradients g = tape.backward(mean);
    std::vector<Tensor> grads;
    for (const Var& v : pv.vars) grads.push_back(g.of(v));
    clip_gradients(grads, 1.0);
    opt.step(p, grads, 1e-2);
  }
  CHECK(predicted == 32 * 4);
  // Chance is 1/62. The projector's output norm is free, and inflated speech
  // rows saturate some read-outs, which caps accuracy near 85%.
  CHECK(loss < std::log(64.0) / 4.0);
  CHECK(double(hits) / double(predicted) > 0.75);
}

TEST_CASE("ASR pretraining on noise-free speech lowers the ASR loss") {
  const ProbeWorld pw;
  const FrozenStack stack(pw.cfg);
  GeneratorConfig g = pw.gen;
  g.count = 64;
  const Corpus c = generate_corpus(g);
  const ProjectorParams init = init_projector(pw.cfg, 4);
  TrainConfig tc = default_train_config(Stage::kPretrain);
  tc.recipe = "asr";
  tc.optim.lr = 1e-2;
  tc.epochs = 2;
  const double before = mean_asr_loss(c, stack, init);
  const double after = mean_asr_loss(c, stack, pretrain(tc, c, stack, init).params);
  CHECK(before == doctest::Approx(std::log(64.0)).epsilon(0.05));
  CHECK(after < before);
}
