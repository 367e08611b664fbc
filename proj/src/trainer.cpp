// src/trainer.cpp

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

#include "speechalign/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>

#include "json.hpp"
#include "speechalign/logging.hpp"
#include "speechalign/mixing.hpp"
#include "speechalign/random.hpp"

namespace speechalign {

namespace {

constexpr std::uint64_t kTagShuffle = 301;
constexpr std::uint64_t kTagOffset = 302;
constexpr std::uint64_t kTagPlan = 303;

[[noreturn]] void invalid(const std::string& what) { throw std::invalid_argument(what); }

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) out.push_back(std::move(cur)), cur.clear();
    else cur.push_back(c);
  }
  out.push_back(cur);
  return out;
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return s.str();
}

// One unit of training data: an example index and, when finetuning, the
// task it is used for.
enum class Task { kRecipe, kAsr, kSt };
struct Instance {
  std::size_t example = 0;
  Task task = Task::kRecipe;
};
using MicroBatch = std::vector<Instance>;

struct LossContext {
  Tape& tape;
  const ProjectorVars& projector;
  const MicroBatch& batch;
  std::size_t epoch;
  std::size_t step;
  std::size_t micro;
};

struct LossValue {
  Var total;
  std::map<std::string, Var> parts;
};

using LossFn = std::function<LossValue(const LossContext&)>;
using EpochFn = std::function<std::vector<MicroBatch>(std::size_t epoch)>;

std::size_t sample_offset(const TrainConfig& cfg, const ModelConfig& model, std::size_t step, std::size_t micro,
                          std::size_t slot) {
  if (!cfg.position_offsets || model.max_offset == 0) return 0;
  return derive_seed(cfg.seed, {kTagOffset, step, micro, slot}) % model.max_offset;
}

bool finite(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](double v) { return std::isfinite(v); });
}

std::map<std::string, double> heldout_metrics(const Corpus* heldout, const FrozenStack& stack,
                                              const ProjectorParams& params, const TrainConfig& cfg) {
  std::map<std::string, double> out;
  if (!heldout || heldout->size() < 2) return out;
  HeldoutOptions opt;
  opt.batch_size = cfg.heldout_batch;
  opt.sinkhorn = cfg.sinkhorn;
  for (const auto& [kind, layers] : heldout_contrastive(*heldout, stack, params, opt))
    for (const auto& [layer, loss] : layers)
      out["heldout_" + std::string(kind == SimilarityKind::kCosine ? "cos" : "wasser") + "_l" + std::to_string(layer)] =
          loss;
  return out;
}

TrainResult run_loop(const TrainConfig& cfg, const FrozenStack& stack, const ProjectorParams& init,
                     const Checkpoint* resume, const EpochFn& epoch_batches, const LossFn& loss_fn,
                     const Corpus* heldout, const std::string& recipe_name) {
  validate(cfg);
  const auto started = std::chrono::steady_clock::now();
  const ModelConfig& model = stack.config();
  TrainResult res;
  res.params = init;
  res.record.stage = to_string(cfg.stage);
  res.record.recipe = recipe_name;
  res.record.config_hash = config_hash(cfg, model);

  AdamW opt(cfg.optim, init);
  if (resume) {
    if (!resume->optimizer) invalid("resume: checkpoint has no optimizer state");
    if (resume->config_hash != speechalign::config_hash(model))
      invalid("resume: checkpoint was written for a different model configuration");
    res.params = resume->params;
    opt.load(*resume->optimizer);
    res.step = resume->step;
  }

  const std::size_t per_epoch = epoch_batches(0).size() / cfg.grad_accum;
  if (per_epoch == 0) invalid("training: fewer batches than one optimizer step needs");
  res.total_steps = per_epoch * cfg.epochs;
  if (res.step > res.total_steps) invalid("resume: checkpoint step beyond the configured run");

  std::vector<MicroBatch> batches;
  std::size_t batches_epoch = std::numeric_limits<std::size_t>::max();
  while (res.step < res.total_steps && (cfg.max_steps == 0 || res.step < cfg.max_steps)) {
    const std::size_t step = res.step, epoch = step / per_epoch, within = step % per_epoch;
    if (epoch != batches_epoch) batches = epoch_batches(epoch), batches_epoch = epoch;

    std::vector<Tensor> grads;
    for (const Tensor* t : res.params.tensors()) grads.emplace_back(t->shape(), 0.0);
    StepRecord rec;
    rec.step = step;
    rec.epoch = epoch;
    for (std::size_t a = 0; a < cfg.grad_accum; ++a) {
      const MicroBatch& mb = batches[within * cfg.grad_accum + a];
      Tape tape;
      const ProjectorVars pv = bind(tape, res.params, true);
      const LossValue lv = loss_fn({tape, pv, mb, epoch, step, a});
      const double loss = lv.total.item();
      if (!std::isfinite(loss))
        throw DivergenceError("training diverged: non-finite loss at step " + std::to_string(step), res);
      rec.loss += loss / double(cfg.grad_accum);
      for (const auto& [name, v] : lv.parts) rec.parts[name] += v.item() / double(cfg.grad_accum);
      const Gradients g = tape.backward(lv.total);
      for (std::size_t k = 0; k < grads.size(); ++k) {
        const Tensor gk = g.of(pv.vars[k]);
        for (std::size_t i = 0; i < gk.size(); ++i) grads[k][i] += gk[i] / double(cfg.grad_accum);
      }
    }
    ClipResult clip;
    try {
      clip = clip_gradients(grads, cfg.optim.clip);
    } catch (const NonFiniteError& e) {
      throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(step), res);
    }
    rec.grad_norm = clip.norm;
    rec.lr = lr_at(step, res.total_steps, cfg.optim);
    opt.step(res.params, grads, rec.lr);
    res.record.steps.push_back(std::move(rec));
    ++res.step;

    if (within + 1 == per_epoch) {
      EpochRecord er;
      er.epoch = epoch;
      er.metrics = heldout_metrics(heldout, stack, res.params, cfg);
      res.record.epochs.push_back(std::move(er));
    }
  }
  res.optimizer = opt.state();
  res.record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return res;
}

// Text-side layer representations never change, so they are computed once
// per example (at offset 0) and reused across steps.
class TextCache {
 public:
  TextCache(const FrozenStack& stack, const Corpus& corpus, LayerSet layers)
      : stack_(stack), corpus_(corpus), layers_(std::move(layers)) {}

  const LayerSet& layers() const { return layers_; }

  std::vector<Var> get(Tape& tape, std::size_t example, std::size_t offset) {
    std::vector<Tensor>* values = nullptr;
    std::vector<Tensor> fresh;
    if (offset == 0) {
      auto it = cache_.find(example);
      if (it == cache_.end()) it = cache_.emplace(example, compute(example, 0)).first;
      values = &it->second;
    } else {
      fresh = compute(example, offset);
      values = &fresh;
    }
    std::vector<Var> out;
    for (const Tensor& t : *values) out.push_back(tape.constant(t));
    return out;
  }

 private:
  std::vector<Tensor> compute(std::size_t example, std::size_t offset) const {
    Tape tape;
    const Var x = stack_.embed(tape, corpus_.examples[example].text.tokens);
    std::vector<Tensor> out;
    for (const Var& v : stack_.layer_reprs(x, layers_, offset)) out.push_back(v.value());
    return out;
  }

  const FrozenStack& stack_;
  const Corpus& corpus_;
  LayerSet layers_;
  std::map<std::size_t, std::vector<Tensor>> cache_;
};

SpanPlan plan_for(const TrainConfig& cfg, const PairedExample& ex, std::size_t epoch, std::size_t index,
                  bool need_text_pair) {
  // Resample a handful of times when a plan leaves nothing to predict.
  SpanPlan plan;
  for (std::uint64_t attempt = 0; attempt < 8; ++attempt) {
    plan = sample_span_plan(ex.text.word_count(), derive_seed(cfg.seed, {kTagPlan, epoch, index, attempt}));
    if (!need_text_pair) return plan;
    // A text span covering two or more tokens has a predictable position.
    for (const WordSpan& s : plan.spans) {
      if (s.modality != Modality::kText) continue;
      std::size_t pieces = 0;
      for (int w : ex.text.word_index) pieces += std::size_t(w) >= s.begin && std::size_t(w) < s.end;
      if (pieces >= 2) return plan;
    }
  }
  return plan;
}

std::vector<MicroBatch> shuffled_batches(std::vector<Instance> items, std::size_t batch_size, std::uint64_t seed,
                                         bool drop_last) {
  Rng rng(seed);
  std::shuffle(items.begin(), items.end(), rng);
  std::vector<MicroBatch> out;
  for (std::size_t b = 0; b < items.size(); b += batch_size) {
    const std::size_t e = std::min(items.size(), b + batch_size);
    if (drop_last && e - b < batch_size) break;
    out.emplace_back(items.begin() + long(b), items.begin() + long(e));
  }
  return out;
}

}  // namespace

const char* to_string(Stage stage) { return stage == Stage::kPretrain ? "pretrain" : "finetune"; }

Recipe parse_recipe(const std::string& name, std::size_t depth) {
  std::string expanded = name;
  if (name == "contr+asr") expanded = "contr-cos-all+asr";
  if (name == "contr+nwp") expanded = "contr-cos-all+nwp-mixed";
  Recipe r;
  r.name = name;
  std::set<std::string> seen;
  for (const std::string& part : split(expanded, '+')) {
    if (!seen.insert(part).second) invalid("recipe '" + name + "': part '" + part + "' repeated");
    if (part == "asr") {
      r.asr = true;
    } else if (part == "nwp-mixed") {
      r.nwp = true;
    } else if (part == "mixed-contr") {
      r.mixed_contrastive = true;
    } else if (part.rfind("contr-", 0) == 0) {
      if (r.contrastive) invalid("recipe '" + name + "': more than one contrastive part");
      std::string rest = part.substr(6);
      std::string scope = "emb";
      const auto dash = rest.find('-');
      if (dash != std::string::npos) scope = rest.substr(dash + 1), rest = rest.substr(0, dash);
      if (rest != "cos" && rest != "wasser") invalid("recipe '" + name + "': unknown similarity '" + rest + "'");
      if (scope != "emb" && scope != "all") invalid("recipe '" + name + "': unknown layer scope '" + scope + "'");
      r.contrastive = parse_similarity_kind(rest);
      r.layers = scope == "all" ? every_fifth_layer(depth) : LayerSet{0};
    } else {
      invalid("unknown recipe part '" + part + "' in '" + name +
              "' (expected asr, nwp-mixed, mixed-contr, contr-{cos,wasser}[-emb|-all], contr+asr, contr+nwp)");
    }
  }
  if (r.contrastive && r.mixed_contrastive) invalid("recipe '" + name + "': contr-* and mixed-contr are exclusive");
  if (r.mixed_contrastive) r.layers = {0};
  // Contrastive terms sharing the batch with next-word prediction use the
  // softer temperature.
  r.tau = r.mixed_contrastive || (r.contrastive && r.nwp) ? 0.5 : 0.1;
  return r;
}

TrainConfig default_train_config(Stage stage) {
  TrainConfig cfg;
  cfg.stage = stage;
  cfg.epochs = stage == Stage::kPretrain ? 5 : 2;
  return cfg;
}

void validate(const TrainConfig& cfg) {
  const auto& o = cfg.optim;
  if (!(o.lr >= 0.0) || !std::isfinite(o.lr)) invalid("train config: lr must be finite and >= 0");
  if (!(o.warmup_ratio >= 0.0 && o.warmup_ratio < 1.0)) invalid("train config: warmup_ratio must be in [0, 1)");
  if (!(o.beta1 >= 0.0 && o.beta1 < 1.0 && o.beta2 >= 0.0 && o.beta2 < 1.0))
    invalid("train config: betas must be in [0, 1)");
  if (!(o.eps > 0.0)) invalid("train config: eps must be > 0");
  if (!(o.weight_decay >= 0.0)) invalid("train config: weight_decay must be >= 0");
  if (!(o.clip > 0.0)) invalid("train config: clip must be > 0");
  if (!(cfg.fraction > 0.0 && cfg.fraction <= 1.0)) invalid("train config: fraction must be in (0, 1]");
  if (cfg.batch_size < 1) invalid("train config: batch_size must be >= 1");
  if (cfg.grad_accum < 1) invalid("train config: grad_accum must be >= 1");
  if (cfg.epochs < 1) invalid("train config: epochs must be >= 1");
  if (cfg.tau && !(*cfg.tau > 0.0)) invalid("train config: tau must be > 0");
  if (!(cfg.sinkhorn.blur > 0.0) || cfg.sinkhorn.p < 1.0) invalid("train config: need blur > 0 and p >= 1");
}

std::uint64_t config_hash(const TrainConfig& cfg, const ModelConfig& model) {
  std::ostringstream s;
  s << std::setprecision(17) << "train-v1|" << to_string(cfg.stage) << '|' << cfg.recipe << '|';
  if (cfg.layers)
    for (std::size_t l : *cfg.layers) s << l << ',';
  s << '|' << (cfg.tau ? *cfg.tau : -1.0) << '|' << cfg.sinkhorn.p << '|' << cfg.sinkhorn.blur << '|'
    << cfg.sinkhorn.max_iter << '|' << cfg.sinkhorn.tol << '|' << cfg.optim.lr << '|' << cfg.optim.warmup_ratio
    << '|' << cfg.optim.beta1 << '|' << cfg.optim.beta2 << '|' << cfg.optim.eps << '|' << cfg.optim.weight_decay
    << '|' << cfg.optim.clip << '|' << cfg.batch_size << '|' << cfg.epochs << '|' << cfg.grad_accum << '|'
    << cfg.seed << '|' << cfg.fraction << '|' << cfg.position_offsets << '|' << cfg.heldout_batch << '|'
    << config_hash(model);
  return fnv1a(s.str());
}

double lr_at(std::size_t step, std::size_t total, const OptimizerConfig& cfg) {
  if (step > total) invalid("lr_at: step beyond total");
  if (total == 0) return 0.0;
  const auto warmup = static_cast<std::size_t>(std::ceil(cfg.warmup_ratio * double(total)));
  if (step < warmup) return cfg.lr * double(step) / double(warmup);
  if (warmup >= total) return cfg.lr;
  const double progress = double(step - warmup) / double(total - warmup);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

ClipResult clip_gradients(std::vector<Tensor>& grads, double max_norm) {
  if (!(max_norm > 0.0)) invalid("clip_gradients: max_norm must be > 0");
  double sq = 0.0;
  for (const Tensor& g : grads) {
    if (!finite(g)) throw NonFiniteError("non-finite gradient");
    for (double v : g.values()) sq += v * v;
  }
  ClipResult r;
  r.norm = std::sqrt(sq);
  if (r.norm > max_norm) {
    const double k = max_norm / r.norm;
    for (Tensor& g : grads)
      for (auto& v : g.values()) v *= k;
    r.clipped = true;
  }
  return r;
}

AdamW::AdamW(const OptimizerConfig& cfg, const ProjectorParams& like) : cfg_(cfg), state_{like, like, 0} {
  for (Tensor* t : state_.m.tensors())
    for (auto& v : t->values()) v = 0.0;
  state_.v = state_.m;
}

void AdamW::step(ProjectorParams& params, const std::vector<Tensor>& grads, double lr) {
  if (grads.size() != ProjectorParams::kTensors) invalid("AdamW: expected one gradient per parameter tensor");
  ++state_.step;
  const double c1 = 1.0 - std::pow(cfg_.beta1, double(state_.step));
  const double c2 = 1.0 - std::pow(cfg_.beta2, double(state_.step));
  const auto ps = params.tensors();
  const auto ms = state_.m.tensors();
  const auto vs = state_.v.tensors();
  for (std::size_t k = 0; k < ps.size(); ++k) {
    if (grads[k].shape() != ps[k]->shape()) throw ShapeError("AdamW: gradient shape mismatch");
    auto p = ps[k]->values();
    auto m = ms[k]->values();
    auto v = vs[k]->values();
    const auto g = grads[k].values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] *= 1.0 - lr * cfg_.weight_decay;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
    }
  }
}

std::string RunRecord::to_jsonl() const {
  std::string out;
  nlohmann::ordered_json head{{"type", "run"}, {"stage", stage}, {"recipe", recipe}, {"config_hash", hex64(config_hash)}};
  out += head.dump() + "\n";
  for (const StepRecord& s : steps) {
    nlohmann::ordered_json j{{"type", "step"}, {"step", s.step}, {"epoch", s.epoch}, {"lr", s.lr},
                             {"loss", s.loss}, {"grad_norm", s.grad_norm}};
    j["parts"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : s.parts) j["parts"][k] = v;
    out += j.dump() + "\n";
  }
  for (const EpochRecord& e : epochs) {
    nlohmann::ordered_json j{{"type", "epoch"}, {"epoch", e.epoch}};
    j["metrics"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : e.metrics) j["metrics"][k] = v;
    out += j.dump() + "\n";
  }
  return out;
}

std::string RunRecord::steps_csv() const {
  std::set<std::string> names;
  for (const StepRecord& s : steps)
    for (const auto& [k, v] : s.parts) names.insert(k);
  std::string out = "step,epoch,lr,loss,grad_norm";
  for (const auto& n : names) out += "," + n;
  out += "\n";
  for (const StepRecord& s : steps) {
    out += std::to_string(s.step) + "," + std::to_string(s.epoch) + "," + fmt(s.lr) + "," + fmt(s.loss) + "," +
           fmt(s.grad_norm);
    for (const auto& n : names) {
      const auto it = s.parts.find(n);
      out += "," + (it == s.parts.end() ? std::string() : fmt(it->second));
    }
    out += "\n";
  }
  return out;
}

std::string RunRecord::epochs_csv() const {
  std::set<std::string> names;
  for (const EpochRecord& e : epochs)
    for (const auto& [k, v] : e.metrics) names.insert(k);
  std::string out = "epoch";
  for (const auto& n : names) out += "," + n;
  out += "\n";
  for (const EpochRecord& e : epochs) {
    out += std::to_string(e.epoch);
    for (const auto& n : names) {
      const auto it = e.metrics.find(n);
      out += "," + (it == e.metrics.end() ? std::string() : fmt(it->second));
    }
    out += "\n";
  }
  return out;
}

Checkpoint TrainResult::checkpoint(const ModelConfig& model) const {
  Checkpoint ck;
  ck.config_hash = config_hash(model);
  ck.step = step;
  ck.params = params;
  ck.optimizer = optimizer;
  return ck;
}

namespace {

Recipe resolved_recipe(const TrainConfig& cfg, const FrozenStack& stack) {
  Recipe recipe = parse_recipe(cfg.recipe, stack.depth());
  if (cfg.layers) recipe.layers = normalize_layers(*cfg.layers, stack.depth());
  if (cfg.tau) recipe.tau = *cfg.tau;
  return recipe;
}

bool is_contrastive(const Recipe& r) { return r.contrastive || r.mixed_contrastive; }

LossValue recipe_loss(const Recipe& recipe, const TrainConfig& cfg, const Corpus& corpus, const FrozenStack& stack,
                      TextCache& text_cache, const LossContext& c) {
  const ModelConfig& model = stack.config();
  std::map<LossPart, Var> parts;
  std::vector<Var> speech;
  std::vector<std::size_t> offsets;
  for (std::size_t b = 0; b < c.batch.size(); ++b) {
    speech.push_back(project(c.projector, corpus.examples[c.batch[b].example].speech.frames, model));
    offsets.push_back(sample_offset(cfg, model, c.step, c.micro, b));
  }
  if (is_contrastive(recipe)) {
    std::vector<Var> left = speech;
    if (recipe.mixed_contrastive) {
      for (std::size_t b = 0; b < c.batch.size(); ++b) {
        const std::size_t idx = c.batch[b].example;
        const PairedExample& ex = corpus.examples[idx];
        left[b] = build_mixed(ex, plan_for(cfg, ex, c.epoch, idx, false), stack, c.projector).embeddings;
      }
    }
    std::vector<std::vector<Var>> text(recipe.layers.size());
    for (std::size_t b = 0; b < c.batch.size(); ++b) {
      const std::vector<Var> reprs = text_cache.get(c.tape, c.batch[b].example, offsets[b]);
      for (std::size_t k = 0; k < reprs.size(); ++k) text[k].push_back(reprs[k]);
    }
    ContrastiveParams cp;
    cp.kind = recipe.contrastive.value_or(SimilarityKind::kCosine);
    cp.tau = recipe.tau;
    cp.sinkhorn = cfg.sinkhorn;
    parts[LossPart::kContrastive] = multi_layer_contrastive(stack, left, text, recipe.layers, cp, offsets).total;
  }
  if (recipe.asr) {
    Var sum;
    for (std::size_t b = 0; b < c.batch.size(); ++b) {
      const Var l = asr_loss(stack, speech[b], corpus.examples[c.batch[b].example].text.tokens, offsets[b]);
      sum = sum.valid() ? add(sum, l) : l;
    }
    parts[LossPart::kAsr] = scale(sum, 1.0 / double(c.batch.size()));
  }
  if (recipe.nwp) {
    Var sum;
    std::size_t counted = 0;
    for (std::size_t b = 0; b < c.batch.size(); ++b) {
      const std::size_t idx = c.batch[b].example;
      const PairedExample& ex = corpus.examples[idx];
      const MixedSequence m = build_mixed(ex, plan_for(cfg, ex, c.epoch, idx, true), stack, c.projector);
      if (m.predictable() == 0) continue;
      const Var l = nwp_loss(stack, m.embeddings, m.nwp_mask, m.tokens, offsets[b]);
      sum = sum.valid() ? add(sum, l) : l;
      ++counted;
    }
    if (counted) parts[LossPart::kNwp] = scale(sum, 1.0 / double(counted));
  }
  if (parts.empty()) invalid("pretrain: batch produced no loss terms");
  LossValue lv;
  lv.total = combined_loss(parts, equal_weights(parts));
  for (const auto& [p, v] : parts) lv.parts[to_string(p)] = v;
  return lv;
}

}  // namespace

TrainResult pretrain(const TrainConfig& cfg, const Corpus& corpus, const FrozenStack& stack,
                     const ProjectorParams& init, const Corpus* heldout, const Checkpoint* resume) {
  if (cfg.stage != Stage::kPretrain) invalid("pretrain: config stage is not pretrain");
  if (corpus.empty()) invalid("pretrain: empty corpus");
  const Recipe recipe = resolved_recipe(cfg, stack);
  if (is_contrastive(recipe) && cfg.batch_size < 2) invalid("pretrain: contrastive recipes need batch_size >= 2");
  TextCache text_cache(stack, corpus, is_contrastive(recipe) ? recipe.layers : LayerSet{0});

  std::vector<Instance> all(corpus.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i].example = i;
  const EpochFn epochs = [&](std::size_t epoch) {
    return shuffled_batches(all, cfg.batch_size, derive_seed(cfg.seed, {kTagShuffle, epoch}), true);
  };
  const LossFn loss = [&](const LossContext& c) { return recipe_loss(recipe, cfg, corpus, stack, text_cache, c); };
  return run_loop(cfg, stack, init, resume, epochs, loss, heldout, recipe.name);
}

Var pretrain_batch_loss(const TrainConfig& cfg, const Corpus& corpus, const FrozenStack& stack,
                        const ProjectorVars& projector, const std::vector<std::size_t>& examples) {
  const Recipe recipe = resolved_recipe(cfg, stack);
  if (is_contrastive(recipe) && examples.size() < 2) invalid("pretrain_batch_loss: contrastive recipes need >= 2 examples");
  if (projector.vars.empty()) invalid("pretrain_batch_loss: unbound projector");
  MicroBatch batch;
  for (std::size_t i : examples) {
    if (i >= corpus.size()) invalid("pretrain_batch_loss: example index out of range");
    batch.push_back({i, Task::kRecipe});
  }
  TextCache text_cache(stack, corpus, is_contrastive(recipe) ? recipe.layers : LayerSet{0});
  const LossContext c{*projector.vars.front().tape(), projector, batch, 0, 0, 0};
  return recipe_loss(recipe, cfg, corpus, stack, text_cache, c).total;
}

Corpus finetune_subset(const Corpus& corpus, double fraction, std::uint64_t seed) {
  Corpus out;
  out.vocab = corpus.vocab;
  out.frame_dim = corpus.frame_dim;
  for (std::size_t i : subset_indices(corpus.size(), fraction, seed)) out.examples.push_back(corpus.examples[i]);
  return out;
}

TrainResult finetune(const TrainConfig& cfg, const Corpus& corpus, const FrozenStack& stack,
                     const ProjectorParams& init, const Corpus* heldout, const Checkpoint* resume) {
  if (cfg.stage != Stage::kFinetune) invalid("finetune: config stage is not finetune");
  const Corpus subset = finetune_subset(corpus, cfg.fraction, cfg.seed);
  if (subset.empty()) invalid("finetune: the subset is empty");
  const ModelConfig& model = stack.config();
  std::vector<Instance> all;
  for (std::size_t i = 0; i < subset.size(); ++i) {
    all.push_back({i, Task::kAsr});
    all.push_back({i, Task::kSt});
  }
  const EpochFn epochs = [&](std::size_t epoch) {
    return shuffled_batches(all, cfg.batch_size, derive_seed(cfg.seed, {kTagShuffle, epoch}), false);
  };
  const LossFn loss = [&](const LossContext& c) {
    Var total;
    std::map<Task, std::pair<Var, std::size_t>> per_task;
    for (std::size_t b = 0; b < c.batch.size(); ++b) {
      const Instance& in = c.batch[b];
      const PairedExample& ex = subset.examples[in.example];
      const Var speech = project(c.projector, ex.speech.frames, model);
      const std::size_t offset = sample_offset(cfg, model, c.step, c.micro, b);
      const Var l = in.task == Task::kAsr ? asr_loss(stack, speech, ex.text.tokens, offset)
                                          : st_loss(stack, speech, ex.text.tokens, offset);
      total = total.valid() ? add(total, l) : l;
      auto& [sum, n] = per_task[in.task];
      sum = sum.valid() ? add(sum, l) : l;
      ++n;
    }
    LossValue lv;
    lv.total = scale(total, 1.0 / double(c.batch.size()));
    for (const auto& [task, sn] : per_task)
      lv.parts[task == Task::kAsr ? "asr" : "st"] = scale(sn.first, 1.0 / double(sn.second));
    return lv;
  };
  return run_loop(cfg, stack, init, resume, epochs, loss, heldout, "asr+st");
}

// ---------------------------------------------------------------------------

std::vector<int> greedy_decode(const FrozenStack& stack, const Tensor& speech, int marker, std::size_t length) {
  const Vocabulary vocab(stack.config().vocab);
  std::vector<int> prefix{marker}, out;
  for (std::size_t k = 0; k < length; ++k) {
    Tape tape;
    const std::array<Var, 2> parts{tape.constant(speech), stack.embed(tape, prefix)};
    const Var x = concat(parts, Axis::kRows);
    // Only the last position's logits are needed.
    const Var last = slice(stack.layer_repr(x, stack.depth()), Axis::kRows, x.rows() - 1, x.rows());
    const Tensor logits = stack.head(last).value();
    int best = -1;
    for (std::size_t v = 0; v < logits.cols(); ++v) {
      if (vocab.is_marker(int(v))) continue;
      if (best < 0 || logits(0, v) > logits(0, std::size_t(best))) best = int(v);
    }
    out.push_back(best);
    prefix.push_back(best);
  }
  return out;
}

TaskScores evaluate_tasks(const Corpus& corpus, const FrozenStack& stack, const ProjectorParams& params,
                          const EvalOptions& options) {
  if (corpus.empty()) invalid("evaluate: empty corpus");
  const ModelConfig& model = stack.config();
  const Vocabulary vocab(model.vocab);
  TaskScores s;
  std::size_t edits = 0, ref_words = 0, st_hits = 0, st_total = 0;
  std::vector<Words> st_refs, st_hyps;
  std::vector<Tensor> projected;
  for (const PairedExample& ex : corpus.examples) {
    Tape tape;
    projected.push_back(project(bind(tape, params, false), ex.speech.frames, model).value());
    const std::vector<int> asr = greedy_decode(stack, projected.back(), kAsrMarker, ex.text.size());
    const Words ref = vocab.words(ex.text.tokens), hyp = vocab.words(asr);
    edits += edit_distance(ref, hyp);
    ref_words += ref.size();
    std::string ref_s, hyp_s;
    for (const auto& w : ref) ref_s += w + " ";
    for (const auto& w : hyp) hyp_s += w + " ";
    s.asr_em += exact_match(ref_s, hyp_s) / double(corpus.size());
    s.asr_f1 += token_f1(ref_s, hyp_s) / double(corpus.size());

    const std::vector<int> target = stack.translate(ex.text.tokens);
    const std::vector<int> st = greedy_decode(stack, projected.back(), kStMarker, target.size());
    for (std::size_t k = 0; k < target.size(); ++k) st_hits += st[k] == target[k];
    st_total += target.size();
    st_refs.push_back(vocab.words(target));
    st_hyps.push_back(vocab.words(st));
  }
  s.asr_wer = 100.0 * double(edits) / double(ref_words);
  s.st_accuracy = 100.0 * double(st_hits) / double(st_total);
  s.st_bleu = corpus_bleu(st_refs, st_hyps);

  if (corpus.size() >= 2) {
    const std::size_t bs = options.retrieval_batch ? std::min(options.retrieval_batch, corpus.size()) : corpus.size();
    const std::size_t batches = corpus.size() / bs;
    for (std::size_t k = 0; k < batches; ++k) {
      Tape tape;
      std::vector<Var> sp, tx;
      for (std::size_t i = k * bs; i < (k + 1) * bs; ++i) {
        sp.push_back(tape.constant(projected[i]));
        tx.push_back(stack.embed(tape, corpus.examples[i].text.tokens));
      }
      s.retrieval += retrieval_at_1(sp, tx, SimilarityKind::kCosine) / double(batches);
    }
    s.heldout = heldout_contrastive(corpus, stack, params, options.heldout);
  }
  return s;
}

ScoreReport make_report(const TaskScores& s, const EvalOptions& options) {
  ScoreReport r;
  r.scores = {{"asr", s.asr_wer}, {"st", s.st_accuracy}, {"retrieval", s.retrieval}};
  r.bounds = options.bounds;
  r.extra = {{"asr_em", s.asr_em}, {"asr_f1", s.asr_f1}, {"st_bleu", s.st_bleu}};
  for (const auto& [kind, layers] : s.heldout)
    for (const auto& [layer, loss] : layers)
      r.extra["heldout_" + std::string(kind == SimilarityKind::kCosine ? "cos" : "wasser") + "_l" +
              std::to_string(layer)] = loss;
  return r;
}

}  // namespace speechalign
