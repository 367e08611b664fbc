// tools/main.cpp

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

// speechalign: generate corpora, pretrain and finetune projectors, evaluate
// checkpoints, and compare runs. Run with --help for usage.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "experiment.hpp"
#include "json.hpp"
#include "speechalign/logging.hpp"
#include "speechalign/random.hpp"

namespace fs = std::filesystem;
using namespace speechalign;
using namespace speechalign::cli;

namespace {

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::string> recipe;
  std::optional<std::string> layers;
  std::optional<double> tau;
  std::optional<double> blur;
  std::optional<double> fraction;
  std::string scores_file;
  std::string init;
  std::string resume;
  std::string checkpoint;
  std::vector<std::string> runs;
  bool force = false;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Writes through a temporary so a failed run never leaves a partial file,
// then announces the path.
void write_file(const fs::path& path, const std::string& content) {
  const fs::path tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    out << content;
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
  std::cout << path.string() << "\n";
}

void announce(const fs::path& path) { std::cout << path.string() << "\n"; }

ExperimentConfig load_config(const Options& o, const std::string& command) {
  ExperimentConfig cfg;
  if (!o.config.empty()) apply(cfg, read_key_values(o.config));
  for (const std::string& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
    apply(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  if (o.seed) {
    if (command == "generate") cfg.data.seed = *o.seed;
    else cfg.seed = *o.seed;
  }
  if (!o.out.empty()) cfg.out = o.out;
  if (o.recipe) apply(cfg, "loss.recipe", *o.recipe);
  if (o.layers) apply(cfg, "loss.layers", *o.layers);
  if (o.tau) cfg.pretrain.tau = *o.tau;
  if (o.blur) cfg.pretrain.sinkhorn.blur = *o.blur;
  if (o.fraction) cfg.finetune.fraction = *o.fraction;
  if (!o.init.empty()) cfg.finetune_init = o.init;
  resolve(cfg);
  if (cfg.out.empty()) cfg.out = (default_output_root() / command).string();
  return cfg;
}

fs::path prepare_out(const ExperimentConfig& cfg) {
  const fs::path out(cfg.out);
  fs::create_directories(out);
  return out;
}

Corpus load_corpus(const std::string& manifest, const char* key) {
  if (manifest.empty()) throw std::runtime_error(std::string("missing corpus: set ") + key + " to a .tsv manifest");
  if (!fs::exists(manifest)) throw std::runtime_error(std::string("missing corpus: ") + key + " '" + manifest + "' not found");
  return read_corpus(manifest, frames_path(manifest));
}

void check_corpus(const Corpus& c, const ModelConfig& m, const std::string& what) {
  if (c.vocab != m.vocab || c.frame_dim != m.frame_dim)
    throw std::runtime_error(what + " has vocab " + std::to_string(c.vocab) + " and frame_dim " +
                             std::to_string(c.frame_dim) + ", the config expects " + std::to_string(m.vocab) + " and " +
                             std::to_string(m.frame_dim));
}

// Warns on a checkpoint written for another model configuration and refuses
// to continue without --force.
Checkpoint load_checked(const std::string& path, const ModelConfig& model, bool force) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint '" + path + "' not found");
  Checkpoint ck = load_checkpoint(path, model);
  if (ck.config_hash != config_hash(model)) {
    warn("checkpoint '" + path + "' was written for model config " + hex64(ck.config_hash) + ", current is " +
         hex64(config_hash(model)));
    if (!force) throw std::runtime_error("config hash mismatch; rerun with --force to proceed");
  }
  return ck;
}

void write_run(const fs::path& out, const ExperimentConfig& cfg, const TrainResult& r) {
  const fs::path ckpt = out / "checkpoint.bin";
  save_checkpoint(ckpt, r.checkpoint(cfg.model));
  announce(ckpt);
  write_file(out / "steps.csv", r.record.steps_csv());
  write_file(out / "epochs.csv", r.record.epochs_csv());
  write_file(out / "run.jsonl", r.record.to_jsonl());
  write_file(out / "config.yaml", dump(cfg));
  std::ostringstream t;
  t << "wall_seconds " << r.record.wall_seconds << "\n";
  write_file(out / "timing.txt", t.str());
}

// Keeps the last good state on divergence, then fails.
template <typename Run>
int train_command(const ExperimentConfig& cfg, Run run) {
  const fs::path out = prepare_out(cfg);
  try {
    write_run(out, cfg, run());
  } catch (const DivergenceError& e) {
    const fs::path ckpt = out / "checkpoint-last-good.bin";
    save_checkpoint(ckpt, e.last_good().checkpoint(cfg.model));
    announce(ckpt);
    throw;
  }
  return 0;
}

int cmd_generate(const Options& o) {
  ExperimentConfig cfg = load_config(o, "generate");
  const fs::path out = prepare_out(cfg);
  // The saved config points at the new corpora, ready for pretrain.
  cfg.train_path = (out / "train.tsv").string();
  cfg.test_path = (out / "test.tsv").string();
  GeneratorConfig test = cfg.data;
  test.seed = cfg.test_seed;
  test.count = cfg.test_count;
  test.id_prefix = "test";
  for (const auto& [name, gen] : {std::pair{"train", cfg.data}, std::pair{"test", test}}) {
    const Corpus c = generate_corpus(gen);
    const fs::path manifest = out / (std::string(name) + ".tsv");
    write_corpus(c, manifest, frames_path(manifest));
    announce(manifest);
    announce(frames_path(manifest));
    const CorpusStats s = corpus_stats(c);
    std::cerr << name << ": count " << s.count << ", V " << s.vocab << ", mean M/N "
              << s.mean_frames_per_token << "\n";
  }
  cfg.out.clear();
  write_file(out / "config.yaml", dump(cfg));
  return 0;
}

int cmd_pretrain(const Options& o) {
  const ExperimentConfig cfg = load_config(o, "pretrain");
  const Corpus train = load_corpus(cfg.train_path, "data.train");
  check_corpus(train, cfg.model, "data.train");
  std::optional<Corpus> heldout;
  if (!cfg.test_path.empty()) heldout = load_corpus(cfg.test_path, "data.test");
  const FrozenStack stack(cfg.model);
  std::optional<Checkpoint> resume;
  if (!o.resume.empty()) resume = load_checked(o.resume, cfg.model, o.force);
  return train_command(cfg, [&] {
    return pretrain(cfg.pretrain, train, stack, init_projector(cfg.model, cfg.seed), heldout ? &*heldout : nullptr,
                    resume ? &*resume : nullptr);
  });
}

int cmd_finetune(const Options& o) {
  const ExperimentConfig cfg = load_config(o, "finetune");
  const Corpus train = load_corpus(cfg.train_path, "data.train");
  check_corpus(train, cfg.model, "data.train");
  std::optional<Corpus> heldout;
  if (!cfg.test_path.empty()) heldout = load_corpus(cfg.test_path, "data.test");
  const FrozenStack stack(cfg.model);
  const ProjectorParams init = cfg.finetune_init == "scratch"
                                   ? init_projector(cfg.model, cfg.seed)
                                   : load_checked(cfg.finetune_init, cfg.model, o.force).params;
  std::optional<Checkpoint> resume;
  if (!o.resume.empty()) resume = load_checked(o.resume, cfg.model, o.force);
  return train_command(cfg, [&] {
    return finetune(cfg.finetune, train, stack, init, heldout ? &*heldout : nullptr, resume ? &*resume : nullptr);
  });
}

ScoreReport report_from_scores_file(const std::string& path, const ExperimentConfig& cfg) {
  const KeyValues kv = read_key_values(path);
  ScoreReport r;
  std::map<std::string, Bound> bounds = cfg.eval.bounds;
  for (const auto& [key, value] : kv.entries) {
    if (key.rfind("scores.", 0) == 0) {
      try {
        r.scores[key.substr(7)] = std::stod(value);
      } catch (const std::exception&) {
        throw ConfigError(path + ": " + key + " is not a number");
      }
    } else if (key.rfind("bounds.", 0) == 0) {
      ExperimentConfig scratch;
      apply(scratch, key, value);
      bounds[key.substr(7)] = scratch.bound_overrides.begin()->second;
    } else {
      throw ConfigError(path + ": unknown key '" + key + "' (expected scores.* or bounds.*)");
    }
  }
  if (r.scores.empty()) throw ConfigError(path + ": no scores");
  for (const auto& [task, score] : r.scores) {
    const auto it = bounds.find(task);
    if (it == bounds.end()) throw ConfigError(path + ": no bounds for '" + task + "'");
    r.bounds[task] = it->second;
  }
  return r;
}

int cmd_evaluate(const Options& o) {
  const ExperimentConfig cfg = load_config(o, "evaluate");
  ScoreReport report;
  if (!o.scores_file.empty()) {
    report = report_from_scores_file(o.scores_file, cfg);
  } else {
    if (o.checkpoint.empty()) throw UsageError("evaluate needs --checkpoint (or --scores-file)");
    const Checkpoint ck = load_checked(o.checkpoint, cfg.model, o.force);
    const Corpus test = load_corpus(cfg.test_path, "data.test");
    check_corpus(test, cfg.model, "data.test");
    const FrozenStack stack(cfg.model);
    report = make_report(evaluate_tasks(test, stack, ck.params, cfg.eval), cfg.eval);
  }
  const fs::path out = prepare_out(cfg);
  write_file(out / "report.json", report.to_json());
  write_file(out / "report.csv", report.to_csv());
  return 0;
}

// Flattens a report into metric -> value: scores first, then extras, then
// the normalized average.
std::vector<std::pair<std::string, double>> report_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read report '" + path.string() + "'");
  const nlohmann::json j = nlohmann::json::parse(in);
  std::vector<std::pair<std::string, double>> out;
  for (const char* section : {"scores", "extra"})
    if (j.contains(section))
      for (const auto& [k, v] : j[section].items()) out.emplace_back(std::string(section) + "." + k, v.get<double>());
  if (j.contains("norm_avg")) out.emplace_back("norm_avg", j["norm_avg"].get<double>());
  return out;
}

std::string cell(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

int cmd_compare(const Options& o) {
  if (o.runs.size() < 2) throw UsageError("compare needs at least two run directories");
  const ExperimentConfig cfg = load_config(o, "compare");
  std::vector<std::map<std::string, double>> runs;
  std::vector<std::string> names;
  // Stable column order: scores, extras, norm_avg, each group sorted.
  std::vector<std::string> columns;
  std::set<std::string> seen;
  for (const std::string& r : o.runs) {
    const fs::path report = fs::is_directory(r) ? fs::path(r) / "report.json" : fs::path(r);
    const auto metrics = report_metrics(report);
    runs.emplace_back(metrics.begin(), metrics.end());
    names.push_back(r);
    for (const auto& [k, v] : metrics)
      if (seen.insert(k).second) columns.push_back(k);
  }
  auto rank = [](const std::string& k) { return k.rfind("scores.", 0) == 0 ? 0 : k.rfind("extra.", 0) == 0 ? 1 : 2; };
  std::sort(columns.begin(), columns.end(), [&](const std::string& a, const std::string& b) {
    return std::pair(rank(a), a) < std::pair(rank(b), b);
  });
  for (std::size_t i = 0; i < runs.size(); ++i)
    if (runs[i].size() != columns.size())
      warn("compare: run '" + names[i] + "' lacks some metrics; their cells are left blank");

  std::string csv = "run";
  std::string md = "| run |";
  std::string rule = "|---|";
  for (const auto& c : columns) {
    csv += "," + c + "," + c + "_delta";
    md += " " + c + " | Δ " + c + " |";
    rule += "---:|---:|";
  }
  csv += "\n";
  md += "\n" + rule + "\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    csv += names[i];
    md += "| " + names[i] + " |";
    for (const auto& c : columns) {
      const auto it = runs[i].find(c);
      const auto base = runs[0].find(c);
      const std::string value = it == runs[i].end() ? "" : cell(it->second);
      const std::string delta =
          it == runs[i].end() || base == runs[0].end() ? "" : cell(it->second - base->second);
      csv += "," + value + "," + delta;
      md += " " + value + " | " + delta + " |";
    }
    csv += "\n";
    md += "\n";
  }
  const fs::path out = prepare_out(cfg);
  write_file(out / "compare.csv", csv);
  write_file(out / "compare.md", md);
  return 0;
}

void add_common(CLI::App* app, Options& o) {
  app->add_option("--config", o.config, "YAML config file (see docs/config-format.md)");
  app->add_option("--set", o.sets, "Override one config key, as section.key=value (repeatable)");
  app->add_option("--seed", o.seed, "Training seed; the corpus seed for generate");
  app->add_option("--out", o.out, "Output directory (default: $SPEECHALIGN_OUT/<command>, or runs/<command>)");
}

void add_loss(CLI::App* app, Options& o) {
  app->add_option("--recipe", o.recipe, "Pretraining recipe, e.g. contr-cos-all or contr+asr");
  app->add_option("--layers", o.layers, "Comma-separated contrastive layer set");
  app->add_option("--tau", o.tau, "InfoNCE temperature");
  app->add_option("--blur", o.blur, "Sinkhorn blur");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speech-text alignment experiments on a synthetic corpus"};
  app.require_subcommand(1);
  Options o;

  CLI::App* gen = app.add_subcommand("generate", "Write train and test corpora");
  add_common(gen, o);

  CLI::App* pre = app.add_subcommand("pretrain", "Pretrain the projector under a loss recipe");
  add_common(pre, o);
  add_loss(pre, o);
  pre->add_option("--resume", o.resume, "Continue from a checkpoint with optimizer state");
  pre->add_flag("--force", o.force, "Proceed despite a config-hash mismatch");

  CLI::App* fin = app.add_subcommand("finetune", "Finetune on toy ASR and toy ST");
  add_common(fin, o);
  add_loss(fin, o);
  fin->add_option("--fraction", o.fraction, "Fraction of the training corpus to finetune on");
  fin->add_option("--init", o.init, "Checkpoint to start from, or 'scratch'");
  fin->add_option("--resume", o.resume, "Continue from a checkpoint with optimizer state");
  fin->add_flag("--force", o.force, "Proceed despite a config-hash mismatch");

  CLI::App* ev = app.add_subcommand("evaluate", "Score a checkpoint on the test corpus");
  add_common(ev, o);
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint to evaluate");
  ev->add_option("--scores-file", o.scores_file, "Build the report from given scores instead of a checkpoint");
  ev->add_flag("--force", o.force, "Proceed despite a config-hash mismatch");

  CLI::App* cmp = app.add_subcommand("compare", "Tabulate reports of several runs");
  add_common(cmp, o);
  cmp->add_option("runs", o.runs, "Run directories or report.json files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) return cmd_generate(o);
    if (pre->parsed()) return cmd_pretrain(o);
    if (fin->parsed()) return cmd_finetune(o);
    if (ev->parsed()) return cmd_evaluate(o);
    return cmd_compare(o);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
