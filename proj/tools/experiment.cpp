// tools/experiment.cpp

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

#include "experiment.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace speechalign::cli {

namespace {

[[noreturn]] void fail(const std::string& what) { throw ConfigError(what); }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  const auto e = s.find_last_not_of(" \t");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

// "a,b" or "[a, b]", as written on the command line.
std::vector<std::string> split_list(std::string s) {
  s = trim(s);
  if (s.size() >= 2 && s.front() == '[' && s.back() == ']') s = s.substr(1, s.size() - 2);
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &used);
  } catch (const std::exception&) {
    fail(key + ": expected a non-negative integer, got '" + v + "'");
  }
  if (used != v.size()) fail(key + ": expected a non-negative integer, got '" + v + "'");
  return x;
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    fail(key + ": expected a number, got '" + v + "'");
  }
  if (used != v.size()) fail(key + ": expected a number, got '" + v + "'");
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "no" || v == "0") return false;
  fail(key + ": expected true or false, got '" + v + "'");
}

LayerSet to_layers(const std::string& key, const std::string& v) {
  LayerSet out;
  for (const auto& item : split_list(v)) out.push_back(to_uint(key, item));
  return out;
}

// Shortest text that parses back to the same double.
std::string num(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string join(const LayerSet& l) {
  std::string out;
  for (std::size_t x : l) out += (out.empty() ? "" : ", ") + std::to_string(x);
  return out;
}

struct Field {
  std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename T>
Field uint_field(T ExperimentConfig::*member) {
  return {[member](ExperimentConfig& c, const std::string& k, const std::string& v) {
            c.*member = static_cast<T>(to_uint(k, v));
          },
          [member](const ExperimentConfig& c) { return std::to_string(c.*member); }};
}

// Accessor-based fields for nested structs.
template <typename Get>
Field size_field(Get get) {
  return {[get](ExperimentConfig& c, const std::string& k, const std::string& v) {
            get(c) = static_cast<std::remove_reference_t<decltype(get(c))>>(to_uint(k, v));
          },
          [get](const ExperimentConfig& c) { return std::to_string(get(const_cast<ExperimentConfig&>(c))); }};
}

template <typename Get>
Field double_field(Get get) {
  return {[get](ExperimentConfig& c, const std::string& k, const std::string& v) { get(c) = to_double(k, v); },
          [get](const ExperimentConfig& c) { return num(get(const_cast<ExperimentConfig&>(c))); }};
}

template <typename Get>
Field bool_field(Get get) {
  return {[get](ExperimentConfig& c, const std::string& k, const std::string& v) { get(c) = to_bool(k, v); },
          [get](const ExperimentConfig& c) {
            return std::string(get(const_cast<ExperimentConfig&>(c)) ? "true" : "false");
          }};
}

template <typename Get>
Field string_field(Get get) {
  return {[get](ExperimentConfig& c, const std::string&, const std::string& v) { get(c) = v; },
          [get](const ExperimentConfig& c) { return get(const_cast<ExperimentConfig&>(c)); }};
}

void add_stage_fields(std::map<std::string, Field>& f, const std::string& section,
                      TrainConfig ExperimentConfig::*stage) {
  auto s = [stage](ExperimentConfig& c) -> TrainConfig& { return c.*stage; };
  f[section + ".lr"] = double_field([s](ExperimentConfig& c) -> double& { return s(c).optim.lr; });
  f[section + ".warmup_ratio"] =
      double_field([s](ExperimentConfig& c) -> double& { return s(c).optim.warmup_ratio; });
  f[section + ".beta1"] = double_field([s](ExperimentConfig& c) -> double& { return s(c).optim.beta1; });
  f[section + ".beta2"] = double_field([s](ExperimentConfig& c) -> double& { return s(c).optim.beta2; });
  f[section + ".eps"] = double_field([s](ExperimentConfig& c) -> double& { return s(c).optim.eps; });
  f[section + ".weight_decay"] =
      double_field([s](ExperimentConfig& c) -> double& { return s(c).optim.weight_decay; });
  f[section + ".clip"] = double_field([s](ExperimentConfig& c) -> double& { return s(c).optim.clip; });
  f[section + ".batch_size"] = size_field([s](ExperimentConfig& c) -> std::size_t& { return s(c).batch_size; });
  f[section + ".epochs"] = size_field([s](ExperimentConfig& c) -> std::size_t& { return s(c).epochs; });
  f[section + ".grad_accum"] = size_field([s](ExperimentConfig& c) -> std::size_t& { return s(c).grad_accum; });
  f[section + ".heldout_batch"] =
      size_field([s](ExperimentConfig& c) -> std::size_t& { return s(c).heldout_batch; });
  f[section + ".max_steps"] = size_field([s](ExperimentConfig& c) -> std::size_t& { return s(c).max_steps; });
  f[section + ".position_offsets"] =
      bool_field([s](ExperimentConfig& c) -> bool& { return s(c).position_offsets; });
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> f;
    using C = ExperimentConfig;
    f["seed"] = uint_field(&C::seed);
    f["out"] = string_field([](C& c) -> std::string& { return c.out; });

    f["data.seed"] = size_field([](C& c) -> std::uint64_t& { return c.data.seed; });
    f["data.world_seed"] = size_field([](C& c) -> std::uint64_t& { return c.data.world_seed; });
    f["data.count"] = size_field([](C& c) -> std::size_t& { return c.data.count; });
    f["data.test_count"] = size_field([](C& c) -> std::size_t& { return c.test_count; });
    f["data.test_seed"] = size_field([](C& c) -> std::uint64_t& { return c.test_seed; });
    f["data.vocab"] = size_field([](C& c) -> std::size_t& { return c.data.vocab; });
    f["data.embed_dim"] = size_field([](C& c) -> std::size_t& { return c.data.embed_dim; });
    f["data.frame_dim"] = size_field([](C& c) -> std::size_t& { return c.data.frame_dim; });
    f["data.min_expansion"] = size_field([](C& c) -> std::size_t& { return c.data.min_expansion; });
    f["data.max_expansion"] = size_field([](C& c) -> std::size_t& { return c.data.max_expansion; });
    f["data.min_words"] = size_field([](C& c) -> std::size_t& { return c.data.min_words; });
    f["data.max_words"] = size_field([](C& c) -> std::size_t& { return c.data.max_words; });
    f["data.noise"] = double_field([](C& c) -> double& { return c.data.noise; });
    f["data.subword_prob"] = double_field([](C& c) -> double& { return c.data.subword_prob; });
    f["data.pause_prob"] = double_field([](C& c) -> double& { return c.data.pause_prob; });
    f["data.train"] = string_field([](C& c) -> std::string& { return c.train_path; });
    f["data.test"] = string_field([](C& c) -> std::string& { return c.test_path; });

    f["model.depth"] = size_field([](C& c) -> std::size_t& { return c.model.depth; });
    f["model.queries"] = size_field([](C& c) -> std::size_t& { return c.model.queries; });
    f["model.window"] = size_field([](C& c) -> std::size_t& { return c.model.window; });
    f["model.proj_dim"] = size_field([](C& c) -> std::size_t& { return c.model.proj_dim; });
    f["model.ffn_dim"] = size_field([](C& c) -> std::size_t& { return c.model.ffn_dim; });
    f["model.max_offset"] = size_field([](C& c) -> std::size_t& { return c.model.max_offset; });

    f["loss.recipe"] = string_field([](C& c) -> std::string& { return c.pretrain.recipe; });
    f["loss.layers"] = {[](C& c, const std::string& k, const std::string& v) {
                          if (trim(v).empty() || v == "default") c.pretrain.layers.reset();
                          else c.pretrain.layers = to_layers(k, v);
                        },
                        [](const C& c) { return c.pretrain.layers ? join(*c.pretrain.layers) : "default"; }};
    f["loss.tau"] = {[](C& c, const std::string& k, const std::string& v) {
                       if (v == "default") c.pretrain.tau.reset();
                       else c.pretrain.tau = to_double(k, v);
                     },
                     [](const C& c) { return c.pretrain.tau ? num(*c.pretrain.tau) : "default"; }};
    f["loss.p"] = double_field([](C& c) -> double& { return c.pretrain.sinkhorn.p; });
    f["loss.blur"] = double_field([](C& c) -> double& { return c.pretrain.sinkhorn.blur; });
    f["loss.max_iter"] = size_field([](C& c) -> std::size_t& { return c.pretrain.sinkhorn.max_iter; });
    f["loss.tol"] = double_field([](C& c) -> double& { return c.pretrain.sinkhorn.tol; });

    add_stage_fields(f, "pretrain", &C::pretrain);
    add_stage_fields(f, "finetune", &C::finetune);
    f["finetune.fraction"] = double_field([](C& c) -> double& { return c.finetune.fraction; });
    f["finetune.init"] = string_field([](C& c) -> std::string& { return c.finetune_init; });

    f["eval.retrieval_batch"] = size_field([](C& c) -> std::size_t& { return c.eval.retrieval_batch; });
    f["eval.heldout_batch"] = size_field([](C& c) -> std::size_t& { return c.eval.heldout.batch_size; });
    f["eval.layers"] = {[](C& c, const std::string& k, const std::string& v) {
                          c.eval.heldout.layers = v == "default" ? LayerSet{} : to_layers(k, v);
                        },
                        [](const C& c) {
                          return c.eval.heldout.layers.empty() ? std::string("default") : join(c.eval.heldout.layers);
                        }};
    f["eval.bounds"] = string_field([](C& c) -> std::string& { return c.bounds_preset; });
    return f;
  }();
  return table;
}

void flatten(const YAML::Node& node, const std::string& prefix, int depth, KeyValues& out, const std::string& origin) {
  if (node.IsMap()) {
    if (depth == 2) fail(origin + ": '" + prefix + "' nests deeper than section.key");
    for (const auto& kv : node) {
      const std::string key = kv.first.as<std::string>();
      flatten(kv.second, prefix.empty() ? key : prefix + "." + key, depth + 1, out, origin);
    }
  } else if (node.IsSequence()) {
    std::string joined;
    for (const auto& item : node) {
      if (!item.IsScalar()) fail(origin + ": '" + prefix + "' must be a list of scalars");
      joined += (joined.empty() ? "" : ",") + item.as<std::string>();
    }
    out.entries.emplace_back(prefix, joined);
  } else if (node.IsNull()) {
    out.entries.emplace_back(prefix, "");
  } else {
    out.entries.emplace_back(prefix, node.as<std::string>());
  }
}

}  // namespace

KeyValues parse_key_values(const std::string& text, const std::string& origin) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    fail(origin + ": " + e.what());
  }
  KeyValues out;
  if (root.IsNull()) return out;
  if (!root.IsMap()) fail(origin + ": expected a mapping at the top level");
  flatten(root, "", 0, out, origin);
  std::set<std::string> seen;
  for (const auto& [k, v] : out.entries)
    if (!seen.insert(k).second) fail(origin + ": key '" + k + "' given twice");
  return out;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot read config file '" + path.string() + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_key_values(text.str(), path.string());
}

void apply(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  if (key.rfind("bounds.", 0) == 0) {
    const auto parts = split_list(value);
    if (parts.size() != 2) fail(key + ": expected [lb, ub]");
    cfg.bound_overrides[key.substr(7)] = {to_double(key, parts[0]), to_double(key, parts[1])};
    return;
  }
  const auto it = fields().find(key);
  if (it == fields().end()) fail("unknown config key '" + key + "'");
  it->second.set(cfg, key, trim(value));
}

void apply(ExperimentConfig& cfg, const KeyValues& kv) {
  for (const auto& [k, v] : kv.entries) apply(cfg, k, v);
}

void resolve(ExperimentConfig& cfg) {
  cfg.pretrain.stage = Stage::kPretrain;
  cfg.finetune.stage = Stage::kFinetune;
  cfg.pretrain.seed = cfg.finetune.seed = cfg.seed;
  cfg.finetune.sinkhorn = cfg.pretrain.sinkhorn;
  cfg.eval.heldout.sinkhorn = cfg.pretrain.sinkhorn;
  cfg.model.vocab = cfg.data.vocab;
  cfg.model.embed_dim = cfg.data.embed_dim;
  cfg.model.frame_dim = cfg.data.frame_dim;
  cfg.model.world_seed = cfg.data.world_seed;
  try {
    validate(cfg.data);
    validate(cfg.model);
    validate(cfg.pretrain);
    validate(cfg.finetune);
    parse_recipe(cfg.pretrain.recipe, cfg.model.depth);
    if (cfg.pretrain.layers) cfg.pretrain.layers = normalize_layers(*cfg.pretrain.layers, cfg.model.depth);
    cfg.eval.heldout.layers = cfg.eval.heldout.layers.empty() ? every_fifth_layer(cfg.model.depth)
                                                              : normalize_layers(cfg.eval.heldout.layers, cfg.model.depth);
    if (cfg.eval.heldout.batch_size < 2) throw std::invalid_argument("eval.heldout_batch must be >= 2");
    if (cfg.test_count < 2) throw std::invalid_argument("data.test_count must be >= 2");
    cfg.eval.bounds = bounds_of(cfg);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    fail(std::string("invalid configuration: ") + e.what());
  }
}

std::string dump(const ExperimentConfig& cfg) {
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;
  std::vector<std::pair<std::string, std::string>> top;
  for (const auto& [key, field] : fields()) {
    const auto dot = key.find('.');
    std::string v = field.get(cfg);
    if (dot == std::string::npos) top.emplace_back(key, v);
    else sections[key.substr(0, dot)].emplace_back(key.substr(dot + 1), v);
  }
  for (const auto& [task, b] : cfg.bound_overrides) sections["bounds"].emplace_back(task, "[" + num(b.lb) + ", " + num(b.ub) + "]");

  YAML::Emitter out;
  out << YAML::BeginMap;
  for (const auto& [k, v] : top) out << YAML::Key << k << YAML::Value << v;
  for (const auto& [section, entries] : sections) {
    out << YAML::Key << section << YAML::Value << YAML::BeginMap;
    for (const auto& [k, v] : entries) {
      out << YAML::Key << k << YAML::Value;
      if (section == "bounds") {
        const auto parts = split_list(v.substr(1, v.size() - 2));
        out << YAML::Flow << YAML::BeginSeq << parts[0] << parts[1] << YAML::EndSeq;
      } else if ((k == "layers") && v != "default") {
        out << YAML::Flow << YAML::BeginSeq;
        for (const auto& item : split_list(v)) out << item;
        out << YAML::EndSeq;
      } else {
        out << v;
      }
    }
    out << YAML::EndMap;
  }
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

std::map<std::string, Bound> bounds_of(const ExperimentConfig& cfg) {
  std::map<std::string, Bound> out;
  if (cfg.bounds_preset == "desk") out = EvalOptions{}.bounds;
  else if (cfg.bounds_preset == "reference") out = reference_bounds();
  else fail("eval.bounds: expected 'desk' or 'reference', got '" + cfg.bounds_preset + "'");
  for (const auto& [task, b] : cfg.bound_overrides) {
    if (b.lb == b.ub) fail("bounds." + task + ": lb equals ub");
    out[task] = b;
  }
  return out;
}

std::filesystem::path frames_path(const std::filesystem::path& manifest) {
  std::filesystem::path p = manifest;
  return p.replace_extension(".frames");
}

std::filesystem::path default_output_root() {
  const char* env = std::getenv("SPEECHALIGN_OUT");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("runs");
}

}  // namespace speechalign::cli
