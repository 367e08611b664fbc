// src/model.cpp

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

#include "speechalign/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "speechalign/data.hpp"
#include "speechalign/random.hpp"

namespace speechalign {

namespace {

enum : std::uint64_t {
  kTagTranslation = 101,
  kTagDense = 102,
  kTagRoles = 103,
  kTagBegin = 104,
  kTagProjector = 105,
};

constexpr double kMasked = -1e9;

[[noreturn]] void invalid(const std::string& what) { throw std::invalid_argument(what); }

Tensor gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  Tensor t({rows, cols});
  for (auto& v : t.values()) v = n(rng);
  return t;
}

// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
Tensor orthogonal(Rng& rng, std::size_t n) {
  Tensor q = gaussian(rng, n, n, 1.0);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t p = 0; p < c; ++p) {
      double d = 0.0;
      for (std::size_t r = 0; r < n; ++r) d += q(r, c) * q(r, p);
      for (std::size_t r = 0; r < n; ++r) q(r, c) -= d * q(r, p);
    }
    double norm = 0.0;
    for (std::size_t r = 0; r < n; ++r) norm += q(r, c) * q(r, c);
    norm = std::sqrt(norm);
    for (std::size_t r = 0; r < n; ++r) q(r, c) /= norm;
  }
  return q;
}

Var constant_like(const Var& x, Shape shape, double fill) { return x.tape()->constant(Tensor(std::move(shape), fill)); }

// x / (|x| + 1e-9) row-wise; zero rows stay zero.
Var unit_rows(const Var& x) {
  const Var n = add(l2norm(x, Axis::kCols), constant_like(x, {x.rows(), 1}, 1e-9));
  return scale_rows(x, div(constant_like(x, {x.rows(), 1}, 1.0), n));
}

void hash_tensor(std::uint64_t& h, const Tensor& t) {
  for (double v : t.values()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    char bytes[8];
    std::memcpy(bytes, &bits, 8);
    h = fnv1a(std::string_view(bytes, 8), h);
  }
}

}  // namespace

void validate(const ModelConfig& cfg) {
  if (cfg.vocab < 4) invalid("model: vocab must be >= 4");
  if (cfg.embed_dim < 2 || cfg.embed_dim % 2 != 0) invalid("model: embed_dim must be even and >= 2");
  if (cfg.frame_dim < 1) invalid("model: frame_dim must be >= 1");
  if (cfg.depth < 1) invalid("model: depth must be >= 1");
  if (cfg.queries < 1) invalid("model: queries must be >= 1");
  if (cfg.window < 1) invalid("model: window must be >= 1");
  if (cfg.proj_dim < 1 || cfg.ffn_dim < 1) invalid("model: proj_dim and ffn_dim must be >= 1");
  if (cfg.max_offset >= FrozenStack::kMaxPositions / 2) invalid("model: max_offset too large");
}

std::uint64_t config_hash(const ModelConfig& cfg) {
  std::ostringstream s;
  s.precision(17);
  const auto& c = cfg.circuit;
  s << "v1|" << cfg.vocab << '|' << cfg.embed_dim << '|' << cfg.frame_dim << '|' << cfg.depth << '|'
    << cfg.world_seed << '|' << cfg.queries << '|' << cfg.window << '|' << cfg.proj_dim << '|' << cfg.ffn_dim
    << '|' << c.cleanup_sharpness << '|' << c.same_penalty << '|' << c.same_sharpness << '|' << c.recency
    << '|' << c.prev_gain << '|' << c.match_sharpness << '|' << c.null_threshold << '|' << c.copy_gain << '|'
    << c.gate_slope << '|' << c.dense_gain << '|' << c.logit_scale;
  return fnv1a(s.str());
}

LayerSet every_fifth_layer(std::size_t depth) {
  LayerSet out;
  for (std::size_t l = 0; l <= depth; l += 5) out.push_back(l);
  return out;
}

LayerSet normalize_layers(LayerSet layers, std::size_t depth) {
  if (layers.empty()) invalid("layer set must not be empty");
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  if (layers.back() > depth)
    invalid("layer " + std::to_string(layers.back()) + " exceeds stack depth " + std::to_string(depth));
  return layers;
}

// ---------------------------------------------------------------------------

FrozenStack::FrozenStack(const ModelConfig& cfg) : cfg_(cfg) {
  validate(cfg_);
  const std::size_t v = cfg_.vocab, h = cfg_.embed_dim;
  embed_ = world_embedding_table(cfg_.world_seed, v, h);

  // Toy-ST "language": a permutation within each token class.
  const Vocabulary vocab(v);
  perm_.resize(v);
  std::iota(perm_.begin(), perm_.end(), 0);
  Rng prng(derive_seed(cfg_.world_seed, {kTagTranslation, v}));
  const auto first = perm_.begin() + Vocabulary::kFirstContent;
  const auto mid = first + static_cast<std::ptrdiff_t>(vocab.initial_count());
  std::shuffle(first, mid, prng);
  std::shuffle(mid, perm_.end(), prng);
  std::vector<int> inverse(v);
  for (std::size_t i = 0; i < v; ++i) inverse[static_cast<std::size_t>(perm_[i])] = static_cast<int>(i);

  Rng drng(derive_seed(cfg_.world_seed, {kTagDense, h, cfg_.ffn_dim, cfg_.depth}));
  for (std::size_t l = 0; l < cfg_.depth; ++l) {
    dense_in_.push_back(gaussian(drng, h, cfg_.ffn_dim, 1.0 / std::sqrt(double(h))));
    dense_out_.push_back(gaussian(drng, cfg_.ffn_dim, h, 1.0 / std::sqrt(double(cfg_.ffn_dim))));
  }
  Rng rrng(derive_seed(cfg_.world_seed, {kTagRoles, h}));
  prev_role_ = orthogonal(rrng, h);
  out_role_ = orthogonal(rrng, h);

  Rng brng(derive_seed(cfg_.world_seed, {kTagBegin, h}));
  begin_ = gaussian(brng, 1, h, 1.0);
  double bn = 0.0;
  for (double x : begin_.values()) bn += x * x;
  for (auto& x : begin_.values()) x /= std::sqrt(bn);

  key_table_ = Tensor({v + 1, h});
  query_map_ = Tensor({v + 1, h});
  query_map_st_ = Tensor({v + 1, h});
  value_map_ = Tensor({v + 1, h});
  value_map_st_ = Tensor({v + 1, h});
  auto row_of = [&](std::size_t id) -> const double* { return id == v ? &begin_[0] : &embed_(id, 0); };
  auto query_row = [&](std::size_t id) { return id == v || vocab.is_marker(int(id)) ? &begin_[0] : &embed_(id, 0); };
  for (std::size_t id = 0; id <= v; ++id) {
    const bool special = id == v;
    const std::size_t back = special ? v : static_cast<std::size_t>(inverse[id]);
    const std::size_t fwd = special ? v : static_cast<std::size_t>(perm_[id]);
    for (std::size_t k = 0; k < h; ++k) {
      key_table_(id, k) = row_of(id)[k];
      value_map_(id, k) = row_of(id)[k];
      value_map_st_(id, k) = row_of(fwd)[k];
      query_map_(id, k) = query_row(id)[k];
      query_map_st_(id, k) = query_row(back)[k];
    }
  }

  rope_cos_ = Tensor({kMaxPositions, h});
  rope_sin_ = Tensor({kMaxPositions, h});
  for (std::size_t p = 0; p < kMaxPositions; ++p)
    for (std::size_t k = 0; k < h / 2; ++k) {
      const double theta = double(p) * std::pow(10000.0, -2.0 * double(k) / double(h));
      rope_cos_(p, 2 * k) = rope_cos_(p, 2 * k + 1) = std::cos(theta);
      rope_sin_(p, 2 * k) = rope_sin_(p, 2 * k + 1) = std::sin(theta);
    }
  // (x J)_{2k} = -x_{2k+1}, (x J)_{2k+1} = x_{2k}.
  rope_swap_ = Tensor({h, h});
  for (std::size_t k = 0; k < h / 2; ++k) {
    rope_swap_(2 * k + 1, 2 * k) = -1.0;
    rope_swap_(2 * k, 2 * k + 1) = 1.0;
  }
}

std::vector<int> FrozenStack::translate(const std::vector<int>& tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab) invalid("translate: token id out of range");
    out.push_back(perm_[static_cast<std::size_t>(t)]);
  }
  return out;
}

Var FrozenStack::embed(Tape& tape, const std::vector<int>& tokens) const {
  if (tokens.empty()) invalid("embed: empty token sequence");
  Tensor out({tokens.size(), cfg_.embed_dim});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int t = tokens[i];
    if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab)
      invalid("embed: token id " + std::to_string(t) + " outside [0, " + std::to_string(cfg_.vocab) + ")");
    for (std::size_t k = 0; k < cfg_.embed_dim; ++k) out(i, k) = embed_(static_cast<std::size_t>(t), k);
  }
  return tape.constant(std::move(out));
}

Var FrozenStack::rope(const Var& x, std::size_t offset) const {
  const std::size_t len = x.rows(), h = cfg_.embed_dim;
  if (offset + len > kMaxPositions) invalid("frozen stack: sequence plus offset exceeds the rotary table");
  Tensor c({len, h}), s({len, h});
  std::copy_n(rope_cos_.values().data() + offset * h, len * h, c.values().data());
  std::copy_n(rope_sin_.values().data() + offset * h, len * h, s.values().data());
  Tape& tape = *x.tape();
  return add(mul(x, tape.constant(std::move(c))),
             mul(matmul(x, tape.constant(rope_swap_)), tape.constant(std::move(s))));
}

Var FrozenStack::dense(const Var& x, std::size_t layer, std::size_t offset) const {
  Tape& tape = *x.tape();
  const Var hidden = tanh(matmul(rope(x, offset), tape.constant(dense_in_[layer])));
  return add(x, scale(matmul(hidden, tape.constant(dense_out_[layer])), cfg_.circuit.dense_gain));
}

Var FrozenStack::prev_content_head(const Var& x) const {
  const auto& c = cfg_.circuit;
  Tape& tape = *x.tape();
  const std::size_t len = x.rows();
  const Var xn = unit_rows(x);
  const Var same = exp(scale(add(matmul(xn, transpose(xn)), constant_like(x, {len, len}, -1.0)), c.same_sharpness));
  Tensor bias({len, len}, kMasked), begin_bias({len, 1});
  for (std::size_t j = 0; j < len; ++j) {
    for (std::size_t i = 0; i < j; ++i) bias(j, i) = -c.recency * double(j - i);
    begin_bias(j, 0) = -c.recency * double(j + 1);
  }
  const Var scores = add(scale(same, -c.same_penalty), tape.constant(std::move(bias)));
  const std::array<Var, 2> cols = {tape.constant(std::move(begin_bias)), scores};
  const Var weights = softmax(concat(cols, Axis::kCols), Axis::kCols);
  const std::array<Var, 2> rows = {tape.constant(begin_), x};
  const Var prev = matmul(weights, concat(rows, Axis::kRows));
  return scale(matmul(prev, tape.constant(prev_role_.transposed())), c.prev_gain);
}

Var FrozenStack::lookup_head(const Var& x) const {
  const auto& c = cfg_.circuit;
  Tape& tape = *x.tape();
  const std::size_t len = x.rows();
  const Var table_t = tape.constant(key_table_.transposed());
  const Var content = softmax(scale(matmul(x, table_t), c.cleanup_sharpness), Axis::kCols);
  const Var prev = softmax(scale(matmul(matmul(x, tape.constant(prev_role_)), table_t), c.cleanup_sharpness),
                           Axis::kCols);
  const Var keys_t = transpose(matmul(prev, tape.constant(query_map_)));

  Tensor mask({len, len}, kMasked);
  for (std::size_t j = 0; j < len; ++j)
    for (std::size_t i = 0; i <= j; ++i) mask(j, i) = 0.0;
  const Var mask_v = tape.constant(std::move(mask));
  const Var null_col = constant_like(x, {len, 1}, c.match_sharpness * c.null_threshold);

  auto head = [&](const Tensor& qmap, const Tensor& vmap) {
    const Var q = matmul(content, tape.constant(qmap));
    const Var scores = add(scale(matmul(q, keys_t), c.match_sharpness), mask_v);
    const std::array<Var, 2> cols = {null_col, scores};
    const Var w = slice(softmax(concat(cols, Axis::kCols), Axis::kCols), Axis::kCols, 1, len + 1);
    return matmul(w, matmul(content, tape.constant(vmap)));
  };
  const Var asr = head(query_map_, value_map_);
  const Var st = head(query_map_st_, value_map_st_);

  Tensor tril({len, len});
  for (std::size_t j = 0; j < len; ++j)
    for (std::size_t i = 0; i <= j; ++i) tril(j, i) = 1.0;
  const Var marker_mass = slice(content, Axis::kCols, Vocabulary::kStMarker, Vocabulary::kStMarker + 1);
  const Var gate = tanh(scale(matmul(tape.constant(std::move(tril)), marker_mass), c.gate_slope));
  const Var out = add(scale_rows(asr, sub(constant_like(x, {len, 1}, 1.0), gate)), scale_rows(st, gate));
  return scale(matmul(out, tape.constant(out_role_.transposed())), c.copy_gain);
}

std::vector<Var> FrozenStack::layer_reprs(const Var& x, const LayerSet& layers, std::size_t offset) const {
  if (layers.empty()) invalid("layer_reprs: empty layer set");
  if (x.cols() != cfg_.embed_dim)
    throw ShapeError("layer_reprs: expected width " + std::to_string(cfg_.embed_dim) + ", got " +
                     to_string(x.shape()));
  if (x.rows() == 0) invalid("layer_reprs: empty sequence");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] > cfg_.depth)
      invalid("layer " + std::to_string(layers[i]) + " exceeds stack depth " + std::to_string(cfg_.depth));
    if (i && layers[i] <= layers[i - 1]) invalid("layer_reprs: layers must be strictly ascending");
  }
  std::vector<Var> out;
  Var h = x;
  std::size_t next = 0;
  if (layers[0] == 0) out.push_back(h), ++next;
  for (std::size_t l = 1; next < layers.size(); ++l) {
    if (l == 1) h = add(h, prev_content_head(h));
    if (l == 2) h = add(h, lookup_head(h));
    h = dense(h, l - 1, offset);
    if (layers[next] == l) out.push_back(h), ++next;
  }
  return out;
}

Var FrozenStack::layer_repr(const Var& x, std::size_t layer, std::size_t offset) const {
  return layer_reprs(x, {layer}, offset).front();
}

Var FrozenStack::head(const Var& final_repr) const {
  Tape& tape = *final_repr.tape();
  const Var read = matmul(final_repr, tape.constant(out_role_));
  return scale(matmul(read, tape.constant(embed_.transposed())), cfg_.circuit.logit_scale);
}

Var FrozenStack::lm_logits(const Var& x, std::size_t offset) const {
  return head(layer_repr(x, cfg_.depth, offset));
}

std::uint64_t FrozenStack::fingerprint() const {
  std::uint64_t h = fnv1a("frozen");
  for (const Tensor* t : {&embed_, &prev_role_, &out_role_, &begin_, &key_table_, &query_map_, &query_map_st_,
                          &value_map_, &value_map_st_, &rope_cos_, &rope_sin_, &rope_swap_})
    hash_tensor(h, *t);
  for (const auto& t : dense_in_) hash_tensor(h, t);
  for (const auto& t : dense_out_) hash_tensor(h, t);
  for (int p : perm_) h = fnv1a(std::to_string(p), h);
  return h;
}

// ---------------------------------------------------------------------------

std::array<Tensor*, ProjectorParams::kTensors> ProjectorParams::tensors() {
  return {&queries, &pos_keys, &wq, &wk, &wv, &wo, &wout, &bout};
}

std::array<const Tensor*, ProjectorParams::kTensors> ProjectorParams::tensors() const {
  return {&queries, &pos_keys, &wq, &wk, &wv, &wo, &wout, &bout};
}

const std::array<const char*, ProjectorParams::kTensors>& ProjectorParams::names() {
  static const std::array<const char*, kTensors> n = {"queries", "pos_keys", "wq", "wk",
                                                      "wv",      "wo",       "wout", "bout"};
  return n;
}

std::size_t ProjectorParams::count() const {
  std::size_t n = 0;
  for (const Tensor* t : tensors()) n += t->size();
  return n;
}

std::uint64_t ProjectorParams::fingerprint() const {
  std::uint64_t h = fnv1a("projector");
  for (const Tensor* t : tensors()) hash_tensor(h, *t);
  return h;
}

ProjectorParams init_projector(const ModelConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  Rng rng(derive_seed(seed, {kTagProjector}));
  const double hp = double(cfg.proj_dim);
  ProjectorParams p;
  p.queries = gaussian(rng, cfg.queries, cfg.proj_dim, 1.0);
  p.pos_keys = gaussian(rng, cfg.window, cfg.proj_dim, 1.0);
  p.wq = gaussian(rng, cfg.proj_dim, cfg.proj_dim, 1.0 / std::sqrt(hp));
  p.wk = gaussian(rng, cfg.frame_dim, cfg.proj_dim, 1.0 / std::sqrt(double(cfg.frame_dim)));
  p.wv = gaussian(rng, cfg.frame_dim, cfg.proj_dim, 1.0 / std::sqrt(double(cfg.frame_dim)));
  p.wo = gaussian(rng, cfg.proj_dim, cfg.proj_dim, 1.0 / std::sqrt(hp));
  // Small outputs at init keep the untrained stack near chance.
  p.wout = gaussian(rng, cfg.proj_dim, cfg.embed_dim, 0.1 / std::sqrt(hp));
  p.bout = Tensor({1, cfg.embed_dim}, 0.0);
  return p;
}

ProjectorVars bind(Tape& tape, const ProjectorParams& params, bool trainable) {
  ProjectorVars out;
  const auto ts = params.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) out.vars[i] = trainable ? tape.leaf(*ts[i]) : tape.constant(*ts[i]);
  return out;
}

Var project(const ProjectorVars& p, const Tensor& frames, const ModelConfig& cfg) {
  require_matrix(frames, "project");
  const std::size_t m = frames.rows(), w = cfg.window;
  if (m == 0) invalid("project: empty frame sequence");
  if (frames.cols() != cfg.frame_dim)
    throw ShapeError("project: frames " + to_string(frames.shape()) + " for frame_dim " +
                     std::to_string(cfg.frame_dim));
  Tape& tape = *p.queries().tape();
  const Var f = tape.constant(frames);
  Tensor sel({m, w});
  for (std::size_t r = 0; r < m; ++r) sel(r, r % w) = 1.0;
  const Var keys = add(matmul(f, p.wk()), matmul(tape.constant(std::move(sel)), p.pos_keys()));
  const Var values = matmul(f, p.wv());
  const Var q = matmul(p.queries(), p.wq());
  const Var logits = scale(matmul(q, transpose(keys)), 1.0 / std::sqrt(double(cfg.proj_dim)));
  std::vector<Var> blocks;
  for (std::size_t b = 0; b < m; b += w) {
    const std::size_t e = std::min(m, b + w);
    const Var attn = softmax(slice(logits, Axis::kCols, b, e), Axis::kCols);
    blocks.push_back(matmul(attn, slice(values, Axis::kRows, b, e)));
  }
  const Var pooled = blocks.size() == 1 ? blocks[0] : concat(blocks, Axis::kRows);
  return add_row(matmul(matmul(pooled, p.wo()), p.wout()), p.bout());
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[8] = {'S', 'P', 'A', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host assumed");
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}
  template <typename T>
  T get(const char* what) {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (in_.gcount() != std::streamsize(sizeof(T)))
      throw FormatError(path_ + ": truncated checkpoint reading " + what + " at offset " + std::to_string(pos_));
    pos_ += sizeof(T);
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::istream& in_;
  std::string path_;
  std::size_t pos_ = 0;
};

void put_f64_params(std::ostream& out, const ProjectorParams& p) {
  for (const Tensor* t : p.tensors())
    for (double v : t->values()) put<double>(out, v);
}

void get_f64_params(Reader& r, ProjectorParams& p) {
  for (Tensor* t : p.tensors())
    for (auto& v : t->values()) v = r.get<double>("resume section");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kCkptMagic, 8);
  put<std::uint32_t>(out, kCkptVersion);
  put<std::uint64_t>(out, ckpt.config_hash);
  put<std::uint64_t>(out, ckpt.step);
  put<std::uint64_t>(out, ckpt.params.count());
  for (const Tensor* t : ckpt.params.tensors())
    for (double v : t->values()) put<float>(out, static_cast<float>(v));
  put<std::uint8_t>(out, ckpt.optimizer ? 1 : 0);
  if (ckpt.optimizer) {
    put_f64_params(out, ckpt.params);
    put_f64_params(out, ckpt.optimizer->m);
    put_f64_params(out, ckpt.optimizer->v);
    put<std::uint64_t>(out, ckpt.optimizer->step);
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& shape_of) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  Reader r(in, path.string());
  char magic[8];
  for (char& ch : magic) ch = r.get<char>("magic");
  if (std::memcmp(magic, kCkptMagic, 8) != 0) throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCkptVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.config_hash = r.get<std::uint64_t>("config hash");
  ck.step = r.get<std::uint64_t>("step");
  ck.params = init_projector(shape_of, 0);
  const auto count = r.get<std::uint64_t>("value count");
  if (count != ck.params.count())
    throw FormatError(path.string() + ": checkpoint holds " + std::to_string(count) +
                      " values, configuration expects " + std::to_string(ck.params.count()));
  for (Tensor* t : ck.params.tensors())
    for (auto& v : t->values()) v = static_cast<double>(r.get<float>("parameters"));
  const auto flag = r.get<std::uint8_t>("resume flag");
  if (flag > 1) throw FormatError(path.string() + ": bad resume flag at offset " + std::to_string(r.pos() - 1));
  if (flag) {
    get_f64_params(r, ck.params);
    OptimizerState st{ck.params, ck.params, 0};
    get_f64_params(r, st.m);
    get_f64_params(r, st.v);
    st.step = r.get<std::uint64_t>("optimizer step");
    ck.optimizer = std::move(st);
  }
  if (in.peek() != std::char_traits<char>::eof())
    throw FormatError(path.string() + ": trailing bytes after offset " + std::to_string(r.pos()));
  return ck;
}

}  // namespace speechalign
