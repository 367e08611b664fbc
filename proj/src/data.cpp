// src/data.cpp

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

#include "speechalign/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "speechalign/logging.hpp"
#include "speechalign/random.hpp"

namespace speechalign {

namespace {

enum StreamTag : std::uint64_t {
  kTagEmbedding = 1,
  kTagEncoder = 2,
  kTagExample = 3,
  kTagShuffle = 4,
  kTagSubset = 5,
};

[[noreturn]] void invalid(const std::string& what) { throw std::invalid_argument(what); }

}  // namespace

Vocabulary::Vocabulary(std::size_t size) : size_(size) {
  if (size < 4) invalid("vocabulary: size must be >= 4, got " + std::to_string(size));
  const std::size_t content = size - kFirstContent;
  initial_ = std::clamp<std::size_t>(content * 3 / 4, 1, content - 1);
}

std::vector<std::string> Vocabulary::words(const std::vector<int>& tokens) const {
  std::vector<std::string> out;
  for (int t : tokens) {
    if (is_marker(t)) continue;
    const std::string piece = "t" + std::to_string(t);
    if (is_continuation(t) && !out.empty())
      out.back() += "+" + piece;
    else
      out.push_back(piece);
  }
  return out;
}

void validate(const PairedExample& ex, std::size_t vocab, std::size_t frame_dim) {
  const auto& toks = ex.text.tokens;
  const auto& widx = ex.text.word_index;
  const std::string who = "example '" + ex.id + "': ";
  if (toks.empty()) invalid(who + "empty token sequence");
  if (widx.size() != toks.size()) invalid(who + "word_index length differs from token count");
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (toks[i] < 0 || static_cast<std::size_t>(toks[i]) >= vocab)
      invalid(who + "token id " + std::to_string(toks[i]) + " outside [0, " + std::to_string(vocab) + ")");
    const int expect_lo = i == 0 ? 0 : widx[i - 1];
    if (i == 0 ? widx[0] != 0 : (widx[i] != expect_lo && widx[i] != expect_lo + 1))
      invalid(who + "word_index must start at 0 and grow in unit steps");
  }
  const auto& sp = ex.speech;
  if (sp.frames.empty() || sp.frames.rows() == 0) invalid(who + "empty frame sequence");
  if (sp.frames.cols() != frame_dim)
    invalid(who + "frame dim " + std::to_string(sp.frames.cols()) + " != " + std::to_string(frame_dim));
  if (sp.word_spans.size() != ex.text.word_count())
    invalid(who + "span table covers " + std::to_string(sp.word_spans.size()) + " words, text has " +
            std::to_string(ex.text.word_count()));
  std::size_t cursor = 0;
  for (const auto& s : sp.word_spans) {
    if (s.begin != cursor || s.end <= s.begin)
      invalid(who + "word spans must tile the frame range in order without gaps");
    cursor = s.end;
  }
  if (cursor != sp.frames.rows()) invalid(who + "word spans do not reach the last frame");
}

// ---------------------------------------------------------------------------

Tensor world_embedding_table(std::uint64_t world_seed, std::size_t vocab, std::size_t embed_dim) {
  Rng rng(derive_seed(world_seed, {kTagEmbedding, vocab, embed_dim}));
  std::normal_distribution<double> n01(0.0, 1.0);
  Tensor e({vocab, embed_dim});
  for (std::size_t v = 0; v < vocab; ++v) {
    double norm = 0.0;
    for (std::size_t k = 0; k < embed_dim; ++k) {
      e(v, k) = n01(rng);
      norm += e(v, k) * e(v, k);
    }
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < embed_dim; ++k) e(v, k) /= norm;
  }
  return e;
}

Tensor world_frame_prototypes(std::uint64_t world_seed, std::size_t vocab, std::size_t embed_dim,
                              std::size_t frame_dim) {
  const Tensor e = world_embedding_table(world_seed, vocab, embed_dim);
  Rng rng(derive_seed(world_seed, {kTagEncoder, embed_dim, frame_dim}));
  std::normal_distribution<double> n01(0.0, 1.0);
  Tensor a({frame_dim, embed_dim});
  for (auto& v : a.values()) v = n01(rng);
  Tensor p({vocab, frame_dim});
  for (std::size_t v = 0; v < vocab; ++v)
    for (std::size_t f = 0; f < frame_dim; ++f) {
      double s = 0.0;
      for (std::size_t k = 0; k < embed_dim; ++k) s += a(f, k) * e(v, k);
      p(v, f) = s;
    }
  return p;
}

namespace {

void check_generator(const GeneratorConfig& cfg) {
  if (!(cfg.noise >= 0.0)) invalid("generate_corpus: noise must be >= 0");
  if (cfg.count < 1) invalid("generate_corpus: count must be >= 1");
  if (cfg.vocab < 4) invalid("generate_corpus: vocab must be >= 4");
  if (cfg.min_expansion < 1 || cfg.max_expansion < cfg.min_expansion)
    invalid("generate_corpus: bad expansion range");
  if (cfg.min_words < 1 || cfg.max_words < cfg.min_words) invalid("generate_corpus: bad word range");
  if (cfg.embed_dim < 1 || cfg.frame_dim < 1) invalid("generate_corpus: dims must be positive");
  if (cfg.subword_prob < 0.0 || cfg.subword_prob > 1.0 || cfg.pause_prob < 0.0 || cfg.pause_prob > 1.0)
    invalid("generate_corpus: probabilities must lie in [0, 1]");
}

// Renders a word list (each word a list of token ids) as a paired example.
PairedExample render_example(const GeneratorConfig& cfg, const Tensor& prototypes,
                             const std::vector<std::vector<int>>& words, Rng& rng,
                             std::string id) {
  std::uniform_int_distribution<std::size_t> expansion(cfg.min_expansion, cfg.max_expansion);
  std::uniform_int_distribution<std::size_t> pause_len(1, 2);
  std::bernoulli_distribution pause(cfg.pause_prob);
  std::normal_distribution<double> noise(0.0, 1.0);

  PairedExample ex;
  ex.id = std::move(id);
  std::vector<std::pair<int, std::size_t>> frame_plan;  // (token or -1 for silence, frames)
  for (std::size_t w = 0; w < words.size(); ++w) {
    const std::size_t begin =
        std::accumulate(frame_plan.begin(), frame_plan.end(), std::size_t{0},
                        [](std::size_t a, const auto& p) { return a + p.second; });
    if (cfg.pause_prob > 0.0 && pause(rng)) frame_plan.emplace_back(-1, pause_len(rng));
    for (int t : words[w]) {
      ex.text.tokens.push_back(t);
      ex.text.word_index.push_back(static_cast<int>(w));
      frame_plan.emplace_back(t, expansion(rng));
    }
    const std::size_t end =
        std::accumulate(frame_plan.begin(), frame_plan.end(), std::size_t{0},
                        [](std::size_t a, const auto& p) { return a + p.second; });
    ex.speech.word_spans.push_back({begin, end});
  }
  const std::size_t m = ex.speech.word_spans.back().end;
  ex.speech.frames = Tensor({m, cfg.frame_dim});
  std::size_t row = 0;
  for (const auto& [tok, n] : frame_plan) {
    for (std::size_t r = 0; r < n; ++r, ++row) {
      for (std::size_t f = 0; f < cfg.frame_dim; ++f) {
        const double base = tok >= 0 ? prototypes(static_cast<std::size_t>(tok), f) : 0.0;
        // Draw noise even when sigma is 0 so the stream layout is stable.
        ex.speech.frames(row, f) = base + cfg.noise * noise(rng);
      }
    }
  }
  return ex;
}

std::string example_id(const std::string& prefix, std::size_t i) {
  std::ostringstream os;
  os << prefix << "-" << i;
  return os.str();
}

}  // namespace

Corpus generate_corpus(const GeneratorConfig& cfg) {
  check_generator(cfg);
  const Vocabulary vocab(cfg.vocab);
  const Tensor prototypes =
      world_frame_prototypes(cfg.world_seed, cfg.vocab, cfg.embed_dim, cfg.frame_dim);
  Corpus corpus;
  corpus.vocab = cfg.vocab;
  corpus.frame_dim = cfg.frame_dim;
  corpus.examples.reserve(cfg.count);
  const int first_cont = Vocabulary::kFirstContent + static_cast<int>(vocab.initial_count());
  for (std::size_t i = 0; i < cfg.count; ++i) {
    Rng rng(derive_seed(cfg.seed, {kTagExample, i}));
    std::uniform_int_distribution<std::size_t> nwords(cfg.min_words, cfg.max_words);
    std::uniform_int_distribution<int> initial(Vocabulary::kFirstContent, first_cont - 1);
    std::uniform_int_distribution<int> cont(first_cont, static_cast<int>(cfg.vocab) - 1);
    std::bernoulli_distribution second_piece(cfg.subword_prob);
    std::vector<std::vector<int>> words(nwords(rng));
    for (auto& w : words) {
      w.push_back(initial(rng));
      if (second_piece(rng)) w.push_back(cont(rng));
    }
    corpus.examples.push_back(render_example(cfg, prototypes, words, rng, example_id(cfg.id_prefix, i)));
  }
  return corpus;
}

Corpus generate_copy_corpus(const GeneratorConfig& cfg, std::size_t half_words) {
  check_generator(cfg);
  if (half_words < 1) invalid("generate_copy_corpus: half_words must be >= 1");
  const Vocabulary vocab(cfg.vocab);
  const Tensor prototypes =
      world_frame_prototypes(cfg.world_seed, cfg.vocab, cfg.embed_dim, cfg.frame_dim);
  Corpus corpus;
  corpus.vocab = cfg.vocab;
  corpus.frame_dim = cfg.frame_dim;
  if (half_words > vocab.initial_count())
    invalid("generate_copy_corpus: half_words exceeds the " + std::to_string(vocab.initial_count()) +
            " word-initial pieces");
  std::vector<int> pool(vocab.initial_count());
  for (std::size_t i = 0; i < cfg.count; ++i) {
    std::iota(pool.begin(), pool.end(), Vocabulary::kFirstContent);
    Rng rng(derive_seed(cfg.seed, {kTagExample, i, half_words}));
    // Distinct words, so every copied position has exactly one source.
    for (std::size_t w = 0; w < half_words; ++w) {
      std::uniform_int_distribution<std::size_t> pick(w, pool.size() - 1);
      std::swap(pool[w], pool[pick(rng)]);
    }
    std::vector<std::vector<int>> words;
    for (std::size_t w = 0; w < half_words; ++w) words.push_back({pool[w]});
    for (std::size_t w = 0; w < half_words; ++w) words.push_back(words[w]);
    corpus.examples.push_back(render_example(cfg, prototypes, words, rng, example_id(cfg.id_prefix, i)));
  }
  return corpus;
}

void validate(const GeneratorConfig& cfg) { check_generator(cfg); }

CorpusStats corpus_stats(const Corpus& corpus) {
  CorpusStats s;
  s.count = corpus.size();
  s.vocab = corpus.vocab;
  if (corpus.empty()) return s;
  for (const auto& ex : corpus.examples) {
    s.mean_tokens += static_cast<double>(ex.text.size());
    s.mean_frames += static_cast<double>(ex.speech.size());
    s.mean_frames_per_token += static_cast<double>(ex.speech.size()) / static_cast<double>(ex.text.size());
  }
  const double n = static_cast<double>(corpus.size());
  s.mean_tokens /= n;
  s.mean_frames /= n;
  s.mean_frames_per_token /= n;
  return s;
}

// ---------------------------------------------------------------------------

double to_stored_precision(double v) { return static_cast<double>(static_cast<float>(v)); }

namespace {

void put_u32(std::string& buf, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) buf.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

std::uint32_t get_u32(const std::string& buf, std::size_t at) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at + b])) << (8 * b);
  return v;
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(xs[i]);
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  parts.push_back(cur);
  return parts;
}

std::vector<long long> parse_ints(const std::string& s, const std::string& where) {
  std::vector<long long> out;
  std::istringstream is(s);
  std::string tok;
  while (is >> tok) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size()) throw FormatError(where + ": bad integer '" + tok + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace

void write_corpus(const Corpus& corpus, const std::filesystem::path& manifest,
                  const std::filesystem::path& frames) {
  std::ostringstream man;
  man << "# speechalign corpus manifest\n";
  man << "format 1\n";
  man << "vocab " << corpus.vocab << "\n";
  man << "frame_dim " << corpus.frame_dim << "\n";
  man << "count " << corpus.size() << "\n";

  std::string bin(kFrameMagic, kFrameMagic + 8);
  bin.push_back(static_cast<char>(kFrameVersion));
  for (const auto& ex : corpus.examples) {
    validate(ex, corpus.vocab, corpus.frame_dim);
    if (ex.id.find_first_of("\t\n") != std::string::npos)
      invalid("write_corpus: example id contains tab or newline");
    std::string spans;
    for (std::size_t w = 0; w < ex.speech.word_spans.size(); ++w) {
      if (w) spans += ' ';
      spans += std::to_string(ex.speech.word_spans[w].begin) + ":" +
               std::to_string(ex.speech.word_spans[w].end);
    }
    man << ex.id << '\t' << join(ex.text.tokens) << '\t' << join(ex.text.word_index) << '\t'
        << spans << '\n';
    put_u32(bin, static_cast<std::uint32_t>(ex.speech.frames.rows()));
    put_u32(bin, static_cast<std::uint32_t>(ex.speech.frames.cols()));
    for (double v : ex.speech.frames.values()) put_u32(bin, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }

  std::ofstream mf(manifest, std::ios::binary);
  if (!mf) throw std::runtime_error("write_corpus: cannot open " + manifest.string());
  mf << man.str();
  std::ofstream ff(frames, std::ios::binary);
  if (!ff) throw std::runtime_error("write_corpus: cannot open " + frames.string());
  ff.write(bin.data(), static_cast<std::streamsize>(bin.size()));
  if (!mf || !ff) throw std::runtime_error("write_corpus: write failed");
}

Corpus read_corpus(const std::filesystem::path& manifest, const std::filesystem::path& frames) {
  std::ifstream mf(manifest, std::ios::binary);
  if (!mf) throw std::runtime_error("read_corpus: cannot open " + manifest.string());
  std::ifstream ff(frames, std::ios::binary);
  if (!ff) throw std::runtime_error("read_corpus: cannot open " + frames.string());
  std::string bin((std::istreambuf_iterator<char>(ff)), std::istreambuf_iterator<char>());

  const std::string fname = frames.string();
  if (bin.size() < 9) throw FormatError(fname + ": truncated header at byte offset " + std::to_string(bin.size()));
  for (std::size_t i = 0; i < 8; ++i)
    if (bin[i] != kFrameMagic[i])
      throw FormatError(fname + ": bad magic at byte offset " + std::to_string(i));
  if (static_cast<std::uint8_t>(bin[8]) != kFrameVersion)
    throw FormatError(fname + ": unsupported version " + std::to_string(static_cast<unsigned char>(bin[8])) +
                      " at byte offset 8");

  Corpus corpus;
  std::size_t expected = 0;
  bool have_count = false;
  std::string line;
  std::size_t lineno = 0;
  std::size_t offset = 9;
  const std::string mname = manifest.string();
  while (std::getline(mf, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const std::string where = mname + ":" + std::to_string(lineno);
    if (!have_count) {
      std::istringstream is(line);
      std::string key;
      long long value = -1;
      is >> key >> value;
      if (!is || value < 0) throw FormatError(where + ": expected 'key value' header line");
      if (key == "format") {
        if (value != 1) throw FormatError(where + ": unsupported manifest format " + std::to_string(value));
      } else if (key == "vocab") {
        corpus.vocab = static_cast<std::size_t>(value);
      } else if (key == "frame_dim") {
        corpus.frame_dim = static_cast<std::size_t>(value);
      } else if (key == "count") {
        expected = static_cast<std::size_t>(value);
        have_count = true;
        corpus.examples.reserve(expected);
      } else {
        throw FormatError(where + ": unknown header key '" + key + "'");
      }
      continue;
    }
    const auto fields = split(line, '\t');
    if (fields.size() != 4) throw FormatError(where + ": expected 4 tab-separated fields");
    PairedExample ex;
    ex.id = fields[0];
    for (long long v : parse_ints(fields[1], where)) ex.text.tokens.push_back(static_cast<int>(v));
    for (long long v : parse_ints(fields[2], where)) ex.text.word_index.push_back(static_cast<int>(v));
    std::istringstream spans(fields[3]);
    std::string tok;
    while (spans >> tok) {
      const auto colon = tok.find(':');
      if (colon == std::string::npos) throw FormatError(where + ": bad span '" + tok + "'");
      const auto b = parse_ints(tok.substr(0, colon), where);
      const auto e = parse_ints(tok.substr(colon + 1), where);
      if (b.size() != 1 || e.size() != 1 || b[0] < 0 || e[0] < 0)
        throw FormatError(where + ": bad span '" + tok + "'");
      ex.speech.word_spans.push_back({static_cast<std::size_t>(b[0]), static_cast<std::size_t>(e[0])});
    }

    if (bin.size() < offset + 8)
      throw FormatError(fname + ": truncated sequence header at byte offset " + std::to_string(offset));
    const std::size_t m = get_u32(bin, offset);
    const std::size_t d = get_u32(bin, offset + 4);
    if (d != corpus.frame_dim)
      throw FormatError(fname + ": frame dim " + std::to_string(d) + " != manifest frame_dim at byte offset " +
                        std::to_string(offset + 4));
    offset += 8;
    if (bin.size() < offset + 4 * m * d)
      throw FormatError(fname + ": truncated frame data at byte offset " + std::to_string(offset));
    ex.speech.frames = Tensor({m, d});
    for (std::size_t i = 0; i < m * d; ++i, offset += 4)
      ex.speech.frames[i] = static_cast<double>(std::bit_cast<float>(get_u32(bin, offset)));
    try {
      validate(ex, corpus.vocab, corpus.frame_dim);
    } catch (const std::invalid_argument& e) {
      throw FormatError(where + ": " + e.what());
    }
    corpus.examples.push_back(std::move(ex));
  }
  if (!have_count) throw FormatError(mname + ": missing header");
  if (corpus.size() != expected)
    throw FormatError(mname + ": header announces " + std::to_string(expected) + " records, found " +
                      std::to_string(corpus.size()));
  if (offset != bin.size())
    throw FormatError(fname + ": trailing bytes at byte offset " + std::to_string(offset));
  return corpus;
}

// ---------------------------------------------------------------------------

Batch make_batch(const Corpus& corpus, const std::vector<std::size_t>& indices) {
  Batch b;
  std::size_t max_n = 0, max_m = 0;
  for (std::size_t i : indices) {
    const auto& ex = corpus.examples.at(i);
    b.examples.push_back(&ex);
    max_n = std::max(max_n, ex.text.size());
    max_m = std::max(max_m, ex.speech.size());
  }
  for (const auto* ex : b.examples) {
    std::vector<std::uint8_t> tm(max_n, 0), fm(max_m, 0);
    std::fill_n(tm.begin(), ex->text.size(), 1);
    std::fill_n(fm.begin(), ex->speech.size(), 1);
    b.text_mask.push_back(std::move(tm));
    b.frame_mask.push_back(std::move(fm));
  }
  return b;
}

std::vector<Batch> make_batches(const Corpus& corpus, std::size_t batch_size, std::uint64_t seed,
                                bool drop_last) {
  if (batch_size < 2) invalid("make_batches: batch size must be >= 2 (in-batch negatives)");
  if (drop_last && corpus.size() < batch_size) {
    warn("make_batches: corpus of " + std::to_string(corpus.size()) +
         " examples is smaller than batch size " + std::to_string(batch_size) + "; no batches");
    return {};
  }
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, {kTagShuffle}));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    if (drop_last && end - start < batch_size) break;
    batches.push_back(make_batch(corpus, {order.begin() + start, order.begin() + end}));
  }
  return batches;
}

std::vector<std::size_t> subset_indices(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) invalid("subset_indices: fraction must lie in (0, 1]");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, {kTagSubset}));
  std::shuffle(order.begin(), order.end(), rng);
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  order.resize(std::min(n, k));
  return order;
}

}  // namespace speechalign
