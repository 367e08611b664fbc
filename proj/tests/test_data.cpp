// tests/test_data.cpp

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

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "speechalign/data.hpp"
#include "speechalign/logging.hpp"

using namespace speechalign;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("speechalign_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

GeneratorConfig small_config() {
  GeneratorConfig cfg;
  cfg.count = 12;
  cfg.vocab = 16;
  cfg.embed_dim = 8;
  cfg.frame_dim = 10;
  return cfg;
}

}  // namespace

TEST_CASE("vocabulary layout") {
  Vocabulary v(64);
  CHECK(v.is_marker(0));
  CHECK(v.is_marker(1));
  CHECK(v.is_initial(2));
  CHECK(v.initial_count() == 46);
  CHECK(v.is_continuation(48));
  CHECK(v.is_continuation(63));
  CHECK_FALSE(v.is_continuation(64));
  CHECK(v.words({0, 5, 50, 7}) == std::vector<std::string>{"t5+t50", "t7"});
  CHECK_THROWS_AS(Vocabulary(3), std::invalid_argument);
}

TEST_CASE("generator is deterministic under seed") {
  const auto cfg = small_config();
  const Corpus a = generate_corpus(cfg);
  const Corpus b = generate_corpus(cfg);
  const fs::path dir = scratch_dir("determinism");
  write_corpus(a, dir / "a.tsv", dir / "a.frames");
  write_corpus(b, dir / "b.tsv", dir / "b.frames");
  CHECK(slurp(dir / "a.tsv") == slurp(dir / "b.tsv"));
  CHECK(slurp(dir / "a.frames") == slurp(dir / "b.frames"));

  auto other = cfg;
  other.seed = 8;
  CHECK(generate_corpus(other).examples[0].speech.frames != a.examples[0].speech.frames);
}

TEST_CASE("noise-free frames repeat the token prototype") {
  auto cfg = small_config();
  cfg.noise = 0.0;
  cfg.min_expansion = cfg.max_expansion = 2;
  cfg.subword_prob = 0.0;
  const Corpus c = generate_corpus(cfg);
  for (const auto& ex : c.examples) {
    for (const auto& span : ex.speech.word_spans) {
      REQUIRE(span.size() == 2);
      for (std::size_t f = 0; f < cfg.frame_dim; ++f)
        CHECK(ex.speech.frames(span.begin, f) == ex.speech.frames(span.begin + 1, f));
    }
  }
}

TEST_CASE("negative noise is rejected") {
  auto cfg = small_config();
  cfg.noise = -0.1;
  CHECK_THROWS_AS(generate_corpus(cfg), std::invalid_argument);
}

TEST_CASE("alignment totality and word-set agreement") {
  auto cfg = small_config();
  cfg.count = 200;
  cfg.pause_prob = 0.3;
  cfg.subword_prob = 0.4;
  const Corpus c = generate_corpus(cfg);
  for (const auto& ex : c.examples) {
    CHECK_NOTHROW(validate(ex, c.vocab, c.frame_dim));
    std::size_t cursor = 0;
    for (const auto& s : ex.speech.word_spans) {
      CHECK(s.begin == cursor);
      cursor = s.end;
    }
    CHECK(cursor == ex.speech.size());
    CHECK(ex.speech.word_spans.size() == ex.text.word_count());
    CHECK(ex.speech.size() >= 2 * ex.text.size());
  }
}

TEST_CASE("mean frames per token lies in the expansion range") {
  GeneratorConfig cfg;
  cfg.count = 2000;
  cfg.vocab = 64;
  const Corpus c = generate_corpus(cfg);
  // Recompute the statistic directly from the corpus.
  double total = 0.0;
  for (const auto& ex : c.examples) total += double(ex.speech.size()) / double(ex.text.size());
  const double mean = total / double(c.size());
  CHECK(mean >= double(cfg.min_expansion));
  CHECK(mean <= double(cfg.max_expansion));
  CHECK(corpus_stats(c).mean_frames_per_token == doctest::Approx(mean).epsilon(1e-12));
  CHECK(mean == doctest::Approx(3.0).epsilon(0.02));
}

TEST_CASE("noise-free frames admit an exact linear map to text embeddings") {
  GeneratorConfig cfg;
  cfg.count = 50;
  cfg.vocab = 64;
  cfg.embed_dim = 32;
  cfg.frame_dim = 48;
  cfg.noise = 0.0;
  cfg.subword_prob = 0.0;
  const Corpus c = generate_corpus(cfg);
  const Tensor table = world_embedding_table(cfg.world_seed, cfg.vocab, cfg.embed_dim);

  std::size_t rows = 0;
  for (const auto& ex : c.examples) rows += ex.speech.size();
  Eigen::MatrixXd frames(rows, cfg.frame_dim), targets(rows, cfg.embed_dim);
  std::size_t r = 0;
  for (const auto& ex : c.examples) {
    for (std::size_t w = 0; w < ex.speech.word_spans.size(); ++w) {
      const auto span = ex.speech.word_spans[w];
      const int tok = ex.text.tokens[w];
      for (std::size_t f = span.begin; f < span.end; ++f, ++r) {
        for (std::size_t k = 0; k < cfg.frame_dim; ++k) frames(r, k) = ex.speech.frames(f, k);
        for (std::size_t k = 0; k < cfg.embed_dim; ++k) targets(r, k) = table(tok, k);
      }
    }
  }
  const Eigen::MatrixXd map = frames.colPivHouseholderQr().solve(targets);
  const double residual = (frames * map - targets).norm() / std::sqrt(double(rows));
  CHECK(residual < 1e-8);
}

TEST_CASE("corpus round trip") {
  auto cfg = small_config();
  cfg.subword_prob = 0.5;
  cfg.pause_prob = 0.2;
  const Corpus c = generate_corpus(cfg);
  const fs::path dir = scratch_dir("roundtrip");
  write_corpus(c, dir / "c.tsv", dir / "c.frames");
  const Corpus back = read_corpus(dir / "c.tsv", dir / "c.frames");
  REQUIRE(back.size() == c.size());
  CHECK(back.vocab == c.vocab);
  CHECK(back.frame_dim == c.frame_dim);
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& x = c.examples[i];
    const auto& y = back.examples[i];
    CHECK(x.id == y.id);
    CHECK(x.text.tokens == y.text.tokens);
    CHECK(x.text.word_index == y.text.word_index);
    CHECK(x.speech.word_spans == y.speech.word_spans);
    REQUIRE(x.speech.frames.shape() == y.speech.frames.shape());
    for (std::size_t k = 0; k < x.speech.frames.size(); ++k)
      CHECK(y.speech.frames[k] == to_stored_precision(x.speech.frames[k]));
  }
}

TEST_CASE("empty corpus writes a valid file") {
  Corpus c;
  c.vocab = 8;
  c.frame_dim = 4;
  const fs::path dir = scratch_dir("empty");
  write_corpus(c, dir / "e.tsv", dir / "e.frames");
  const Corpus back = read_corpus(dir / "e.tsv", dir / "e.frames");
  CHECK(back.empty());
  CHECK(back.vocab == 8);
  CHECK(fs::file_size(dir / "e.frames") == 9);
}

TEST_CASE("corrupted or truncated frame files are rejected with an offset") {
  const Corpus c = generate_corpus(small_config());
  const fs::path dir = scratch_dir("corrupt");
  write_corpus(c, dir / "c.tsv", dir / "c.frames");
  const std::string good = slurp(dir / "c.frames");

  auto write_bytes = [&](const std::string& bytes) {
    std::ofstream f(dir / "c.frames", std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  };

  std::string bad = good;
  bad[3] = 'x';
  write_bytes(bad);
  try {
    read_corpus(dir / "c.tsv", dir / "c.frames");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("offset 3") != std::string::npos);
  }

  bad = good;
  bad[8] = 9;
  write_bytes(bad);
  CHECK_THROWS_WITH_AS(read_corpus(dir / "c.tsv", dir / "c.frames"),
                       doctest::Contains("version"), FormatError);

  write_bytes(good.substr(0, good.size() - 5));
  CHECK_THROWS_WITH_AS(read_corpus(dir / "c.tsv", dir / "c.frames"),
                       doctest::Contains("truncated"), FormatError);
}

TEST_CASE("batching") {
  auto cfg = small_config();
  cfg.count = 10;
  const Corpus c = generate_corpus(cfg);
  CHECK(make_batches(c, 4, 1, true).size() == 2);
  const auto loose = make_batches(c, 4, 1, false);
  REQUIRE(loose.size() == 3);
  CHECK(loose.back().size() == 2);

  const auto again = make_batches(c, 4, 1, false);
  for (std::size_t b = 0; b < loose.size(); ++b) CHECK(loose[b].examples == again[b].examples);
  CHECK(make_batches(c, 4, 2, false)[0].examples != loose[0].examples);

  std::set<const PairedExample*> seen;
  for (const auto& b : loose) seen.insert(b.examples.begin(), b.examples.end());
  CHECK(seen.size() == 10);

  for (const auto& b : loose)
    for (std::size_t i = 0; i < b.size(); ++i) {
      std::size_t real = 0;
      for (auto m : b.text_mask[i]) real += m;
      CHECK(real == b.examples[i]->text.size());
      real = 0;
      for (auto m : b.frame_mask[i]) real += m;
      CHECK(real == b.examples[i]->speech.size());
    }

  CHECK_THROWS_AS(make_batches(c, 1, 1, false), std::invalid_argument);
}

TEST_CASE("undersized corpus with drop_last warns and yields nothing") {
  auto cfg = small_config();
  cfg.count = 3;
  const Corpus c = generate_corpus(cfg);
  std::string captured;
  auto prev = set_warning_sink([&](std::string_view m) { captured = m; });
  CHECK(make_batches(c, 4, 1, true).empty());
  set_warning_sink(prev);
  CHECK(captured.find("smaller than batch size") != std::string::npos);
}

TEST_CASE("subset sizes and nesting") {
  CHECK(subset_indices(2000, 0.1, 3).size() == 200);
  CHECK(subset_indices(2000, 1.0, 3).size() == 2000);
  CHECK(subset_indices(2000, 1.0, 3) == subset_indices(2000, 1.0, 3));
  const auto small = subset_indices(2000, 0.1, 9);
  const auto big = subset_indices(2000, 0.2, 9);
  const std::set<std::size_t> bigset(big.begin(), big.end());
  for (auto i : small) CHECK(bigset.count(i) == 1);
  CHECK_THROWS_AS(subset_indices(10, 0.0, 1), std::invalid_argument);
}
