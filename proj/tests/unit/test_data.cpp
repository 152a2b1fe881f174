// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "doctest.h"
#include "mare/data.hpp"
#include "mare/error.hpp"

using namespace mare;

namespace {

std::string jsonl_line(const std::string& body) { return body + "\n"; }

MultiAspectExample labeled(std::vector<std::string> tokens, std::size_t k, std::size_t aspect, std::size_t label) {
  MultiAspectExample ex;
  ex.tokens = std::move(tokens);
  ex.labels.assign(k, std::nullopt);
  ex.rationales.assign(k, std::nullopt);
  ex.labels[aspect] = label;
  return ex;
}

}  // namespace

TEST_CASE("synth: presence 1 gives every aspect a label and a span") {
  SynthGrammarConfig cfg;
  cfg.presence = {1.0, 1.0, 1.0};
  const auto ds = synth_generate(cfg, 200);
  REQUIRE(ds.size() == 200);
  CHECK(ds.num_aspects == 3);
  for (const auto& ex : ds.examples) {
    ex.validate(3);
    for (std::size_t a = 0; a < 3; ++a) {
      REQUIRE(ex.labels[a].has_value());
      REQUIRE(ex.rationales[a].has_value());
      std::size_t gold = 0;
      for (auto v : *ex.rationales[a]) gold += v;
      CHECK(gold == 1 + cfg.adjectives_per_span);
    }
  }
}

TEST_CASE("synth: presence 0 removes an aspect everywhere") {
  SynthGrammarConfig cfg;
  cfg.presence = {1.0, 0.0, 0.5};
  const auto ds = synth_generate(cfg, 500);
  for (const auto& ex : ds.examples) {
    CHECK_FALSE(ex.labels[1].has_value());
    CHECK_FALSE(ex.rationales[1].has_value());
    CHECK(ex.labels[0].has_value());
  }
}

TEST_CASE("synth: class balance within 2 points at n = 10000") {
  SynthGrammarConfig cfg;
  const auto ds = synth_generate(cfg, 10000);
  const auto stats = compute_stats(ds);
  for (const auto& a : stats.aspects) {
    const double n = static_cast<double>(a.positive + a.negative);
    REQUIRE(n == 10000.0);
    CHECK(std::abs(static_cast<double>(a.positive) / n - 0.5) <= 0.02);
  }
}

TEST_CASE("synth: deterministic per seed, different across seeds") {
  SynthGrammarConfig cfg;
  CHECK(synth_generate(cfg, 50) == synth_generate(cfg, 50));
  auto other = cfg;
  other.seed = 2;
  CHECK_FALSE(synth_generate(cfg, 50) == synth_generate(other, 50));
}

TEST_CASE("synth: gold tokens determine the label") {
  SynthGrammarConfig cfg;
  const auto lex = cfg.resolved().aspects;
  const auto ds = synth_generate(cfg, 300);
  for (const auto& ex : ds.examples) {
    for (std::size_t a = 0; a < 3; ++a) {
      std::size_t pos = 0, neg = 0, noun = 0;
      for (std::size_t t = 0; t < ex.tokens.size(); ++t) {
        if (!(*ex.rationales[a])[t]) continue;
        const auto& w = ex.tokens[t];
        auto has = [&](const std::vector<std::string>& v) { return std::find(v.begin(), v.end(), w) != v.end(); };
        pos += has(lex[a].positive);
        neg += has(lex[a].negative);
        noun += has(lex[a].nouns);
      }
      CHECK(noun == 1);
      CHECK((*ex.labels[a] == 1 ? pos : neg) == cfg.adjectives_per_span);
      CHECK((*ex.labels[a] == 1 ? neg : pos) == 0);
    }
  }
}

TEST_CASE("synth: aspect vocabularies are disjoint from each other and from filler") {
  const auto cfg = SynthGrammarConfig{.num_aspects = 5}.resolved();
  std::set<std::string> seen(cfg.filler.begin(), cfg.filler.end());
  for (const auto& lex : cfg.aspects) {
    for (const auto* words : {&lex.nouns, &lex.positive, &lex.negative}) {
      for (const auto& w : *words) CHECK(seen.insert(w).second);
    }
  }
  CHECK_NOTHROW(synth_generate(cfg, 10));
}

TEST_CASE("synth: config errors") {
  CHECK_THROWS_AS(synth_generate(SynthGrammarConfig{.num_aspects = 0}, 10), ConfigError);
  SynthGrammarConfig empty_phrases = SynthGrammarConfig{}.resolved();
  empty_phrases.aspects[1].positive.clear();
  CHECK_THROWS_AS(synth_generate(empty_phrases, 10), ConfigError);
  SynthGrammarConfig overlap = SynthGrammarConfig{}.resolved();
  overlap.aspects[1].positive.push_back(overlap.aspects[0].positive.front());
  CHECK_THROWS_AS(synth_generate(overlap, 10), ConfigError);
  CHECK_THROWS_AS(synth_generate(SynthGrammarConfig{.presence = {0.0, 0.0, 0.0}}, 10), ConfigError);
  CHECK_THROWS_AS(synth_generate(SynthGrammarConfig{}, 0), ConfigError);
}

TEST_CASE("synth: grammar config JSON round trip") {
  SynthGrammarConfig cfg;
  cfg.presence = {0.9, 0.8, 0.7};
  cfg.seed = 42;
  const auto back = SynthGrammarConfig::from_json(cfg.to_json());
  CHECK(synth_generate(back, 20) == synth_generate(cfg, 20));
}

TEST_CASE("jsonl: save then load returns the original dataset") {
  SynthGrammarConfig cfg;
  cfg.presence = {1.0, 0.5, 0.5};
  const auto ds = synth_generate(cfg, 100);
  std::stringstream buffer;
  write_jsonl(ds, buffer);
  const auto back = parse_jsonl(buffer, 3);
  CHECK(back == ds);
}

TEST_CASE("jsonl: malformed line 7 is reported as line 7") {
  std::string text;
  for (int i = 0; i < 6; ++i) text += jsonl_line(R"({"tokens": ["a", "b"], "labels": {"0": 1}})");
  text += jsonl_line(R"({"tokens": ["a", "b"], "labels": {"0": 1}, "rationales": {"0": [1]}})");
  std::istringstream in(text);
  try {
    parse_jsonl(in);
    FAIL("expected a schema error");
  } catch (const SchemaError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("line 7") != std::string::npos);
    CHECK(msg.find("rationales") != std::string::npos);
  }

  std::istringstream broken(jsonl_line(R"({"tokens": ["a"], "labels": {"0": 1}})") + "{not json\n");
  try {
    parse_jsonl(broken);
    FAIL("expected a schema error");
  } catch (const SchemaError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("jsonl: schema violations") {
  auto fails = [](const std::string& line) {
    std::istringstream in(jsonl_line(line));
    CHECK_THROWS_AS(parse_jsonl(in), SchemaError);
  };
  fails(R"({"labels": {"0": 1}})");
  fails(R"({"tokens": ["a"]})");
  fails(R"({"tokens": ["a"], "labels": {"x": 1}})");
  fails(R"({"tokens": ["a"], "labels": {"0": -1}})");
  fails(R"({"tokens": ["a", "b"], "labels": {"0": 1}, "rationales": {"0": [0, 2]}})");
  fails(R"([1, 2])");
  std::istringstream too_many(jsonl_line(R"({"tokens": ["a"], "labels": {"4": 1}})"));
  CHECK_THROWS_AS(parse_jsonl(too_many, 3), SchemaError);
}

TEST_CASE("jsonl: an example labeled only for aspect 2") {
  std::istringstream in(jsonl_line(R"({"tokens": ["x", "y", "z"], "labels": {"2": 0}, "rationales": {"2": [0, 1, 0]}})"));
  const auto ds = parse_jsonl(in);
  REQUIRE(ds.num_aspects == 3);
  const auto& ex = ds.examples.at(0);
  CHECK_FALSE(ex.labels[0].has_value());
  CHECK_FALSE(ex.labels[1].has_value());
  CHECK(ex.labels[2] == std::optional<std::size_t>(0));
  CHECK(*ex.rationales[2] == std::vector<std::uint8_t>{0, 1, 0});
}

TEST_CASE("stats: counts and missing gold sparsity") {
  Dataset ds{1, {}};
  for (int i = 0; i < 10; ++i) ds.examples.push_back(labeled({"a", "b"}, 1, 0, 1));
  const auto stats = compute_stats(ds);
  CHECK(stats.num_examples == 10);
  CHECK(stats.aspects[0].positive == 10);
  CHECK(stats.aspects[0].negative == 0);
  CHECK(stats.aspects[0].unlabeled == 0);
  CHECK_FALSE(stats.aspects[0].gold_sparsity.has_value());
  CHECK(stats.to_json()["aspects"][0]["gold_sparsity"].is_null());

  Dataset mixed{2, {labeled({"a"}, 2, 0, 0), labeled({"a"}, 2, 1, 1), labeled({"a"}, 2, 1, 3)}};
  const auto s2 = compute_stats(mixed);
  CHECK(s2.aspects[0].negative == 1);
  CHECK(s2.aspects[0].unlabeled == 2);
  CHECK(s2.aspects[1].positive == 1);
  CHECK(s2.aspects[1].other == 1);
  for (const auto& a : s2.aspects) CHECK(a.positive + a.negative + a.other + a.unlabeled == 3);
}

TEST_CASE("stats: planted spans give gold sparsity near 0.10") {
  SynthGrammarConfig cfg;
  cfg.filler_min = 27;
  cfg.filler_max = 27;
  cfg.num_aspects = 1;
  const auto ds = synth_generate(cfg, 200);
  const auto stats = compute_stats(ds);
  REQUIRE(stats.aspects[0].gold_sparsity.has_value());
  CHECK(*stats.aspects[0].gold_sparsity == doctest::Approx(0.10).epsilon(1e-12));

  const auto def = compute_stats(synth_generate(SynthGrammarConfig{}, 1000));
  for (const auto& a : def.aspects) CHECK(std::abs(*a.gold_sparsity - 0.10) < 0.01);
}

TEST_CASE("vocabulary and encoding") {
  Dataset ds{1, {labeled({"b", "a", "b"}, 1, 0, 1)}};
  const auto vocab = Vocabulary::build(ds);
  CHECK(vocab.size() == 4);
  CHECK(vocab.id("a") != vocab.id("b"));
  CHECK(vocab.id("never seen") == Vocabulary::kUnknown);
  const auto enc = encode(ds, vocab);
  CHECK(enc.ids[0] == std::vector<std::size_t>{vocab.id("b"), vocab.id("a"), vocab.id("b")});
  CHECK(enc.labels[0][0] == std::optional<std::size_t>(1));
}

TEST_CASE("split: contiguous 80/10/10") {
  const auto ds = synth_generate(SynthGrammarConfig{}, 100);
  const auto parts = split_dataset(ds);
  CHECK(parts.train.size() == 80);
  CHECK(parts.val.size() == 10);
  CHECK(parts.test.size() == 10);
  CHECK(parts.train.examples.front() == ds.examples.front());
  CHECK(parts.test.examples.back() == ds.examples.back());
}
