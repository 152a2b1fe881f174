// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace mare {

struct MultiAspectExample {
  std::vector<std::string> tokens;
  // One entry per aspect; nullopt means the aspect is not annotated.
  std::vector<std::optional<std::size_t>> labels;
  std::vector<std::optional<std::vector<std::uint8_t>>> rationales;

  // Throws SchemaError: sizes must match num_aspects, masks must match the
  // token count and be 0/1, and at least one label must be present.
  void validate(std::size_t num_aspects) const;
  bool operator==(const MultiAspectExample&) const = default;
};

struct Dataset {
  std::size_t num_aspects = 0;
  std::vector<MultiAspectExample> examples;

  std::size_t size() const { return examples.size(); }
  bool operator==(const Dataset&) const = default;
};

// Token <-> id map. Id 0 is padding and id 1 stands for unknown tokens.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnknown = 1;

  Vocabulary();
  explicit Vocabulary(std::vector<std::string> tokens);
  static Vocabulary build(const Dataset& dataset);

  std::size_t size() const { return tokens_.size(); }
  std::size_t id(const std::string& token) const;
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::vector<std::size_t> encode(const std::vector<std::string>& tokens) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Dataset in id form, ready for batching.
struct EncodedDataset {
  std::size_t num_aspects = 0;
  std::vector<std::vector<std::size_t>> ids;
  std::vector<std::vector<std::optional<std::size_t>>> labels;
  std::vector<std::vector<std::optional<std::vector<std::uint8_t>>>> rationales;

  std::size_t size() const { return ids.size(); }
};

EncodedDataset encode(const Dataset& dataset, const Vocabulary& vocab);

// Line-delimited JSON, one example per line:
//   {"tokens": [...], "labels": {"0": 1}, "rationales": {"0": [0, 1, ...]}}
// When num_aspects is not given it is one more than the largest aspect key.
Dataset parse_jsonl(std::istream& in, std::optional<std::size_t> num_aspects = std::nullopt);
Dataset load_jsonl(const std::string& path, std::optional<std::size_t> num_aspects = std::nullopt);
void write_jsonl(const Dataset& dataset, std::ostream& out);
void save_jsonl(const Dataset& dataset, const std::string& path);

nlohmann::json example_to_json(const MultiAspectExample& example);

struct AspectStats {
  std::size_t positive = 0;  // label 1
  std::size_t negative = 0;  // label 0
  std::size_t other = 0;     // labels >= 2
  std::size_t unlabeled = 0;
  std::size_t annotated = 0;  // examples with a gold rationale
  std::optional<double> gold_sparsity;
};

struct DatasetStats {
  std::size_t num_examples = 0;
  double mean_tokens = 0.0;
  std::vector<AspectStats> aspects;

  nlohmann::json to_json() const;
};

DatasetStats compute_stats(const Dataset& dataset);

struct AspectLexicon {
  std::string name;
  std::vector<std::string> nouns;
  std::vector<std::string> positive;
  std::vector<std::string> negative;
};

// Grammar of the synthetic corpus: each present aspect contributes one span
// "<noun> <adj> ... <adj>" whose adjectives share a polarity, scattered among
// neutral filler words. The span tokens are the gold rationale.
struct SynthGrammarConfig {
  std::size_t num_aspects = 3;
  std::vector<AspectLexicon> aspects;  // empty: built-in lexicon
  std::vector<std::string> filler;     // empty: built-in filler words
  std::size_t filler_min = 18;
  std::size_t filler_max = 24;
  std::size_t adjectives_per_span = 2;
  std::vector<double> presence;  // per aspect; empty means always present
  std::uint64_t seed = 1;

  // Fills in the built-in lexicon and presence defaults.
  SynthGrammarConfig resolved() const;
  // Throws ConfigError (e.g. k = 0, empty or overlapping phrase sets).
  void validate() const;

  static SynthGrammarConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

Dataset synth_generate(const SynthGrammarConfig& config, std::size_t n_examples);

struct DatasetSplits {
  Dataset train, val, test;
};

// Contiguous split by fractions (the remainder goes to test).
DatasetSplits split_dataset(const Dataset& dataset, double train_fraction = 0.8, double val_fraction = 0.1);

}  // namespace mare
