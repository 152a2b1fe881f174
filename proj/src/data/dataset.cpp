// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <fstream>
#include <sstream>

#include "mare/data.hpp"
#include "mare/error.hpp"

namespace mare {

using nlohmann::json;

void MultiAspectExample::validate(std::size_t num_aspects) const {
  if (labels.size() != num_aspects || rationales.size() != num_aspects) {
    throw SchemaError("example must carry " + std::to_string(num_aspects) + " aspect slots");
  }
  bool any_label = false;
  for (std::size_t i = 0; i < num_aspects; ++i) {
    any_label = any_label || labels[i].has_value();
    if (!rationales[i]) continue;
    if (rationales[i]->size() != tokens.size()) {
      throw SchemaError("rationale for aspect " + std::to_string(i) + " has " + std::to_string(rationales[i]->size()) +
                        " entries for " + std::to_string(tokens.size()) + " tokens");
    }
    for (auto v : *rationales[i]) {
      if (v > 1) throw SchemaError("rationale for aspect " + std::to_string(i) + " is not binary");
    }
  }
  if (!any_label) throw SchemaError("example has no label for any aspect");
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{"<pad>", "<unk>"}) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < 2) throw VocabularyError("vocabulary needs the <pad> and <unk> entries");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], i).second) throw VocabularyError("duplicate vocabulary entry '" + tokens_[i] + "'");
  }
}

Vocabulary Vocabulary::build(const Dataset& dataset) {
  Vocabulary v;
  for (const auto& ex : dataset.examples) {
    for (const auto& t : ex.tokens) {
      if (v.index_.emplace(t, v.tokens_.size()).second) v.tokens_.push_back(t);
    }
  }
  return v;
}

std::size_t Vocabulary::id(const std::string& token) const {
  const auto it = index_.find(token);
  return it == index_.end() ? kUnknown : it->second;
}

std::vector<std::size_t> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<std::size_t> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

EncodedDataset encode(const Dataset& dataset, const Vocabulary& vocab) {
  EncodedDataset out;
  out.num_aspects = dataset.num_aspects;
  for (const auto& ex : dataset.examples) {
    out.ids.push_back(vocab.encode(ex.tokens));
    out.labels.push_back(ex.labels);
    out.rationales.push_back(ex.rationales);
  }
  return out;
}

namespace {

std::size_t aspect_key(const std::string& key, const char* field) {
  std::size_t pos = 0;
  unsigned long value = 0;
  try {
    value = std::stoul(key, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != key.size() || key.empty()) {
    throw SchemaError(std::string("field '") + field + "': aspect key '" + key + "' is not an index");
  }
  return value;
}

MultiAspectExample parse_example(const json& j, std::size_t& max_aspect) {
  if (!j.is_object()) throw SchemaError("line is not a JSON object");
  if (!j.contains("tokens") || !j["tokens"].is_array()) throw SchemaError("field 'tokens': missing or not an array");
  MultiAspectExample ex;
  for (const auto& t : j["tokens"]) {
    if (!t.is_string()) throw SchemaError("field 'tokens': entries must be strings");
    ex.tokens.push_back(t.get<std::string>());
  }
  std::vector<std::pair<std::size_t, std::size_t>> labels;
  std::vector<std::pair<std::size_t, std::vector<std::uint8_t>>> masks;
  if (j.contains("labels")) {
    if (!j["labels"].is_object()) throw SchemaError("field 'labels': must be an object");
    for (const auto& [key, value] : j["labels"].items()) {
      if (!value.is_number_integer() || value.get<long long>() < 0) {
        throw SchemaError("field 'labels': value for aspect " + key + " must be a non-negative integer");
      }
      labels.emplace_back(aspect_key(key, "labels"), value.get<std::size_t>());
    }
  }
  if (j.contains("rationales")) {
    if (!j["rationales"].is_object()) throw SchemaError("field 'rationales': must be an object");
    for (const auto& [key, value] : j["rationales"].items()) {
      if (!value.is_array()) throw SchemaError("field 'rationales': aspect " + key + " must be an array");
      std::vector<std::uint8_t> mask;
      for (const auto& v : value) {
        if (!v.is_number_integer() || (v.get<long long>() != 0 && v.get<long long>() != 1)) {
          throw SchemaError("field 'rationales': aspect " + key + " must contain only 0 and 1");
        }
        mask.push_back(static_cast<std::uint8_t>(v.get<int>()));
      }
      if (mask.size() != ex.tokens.size()) {
        throw SchemaError("field 'rationales': aspect " + key + " has " + std::to_string(mask.size()) +
                          " entries for " + std::to_string(ex.tokens.size()) + " tokens");
      }
      masks.emplace_back(aspect_key(key, "rationales"), std::move(mask));
    }
  }
  for (const auto& [a, _] : labels) max_aspect = std::max(max_aspect, a + 1);
  for (const auto& [a, _] : masks) max_aspect = std::max(max_aspect, a + 1);
  // Slots are sized once the aspect count is known.
  ex.labels.resize(max_aspect);
  ex.rationales.resize(max_aspect);
  for (auto& [a, l] : labels) {
    if (ex.labels.size() <= a) ex.labels.resize(a + 1);
    ex.labels[a] = l;
  }
  for (auto& [a, m] : masks) {
    if (ex.rationales.size() <= a) ex.rationales.resize(a + 1);
    ex.rationales[a] = std::move(m);
  }
  return ex;
}

}  // namespace

Dataset parse_jsonl(std::istream& in, std::optional<std::size_t> num_aspects) {
  Dataset ds;
  std::vector<std::size_t> line_numbers;
  std::size_t max_aspect = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      json j;
      try {
        j = json::parse(line);
      } catch (const json::parse_error& e) {
        throw SchemaError(std::string("malformed JSON: ") + e.what());
      }
      ds.examples.push_back(parse_example(j, max_aspect));
      line_numbers.push_back(line_no);
    } catch (const SchemaError& e) {
      throw SchemaError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  ds.num_aspects = num_aspects.value_or(max_aspect);
  if (num_aspects && max_aspect > *num_aspects) {
    throw SchemaError("dataset refers to aspect " + std::to_string(max_aspect - 1) + " but num_aspects is " +
                      std::to_string(*num_aspects));
  }
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    auto& ex = ds.examples[i];
    ex.labels.resize(ds.num_aspects);
    ex.rationales.resize(ds.num_aspects);
    try {
      ex.validate(ds.num_aspects);
    } catch (const SchemaError& e) {
      throw SchemaError("line " + std::to_string(line_numbers[i]) + ": " + e.what());
    }
  }
  return ds;
}

Dataset load_jsonl(const std::string& path, std::optional<std::size_t> num_aspects) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset '" + path + "'");
  try {
    return parse_jsonl(in, num_aspects);
  } catch (const SchemaError& e) {
    throw SchemaError(path + ": " + e.what());
  }
}

json example_to_json(const MultiAspectExample& ex) {
  json labels = json::object(), rationales = json::object();
  for (std::size_t i = 0; i < ex.labels.size(); ++i) {
    if (ex.labels[i]) labels[std::to_string(i)] = *ex.labels[i];
  }
  for (std::size_t i = 0; i < ex.rationales.size(); ++i) {
    if (ex.rationales[i]) rationales[std::to_string(i)] = *ex.rationales[i];
  }
  return json{{"tokens", ex.tokens}, {"labels", labels}, {"rationales", rationales}};
}

void write_jsonl(const Dataset& dataset, std::ostream& out) {
  for (const auto& ex : dataset.examples) out << example_to_json(ex).dump() << '\n';
}

void save_jsonl(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write dataset '" + path + "'");
  write_jsonl(dataset, out);
  if (!out) throw Error("failed writing dataset '" + path + "'");
}

DatasetStats compute_stats(const Dataset& dataset) {
  DatasetStats s;
  s.num_examples = dataset.size();
  s.aspects.resize(dataset.num_aspects);
  std::vector<double> sparsity_sum(dataset.num_aspects, 0.0);
  std::size_t tokens = 0;
  for (const auto& ex : dataset.examples) {
    tokens += ex.tokens.size();
    for (std::size_t i = 0; i < dataset.num_aspects; ++i) {
      auto& a = s.aspects[i];
      if (!ex.labels[i]) {
        ++a.unlabeled;
      } else if (*ex.labels[i] == 1) {
        ++a.positive;
      } else if (*ex.labels[i] == 0) {
        ++a.negative;
      } else {
        ++a.other;
      }
      if (ex.rationales[i] && !ex.tokens.empty()) {
        ++a.annotated;
        std::size_t gold = 0;
        for (auto v : *ex.rationales[i]) gold += v;
        sparsity_sum[i] += static_cast<double>(gold) / static_cast<double>(ex.tokens.size());
      }
    }
  }
  if (s.num_examples > 0) s.mean_tokens = static_cast<double>(tokens) / static_cast<double>(s.num_examples);
  for (std::size_t i = 0; i < dataset.num_aspects; ++i) {
    if (s.aspects[i].annotated > 0) {
      s.aspects[i].gold_sparsity = sparsity_sum[i] / static_cast<double>(s.aspects[i].annotated);
    }
  }
  return s;
}

json DatasetStats::to_json() const {
  json aspects_json = json::array();
  for (const auto& a : aspects) {
    aspects_json.push_back({{"positive", a.positive},
                            {"negative", a.negative},
                            {"other", a.other},
                            {"unlabeled", a.unlabeled},
                            {"annotated", a.annotated},
                            {"gold_sparsity", a.gold_sparsity ? json(*a.gold_sparsity) : json(nullptr)}});
  }
  return {{"num_examples", num_examples}, {"mean_tokens", mean_tokens}, {"aspects", aspects_json}};
}

DatasetSplits split_dataset(const Dataset& dataset, double train_fraction, double val_fraction) {
  if (train_fraction < 0 || val_fraction < 0 || train_fraction + val_fraction > 1.0) {
    throw ConfigError("split fractions must be non-negative and sum to at most 1");
  }
  const std::size_t n = dataset.size();
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n))));
  DatasetSplits out;
  for (auto* d : {&out.train, &out.val, &out.test}) d->num_aspects = dataset.num_aspects;
  const auto begin = dataset.examples.begin();
  out.train.examples.assign(begin, begin + static_cast<std::ptrdiff_t>(n_train));
  out.val.examples.assign(begin + static_cast<std::ptrdiff_t>(n_train),
                          begin + static_cast<std::ptrdiff_t>(n_train + n_val));
  out.test.examples.assign(begin + static_cast<std::ptrdiff_t>(n_train + n_val), dataset.examples.end());
  return out;
}

}  // namespace mare
