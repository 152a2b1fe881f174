// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include <set>

#include "mare/data.hpp"
#include "mare/error.hpp"
#include "mare/rng.hpp"

namespace mare {

using nlohmann::json;

namespace {

const std::vector<AspectLexicon>& builtin_lexicon() {
  static const std::vector<AspectLexicon> lexicon = {
      {"appearance",
       {"color", "head", "foam"},
       {"golden", "clear", "bright", "radiant", "gleaming", "lovely"},
       {"murky", "dull", "cloudy", "flat", "muddy", "pale"}},
      {"aroma",
       {"aroma", "nose", "scent"},
       {"fragrant", "floral", "fresh", "fruity", "inviting", "rich"},
       {"stale", "musty", "sour", "off", "skunky", "faint"}},
      {"palate",
       {"mouthfeel", "body", "finish"},
       {"smooth", "creamy", "crisp", "balanced", "silky", "lively"},
       {"thin", "watery", "harsh", "sticky", "cloying", "astringent"}},
  };
  return lexicon;
}

const std::vector<std::string>& builtin_filler() {
  static const std::vector<std::string> filler = {
      "the",    "a",      "this",    "that",   "it",      "was",    "is",      "and",    "but",    "i",
      "we",     "poured", "from",    "bottle", "glass",   "into",   "tried",   "at",     "bar",    "with",
      "friend", "after",  "dinner",  "last",   "night",   "one",    "of",      "their",  "brew",   "beer",
      "label",  "says",   "brewed",  "in",     "town",    "served", "cold",    "on",     "tap",    "tasted",
      "today",  "again",  "overall", "pretty", "much",    "what",   "expected", "for",   "style",  "price",
      "some",   "notes",  "there",   "also",   "really",  "quite",  "maybe",   "would",  "buy",    "next"};
  return filler;
}

AspectLexicon generated_lexicon(std::size_t i) {
  const std::string p = "a" + std::to_string(i) + "_";
  AspectLexicon lex{"aspect" + std::to_string(i), {}, {}, {}};
  for (int n = 0; n < 3; ++n) lex.nouns.push_back(p + "noun" + std::to_string(n));
  for (int n = 0; n < 6; ++n) {
    lex.positive.push_back(p + "good" + std::to_string(n));
    lex.negative.push_back(p + "bad" + std::to_string(n));
  }
  return lex;
}

template <typename T>
const T& pick(const std::vector<T>& items, Rng& rng) {
  return items[rng.uniform_int(items.size())];
}

}  // namespace

SynthGrammarConfig SynthGrammarConfig::resolved() const {
  SynthGrammarConfig c = *this;
  if (c.aspects.empty()) {
    for (std::size_t i = 0; i < c.num_aspects; ++i) {
      c.aspects.push_back(i < builtin_lexicon().size() ? builtin_lexicon()[i] : generated_lexicon(i));
    }
  }
  if (c.filler.empty()) c.filler = builtin_filler();
  if (c.presence.empty()) c.presence.assign(c.num_aspects, 1.0);
  return c;
}

void SynthGrammarConfig::validate() const {
  if (num_aspects == 0) throw ConfigError("synth: num_aspects must be at least 1");
  const auto c = resolved();
  if (c.aspects.size() != num_aspects) {
    throw ConfigError("synth: " + std::to_string(c.aspects.size()) + " lexicons for " + std::to_string(num_aspects) +
                      " aspects");
  }
  if (c.presence.size() != num_aspects) throw ConfigError("synth: presence needs one probability per aspect");
  bool any_present = false;
  for (double p : c.presence) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("synth: presence probabilities must lie in [0, 1]");
    any_present = any_present || p > 0.0;
  }
  if (!any_present) throw ConfigError("synth: at least one aspect must have nonzero presence");
  if (filler_min > filler_max) throw ConfigError("synth: filler_min exceeds filler_max");
  if (filler_max > 0 && c.filler.empty()) throw ConfigError("synth: filler vocabulary is empty");
  if (adjectives_per_span == 0) throw ConfigError("synth: adjectives_per_span must be at least 1");

  std::set<std::string> seen(c.filler.begin(), c.filler.end());
  for (const auto& lex : c.aspects) {
    if (lex.nouns.empty() || lex.positive.empty() || lex.negative.empty()) {
      throw ConfigError("synth: aspect '" + lex.name + "' has an empty phrase set");
    }
    for (const auto* words : {&lex.nouns, &lex.positive, &lex.negative}) {
      for (const auto& w : *words) {
        if (w.empty() || w.find_first_of(" \t\n") != std::string::npos) {
          throw ConfigError("synth: phrase tokens must be single non-empty words");
        }
        if (!seen.insert(w).second) {
          throw ConfigError("synth: word '" + w + "' appears in more than one phrase set");
        }
      }
    }
  }
}

SynthGrammarConfig SynthGrammarConfig::from_json(const json& j) {
  SynthGrammarConfig c;
  try {
    c.num_aspects = j.value("num_aspects", c.num_aspects);
    c.filler_min = j.value("filler_min", c.filler_min);
    c.filler_max = j.value("filler_max", c.filler_max);
    c.adjectives_per_span = j.value("adjectives_per_span", c.adjectives_per_span);
    c.seed = j.value("seed", c.seed);
    if (j.contains("presence")) c.presence = j["presence"].get<std::vector<double>>();
    if (j.contains("filler")) c.filler = j["filler"].get<std::vector<std::string>>();
    if (j.contains("aspects")) {
      for (const auto& a : j["aspects"]) {
        c.aspects.push_back({a.value("name", std::string()), a.at("nouns").get<std::vector<std::string>>(),
                             a.at("positive").get<std::vector<std::string>>(),
                             a.at("negative").get<std::vector<std::string>>()});
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synth config: ") + e.what());
  }
  return c;
}

json SynthGrammarConfig::to_json() const {
  json aspects_json = json::array();
  for (const auto& a : aspects) {
    aspects_json.push_back({{"name", a.name}, {"nouns", a.nouns}, {"positive", a.positive}, {"negative", a.negative}});
  }
  json j = {{"num_aspects", num_aspects}, {"filler_min", filler_min},   {"filler_max", filler_max},
            {"adjectives_per_span", adjectives_per_span}, {"seed", seed}};
  if (!presence.empty()) j["presence"] = presence;
  if (!filler.empty()) j["filler"] = filler;
  if (!aspects.empty()) j["aspects"] = aspects_json;
  return j;
}

Dataset synth_generate(const SynthGrammarConfig& config, std::size_t n_examples) {
  config.validate();
  if (n_examples == 0) throw ConfigError("synth: number of examples must be at least 1");
  const auto c = config.resolved();
  const std::size_t k = c.num_aspects;
  Rng rng(c.seed, Stream::kData);

  Dataset ds;
  ds.num_aspects = k;
  ds.examples.reserve(n_examples);
  for (std::size_t n = 0; n < n_examples; ++n) {
    std::vector<bool> present(k);
    bool any = false;
    for (std::size_t i = 0; i < k; ++i) any = (present[i] = rng.bernoulli(c.presence[i])) || any;
    if (!any) {
      std::vector<std::size_t> candidates;
      for (std::size_t i = 0; i < k; ++i) {
        if (c.presence[i] > 0.0) candidates.push_back(i);
      }
      present[pick(candidates, rng)] = true;
    }

    // Chunks are single filler words or whole spans; owner -1 marks filler.
    struct Chunk {
      std::vector<std::string> words;
      int owner;
    };
    std::vector<Chunk> chunks;
    const std::size_t n_filler = c.filler_min + rng.uniform_int(c.filler_max - c.filler_min + 1);
    for (std::size_t f = 0; f < n_filler; ++f) chunks.push_back({{pick(c.filler, rng)}, -1});

    MultiAspectExample ex;
    ex.labels.resize(k);
    ex.rationales.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
      if (!present[i]) continue;
      const auto& lex = c.aspects[i];
      const bool positive = rng.bernoulli(0.5);
      ex.labels[i] = positive ? 1 : 0;
      Chunk span{{pick(lex.nouns, rng)}, static_cast<int>(i)};
      for (std::size_t a = 0; a < c.adjectives_per_span; ++a) {
        span.words.push_back(pick(positive ? lex.positive : lex.negative, rng));
      }
      chunks.push_back(std::move(span));
    }
    rng.shuffle(chunks);

    for (std::size_t i = 0; i < k; ++i) {
      if (present[i]) ex.rationales[i].emplace();
    }
    for (const auto& chunk : chunks) {
      for (const auto& w : chunk.words) {
        ex.tokens.push_back(w);
        for (std::size_t i = 0; i < k; ++i) {
          if (ex.rationales[i]) ex.rationales[i]->push_back(chunk.owner == static_cast<int>(i) ? 1 : 0);
        }
      }
    }
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

}  // namespace mare
