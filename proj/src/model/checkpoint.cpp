// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include "mare/checkpoint.hpp"

#include <algorithm>
#include <fstream>

#include "mare/error.hpp"

namespace mare {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "mare-checkpoint";
constexpr int kVersion = 1;

}  // namespace

json to_json(const MareConfig& c) {
  const auto& e = c.encoder;
  return {{"encoder",
           {{"num_layers", e.num_layers},
            {"num_heads", e.num_heads},
            {"model_dim", e.model_dim},
            {"ffn_dim", e.ffn_dim},
            {"vocab_size", e.vocab_size},
            {"max_len", e.max_len},
            {"normalizer", to_string(e.normalizer)}}},
          {"num_aspects", c.num_aspects},
          {"cliff_layer", c.cliff_layer},
          {"sparsity_targets", c.sparsity_targets},
          {"init_strategy", to_string(c.init_strategy)},
          {"gumbel_temperature", c.gumbel_temperature},
          {"num_classes", c.num_classes},
          {"deletion", to_string(c.deletion)},
          {"recompute_masks_per_layer", c.recompute_masks_per_layer}};
}

MareConfig mare_config_from_json(const json& j, MareConfig c) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  try {
    if (j.contains("encoder")) {
      const auto& e = j["encoder"];
      auto& d = c.encoder;
      d.num_layers = e.value("num_layers", d.num_layers);
      d.num_heads = e.value("num_heads", d.num_heads);
      d.model_dim = e.value("model_dim", d.model_dim);
      d.ffn_dim = e.value("ffn_dim", d.ffn_dim);
      d.vocab_size = e.value("vocab_size", d.vocab_size);
      d.max_len = e.value("max_len", d.max_len);
      if (e.contains("normalizer")) d.normalizer = parse_attention_normalizer(e["normalizer"].get<std::string>());
    }
    c.num_aspects = j.value("num_aspects", c.num_aspects);
    c.cliff_layer = j.value("cliff_layer", c.cliff_layer);
    if (j.contains("sparsity_targets")) c.sparsity_targets = j["sparsity_targets"].get<std::vector<double>>();
    if (j.contains("init_strategy")) c.init_strategy = parse_init_strategy(j["init_strategy"].get<std::string>());
    c.gumbel_temperature = j.value("gumbel_temperature", c.gumbel_temperature);
    c.num_classes = j.value("num_classes", c.num_classes);
    if (j.contains("deletion")) c.deletion = parse_deletion_mode(j["deletion"].get<std::string>());
    c.recompute_masks_per_layer = j.value("recompute_masks_per_layer", c.recompute_masks_per_layer);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

ParameterSnapshot snapshot_parameters(const MareModel& model) {
  ParameterSnapshot out;
  for (const auto& p : model.parameters()) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

void restore_parameters(const MareModel& model, const ParameterSnapshot& snapshot) {
  auto params = model.parameters();
  if (params.size() != snapshot.size()) throw ContractError("restore_parameters: snapshot does not match model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.mutable_values();
    if (dst.size() != snapshot[i].size()) throw ContractError("restore_parameters: size mismatch for " + params[i].name);
    std::copy(snapshot[i].begin(), snapshot[i].end(), dst.begin());
  }
}

json checkpoint_to_json(const MareModel& model, std::uint64_t seed, const Vocabulary& vocab, const json& metadata) {
  json params = json::array();
  for (const auto& p : model.parameters()) {
    params.push_back({{"name", p.name},
                      {"shape", p.tensor.shape()},
                      {"values", std::vector<double>(p.tensor.values().begin(), p.tensor.values().end())}});
  }
  return {{"format", kFormat},     {"version", kVersion},      {"config", to_json(model.config())},
          {"seed", seed},          {"vocab", vocab.tokens()},  {"metadata", metadata},
          {"parameters", params}};
}

Checkpoint checkpoint_from_json(const json& j) {
  if (!j.is_object() || j.value("format", std::string()) != kFormat) {
    throw SchemaError("not a MARE checkpoint");
  }
  if (j.value("version", 0) != kVersion) {
    throw SchemaError("unsupported checkpoint version " + j.value("version", json(nullptr)).dump());
  }
  Checkpoint ck;
  try {
    ck.seed = j.at("seed").get<std::uint64_t>();
    ck.vocab = Vocabulary(j.at("vocab").get<std::vector<std::string>>());
    ck.metadata = j.value("metadata", json::object());
    ck.model = std::make_unique<MareModel>(mare_config_from_json(j.at("config")), ck.seed);
    auto params = ck.model->parameters();
    const auto& stored = j.at("parameters");
    if (stored.size() != params.size()) {
      throw SchemaError("checkpoint has " + std::to_string(stored.size()) + " parameters, model expects " +
                        std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& s = stored[i];
      const auto name = s.at("name").get<std::string>();
      if (name != params[i].name) throw SchemaError("parameter " + std::to_string(i) + " is '" + name + "', expected '" +
                                                    params[i].name + "'");
      if (s.at("shape").get<numerics::Shape>() != params[i].tensor.shape()) {
        throw SchemaError("parameter '" + name + "' has the wrong shape");
      }
      const auto values = s.at("values").get<std::vector<double>>();
      auto dst = params[i].tensor.mutable_values();
      if (values.size() != dst.size()) throw SchemaError("parameter '" + name + "' has the wrong number of values");
      std::copy(values.begin(), values.end(), dst.begin());
    }
  } catch (const json::exception& e) {
    throw SchemaError(std::string("checkpoint: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const std::string& path, const MareModel& model, std::uint64_t seed, const Vocabulary& vocab,
                     const json& metadata) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
  out << checkpoint_to_json(model, seed, vocab, metadata).dump() << '\n';
  if (!out) throw Error("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw SchemaError(path + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace mare
