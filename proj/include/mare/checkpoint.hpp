// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "mare/data.hpp"
#include "mare/model.hpp"

namespace mare {

nlohmann::json to_json(const MareConfig& config);
// Fields absent from `j` keep their value in `defaults`. Throws ConfigError.
MareConfig mare_config_from_json(const nlohmann::json& j, MareConfig defaults = {});

// Parameter values in MareModel::parameters() order.
using ParameterSnapshot = std::vector<std::vector<double>>;
ParameterSnapshot snapshot_parameters(const MareModel& model);
void restore_parameters(const MareModel& model, const ParameterSnapshot& snapshot);

struct Checkpoint {
  std::unique_ptr<MareModel> model;
  Vocabulary vocab;
  std::uint64_t seed = 0;
  nlohmann::json metadata;
};

// JSON document {"format": "mare-checkpoint", "version": 1, "config", "seed",
// "vocab", "metadata", "parameters": [{"name", "shape", "values"}]}.
nlohmann::json checkpoint_to_json(const MareModel& model, std::uint64_t seed, const Vocabulary& vocab,
                                  const nlohmann::json& metadata = nlohmann::json::object());
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const std::string& path, const MareModel& model, std::uint64_t seed, const Vocabulary& vocab,
                     const nlohmann::json& metadata = nlohmann::json::object());
Checkpoint load_checkpoint(const std::string& path);

}  // namespace mare
