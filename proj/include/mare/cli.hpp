// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>

#include "json.hpp"
#include "mare/data.hpp"
#include "mare/model.hpp"
#include "mare/training.hpp"

namespace mare::cli {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;

// Everything a run can be configured with. The config file is one JSON
// object whose sections are all optional:
//   {"synth": {<grammar>, "n_examples": 10000},
//    "model": {<model config>},
//    "train": {<training config>},
//    "data":  {"train": path, "val": path, "test": path}}
// Command-line flags override file values.
struct RunConfig {
  SynthGrammarConfig synth;
  std::size_t n_examples = 10000;
  MareConfig model;
  TrainConfig train;
  std::string train_path, val_path, test_path;

  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

RunConfig load_run_config(const std::string& path);

// Fits a model config to its training data: number of aspects and classes,
// vocabulary size, and max_len (at least the longest example plus k). When
// the targets were not given explicitly they are broadcast to k aspects.
void fit_model_config(MareConfig& model, const Dataset& train, const Dataset* val, const Vocabulary& vocab,
                      bool targets_from_user);

// Seed precedence: explicit flag, then the config file, then MARE_SEED, then 1.
std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::optional<std::uint64_t> from_config);

// "mare <version>[-<git describe>]".
std::string version_string();

// Stable 64-bit FNV-1a of the compact JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);

// Writes <out_dir>/manifest.json (creating out_dir) and returns its content.
nlohmann::json write_manifest(const std::string& out_dir, const std::string& command, const std::string& config_path,
                              const nlohmann::json& resolved_config, std::uint64_t seed);

// Rationale of one example rendered inline: selected spans wrapped as
// <A{aspect}>...</A{aspect}>, or "(none)" when nothing is selected.
std::string render_inline(const std::vector<std::string>& tokens, const std::vector<std::uint8_t>& selection,
                          std::size_t aspect);

// Entry point of the `mare` tool. Returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mare::cli
