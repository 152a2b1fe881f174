// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mare/data.hpp"
#include "mare/model.hpp"
#include "mare/training.hpp"

namespace mare {

// ---- token metrics ----------------------------------------------------------

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct PrfCounts {
  std::size_t tp = 0, fp = 0, fn = 0;

  // Throws DimensionError on a length mismatch.
  void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gold);
  Prf prf() const;
};

// P = TP/(TP+FP) (0 without predictions), R = TP/(TP+FN) (0 without gold),
// F1 = 2PR/(P+R) (0 when P+R = 0).
Prf prf_from_counts(std::size_t tp, std::size_t fp, std::size_t fn);
Prf token_prf(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gold);
// Total selected over total tokens. Throws ContractError on an empty corpus.
double sparsity(const std::vector<std::vector<std::uint8_t>>& masks);

enum class Aggregation { kMicro, kMacro };

// ---- predictions and reports ---------------------------------------------

// Model decisions on every (example, aspect), masks over real tokens.
struct Predictions {
  std::vector<std::vector<std::size_t>> labels;                // [n][k]
  std::vector<std::vector<std::vector<std::uint8_t>>> masks;   // [n][k][len]
};

// Deterministic (argmax) masks in the given forward mode. Runs without
// recording gradients.
Predictions predict(const MareModel& model, const EncodedDataset& data, TrainingMode mode,
                    std::size_t batch_size = 64);

struct AspectMetrics {
  std::size_t aspect = 0;
  std::size_t labeled = 0;    // examples with a label (ACC denominator)
  std::size_t annotated = 0;  // examples with a gold rationale (P/R/F1)
  std::size_t tokens = 0;     // tokens of relevant examples (S denominator)
  std::size_t selected = 0;
  std::optional<double> sparsity, accuracy, precision, recall, f1;
};

struct ExampleSpans {
  std::size_t index = 0;
  // Per aspect: inclusive token spans and the predicted class.
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> spans;
  std::vector<std::size_t> predicted;
};

struct RunMetadata {
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string mode;
  std::string deletion;
  std::string init;
};

struct RationaleReport {
  std::vector<AspectMetrics> aspects;
  std::optional<double> avg_f1;  // over aspects with gold rationales
  std::vector<ExampleSpans> examples;
  RunMetadata meta;
  nlohmann::json diagnostics = nlohmann::json::object();

  bool has_gold() const;
};

// Scores predictions against the dataset. S counts the examples that carry a
// label or a rationale for the aspect; ACC uses labelled examples; P/R/F1
// use annotated examples only.
RationaleReport score(const Predictions& predictions, const EncodedDataset& data,
                      Aggregation aggregation = Aggregation::kMicro, bool keep_examples = true);

struct EvalOptions {
  TrainingMode mode = TrainingMode::kMultitask;
  std::size_t batch_size = 64;
  Aggregation aggregation = Aggregation::kMicro;
  bool keep_examples = true;
};

RationaleReport evaluate(const MareModel& model, const EncodedDataset& data, const EvalOptions& options = {});

// ---- rendering -------------------------------------------------------------

enum class ReportFormat { kJson, kCsv, kMarkdown };
ReportFormat parse_report_format(const std::string& text);

// One row of percentages rounded to one decimal: for each aspect S, ACC, P,
// R, F1, then Avg F1. Missing values are nullopt.
struct ReportTable {
  std::vector<std::string> columns;
  std::vector<std::optional<double>> values;

  bool operator==(const ReportTable&) const = default;
};

ReportTable report_table(const RationaleReport& report);
// Throws ContractError for a report without aspects or examples scored.
std::string render_report(const RationaleReport& report, ReportFormat format);
nlohmann::json report_to_json(const RationaleReport& report);
ReportTable table_from_json(const nlohmann::json& j);
ReportTable table_from_csv(const std::string& text);
std::string render_table(const ReportTable& table, ReportFormat format);

// ---- probes and experiments ---------------------------------------------------

struct ProbeResult {
  bool skipped = false;
  std::string notice;
  std::size_t aspect_a = 0, aspect_b = 0;
  std::size_t perturbed_tokens = 0;  // selected by b but never by a
  std::size_t deleted_tokens = 0;    // selected by no aspect at the cliff layer
  double leakage = 0.0;              // max |change| in aspect-a logits
  double deleted_drift = 0.0;        // max |change| in deleted tokens' final states

  nlohmann::json to_json() const;
};

// Runs one example through the collaborative forward with the MAC frozen
// (its masks, or `crafted_masks` when given, one [1, k, L] per masked
// layer). Two perturbations of the hidden states entering the cliff layer
// are measured: noise on tokens selected by aspect b only (leakage into
// aspect a's logits) and noise on every retained token (drift of the
// deleted tokens' final states). Skipped when the perturbation could reach
// aspect a through shared tokens of the masks, or when there is nothing
// to perturb.
ProbeResult deletion_completeness_probe(const MareModel& model, std::span<const std::size_t> token_ids,
                                        std::size_t aspect_a, std::size_t aspect_b, Rng& rng,
                                        const std::vector<Tensor>* crafted_masks = nullptr,
                                        double noise_scale = 1.0);

struct ResourceRow {
  std::string mode;
  std::size_t mask_computations = 0;
  double wall_ms = 0.0;
  std::size_t peak_live_bytes = 0;
  std::optional<double> mean_val_acc;
};

struct ResourceComparison {
  std::vector<ResourceRow> rows;  // multitask, collaborative
  double counter_ratio = 0.0;
  bool ratio_matches_k = false;
  bool multitask_faster = false;

  nlohmann::json to_json() const;
};

// One training epoch per mode from identical initial weights and seeds.
ResourceComparison resource_compare(const MareConfig& model_config, std::uint64_t model_seed,
                                    const EncodedDataset& train_data, const EncodedDataset* val,
                                    TrainConfig train_config);

struct SeedRun {
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  std::vector<std::optional<double>> f1;  // per aspect
};

struct StabilityReport {
  std::vector<SeedRun> runs;
  std::vector<std::optional<double>> mean_f1, std_f1;  // per aspect, over successful runs

  nlohmann::json to_json() const;
};

// Trains a fresh model per seed (model and training seed both set to it)
// and scores it on `eval_data`.
StabilityReport multi_seed_stability(const MareConfig& model_config, const EncodedDataset& train_data,
                                     const EncodedDataset* val, const EncodedDataset& eval_data,
                                     const TrainConfig& train_config, std::span<const std::uint64_t> seeds);

}  // namespace mare
