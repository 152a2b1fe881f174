// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mare/data.hpp"
#include "mare/model.hpp"

namespace mare {

struct LossWeights {
  double beta = 0.7;   // sparsity
  double gamma = 0.7;  // continuity

  void validate() const;
};

enum class TrainingMode { kMultitask, kCollaborative };

const char* to_string(TrainingMode mode);
TrainingMode parse_training_mode(const std::string& text);

// ---- losses ---------------------------------------------------------------

// Mean negative log-likelihood over the rows of logits [N, C].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

// Masks [batch, k', L] over the real tokens of each row (`lengths`; empty
// span means unpadded). Mean over (row, aspect) of |mean_t m - target|.
Tensor sparsity_loss(const Tensor& masks, std::span<const std::size_t> lengths, std::span<const double> targets);
// Mean over (row, aspect) of the number of 0/1 transitions divided by
// (length - 1).
Tensor continuity_loss(const Tensor& masks, std::span<const std::size_t> lengths);

struct LossBreakdown {
  Tensor total;
  double ce = 0.0, sparse = 0.0, cont = 0.0;
};

// ce + beta * sparse + gamma * cont. Throws DivergenceError when any
// component is not finite.
LossBreakdown total_loss(const Tensor& ce, const Tensor& sparse, const Tensor& cont, const LossWeights& weights);

// ---- sampling -------------------------------------------------------------

struct ScheduledBatch {
  std::size_t aspect = 0;
  std::vector<std::size_t> examples;
};

// Interleaves per-aspect batch streams as aspect 0, 1, ..., k-1, 0, ...
// until the longest stream has been emitted once. A shorter stream that runs
// out is reshuffled (batch order, using rng) and replayed, so every aspect
// emits exactly max_i |stream_i| batches per epoch.
std::vector<ScheduledBatch> balanced_round_robin(const std::vector<std::vector<std::vector<std::size_t>>>& streams,
                                                 Rng& rng);

// Per-aspect streams: the examples labelled for that aspect, shuffled, cut
// into batches of at most batch_size.
std::vector<std::vector<std::vector<std::size_t>>> aspect_batch_streams(const EncodedDataset& data,
                                                                        std::size_t batch_size, Rng& rng);

// ---- optimiser ------------------------------------------------------------

// Adam with decoupled weight decay.
class AdamW {
 public:
  struct Options {
    double learning_rate = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW(std::vector<Tensor> params, Options options);

  void step();
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  Options options_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// ---- training loop --------------------------------------------------------

struct TrainConfig {
  double learning_rate = 3e-3;
  double weight_decay = 0.0;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 10;
  std::uint64_t seed = 1;
  TrainingMode mode = TrainingMode::kMultitask;
  LossWeights loss_weights;
  std::vector<double> sparsity_targets;  // empty: the model's targets
  // Apply the mask losses to every masked layer (averaged) instead of only
  // the final one.
  bool mask_losses_all_layers = false;
  // Stop after this many optimiser steps per epoch (0 = whole epoch).
  std::size_t max_steps_per_epoch = 0;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig defaults = {});

struct EpochMetrics {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double loss = 0.0, ce = 0.0, sparse = 0.0, cont = 0.0;  // means over steps
  std::vector<std::optional<double>> val_acc;             // per aspect
  std::vector<std::optional<double>> val_sparsity;        // per aspect
  std::vector<double> train_sparsity;                     // per aspect, sampled masks
  std::size_t mask_computations = 0;
  double wall_ms = 0.0;  // optimisation only, validation excluded
  std::size_t peak_live_bytes = 0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
};

struct TrainCallbacks {
  std::function<void(const EpochMetrics&)> on_epoch;
  // Checked after on_epoch; returning true ends training early.
  std::function<bool(const EpochMetrics&)> should_stop;
};

// Trains in place. Validation (when `val` is non-null and non-empty) uses
// the deterministic argmax masks in the same forward mode. On a non-finite
// loss the parameters are rolled back to the end of the last completed epoch
// and DivergenceError is thrown.
TrainResult train(const MareModel& model, const EncodedDataset& train_data, const EncodedDataset* val,
                  const TrainConfig& config, const TrainCallbacks& callbacks = {});

// Appends one JSON object per epoch to a line-delimited file.
class MetricsLog {
 public:
  explicit MetricsLog(std::string path);
  void append(const EpochMetrics& metrics) const;
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

// Builds a padded batch from example indices.
TokenBatch make_batch(const EncodedDataset& data, std::span<const std::size_t> indices);

}  // namespace mare
