// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include <chrono>
#include <cmath>
#include <fstream>

#include "mare/checkpoint.hpp"
#include "mare/error.hpp"
#include "mare/eval.hpp"
#include "mare/ops.hpp"
#include "mare/training.hpp"

namespace mare {

namespace nx = numerics;
using nlohmann::json;

const char* to_string(TrainingMode mode) {
  return mode == TrainingMode::kMultitask ? "multitask" : "collaborative";
}

TrainingMode parse_training_mode(const std::string& text) {
  if (text == "multitask") return TrainingMode::kMultitask;
  if (text == "collaborative") return TrainingMode::kCollaborative;
  throw ConfigError("unknown training mode '" + text + "' (expected multitask|collaborative)");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  loss_weights.validate();
  for (double l : sparsity_targets) {
    if (!(l >= 0.0 && l <= 1.0)) throw ConfigError("sparsity targets must lie in [0, 1]");
  }
}

json to_json(const TrainConfig& c) {
  json j = {{"learning_rate", c.learning_rate},
            {"weight_decay", c.weight_decay},
            {"batch_size", c.batch_size},
            {"max_epochs", c.max_epochs},
            {"seed", c.seed},
            {"mode", to_string(c.mode)},
            {"beta", c.loss_weights.beta},
            {"gamma", c.loss_weights.gamma},
            {"mask_losses_all_layers", c.mask_losses_all_layers},
            {"max_steps_per_epoch", c.max_steps_per_epoch}};
  if (!c.sparsity_targets.empty()) j["sparsity_targets"] = c.sparsity_targets;
  return j;
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.seed = j.value("seed", c.seed);
    if (j.contains("mode")) c.mode = parse_training_mode(j["mode"].get<std::string>());
    c.loss_weights.beta = j.value("beta", c.loss_weights.beta);
    c.loss_weights.gamma = j.value("gamma", c.loss_weights.gamma);
    c.mask_losses_all_layers = j.value("mask_losses_all_layers", c.mask_losses_all_layers);
    c.max_steps_per_epoch = j.value("max_steps_per_epoch", c.max_steps_per_epoch);
    if (j.contains("sparsity_targets")) c.sparsity_targets = j["sparsity_targets"].get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("training config: ") + e.what());
  }
  return c;
}

namespace {

json optional_array(const std::vector<std::optional<double>>& values) {
  json out = json::array();
  for (const auto& v : values) out.push_back(v ? json(*v) : json(nullptr));
  return out;
}

}  // namespace

json EpochMetrics::to_json() const {
  return {{"epoch", epoch},
          {"steps", steps},
          {"loss", loss},
          {"ce", ce},
          {"sparse", sparse},
          {"cont", cont},
          {"val_acc", optional_array(val_acc)},
          {"val_sparsity", optional_array(val_sparsity)},
          {"train_sparsity", train_sparsity},
          {"mask_computations", mask_computations},
          {"wall_ms", wall_ms},
          {"peak_live_bytes", peak_live_bytes}};
}

MetricsLog::MetricsLog(std::string path) : path_(std::move(path)) {
  std::ofstream out(path_, std::ios::trunc);
  if (!out) throw Error("cannot write metrics log '" + path_ + "'");
}

void MetricsLog::append(const EpochMetrics& metrics) const {
  std::ofstream out(path_, std::ios::app);
  out << metrics.to_json().dump() << '\n';
  if (!out) throw Error("failed writing metrics log '" + path_ + "'");
}

namespace {

// Mask losses over the final mask, or averaged over every masked layer.
std::pair<Tensor, Tensor> mask_losses(const MareOutput& out, std::span<const double> targets, bool all_layers) {
  if (!all_layers) {
    return {sparsity_loss(out.final_mask(), out.lengths, targets), continuity_loss(out.final_mask(), out.lengths)};
  }
  Tensor sp, ct;
  for (const auto& m : out.layer_masks) {
    const auto s = sparsity_loss(m, out.lengths, targets);
    const auto c = continuity_loss(m, out.lengths);
    sp = sp.defined() ? nx::add(sp, s) : s;
    ct = ct.defined() ? nx::add(ct, c) : c;
  }
  const double inv = 1.0 / static_cast<double>(out.layer_masks.size());
  return {nx::scale(sp, inv), nx::scale(ct, inv)};
}

}  // namespace

TrainResult train(const MareModel& model, const EncodedDataset& data, const EncodedDataset* val,
                  const TrainConfig& config, const TrainCallbacks& callbacks) {
  config.validate();
  const auto& mc = model.config();
  const std::size_t k = mc.num_aspects;
  if (data.num_aspects != k) {
    throw ConfigError("dataset has " + std::to_string(data.num_aspects) + " aspects, model has " + std::to_string(k));
  }
  const auto targets = config.sparsity_targets.empty() ? mc.sparsity_targets : config.sparsity_targets;
  if (targets.size() != k) throw ConfigError("expected one sparsity target per aspect");

  std::vector<Tensor> params;
  for (const auto& p : model.parameters()) params.push_back(p.tensor);
  AdamW opt(params, {.learning_rate = config.learning_rate, .weight_decay = config.weight_decay});
  opt.zero_grad();

  Rng shuffle_rng(config.seed, Stream::kShuffle);
  Rng gumbel_rng(config.seed, Stream::kGumbel);
  auto last_good = snapshot_parameters(model);

  TrainResult result;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    EpochMetrics em;
    em.epoch = epoch;
    nx::reset_peak_live_tensor_bytes();
    model.reset_mask_computations();
    std::vector<double> selected(k, 0.0), seen(k, 0.0);
    const auto start = std::chrono::steady_clock::now();

    const auto schedule = balanced_round_robin(aspect_batch_streams(data, config.batch_size, shuffle_rng), shuffle_rng);
    for (const auto& item : schedule) {
      if (config.max_steps_per_epoch && em.steps >= config.max_steps_per_epoch) break;
      const auto batch = make_batch(data, item.examples);
      const std::size_t B = batch.size();
      const ForwardOptions fo{.stochastic = true, .gumbel_rng = &gumbel_rng};
      MareOutput out;
      Tensor ce;
      std::vector<double> step_targets;
      if (config.mode == TrainingMode::kMultitask) {
        out = model.forward_multitask(batch, item.aspect, fo);
        std::vector<std::size_t> labels;
        for (auto n : item.examples) labels.push_back(*data.labels[n][item.aspect]);
        ce = cross_entropy(nx::reshape(out.logits, {B, mc.num_classes}), labels);
        step_targets = {targets[item.aspect]};
      } else {
        out = model.forward_collaborative(batch, fo);
        std::vector<std::size_t> rows, labels;
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t a = 0; a < k; ++a) {
            if (const auto& y = data.labels[item.examples[b]][a]) {
              rows.push_back(b * k + a);
              labels.push_back(*y);
            }
          }
        }
        const auto flat = nx::reshape(out.logits, {B * k, mc.num_classes});
        ce = cross_entropy(nx::embedding(flat, rows, {rows.size()}), labels);
        step_targets = targets;
      }
      const auto [sp, ct] = mask_losses(out, step_targets, config.mask_losses_all_layers);

      LossBreakdown loss;
      try {
        loss = total_loss(ce, sp, ct, config.loss_weights);
      } catch (const DivergenceError& e) {
        restore_parameters(model, last_good);
        throw DivergenceError("epoch " + std::to_string(epoch) + ", step " + std::to_string(em.steps + 1) + ": " +
                              e.what() + "; parameters restored to the end of epoch " + std::to_string(epoch - 1));
      }
      nx::backward(loss.total);
      opt.step();
      opt.zero_grad();

      ++em.steps;
      em.loss += loss.total.item();
      em.ce += loss.ce;
      em.sparse += loss.sparse;
      em.cont += loss.cont;
      const auto& m = out.final_mask();
      const std::size_t L = m.dim(2), kp = m.dim(1);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < kp; ++i) {
          const std::size_t a = out.aspects[i];
          for (std::size_t t = 0; t < batch.lengths[b]; ++t) selected[a] += m[(b * kp + i) * L + t];
          seen[a] += static_cast<double>(batch.lengths[b]);
        }
      }
    }
    em.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    em.peak_live_bytes = static_cast<std::size_t>(nx::peak_live_tensor_bytes());
    em.mask_computations = model.mask_computations();
    if (em.steps > 0) {
      const double inv = 1.0 / static_cast<double>(em.steps);
      em.loss *= inv;
      em.ce *= inv;
      em.sparse *= inv;
      em.cont *= inv;
    }
    for (std::size_t a = 0; a < k; ++a) em.train_sparsity.push_back(seen[a] > 0 ? selected[a] / seen[a] : 0.0);

    if (val != nullptr && val->size() > 0) {
      const auto report = evaluate(model, *val, {.mode = config.mode, .keep_examples = false});
      for (const auto& a : report.aspects) {
        em.val_acc.push_back(a.accuracy);
        em.val_sparsity.push_back(a.sparsity);
      }
    }
    last_good = snapshot_parameters(model);
    result.epochs.push_back(em);
    if (callbacks.on_epoch) callbacks.on_epoch(em);
    if (callbacks.should_stop && callbacks.should_stop(em)) break;
  }
  return result;
}

}  // namespace mare
