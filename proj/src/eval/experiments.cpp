// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <set>

#include "mare/error.hpp"
#include "mare/eval.hpp"
#include "mare/ops.hpp"

namespace mare {

namespace nx = numerics;
using nlohmann::json;

json ProbeResult::to_json() const {
  return {{"skipped", skipped},
          {"notice", notice},
          {"aspect_a", aspect_a},
          {"aspect_b", aspect_b},
          {"perturbed_tokens", perturbed_tokens},
          {"deleted_tokens", deleted_tokens},
          {"leakage", leakage},
          {"deleted_drift", deleted_drift}};
}

ProbeResult deletion_completeness_probe(const MareModel& model, std::span<const std::size_t> token_ids,
                                        std::size_t aspect_a, std::size_t aspect_b, Rng& rng,
                                        const std::vector<Tensor>* crafted_masks, double noise_scale) {
  const auto& cfg = model.config();
  const std::size_t k = cfg.num_aspects, L = token_ids.size(), d = cfg.encoder.model_dim;
  if (aspect_a >= k || aspect_b >= k || aspect_a == aspect_b) {
    throw ContractError("probe: aspects must be two distinct indices below k");
  }
  if (L == 0) throw ContractError("probe: empty example");
  nx::NoGradGuard no_grad;
  ProbeResult r;
  r.aspect_a = aspect_a;
  r.aspect_b = aspect_b;

  TokenBatch batch;
  batch.ids.assign(token_ids.begin(), token_ids.end());
  batch.lengths = {L};

  std::vector<Tensor> masks;
  if (crafted_masks) {
    masks = *crafted_masks;
  } else {
    masks = model.forward_collaborative(batch, {.stochastic = false}).layer_masks;
  }
  const std::size_t layers = cfg.encoder.num_layers - cfg.cliff_layer + 1;
  if (masks.size() != layers) throw ContractError("probe: expected one mask per masked layer");

  auto selects = [&](std::size_t layer, std::size_t aspect, std::size_t t) { return masks[layer][aspect * L + t] != 0.0; };

  // Tokens selected by b, never by a, in any masked layer.
  std::vector<std::size_t> perturbed, deleted, retained;
  for (std::size_t t = 0; t < L; ++t) {
    bool by_a = false, by_b = false, by_any = false, at_cliff = false;
    for (std::size_t l = 0; l < layers; ++l) {
      for (std::size_t j = 0; j < k; ++j) {
        const bool s = selects(l, j, t);
        by_any = by_any || s;
        if (l == 0) at_cliff = at_cliff || s;
      }
      by_a = by_a || selects(l, aspect_a, t);
      by_b = by_b || selects(l, aspect_b, t);
    }
    if (by_b && !by_a) perturbed.push_back(t);
    if (!by_any) deleted.push_back(t);
    if (at_cliff) retained.push_back(t);
  }
  r.perturbed_tokens = perturbed.size();
  r.deleted_tokens = deleted.size();

  // Positions that can carry the perturbation, layer by layer, through
  // tokens sharing an aspect. Position j < k is special token j.
  std::vector<char> reached(k + L, 0);
  for (auto t : perturbed) reached[k + t] = 1;
  for (std::size_t l = 0; l < layers; ++l) {
    std::set<std::size_t> live;
    for (std::size_t p = 0; p < k + L; ++p) {
      if (!reached[p]) continue;
      if (p < k) {
        live.insert(p);
      } else {
        for (std::size_t j = 0; j < k; ++j) {
          if (selects(l, j, p - k)) live.insert(j);
        }
      }
    }
    for (auto j : live) reached[j] = 1;
    for (std::size_t t = 0; t < L; ++t) {
      for (auto j : live) {
        if (selects(l, j, t)) reached[k + t] = 1;
      }
    }
  }

  const ForwardOptions base_opts{.stochastic = false, .frozen_masks = &masks, .record_hidden = true};
  const auto base = model.forward_collaborative(batch, base_opts);
  const auto noise = nx::sample_gumbel_noise({1, k + L, d}, rng);  // any fixed noise will do

  auto perturb = [&](const std::vector<std::size_t>& rows) {
    std::vector<double> delta(noise.numel(), 0.0);
    for (auto t : rows) {
      for (std::size_t c = 0; c < d; ++c) delta[(k + t) * d + c] = noise_scale * noise[(k + t) * d + c];
    }
    const auto offset = Tensor::from({1, k + L, d}, std::move(delta));
    ForwardOptions o = base_opts;
    o.hidden_hook = [&, offset](std::size_t layer, const Tensor& h) {
      return layer == cfg.cliff_layer ? nx::add(h, offset) : h;
    };
    return model.forward_collaborative(batch, o);
  };

  if (!deleted.empty() && !retained.empty()) {
    const auto moved = perturb(retained);
    const auto& h0 = base.hidden.back();
    const auto& h1 = moved.hidden.back();
    for (auto t : deleted) {
      for (std::size_t c = 0; c < d; ++c) {
        r.deleted_drift = std::max(r.deleted_drift, std::abs(h0[(k + t) * d + c] - h1[(k + t) * d + c]));
      }
    }
  }

  if (perturbed.empty()) {
    r.skipped = true;
    r.notice = "no tokens are selected exclusively by aspect " + std::to_string(aspect_b);
    return r;
  }
  if (reached[aspect_a]) {
    r.skipped = true;
    r.notice = "aspects " + std::to_string(aspect_a) + " and " + std::to_string(aspect_b) +
               " are not disjoint on this example";
    return r;
  }
  const auto moved = perturb(perturbed);
  const std::size_t C = cfg.num_classes;
  for (std::size_t c = 0; c < C; ++c) {
    r.leakage = std::max(r.leakage, std::abs(base.logits[aspect_a * C + c] - moved.logits[aspect_a * C + c]));
  }
  return r;
}

json ResourceComparison::to_json() const {
  json out = json::array();
  for (const auto& r : rows) {
    out.push_back({{"mode", r.mode},
                   {"mask_computations", r.mask_computations},
                   {"wall_ms", r.wall_ms},
                   {"peak_live_bytes", r.peak_live_bytes},
                   {"mean_val_acc", r.mean_val_acc ? json(*r.mean_val_acc) : json(nullptr)}});
  }
  return {{"rows", out},
          {"counter_ratio", counter_ratio},
          {"ratio_matches_k", ratio_matches_k},
          {"multitask_faster", multitask_faster}};
}

ResourceComparison resource_compare(const MareConfig& model_config, std::uint64_t model_seed,
                                    const EncodedDataset& train_data, const EncodedDataset* val,
                                    TrainConfig train_config) {
  ResourceComparison out;
  train_config.max_epochs = 1;
  for (auto mode : {TrainingMode::kMultitask, TrainingMode::kCollaborative}) {
    MareModel model(model_config, model_seed);
    train_config.mode = mode;
    const auto result = train(model, train_data, val, train_config);
    const auto& e = result.epochs.front();
    ResourceRow row{to_string(mode), e.mask_computations, e.wall_ms, e.peak_live_bytes, std::nullopt};
    double acc = 0.0;
    std::size_t n = 0;
    for (const auto& v : e.val_acc) {
      if (v) {
        acc += *v;
        ++n;
      }
    }
    if (n) row.mean_val_acc = acc / static_cast<double>(n);
    out.rows.push_back(row);
  }
  const auto& mt = out.rows[0];
  const auto& co = out.rows[1];
  if (mt.mask_computations > 0) {
    out.counter_ratio = static_cast<double>(co.mask_computations) / static_cast<double>(mt.mask_computations);
  }
  out.ratio_matches_k = co.mask_computations == model_config.num_aspects * mt.mask_computations;
  out.multitask_faster = mt.wall_ms <= co.wall_ms;
  return out;
}

json StabilityReport::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json rs = json::array();
  for (const auto& r : runs) {
    json f1 = json::array();
    for (const auto& v : r.f1) f1.push_back(opt(v));
    rs.push_back({{"seed", r.seed}, {"failed", r.failed}, {"error", r.error}, {"f1", f1}});
  }
  json mean = json::array(), sd = json::array();
  for (const auto& v : mean_f1) mean.push_back(opt(v));
  for (const auto& v : std_f1) sd.push_back(opt(v));
  return {{"runs", rs}, {"mean_f1", mean}, {"std_f1", sd}};
}

StabilityReport multi_seed_stability(const MareConfig& model_config, const EncodedDataset& train_data,
                                     const EncodedDataset* val, const EncodedDataset& eval_data,
                                     const TrainConfig& train_config, std::span<const std::uint64_t> seeds) {
  if (seeds.size() < 2) throw ConfigError("multi_seed_stability needs at least 2 seeds");
  StabilityReport out;
  const std::size_t k = model_config.num_aspects;
  for (auto seed : seeds) {
    SeedRun run;
    run.seed = seed;
    try {
      MareModel model(model_config, seed);
      auto tc = train_config;
      tc.seed = seed;
      train(model, train_data, val, tc);
      const auto report = evaluate(model, eval_data, {.mode = tc.mode, .keep_examples = false});
      for (const auto& a : report.aspects) run.f1.push_back(a.f1);
    } catch (const Error& e) {
      run.failed = true;
      run.error = e.what();
      run.f1.assign(k, std::nullopt);
    }
    out.runs.push_back(run);
  }
  for (std::size_t a = 0; a < k; ++a) {
    std::vector<double> xs;
    for (const auto& r : out.runs) {
      if (!r.failed && r.f1[a]) xs.push_back(*r.f1[a]);
    }
    if (xs.empty()) {
      out.mean_f1.emplace_back();
      out.std_f1.emplace_back();
      continue;
    }
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    out.mean_f1.emplace_back(mean);
    out.std_f1.emplace_back(xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0);
  }
  return out;
}

}  // namespace mare
