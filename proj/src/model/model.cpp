// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include "mare/model.hpp"

#include <algorithm>
#include <cmath>

#include "mare/error.hpp"
#include "mare/ops.hpp"

namespace mare {

namespace nx = numerics;

namespace {

constexpr double kInitStd = 0.02;
// Special-token rows are drawn from their own stream so that every init
// strategy shares the remaining parameters bit-for-bit.
constexpr std::uint64_t kSpecialStream = 0x5e5c1a1ULL;

}  // namespace

const char* to_string(InitStrategy strategy) {
  switch (strategy) {
    case InitStrategy::kRandom:
      return "random";
    case InitStrategy::kCls:
      return "cls";
    case InitStrategy::kShare:
      return "share";
  }
  return "?";
}

InitStrategy parse_init_strategy(const std::string& text) {
  if (text == "random") return InitStrategy::kRandom;
  if (text == "cls") return InitStrategy::kCls;
  if (text == "share") return InitStrategy::kShare;
  throw ConfigError("unknown init strategy '" + text + "' (expected random|cls|share)");
}

void MareConfig::validate() const {
  if (num_aspects == 0) throw ConfigError("num_aspects must be positive");
  encoder.validate(num_aspects);
  if (cliff_layer < 1 || cliff_layer > encoder.num_layers) {
    throw ConfigError("cliff_layer must lie in [1, " + std::to_string(encoder.num_layers) + "], got " +
                      std::to_string(cliff_layer));
  }
  if (sparsity_targets.size() != num_aspects) {
    throw ConfigError("expected " + std::to_string(num_aspects) + " sparsity targets, got " +
                      std::to_string(sparsity_targets.size()));
  }
  for (double l : sparsity_targets) {
    if (!(l >= 0.0 && l <= 1.0)) throw ConfigError("sparsity targets must lie in [0, 1]");
  }
  if (!(gumbel_temperature > 0.0) || !std::isfinite(gumbel_temperature)) {
    throw ConfigError("gumbel_temperature must be positive");
  }
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
}

Tensor init_special_tokens(InitStrategy strategy, std::size_t num_aspects, const Tensor& base, Rng& rng) {
  const std::size_t d = base.numel();
  const auto b = base.values();
  Tensor out;
  switch (strategy) {
    case InitStrategy::kShare:
      out = Tensor::from({1, d}, std::vector<double>(b.begin(), b.end()), true);
      break;
    case InitStrategy::kCls: {
      std::vector<double> rows;
      for (std::size_t i = 0; i < num_aspects; ++i) rows.insert(rows.end(), b.begin(), b.end());
      out = Tensor::from({num_aspects, d}, std::move(rows), true);
      break;
    }
    case InitStrategy::kRandom: {
      std::vector<double> rows(b.begin(), b.end());
      for (std::size_t i = 1; i < num_aspects; ++i) {
        for (std::size_t j = 0; j < d; ++j) rows.push_back(kEmbeddingInitStd * rng.normal());
      }
      out = Tensor::from({num_aspects, d}, std::move(rows), true);
      break;
    }
  }
  out.set_name("special_tokens");
  return out;
}

MareModel::MareModel(MareConfig config, std::uint64_t seed)
    : MareModel((config.validate(), std::move(config)), Rng(seed, Stream::kInit), seed) {}

MareModel::MareModel(MareConfig config, Rng init, std::uint64_t seed)
    : config_(std::move(config)), embedder_(config_.encoder, init) {
  const auto& enc = config_.encoder;
  for (std::size_t i = 1; i <= enc.num_layers; ++i) layers_.emplace_back(enc, i, init);
  projections_ = AspectProjections(config_.num_aspects, enc.model_dim, init);
  final_gamma_ = constant_parameter({enc.model_dim}, 1.0, "final_ln.gamma");
  final_beta_ = constant_parameter({enc.model_dim}, 0.0, "final_ln.beta");
  for (std::size_t j = 0; j < config_.num_aspects; ++j) {
    const std::string p = "head.aspect" + std::to_string(j) + ".";
    head_weight_.push_back(normal_parameter({enc.model_dim, config_.num_classes}, kInitStd, init, p + "weight"));
    head_bias_.push_back(constant_parameter({config_.num_classes}, 0.0, p + "bias"));
  }
  Rng special_rng(seed ^ kSpecialStream, Stream::kInit);
  const auto base = normal_parameter({enc.model_dim}, kEmbeddingInitStd, special_rng, "cls");
  special_ = init_special_tokens(config_.init_strategy, config_.num_aspects, base, special_rng);
}

Tensor MareModel::special_token_table() const {
  if (config_.init_strategy == InitStrategy::kShare) {
    return nx::add(Tensor::zeros({config_.num_aspects, config_.encoder.model_dim}), special_);
  }
  return special_;
}

bool MareModel::cliff_active(std::size_t layer_index) const { return layer_index >= config_.cliff_layer; }

MareOutput MareModel::forward(const TokenBatch& batch, std::span<const std::size_t> aspects,
                              const ForwardOptions& options) const {
  const std::size_t k = config_.num_aspects;
  if (aspects.empty()) throw ContractError("forward: no aspects requested");
  for (std::size_t i = 0; i < aspects.size(); ++i) {
    if (aspects[i] >= k) throw ContractError("forward: aspect " + std::to_string(aspects[i]) + " >= k");
    if (i > 0 && aspects[i] <= aspects[i - 1]) throw ContractError("forward: aspects must be ascending and unique");
  }
  if (options.stochastic && options.gumbel_rng == nullptr && options.frozen_masks == nullptr) {
    throw ContractError("forward: stochastic masks need a Gumbel generator");
  }
  const std::size_t N = config_.encoder.num_layers;
  const std::size_t masked_layers = N - config_.cliff_layer + 1;
  if (options.frozen_masks && options.frozen_masks->size() != masked_layers) {
    throw ContractError("forward: expected " + std::to_string(masked_layers) + " frozen masks");
  }

  MareOutput out;
  out.aspects.assign(aspects.begin(), aspects.end());
  out.lengths = batch.lengths;

  HiddenStates h = embedder_.embed(batch, special_token_table());
  if (options.record_hidden) out.hidden.push_back(h.states);
  const std::size_t B = batch.size(), L = batch.padded_length();
  const auto pad = padding_mask(batch.lengths, k, L);

  TokenMask current;
  for (std::size_t layer = 1; layer <= N; ++layer) {
    if (options.hidden_hook) h.states = options.hidden_hook(layer, h.states);
    AttentionMaskMatrix mask = pad;
    if (cliff_active(layer)) {
      const std::size_t slot = layer - config_.cliff_layer;
      if (options.frozen_masks) {
        const auto& frozen = (*options.frozen_masks)[slot];
        if (frozen.shape() != Shape{B, aspects.size(), L}) {
          throw DimensionError("forward: frozen mask " + nx::to_string(frozen.shape()) + " does not match batch");
        }
        current = TokenMask{frozen, out.aspects};
      } else if (slot == 0 || config_.recompute_masks_per_layer) {
        const auto scores = compute_aspect_scores(h, projections_, aspects, &counter_);
        current = options.stochastic
                      ? sample_token_mask(scores, aspects, config_.gumbel_temperature, *options.gumbel_rng,
                                          batch.lengths)
                      : sample_token_mask(scores, aspects, config_.gumbel_temperature, Tensor(), batch.lengths);
      }
      out.layer_masks.push_back(current.values);
      mask = build_attention_mask(current, k, config_.deletion);
      mask.real_columns = pad.real_columns;
    }
    h = layers_[layer - 1].forward(h, mask);
    if (options.record_hidden) out.hidden.push_back(h.states);
  }

  const auto final_states = nx::layer_norm(h.states, final_gamma_, final_beta_);
  std::vector<Tensor> logits;
  for (const std::size_t j : aspects) {
    const auto special = nx::narrow(final_states, 1, j, 1);  // [B, 1, d]
    logits.push_back(nx::linear(special, head_weight_[j], head_bias_[j]));
  }
  out.logits = logits.size() == 1 ? logits[0] : nx::concat(logits, 1);
  return out;
}

MareOutput MareModel::forward_collaborative(const TokenBatch& batch, const ForwardOptions& options) const {
  std::vector<std::size_t> all(config_.num_aspects);
  for (std::size_t j = 0; j < all.size(); ++j) all[j] = j;
  return forward(batch, all, options);
}

MareOutput MareModel::forward_multitask(const TokenBatch& batch, std::size_t aspect,
                                        const ForwardOptions& options) const {
  const std::size_t one[] = {aspect};
  return forward(batch, one, options);
}

std::vector<NamedParameter> MareModel::parameters() const {
  std::vector<NamedParameter> out = embedder_.parameters();
  out.push_back({special_.name(), special_});
  for (const auto& layer : layers_) {
    for (auto& p : layer.parameters()) out.push_back(std::move(p));
  }
  for (auto& p : projections_.parameters()) out.push_back(std::move(p));
  out.push_back({final_gamma_.name(), final_gamma_});
  out.push_back({final_beta_.name(), final_beta_});
  for (std::size_t j = 0; j < head_weight_.size(); ++j) {
    out.push_back({head_weight_[j].name(), head_weight_[j]});
    out.push_back({head_bias_[j].name(), head_bias_[j]});
  }
  return out;
}

std::vector<Tensor> MareModel::aspect_parameters(std::size_t aspect) const {
  auto out = projections_.aspect_parameters(aspect);
  out.push_back(head_weight_.at(aspect));
  out.push_back(head_bias_.at(aspect));
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> mask_spans(std::span<const std::uint8_t> mask) {
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  std::size_t i = 0;
  while (i < mask.size()) {
    if (!mask[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j + 1 < mask.size() && mask[j + 1]) ++j;
    spans.emplace_back(i, j);
    i = j + 1;
  }
  return spans;
}

std::vector<std::vector<AspectRationale>> extract_rationales(const MareOutput& output) {
  const auto& m = output.final_mask();
  const std::size_t B = m.dim(0), kp = m.dim(1), L = m.dim(2);
  std::vector<std::vector<AspectRationale>> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < kp; ++i) {
      AspectRationale r;
      r.aspect = output.aspects[i];
      const std::size_t len = output.lengths.empty() ? L : output.lengths[b];
      for (std::size_t t = 0; t < len; ++t) r.selection.push_back(m[(b * kp + i) * L + t] != 0.0 ? 1 : 0);
      r.spans = mask_spans(r.selection);
      out[b].push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace mare
