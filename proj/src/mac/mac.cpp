// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include "mare/mac.hpp"

#include <cmath>

#include "mare/error.hpp"
#include "mare/ops.hpp"

namespace mare {

namespace nx = numerics;

const char* to_string(DeletionMode mode) { return mode == DeletionMode::kHard ? "hard" : "amd"; }

DeletionMode parse_deletion_mode(const std::string& text) {
  if (text == "hard") return DeletionMode::kHard;
  if (text == "amd") return DeletionMode::kAmd;
  throw ConfigError("unknown deletion mode '" + text + "' (expected hard|amd)");
}

AspectProjections::AspectProjections(std::size_t num_aspects, std::size_t model_dim, Rng& init) {
  const double stddev = 1.0 / std::sqrt(static_cast<double>(model_dim));
  for (std::size_t j = 0; j < num_aspects; ++j) {
    const std::string p = "mac.aspect" + std::to_string(j) + ".";
    query_weight.push_back(normal_parameter({model_dim, model_dim}, stddev, init, p + "query.weight"));
    query_bias.push_back(constant_parameter({model_dim}, 0.0, p + "query.bias"));
    key_weight.push_back(normal_parameter({model_dim, model_dim}, stddev, init, p + "key.weight"));
    key_bias.push_back(constant_parameter({model_dim}, 0.0, p + "key.bias"));
  }
}

std::vector<NamedParameter> AspectProjections::parameters() const {
  std::vector<NamedParameter> out;
  for (std::size_t j = 0; j < num_aspects(); ++j) {
    for (const auto& t : aspect_parameters(j)) out.push_back({t.name(), t});
  }
  return out;
}

std::vector<Tensor> AspectProjections::aspect_parameters(std::size_t aspect) const {
  return {query_weight.at(aspect), query_bias.at(aspect), key_weight.at(aspect), key_bias.at(aspect)};
}

Tensor compute_aspect_scores(const HiddenStates& h, const AspectProjections& proj,
                             std::span<const std::size_t> active_aspects, MaskCounter* counter) {
  const std::size_t k = h.num_special;
  if (active_aspects.empty()) throw ContractError("compute_aspect_scores: no active aspects");
  if (proj.num_aspects() != k) {
    throw ContractError("compute_aspect_scores: " + std::to_string(proj.num_aspects()) + " projections for " +
                        std::to_string(k) + " special tokens");
  }
  const std::size_t B = h.batch(), L = h.text_length(), d = proj.model_dim();
  const auto text = nx::narrow(h.states, 1, k, L);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const auto zeros = Tensor::zeros({B, 1, L, 1});

  std::vector<Tensor> per_aspect;
  for (const std::size_t j : active_aspects) {
    if (j >= k) {
      throw ContractError("compute_aspect_scores: aspect " + std::to_string(j) + " >= k = " + std::to_string(k));
    }
    const auto query = nx::linear(nx::narrow(h.states, 1, j, 1), proj.query_weight[j], proj.query_bias[j]);
    const auto keys = nx::linear(text, proj.key_weight[j], proj.key_bias[j]);
    // [B, 1, d] x [B, d, L] -> [B, 1, L]
    const auto scores = nx::scale(nx::matmul(query, nx::transpose_last2(keys)), inv_sqrt_d);
    const Tensor pair[] = {nx::reshape(scores, {B, 1, L, 1}), zeros};
    per_aspect.push_back(nx::concat(pair, -1));
    if (counter) ++counter->computations;
  }
  return per_aspect.size() == 1 ? per_aspect[0] : nx::concat(per_aspect, 1);
}

Tensor multi_task_projection(const HiddenStates& h, const AspectProjections& proj, std::size_t aspect,
                             MaskCounter* counter) {
  const std::size_t one[] = {aspect};
  return compute_aspect_scores(h, proj, one, counter);
}

namespace {

Tensor valid_token_mask(std::size_t B, std::size_t L, std::span<const std::size_t> lengths) {
  std::vector<double> values(B * L, 1.0);
  if (!lengths.empty()) {
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = lengths[b]; t < L; ++t) values[b * L + t] = 0.0;
    }
  }
  return Tensor::from({B, 1, L}, std::move(values));
}

void check_binary(const TokenMask& mask, const char* op) {
  if (nx::relaxed_straight_through()) return;
  for (double v : mask.values.values()) {
    if (v != 0.0 && v != 1.0) throw ContractError(std::string(op) + ": token mask is not binary");
  }
}

}  // namespace

TokenMask sample_token_mask(const Tensor& scores, std::span<const std::size_t> aspects, double temperature,
                            const Tensor& noise, std::span<const std::size_t> lengths) {
  if (scores.rank() != 4 || scores.dim(-1) != 2 || scores.dim(1) != aspects.size()) {
    throw DimensionError("sample_token_mask: expected [batch, " + std::to_string(aspects.size()) + ", L, 2], got " +
                         nx::to_string(scores.shape()));
  }
  const std::size_t B = scores.dim(0), L = scores.dim(2);
  if (!lengths.empty() && lengths.size() != B) throw DimensionError("sample_token_mask: lengths do not match batch");
  const auto eps = noise.defined() ? noise : Tensor::zeros(scores.shape());
  const auto onehot = nx::gumbel_softmax_hard(scores, temperature, eps);
  auto keep = nx::select(onehot, -1, 0);
  if (!lengths.empty()) keep = nx::mul(keep, valid_token_mask(B, L, lengths));
  return TokenMask{keep, std::vector<std::size_t>(aspects.begin(), aspects.end())};
}

TokenMask sample_token_mask(const Tensor& scores, std::span<const std::size_t> aspects, double temperature, Rng& rng,
                            std::span<const std::size_t> lengths) {
  if (!(temperature > 0.0)) throw ParameterError("sample_token_mask: temperature must be positive");
  return sample_token_mask(scores, aspects, temperature, nx::sample_gumbel_noise(scores.shape(), rng), lengths);
}

Tensor extend_with_special_tokens(const TokenMask& mask, std::size_t num_aspects) {
  const auto& m = mask.values;
  if (m.rank() != 3 || m.dim(1) != mask.aspects.size()) {
    throw DimensionError("token mask must be [batch, k', L], got " + nx::to_string(m.shape()));
  }
  const std::size_t B = m.dim(0), kp = m.dim(1);
  std::vector<double> block(B * kp * num_aspects, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < kp; ++i) {
      if (mask.aspects[i] >= num_aspects) throw ContractError("token mask refers to aspect outside [0, k)");
      block[(b * kp + i) * num_aspects + mask.aspects[i]] = 1.0;
    }
  }
  const Tensor parts[] = {Tensor::from({B, kp, num_aspects}, std::move(block)), m};
  return nx::concat(parts, -1);
}

AttentionMaskMatrix hard_deletion_mask(const TokenMask& mask, std::size_t num_aspects) {
  check_binary(mask, "hard_deletion_mask");
  const auto ext = extend_with_special_tokens(mask, num_aspects);
  AttentionMaskMatrix out;
  out.carrier = nx::matmul(nx::transpose_last2(ext), ext);
  out.hard = nx::binarize_nonzero(out.carrier);
  out.gate = nx::straight_through_combine(out.hard, out.carrier);
  return out;
}

AttentionMaskMatrix amd_mask(const TokenMask& mask, std::size_t num_aspects) {
  check_binary(mask, "amd_mask");
  const auto ext = extend_with_special_tokens(mask, num_aspects);
  const std::size_t B = ext.dim(0), Lp = ext.dim(2);
  AttentionMaskMatrix out;
  out.carrier = nx::reshape(nx::sum_last_dim(nx::transpose_last2(ext)), {B, 1, Lp});
  out.hard = nx::binarize_nonzero(out.carrier);
  out.gate = nx::straight_through_combine(out.hard, out.carrier);
  out.column_only = true;
  return out;
}

AttentionMaskMatrix build_attention_mask(const TokenMask& mask, std::size_t num_aspects, DeletionMode mode) {
  return mode == DeletionMode::kHard ? hard_deletion_mask(mask, num_aspects) : amd_mask(mask, num_aspects);
}

}  // namespace mare
