// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "mare/error.hpp"
#include "mare/ops.hpp"
#include "mare/training.hpp"

namespace mare {

namespace nx = numerics;

void LossWeights::validate() const {
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("loss weight beta must be finite and >= 0");
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("loss weight gamma must be finite and >= 0");
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || logits.dim(0) == 0) {
    throw DimensionError("cross_entropy: logits " + nx::to_string(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t C = logits.dim(1);
  for (auto y : labels) {
    if (y >= C) throw ContractError("cross_entropy: label " + std::to_string(y) + " out of range for " +
                                    std::to_string(C) + " classes");
  }
  const auto picked = nx::gather_last(nx::log_softmax_last_dim(logits), labels);
  return nx::scale(nx::sum(picked), -1.0 / static_cast<double>(labels.size()));
}

namespace {

std::vector<std::size_t> row_lengths(const Tensor& masks, std::span<const std::size_t> lengths, const char* op) {
  if (masks.rank() != 3) throw DimensionError(std::string(op) + ": masks must be [batch, k', L]");
  const std::size_t B = masks.dim(0), L = masks.dim(2);
  std::vector<std::size_t> out(B, L);
  if (!lengths.empty()) {
    if (lengths.size() != B) throw DimensionError(std::string(op) + ": lengths do not match the batch");
    for (std::size_t b = 0; b < B; ++b) {
      if (lengths[b] > L) throw DimensionError(std::string(op) + ": length exceeds mask width");
      out[b] = lengths[b];
    }
  }
  return out;
}

}  // namespace

Tensor sparsity_loss(const Tensor& masks, std::span<const std::size_t> lengths, std::span<const double> targets) {
  const auto len = row_lengths(masks, lengths, "sparsity_loss");
  const std::size_t B = masks.dim(0), kp = masks.dim(1), L = masks.dim(2);
  if (targets.size() != kp) throw DimensionError("sparsity_loss: one target per active aspect required");
  std::vector<double> inv_len(B), valid(B * L, 0.0), target(kp);
  for (std::size_t b = 0; b < B; ++b) {
    if (len[b] == 0) throw ContractError("sparsity_loss: empty mask row");
    inv_len[b] = 1.0 / static_cast<double>(len[b]);
    for (std::size_t t = 0; t < len[b]; ++t) valid[b * L + t] = 1.0;
  }
  for (std::size_t i = 0; i < kp; ++i) target[i] = targets[i];
  const auto real = nx::mul(masks, Tensor::from({B, 1, L}, std::move(valid)));
  const auto mean_sel = nx::mul(nx::sum_last_dim(real), Tensor::from({B, 1}, std::move(inv_len)));  // [B, k']
  return nx::mean(nx::abs(nx::sub(mean_sel, Tensor::from({kp}, std::move(target)))));
}

Tensor continuity_loss(const Tensor& masks, std::span<const std::size_t> lengths) {
  const auto len = row_lengths(masks, lengths, "continuity_loss");
  const std::size_t B = masks.dim(0), L = masks.dim(2);
  std::vector<double> inv(B), valid(B * (L > 0 ? L - 1 : 0), 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    if (len[b] < 2) throw ContractError("continuity_loss: needs at least 2 tokens per row");
    inv[b] = 1.0 / static_cast<double>(len[b] - 1);
    for (std::size_t t = 0; t + 1 < len[b]; ++t) valid[b * (L - 1) + t] = 1.0;
  }
  const auto diff = nx::sub(nx::narrow(masks, -1, 1, L - 1), nx::narrow(masks, -1, 0, L - 1));
  const auto jumps = nx::mul(nx::abs(diff), Tensor::from({B, 1, L - 1}, std::move(valid)));
  return nx::mean(nx::mul(nx::sum_last_dim(jumps), Tensor::from({B, 1}, std::move(inv))));
}

LossBreakdown total_loss(const Tensor& ce, const Tensor& sparse, const Tensor& cont, const LossWeights& weights) {
  LossBreakdown out;
  out.ce = ce.item();
  out.sparse = sparse.item();
  out.cont = cont.item();
  if (!std::isfinite(out.ce) || !std::isfinite(out.sparse) || !std::isfinite(out.cont)) {
    throw DivergenceError("non-finite loss component (ce=" + std::to_string(out.ce) +
                          ", sparse=" + std::to_string(out.sparse) + ", cont=" + std::to_string(out.cont) + ")");
  }
  out.total = nx::add(ce, nx::add(nx::scale(sparse, weights.beta), nx::scale(cont, weights.gamma)));
  return out;
}

}  // namespace mare
