// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mare/encoder.hpp"
#include "mare/rng.hpp"

namespace mare {

enum class DeletionMode { kHard, kAmd };

const char* to_string(DeletionMode mode);
DeletionMode parse_deletion_mode(const std::string& text);

// Per-aspect keep/delete decisions. `values` is [batch, k', L] with k' the
// number of active aspects (listed in `aspects`, ascending). Forward values
// are exactly 0 or 1; gradient flows through the Gumbel-softmax relaxation.
struct TokenMask {
  Tensor values;
  std::vector<std::size_t> aspects;
};

// Learned per-aspect query and key maps (d -> d), parameters disjoint across
// aspects.
struct AspectProjections {
  std::vector<Tensor> query_weight, query_bias;
  std::vector<Tensor> key_weight, key_bias;

  AspectProjections() = default;
  AspectProjections(std::size_t num_aspects, std::size_t model_dim, Rng& init);

  std::size_t num_aspects() const { return query_weight.size(); }
  std::size_t model_dim() const { return query_weight.empty() ? 0 : query_weight[0].dim(0); }
  std::vector<NamedParameter> parameters() const;
  // Parameters owned by one aspect.
  std::vector<Tensor> aspect_parameters(std::size_t aspect) const;
};

// Counts per-aspect mask computations (one per aspect per masked layer).
struct MaskCounter {
  std::size_t computations = 0;
};

// Scaled dot-product similarity between each active aspect's special token
// and every text token, turned into two logits per token: [score, 0] for
// (select, delete). Result [batch, k', L, 2].
Tensor compute_aspect_scores(const HiddenStates& h, const AspectProjections& proj,
                             std::span<const std::size_t> active_aspects, MaskCounter* counter = nullptr);

// Scores for aspect j only; evaluates exactly one query/key pair.
Tensor multi_task_projection(const HiddenStates& h, const AspectProjections& proj, std::size_t aspect,
                             MaskCounter* counter = nullptr);

// Hard Gumbel-softmax over (select, delete) for every (aspect, token).
// `lengths` zeroes padded positions; pass an empty span when unpadded.
// With `noise` undefined the decision is the noiseless argmax.
TokenMask sample_token_mask(const Tensor& scores, std::span<const std::size_t> aspects, double temperature,
                            const Tensor& noise, std::span<const std::size_t> lengths = {});
TokenMask sample_token_mask(const Tensor& scores, std::span<const std::size_t> aspects, double temperature, Rng& rng,
                            std::span<const std::size_t> lengths = {});

// Token-mask rows extended with the special-token block: row i of the
// result covers [k special columns | L text columns], where special column
// j is 1 iff aspect j == aspects[i]. Shape [batch, k', k + L].
Tensor extend_with_special_tokens(const TokenMask& mask, std::size_t num_aspects);

// M' = E^T E, M~ = [M' != 0], gate = M~ + M' - stop_grad(M').
AttentionMaskMatrix hard_deletion_mask(const TokenMask& mask, std::size_t num_aspects);
// m' = sum_i E[i], m~ = [m' != 0], gate = m~ + m' - stop_grad(m'),
// broadcast over rows (only columns are deleted).
AttentionMaskMatrix amd_mask(const TokenMask& mask, std::size_t num_aspects);
AttentionMaskMatrix build_attention_mask(const TokenMask& mask, std::size_t num_aspects, DeletionMode mode);

}  // namespace mare
