// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mare/rng.hpp"
#include "mare/tensor.hpp"

namespace mare {

using numerics::Shape;
using numerics::Tensor;

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

// Which attention entries the softmax normaliser runs over. kRetained
// normalises over the entries the mask keeps, so deleted positions have no
// influence at all; kFull takes the softmax over every real position and then
// gates it, so deleted keys still shift the normaliser of retained weights.
enum class AttentionNormalizer { kRetained, kFull };

const char* to_string(AttentionNormalizer normalizer);
AttentionNormalizer parse_attention_normalizer(const std::string& text);

// Standard deviation of token and special-token embeddings.
inline constexpr double kEmbeddingInitStd = 1.0;
// Standard deviation of position embeddings. Kept small so that token content,
// not position, dominates the early mask scores.
inline constexpr double kPositionInitStd = 0.1;

struct EncoderConfig {
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t model_dim = 64;
  std::size_t ffn_dim = 128;
  std::size_t vocab_size = 0;
  std::size_t max_len = 64;
  AttentionNormalizer normalizer = AttentionNormalizer::kRetained;

  // Throws ConfigError. `num_special` special positions must fit in max_len
  // alongside at least one text token.
  void validate(std::size_t num_special) const;
};

// Token ids of a batch, right-padded with kPadId to the longest sequence.
struct TokenBatch {
  static constexpr std::size_t kPadId = 0;

  std::size_t size() const { return lengths.size(); }
  std::size_t padded_length() const { return lengths.empty() ? 0 : ids.size() / lengths.size(); }

  std::vector<std::size_t> ids;      // size() x padded_length(), row-major
  std::vector<std::size_t> lengths;  // real tokens per row

  static TokenBatch from_sequences(std::span<const std::vector<std::size_t>> sequences);
};

// Hidden states with the k special tokens at positions 0..k-1 followed by
// the L text positions.
struct HiddenStates {
  Tensor states;  // [batch, k + L, d]
  std::size_t layer_index = 0;
  std::size_t num_special = 0;

  std::size_t batch() const { return states.dim(0); }
  std::size_t total_length() const { return states.dim(1); }
  std::size_t text_length() const { return total_length() - num_special; }
};

// Multiplicative gate on attention probabilities. `hard` is the binary mask
// (M~); `gate` forwards it and carries gradient to `carrier` (M') through the
// straight-through combination. Pairwise masks are [batch, L', L'];
// column masks are [batch, 1, L'] and broadcast over rows.
struct AttentionMaskMatrix {
  Tensor hard;
  Tensor gate;
  Tensor carrier;  // undefined for constant masks
  // [batch, 1, L'], 1 on non-padding positions; undefined means no padding.
  Tensor real_columns;
  bool column_only = false;

  std::size_t total_length() const { return gate.dim(-1); }
};

// Constant mask letting every real position attend to every real position;
// padding rows and columns are zero.
AttentionMaskMatrix padding_mask(std::span<const std::size_t> lengths, std::size_t num_special,
                                 std::size_t padded_length);

class Embedder {
 public:
  Embedder(const EncoderConfig& config, Rng& init);

  // Token embedding plus learned position for the text rows; the special
  // table [k, d] is copied (with gradient) into rows 0..k-1 of every batch
  // entry.
  HiddenStates embed(const TokenBatch& batch, const Tensor& special_table) const;
  HiddenStates embed(std::span<const std::size_t> token_ids, const Tensor& special_table) const;

  std::vector<NamedParameter> parameters() const;

 private:
  EncoderConfig config_;
  Tensor token_embedding_;
  Tensor position_embedding_;
};

class EncoderLayer {
 public:
  EncoderLayer(const EncoderConfig& config, std::size_t index, Rng& init);

  // Attention probabilities gated by the mask, one mask for all heads, shape
  // [batch, heads, L', L']. With kRetained the forward value is the softmax
  // over kept entries and the gate's gradient uses the full softmax; with
  // kFull it is gate * softmax. Rows are never scaled back up after gating.
  Tensor attention_weights(const Tensor& normed, const AttentionMaskMatrix& mask) const;
  // Gated attention projected back to d. No output bias, so an all-zero
  // mask yields exactly zero.
  Tensor masked_multi_head_attention(const Tensor& normed, const AttentionMaskMatrix& mask) const;

  // Pre-norm block: h + MHA(LN(h)), then + FFN(LN(.)).
  HiddenStates forward(const HiddenStates& h, const AttentionMaskMatrix& mask) const;

  std::vector<NamedParameter> parameters() const;
  // Output projections of both sublayers; zeroing them makes the layer the
  // identity map.
  std::vector<Tensor> output_projections() const { return {attn_out_, ffn_out_w_, ffn_out_b_}; }

  std::size_t index() const { return index_; }

 private:
  struct Attention {
    Tensor weights;  // [batch, heads, L', L']
    Tensor values;   // [batch, heads, L', d_head]
  };
  Attention attend(const Tensor& normed, const AttentionMaskMatrix& mask) const;
  Tensor split_heads(const Tensor& x) const;

  EncoderConfig config_;
  std::size_t index_;
  Tensor ln1_gamma_, ln1_beta_;
  Tensor qkv_w_, qkv_b_;
  Tensor attn_out_;
  Tensor ln2_gamma_, ln2_beta_;
  Tensor ffn_in_w_, ffn_in_b_;
  Tensor ffn_out_w_, ffn_out_b_;
};

// Parameter helpers shared by the model components.
Tensor normal_parameter(Shape shape, double stddev, Rng& rng, const std::string& name);
Tensor constant_parameter(Shape shape, double value, const std::string& name);

}  // namespace mare
