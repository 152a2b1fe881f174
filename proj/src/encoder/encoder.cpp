// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include "mare/encoder.hpp"

#include <algorithm>
#include <cmath>

#include "mare/error.hpp"
#include "mare/ops.hpp"

namespace mare {

namespace nx = numerics;

namespace {

constexpr double kInitStd = 0.02;

}  // namespace

const char* to_string(AttentionNormalizer normalizer) {
  return normalizer == AttentionNormalizer::kRetained ? "retained" : "full";
}

AttentionNormalizer parse_attention_normalizer(const std::string& text) {
  if (text == "retained") return AttentionNormalizer::kRetained;
  if (text == "full") return AttentionNormalizer::kFull;
  throw ConfigError("unknown attention normalizer '" + text + "' (expected retained|full)");
}

void EncoderConfig::validate(std::size_t num_special) const {
  if (num_layers == 0) throw ConfigError("encoder: num_layers must be positive");
  if (num_heads == 0) throw ConfigError("encoder: num_heads must be positive");
  if (model_dim == 0 || model_dim % num_heads != 0) {
    throw ConfigError("encoder: model_dim (" + std::to_string(model_dim) + ") must be a positive multiple of num_heads (" +
                      std::to_string(num_heads) + ")");
  }
  if (ffn_dim == 0) throw ConfigError("encoder: ffn_dim must be positive");
  if (vocab_size == 0) throw ConfigError("encoder: vocab_size must be positive");
  if (max_len <= num_special) {
    throw ConfigError("encoder: max_len (" + std::to_string(max_len) + ") must exceed the " +
                      std::to_string(num_special) + " special tokens");
  }
}

TokenBatch TokenBatch::from_sequences(std::span<const std::vector<std::size_t>> sequences) {
  TokenBatch batch;
  std::size_t longest = 0;
  for (const auto& s : sequences) longest = std::max(longest, s.size());
  batch.ids.assign(sequences.size() * longest, kPadId);
  for (std::size_t b = 0; b < sequences.size(); ++b) {
    std::copy(sequences[b].begin(), sequences[b].end(), batch.ids.begin() + static_cast<std::ptrdiff_t>(b * longest));
    batch.lengths.push_back(sequences[b].size());
  }
  return batch;
}

AttentionMaskMatrix padding_mask(std::span<const std::size_t> lengths, std::size_t num_special,
                                 std::size_t padded_length) {
  const std::size_t total = num_special + padded_length;
  std::vector<double> values(lengths.size() * total * total, 0.0);
  std::vector<double> columns(lengths.size() * total, 0.0);
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    const std::size_t real = num_special + lengths[b];
    std::fill_n(columns.begin() + static_cast<std::ptrdiff_t>(b * total), real, 1.0);
    for (std::size_t i = 0; i < real; ++i) {
      std::fill_n(values.begin() + static_cast<std::ptrdiff_t>((b * total + i) * total), real, 1.0);
    }
  }
  AttentionMaskMatrix mask;
  mask.hard = Tensor::from({lengths.size(), total, total}, std::move(values));
  mask.gate = mask.hard;
  mask.real_columns = Tensor::from({lengths.size(), 1, total}, std::move(columns));
  return mask;
}

Tensor normal_parameter(Shape shape, double stddev, Rng& rng, const std::string& name) {
  std::vector<double> values(nx::numel(shape));
  for (auto& v : values) v = stddev * rng.normal();
  auto t = Tensor::from(std::move(shape), std::move(values), true);
  t.set_name(name);
  return t;
}

Tensor constant_parameter(Shape shape, double value, const std::string& name) {
  auto t = Tensor::full(std::move(shape), value, true);
  t.set_name(name);
  return t;
}

Embedder::Embedder(const EncoderConfig& config, Rng& init)
    : config_(config),
      token_embedding_(normal_parameter({config.vocab_size, config.model_dim}, kEmbeddingInitStd, init, "embed.token")),
      position_embedding_(normal_parameter({config.max_len, config.model_dim}, kPositionInitStd, init, "embed.position")) {}

HiddenStates Embedder::embed(const TokenBatch& batch, const Tensor& special_table) const {
  const std::size_t k = special_table.dim(0);
  const std::size_t d = config_.model_dim;
  if (special_table.shape() != Shape{k, d}) {
    throw DimensionError("embed: special table must be [k, " + std::to_string(d) + "], got " +
                         nx::to_string(special_table.shape()));
  }
  const std::size_t B = batch.size();
  const std::size_t L = batch.padded_length();
  if (B == 0) throw ContractError("embed: empty batch");
  if (L + k > config_.max_len) {
    throw LengthError("embed: " + std::to_string(L) + " tokens + " + std::to_string(k) +
                      " special tokens exceed max_len " + std::to_string(config_.max_len));
  }

  const auto specials = nx::add(Tensor::zeros({B, k, d}), special_table);
  if (L == 0) return HiddenStates{specials, 0, k};

  std::vector<std::size_t> positions(B * L);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < L; ++t) positions[b * L + t] = t;
  }
  const auto tokens = nx::add(nx::embedding(token_embedding_, batch.ids, {B, L}),
                              nx::embedding(position_embedding_, positions, {B, L}));
  const Tensor parts[] = {specials, tokens};
  return HiddenStates{nx::concat(parts, 1), 0, k};
}

HiddenStates Embedder::embed(std::span<const std::size_t> token_ids, const Tensor& special_table) const {
  TokenBatch batch;
  batch.ids.assign(token_ids.begin(), token_ids.end());
  batch.lengths.push_back(token_ids.size());
  return embed(batch, special_table);
}

std::vector<NamedParameter> Embedder::parameters() const {
  return {{token_embedding_.name(), token_embedding_}, {position_embedding_.name(), position_embedding_}};
}

EncoderLayer::EncoderLayer(const EncoderConfig& config, std::size_t index, Rng& init)
    : config_(config), index_(index) {
  const std::size_t d = config.model_dim;
  const std::string p = "layer" + std::to_string(index) + ".";
  ln1_gamma_ = constant_parameter({d}, 1.0, p + "ln1.gamma");
  ln1_beta_ = constant_parameter({d}, 0.0, p + "ln1.beta");
  qkv_w_ = normal_parameter({d, 3 * d}, kInitStd, init, p + "attn.qkv.weight");
  qkv_b_ = constant_parameter({3 * d}, 0.0, p + "attn.qkv.bias");
  attn_out_ = normal_parameter({d, d}, kInitStd, init, p + "attn.out.weight");
  ln2_gamma_ = constant_parameter({d}, 1.0, p + "ln2.gamma");
  ln2_beta_ = constant_parameter({d}, 0.0, p + "ln2.beta");
  ffn_in_w_ = normal_parameter({d, config.ffn_dim}, kInitStd, init, p + "ffn.in.weight");
  ffn_in_b_ = constant_parameter({config.ffn_dim}, 0.0, p + "ffn.in.bias");
  ffn_out_w_ = normal_parameter({config.ffn_dim, d}, kInitStd, init, p + "ffn.out.weight");
  ffn_out_b_ = constant_parameter({d}, 0.0, p + "ffn.out.bias");
}

Tensor EncoderLayer::split_heads(const Tensor& x) const {
  const std::size_t H = config_.num_heads;
  const std::size_t dh = config_.model_dim / H;
  return nx::reshape(x, {x.dim(0), x.dim(1), H, dh});
}

EncoderLayer::Attention EncoderLayer::attend(const Tensor& normed, const AttentionMaskMatrix& mask) const {
  const std::size_t B = normed.dim(0), Lp = normed.dim(1), d = config_.model_dim;
  const std::size_t dh = d / config_.num_heads;
  if (mask.total_length() != Lp || mask.gate.dim(0) != B || (!mask.column_only && mask.gate.dim(1) != Lp)) {
    throw DimensionError("attention: mask " + nx::to_string(mask.gate.shape()) + " does not match sequence " +
                         nx::to_string(normed.shape()));
  }
  const auto qkv = nx::linear(normed, qkv_w_, qkv_b_);
  const auto q = nx::permute(split_heads(nx::narrow(qkv, -1, 0, d)), {0, 2, 1, 3});
  const auto kt = nx::permute(split_heads(nx::narrow(qkv, -1, d, d)), {0, 2, 3, 1});
  const auto v = nx::permute(split_heads(nx::narrow(qkv, -1, 2 * d, d)), {0, 2, 1, 3});
  const auto scores = nx::scale(nx::matmul(q, kt), 1.0 / std::sqrt(static_cast<double>(dh)));
  const Shape gate_shape = mask.column_only ? Shape{B, 1, 1, Lp} : Shape{B, 1, Lp, Lp};
  const auto real = mask.real_columns.defined() ? nx::reshape(mask.real_columns, {B, 1, 1, Lp})
                                                : Tensor::full({1, 1, 1, Lp}, 1.0);
  const auto gate = nx::reshape(mask.gate, gate_shape);
  if (config_.normalizer == AttentionNormalizer::kFull) {
    return {nx::mul(gate, nx::masked_softmax_last_dim(scores, real)), v};
  }
  const auto hard = nx::reshape(mask.hard.defined() ? mask.hard : mask.gate, gate_shape);
  const auto retained = nx::mul(hard, nx::masked_softmax_last_dim(scores, nx::mul(hard, real)));
  if (!mask.carrier.defined()) return {retained, v};
  // Forwards exactly zero; routes d/dM' = full softmax, as in gate * softmax.
  const auto carrier = nx::reshape(mask.carrier, gate_shape);
  const auto st = nx::straight_through_combine(Tensor::zeros(carrier.shape()), carrier);
  return {nx::add(retained, nx::mul(st, nx::masked_softmax_last_dim(scores, real))), v};
}

Tensor EncoderLayer::attention_weights(const Tensor& normed, const AttentionMaskMatrix& mask) const {
  return attend(normed, mask).weights;
}

Tensor EncoderLayer::masked_multi_head_attention(const Tensor& normed, const AttentionMaskMatrix& mask) const {
  const std::size_t B = normed.dim(0), Lp = normed.dim(1), d = config_.model_dim;
  const auto [weights, v] = attend(normed, mask);
  const auto context = nx::reshape(nx::permute(nx::matmul(weights, v), {0, 2, 1, 3}), {B, Lp, d});
  return nx::matmul(context, attn_out_);
}

HiddenStates EncoderLayer::forward(const HiddenStates& h, const AttentionMaskMatrix& mask) const {
  const auto attn = masked_multi_head_attention(nx::layer_norm(h.states, ln1_gamma_, ln1_beta_), mask);
  const auto mid = nx::add(h.states, attn);
  const auto hidden = nx::gelu(nx::linear(nx::layer_norm(mid, ln2_gamma_, ln2_beta_), ffn_in_w_, ffn_in_b_));
  const auto out = nx::add(mid, nx::linear(hidden, ffn_out_w_, ffn_out_b_));
  return HiddenStates{out, h.layer_index + 1, h.num_special};
}

std::vector<NamedParameter> EncoderLayer::parameters() const {
  std::vector<NamedParameter> out;
  for (const auto* t : {&ln1_gamma_, &ln1_beta_, &qkv_w_, &qkv_b_, &attn_out_, &ln2_gamma_, &ln2_beta_, &ffn_in_w_,
                        &ffn_in_b_, &ffn_out_w_, &ffn_out_b_}) {
    out.push_back({t->name(), *t});
  }
  return out;
}

}  // namespace mare
