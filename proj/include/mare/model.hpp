// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mare/encoder.hpp"
#include "mare/mac.hpp"
#include "mare/rng.hpp"

namespace mare {

enum class InitStrategy { kRandom, kCls, kShare };

const char* to_string(InitStrategy strategy);
InitStrategy parse_init_strategy(const std::string& text);

struct MareConfig {
  EncoderConfig encoder;
  std::size_t num_aspects = 3;
  // First layer (1-based) whose attention is gated by the MAC; layers below
  // it keep every token.
  std::size_t cliff_layer = 3;
  std::vector<double> sparsity_targets = {0.1, 0.1, 0.1};
  InitStrategy init_strategy = InitStrategy::kCls;
  double gumbel_temperature = 1.0;
  std::size_t num_classes = 2;
  DeletionMode deletion = DeletionMode::kHard;
  // When false the MAC runs once at the cliff layer and its mask is reused
  // by every later layer.
  bool recompute_masks_per_layer = true;

  void validate() const;
};

// Optional interventions on a forward pass, used by tests and probes.
struct ForwardOptions {
  // Sample masks with Gumbel noise (training) or take the noiseless argmax.
  bool stochastic = true;
  Rng* gumbel_rng = nullptr;
  // One [batch, k', L] binary tensor per masked layer (cliff..N) replacing
  // the MAC output ("MAC frozen").
  const std::vector<Tensor>* frozen_masks = nullptr;
  // Called with (layer, input hidden states) before each layer (1-based);
  // its return value replaces the layer input.
  std::function<Tensor(std::size_t, const Tensor&)> hidden_hook;
  // Keep every layer's output in MareOutput::hidden.
  bool record_hidden = false;
};

struct MareOutput {
  Tensor logits;  // [batch, k', C]
  std::vector<std::size_t> aspects;
  // Masks applied in layers cliff..N, each [batch, k', L]; back() is the
  // rationale.
  std::vector<Tensor> layer_masks;
  std::vector<std::size_t> lengths;
  std::vector<Tensor> hidden;  // embeddings then each layer output, if recorded

  const Tensor& final_mask() const { return layer_masks.back(); }
};

// Per-aspect rationale of one example: binary selection over its real
// tokens and the maximal runs of ones as inclusive (begin, end) spans.
struct AspectRationale {
  std::size_t aspect = 0;
  std::vector<std::uint8_t> selection;
  std::vector<std::pair<std::size_t, std::size_t>> spans;
};

std::vector<std::pair<std::size_t, std::size_t>> mask_spans(std::span<const std::uint8_t> mask);

class MareModel {
 public:
  MareModel(MareConfig config, std::uint64_t seed);

  const MareConfig& config() const { return config_; }

  // Special-token table [k, d] under the configured strategy. For kShare all
  // rows are views of one parameter.
  Tensor special_token_table() const;

  // Whether layer (1-based) applies the MAC mask.
  bool cliff_active(std::size_t layer_index) const;

  MareOutput forward(const TokenBatch& batch, std::span<const std::size_t> aspects,
                     const ForwardOptions& options = {}) const;
  MareOutput forward_collaborative(const TokenBatch& batch, const ForwardOptions& options = {}) const;
  MareOutput forward_multitask(const TokenBatch& batch, std::size_t aspect, const ForwardOptions& options = {}) const;

  std::vector<NamedParameter> parameters() const;
  // Parameters with no effect outside `aspect`: its MAC maps and its head.
  std::vector<Tensor> aspect_parameters(std::size_t aspect) const;
  const std::vector<EncoderLayer>& layers() const { return layers_; }
  const Embedder& embedder() const { return embedder_; }
  const AspectProjections& projections() const { return projections_; }

  std::size_t mask_computations() const { return counter_.computations; }
  void reset_mask_computations() const { counter_.computations = 0; }

 private:
  MareModel(MareConfig config, Rng init, std::uint64_t seed);

  MareConfig config_;
  Embedder embedder_;
  std::vector<EncoderLayer> layers_;
  AspectProjections projections_;
  Tensor special_;  // [k, d], or [1, d] when shared
  Tensor final_gamma_, final_beta_;
  std::vector<Tensor> head_weight_, head_bias_;
  mutable MaskCounter counter_;
};

// Strategy-specific special-token parameter: row 0 is `base` for every
// strategy; kRandom draws the other rows, kCls copies base into every row,
// kShare returns a single [1, d] row.
Tensor init_special_tokens(InitStrategy strategy, std::size_t num_aspects, const Tensor& base, Rng& rng);

std::vector<std::vector<AspectRationale>> extract_rationales(const MareOutput& output);

}  // namespace mare
