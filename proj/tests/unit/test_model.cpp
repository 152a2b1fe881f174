// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <vector>

#include "doctest.h"
#include "mare/error.hpp"
#include "mare/model.hpp"
#include "mare/ops.hpp"

namespace nx = mare::numerics;
using mare::MareConfig;
using mare::MareModel;
using nx::Tensor;

namespace {

MareConfig small_config(std::size_t k = 3, std::size_t cliff = 3) {
  MareConfig c;
  c.encoder.num_layers = 4;
  c.encoder.num_heads = 2;
  c.encoder.model_dim = 8;
  c.encoder.ffn_dim = 16;
  c.encoder.vocab_size = 30;
  c.encoder.max_len = 24;
  c.num_aspects = k;
  c.cliff_layer = cliff;
  c.sparsity_targets.assign(k, 0.2);
  return c;
}

mare::TokenBatch sample_batch() {
  std::vector<std::vector<std::size_t>> seqs = {{3, 4, 5, 6, 7, 8}, {9, 10, 11}, {12, 13, 14, 15}};
  return mare::TokenBatch::from_sequences(seqs);
}

double grad_norm(const Tensor& t) {
  double s = 0.0;
  for (double g : t.grad()) s += std::abs(g);
  return s;
}

std::vector<double> values_of(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST_CASE("special token initialisation strategies") {
  const auto base = Tensor::from({4}, {0.1, -0.2, 0.3, 0.4});
  mare::Rng rng(1, mare::Stream::kInit);
  const auto cls = mare::init_special_tokens(mare::InitStrategy::kCls, 3, base, rng);
  CHECK(cls.shape() == nx::Shape{3, 4});
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 4; ++j) CHECK(cls[i * 4 + j] == base[j]);
  }
  const auto shared = mare::init_special_tokens(mare::InitStrategy::kShare, 3, base, rng);
  CHECK(shared.shape() == nx::Shape{1, 4});
  const auto random = mare::init_special_tokens(mare::InitStrategy::kRandom, 3, base, rng);
  for (std::size_t j = 0; j < 4; ++j) CHECK(random[j] == base[j]);
  CHECK(random[4] != random[8]);

  SUBCASE("models differ only in the special tokens") {
    auto cfg = small_config();
    cfg.init_strategy = mare::InitStrategy::kRandom;
    MareModel a(cfg, 7);
    cfg.init_strategy = mare::InitStrategy::kCls;
    MareModel b(cfg, 7);
    const auto pa = a.parameters(), pb = b.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      if (pa[i].name == "special_tokens") continue;
      CHECK(values_of(pa[i].tensor) == values_of(pb[i].tensor));
    }
    const auto ta = a.special_token_table(), tb = b.special_token_table();
    for (std::size_t j = 0; j < 8; ++j) CHECK(ta[j] == tb[j]);
  }

  SUBCASE("shared rows receive one summed gradient") {
    auto cfg = small_config();
    cfg.init_strategy = mare::InitStrategy::kShare;
    MareModel m(cfg, 3);
    const auto table = m.special_token_table();
    CHECK(table.shape() == nx::Shape{3, 8});
    nx::backward(nx::sum(m.forward_collaborative(sample_batch(), {.stochastic = false}).logits));
    std::size_t specials = 0;
    for (const auto& p : m.parameters()) {
      if (p.name == "special_tokens") {
        ++specials;
        CHECK(p.tensor.shape() == nx::Shape{1, 8});
        CHECK(grad_norm(p.tensor) > 0.0);
      }
    }
    CHECK(specials == 1);
  }
}

TEST_CASE("cliff layer") {
  MareModel m(small_config(3, 3), 1);
  CHECK_FALSE(m.cliff_active(1));
  CHECK_FALSE(m.cliff_active(2));
  CHECK(m.cliff_active(3));
  CHECK(m.cliff_active(4));
  CHECK_THROWS_AS(MareModel(small_config(3, 0), 1), mare::ConfigError);
  CHECK_THROWS_AS(MareModel(small_config(3, 5), 1), mare::ConfigError);
  auto bad = small_config();
  bad.sparsity_targets = {0.1};
  CHECK_THROWS_AS(MareModel(bad, 1), mare::ConfigError);
}

TEST_CASE("mask computation count") {
  for (std::size_t cliff = 1; cliff <= 4; ++cliff) {
    MareModel m(small_config(3, cliff), 1);
    const auto batch = sample_batch();
    const auto out = m.forward_collaborative(batch, {.stochastic = false});
    CHECK(out.layer_masks.size() == 4 - cliff + 1);
    CHECK(m.mask_computations() == 3 * (4 - cliff + 1));
    m.reset_mask_computations();
    m.forward_multitask(batch, 2, {.stochastic = false});
    CHECK(m.mask_computations() == 4 - cliff + 1);
  }
  auto cfg = small_config(3, 2);
  cfg.recompute_masks_per_layer = false;
  MareModel once(cfg, 1);
  const auto out = once.forward_collaborative(sample_batch(), {.stochastic = false});
  CHECK(once.mask_computations() == 3);
  CHECK(values_of(out.layer_masks[0]) == values_of(out.layer_masks[2]));
}

TEST_CASE("forward shapes, padding and determinism") {
  MareModel m(small_config(), 5);
  const auto batch = sample_batch();
  mare::Rng g1(9, mare::Stream::kGumbel), g2(9, mare::Stream::kGumbel);
  const auto a = m.forward_collaborative(batch, {.stochastic = true, .gumbel_rng = &g1});
  const auto b = m.forward_collaborative(batch, {.stochastic = true, .gumbel_rng = &g2});
  CHECK(a.logits.shape() == nx::Shape{3, 3, 2});
  CHECK(values_of(a.logits) == values_of(b.logits));
  CHECK(values_of(a.final_mask()) == values_of(b.final_mask()));
  // Padding positions are never selected.
  const auto& fm = a.final_mask();
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t t = 3; t < 6; ++t) CHECK(fm[(1 * 3 + i) * 6 + t] == 0.0);
  }
  CHECK_THROWS_AS(m.forward_collaborative(batch, {.stochastic = true}), mare::ContractError);

  SUBCASE("an example's result does not depend on its batch-mates") {
    const auto full = m.forward_collaborative(batch, {.stochastic = false});
    std::vector<std::vector<std::size_t>> alone = {{9, 10, 11}};
    const auto single = m.forward_collaborative(mare::TokenBatch::from_sequences(alone), {.stochastic = false});
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(single.logits[i] == doctest::Approx(full.logits[6 + i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("multitask forward isolates aspects") {
  MareModel m(small_config(), 11);
  const auto out = m.forward_multitask(sample_batch(), 1, {.stochastic = false});
  CHECK(out.logits.shape() == nx::Shape{3, 1, 2});
  nx::backward(nx::sum(out.logits));
  for (std::size_t j : {0u, 2u}) {
    for (const auto& p : m.aspect_parameters(j)) CHECK(grad_norm(p) == 0.0);
  }
  double own = 0.0;
  for (const auto& p : m.aspect_parameters(1)) own += grad_norm(p);
  CHECK(own > 0.0);
}

TEST_CASE("collaborative equals multitask when the other aspects select nothing") {
  // With the MAC active from layer 1, the other special tokens only see
  // themselves, so they cannot influence aspect j.
  MareModel m(small_config(3, 1), 13);
  const auto batch = sample_batch();
  for (std::size_t j = 0; j < 3; ++j) {
    const auto single = m.forward_multitask(batch, j, {.stochastic = false});
    std::vector<Tensor> frozen;
    for (const auto& mask : single.layer_masks) {
      std::vector<double> v(3 * 3 * 6, 0.0);
      for (std::size_t b = 0; b < 3; ++b) {
        for (std::size_t t = 0; t < 6; ++t) v[(b * 3 + j) * 6 + t] = mask[b * 6 + t];
      }
      frozen.push_back(Tensor::from({3, 3, 6}, v));
    }
    const auto collab = m.forward_collaborative(batch, {.stochastic = false, .frozen_masks = &frozen});
    for (std::size_t b = 0; b < 3; ++b) {
      for (std::size_t c = 0; c < 2; ++c) {
        CHECK(collab.logits[(b * 3 + j) * 2 + c] == doctest::Approx(single.logits[b * 2 + c]).epsilon(1e-12));
      }
    }
  }
  SUBCASE("k = 1: the two modes coincide") {
    MareModel one(small_config(1, 3), 2);
    const auto a = one.forward_collaborative(batch, {.stochastic = false});
    const auto b = one.forward_multitask(batch, 0, {.stochastic = false});
    CHECK(values_of(a.logits) == values_of(b.logits));
  }
}

TEST_CASE("rationale spans") {
  const std::vector<std::uint8_t> m = {0, 1, 1, 0, 1};
  const auto spans = mare::mask_spans(m);
  REQUIRE(spans.size() == 2);
  CHECK(spans[0] == std::pair<std::size_t, std::size_t>{1, 2});
  CHECK(spans[1] == std::pair<std::size_t, std::size_t>{4, 4});
  CHECK(mare::mask_spans(std::vector<std::uint8_t>{0, 0}).empty());
  CHECK(mare::mask_spans(std::vector<std::uint8_t>{1, 1, 1}).size() == 1);

  mare::MareOutput out;
  out.aspects = {0};
  out.lengths = {5, 2};
  out.layer_masks = {Tensor::from({2, 1, 5}, {0, 1, 1, 0, 1, 1, 1, 0, 0, 0})};
  const auto r = mare::extract_rationales(out);
  CHECK(r[0][0].spans == spans);
  CHECK(r[1][0].selection == std::vector<std::uint8_t>{1, 1});
}
