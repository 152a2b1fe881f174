// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <set>

#include "doctest.h"
#include "mare/checkpoint.hpp"
#include "mare/error.hpp"
#include "mare/eval.hpp"
#include "mare/gradcheck.hpp"
#include "mare/ops.hpp"
#include "mare/training.hpp"

namespace nx = mare::numerics;
using namespace mare;

namespace {

Tensor mask_tensor(std::size_t B, std::size_t kp, std::vector<double> values) {
  const std::size_t L = values.size() / (B * kp);
  return Tensor::from({B, kp, L}, std::move(values));
}

MareConfig tiny_config(std::size_t k, std::size_t vocab) {
  MareConfig c;
  c.encoder.num_layers = 2;
  c.encoder.num_heads = 2;
  c.encoder.model_dim = 16;
  c.encoder.ffn_dim = 32;
  c.encoder.vocab_size = vocab;
  c.encoder.max_len = 40;
  c.num_aspects = k;
  c.cliff_layer = 1;
  c.recompute_masks_per_layer = false;
  c.sparsity_targets.assign(k, 0.2);
  return c;
}

// One aspect; label 1 iff the sentence contains "good". Filler words are
// shared, so a bag-of-words linear model separates the classes.
Dataset separable_toy(std::size_t n, std::uint64_t seed) {
  Rng rng(seed, Stream::kData);
  const std::vector<std::string> filler = {"the", "a", "was", "it", "this", "very", "and", "with", "on", "of"};
  Dataset ds{1, {}};
  for (std::size_t i = 0; i < n; ++i) {
    MultiAspectExample ex;
    const bool positive = rng.bernoulli(0.5);
    const std::size_t len = 6 + rng.uniform_int(4);
    const std::size_t at = rng.uniform_int(len);
    for (std::size_t t = 0; t < len; ++t) {
      ex.tokens.push_back(t == at ? (positive ? "good" : "bad") : filler[rng.uniform_int(filler.size())]);
    }
    ex.labels = {positive ? 1u : 0u};
    ex.rationales = {std::nullopt};
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

std::map<std::string, std::vector<double>> param_values(const MareModel& m) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& p : m.parameters()) out[p.name] = {p.tensor.values().begin(), p.tensor.values().end()};
  return out;
}

}  // namespace

TEST_CASE("cross entropy values and errors") {
  const std::vector<std::size_t> labels = {0, 1, 1};
  CHECK(cross_entropy(Tensor::zeros({3, 2}), labels).item() == doctest::Approx(std::numbers::ln2).epsilon(1e-12));
  CHECK(std::abs(cross_entropy(Tensor::zeros({3, 2}), labels).item() - std::numbers::ln2) < 1e-12);
  const auto saturated = Tensor::from({2, 2}, {60.0, -60.0, -60.0, 60.0});
  CHECK(cross_entropy(saturated, std::vector<std::size_t>{0, 1}).item() < 1e-40);
  CHECK_THROWS_AS(cross_entropy(Tensor::zeros({2, 2}), std::vector<std::size_t>{0, 2}), ContractError);
  CHECK_THROWS_AS(cross_entropy(Tensor::zeros({2, 2}), std::vector<std::size_t>{0}), DimensionError);
}

TEST_CASE("cross entropy gradient matches finite differences") {
  Rng rng(3, Stream::kProbe);
  std::vector<double> v(12);
  for (auto& x : v) x = rng.normal();
  const auto logits = Tensor::from({4, 3}, v, true);
  const std::vector<std::size_t> labels = {2, 0, 1, 1};
  const auto r = nx::finite_difference_check([&] { return cross_entropy(logits, labels); }, {logits}, 1e-6);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("sparsity loss examples") {
  // Mean 0.3 against 0.2.
  const auto m = mask_tensor(1, 1, {1, 1, 1, 0, 0, 0, 0, 0, 0, 0});
  CHECK(sparsity_loss(m, {}, std::vector<double>{0.2}).item() == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(sparsity_loss(m, {}, std::vector<double>{0.3}).item() == doctest::Approx(0.0));
  // Deviations 0.1 and 0.3 average to 0.2.
  const auto two = mask_tensor(1, 2, {1, 1, 0, 0, 0, 0, 0, 0, 0, 0,  //
                                      1, 1, 1, 1, 1, 0, 0, 0, 0, 0});
  CHECK(sparsity_loss(two, {}, std::vector<double>{0.1, 0.2}).item() == doctest::Approx(0.2).epsilon(1e-12));
  // Padding beyond the row length is ignored.
  const auto padded = mask_tensor(1, 1, {1, 0, 0, 0, 1, 1});
  const std::vector<std::size_t> len = {4};
  CHECK(sparsity_loss(padded, len, std::vector<double>{0.25}).item() == doctest::Approx(0.0));
  CHECK_THROWS_AS(sparsity_loss(padded, std::vector<std::size_t>{0}, std::vector<double>{0.1}), ContractError);
  CHECK_THROWS_AS(sparsity_loss(padded, {}, std::vector<double>{0.1, 0.2}), DimensionError);
}

TEST_CASE("continuity loss examples") {
  CHECK(continuity_loss(mask_tensor(1, 1, {1, 1, 0, 0, 1}), {}).item() == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(continuity_loss(mask_tensor(1, 1, {1, 1, 1, 1}), {}).item() == 0.0);
  CHECK(continuity_loss(mask_tensor(1, 1, {0, 0, 0}), {}).item() == 0.0);
  CHECK(continuity_loss(mask_tensor(1, 1, {1, 0, 1, 0}), {}).item() == doctest::Approx(1.0).epsilon(1e-12));
  // Two aspects: 1 and 0 averaged.
  CHECK(continuity_loss(mask_tensor(1, 2, {1, 0, 1, 0, 1, 1, 1, 1}), {}).item() == doctest::Approx(0.5));
  // Transitions into padding are not counted.
  const std::vector<std::size_t> len = {3};
  CHECK(continuity_loss(mask_tensor(1, 1, {1, 1, 1, 0, 1}), len).item() == 0.0);
  CHECK_THROWS_AS(continuity_loss(mask_tensor(1, 1, {1}), {}), ContractError);
  CHECK_THROWS_AS(continuity_loss(mask_tensor(1, 1, {1, 0, 1}), std::vector<std::size_t>{1}), ContractError);
}

TEST_CASE("mask losses lie in [0, 1] on random masks") {
  Rng rng(5, Stream::kProbe);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = 1 + rng.uniform_int(3), kp = 1 + rng.uniform_int(3), L = 2 + rng.uniform_int(8);
    std::vector<double> v(B * kp * L);
    for (auto& x : v) x = rng.bernoulli(0.5) ? 1.0 : 0.0;
    std::vector<double> targets(kp);
    for (auto& t : targets) t = rng.uniform();
    const auto m = Tensor::from({B, kp, L}, v);
    const double s = sparsity_loss(m, {}, targets).item();
    const double c = continuity_loss(m, {}).item();
    CHECK((s >= 0.0 && s <= 1.0));
    CHECK((c >= 0.0 && c <= 1.0));
  }
}

TEST_CASE("total loss: weights, linearity and divergence") {
  const auto ce = Tensor::scalar(0.5), sp = Tensor::scalar(0.2), ct = Tensor::scalar(0.1);
  CHECK(total_loss(ce, sp, ct, {0.0, 0.0}).total.item() == 0.5);
  const double l1 = total_loss(ce, sp, ct, {1.5, 0.7}).total.item();
  const double l2 = total_loss(ce, sp, ct, {3.0, 0.7}).total.item();
  CHECK((l2 - 0.5 - 0.7 * 0.1) == doctest::Approx(2.0 * (l1 - 0.5 - 0.7 * 0.1)).epsilon(1e-12));
  const auto nan = Tensor::scalar(std::numeric_limits<double>::quiet_NaN());
  CHECK_THROWS_AS(total_loss(nan, sp, ct, {}), DivergenceError);
  CHECK_THROWS_AS(total_loss(ce, Tensor::scalar(INFINITY), ct, {}), DivergenceError);
  CHECK_THROWS_AS((LossWeights{-1.0, 0.0}.validate()), ConfigError);
}

TEST_CASE("sparsity loss alone drives the MAC projections") {
  MareModel model(tiny_config(2, 20), 7);
  const std::vector<std::vector<std::size_t>> seqs = {{2, 3, 4, 5, 6, 7}, {8, 9, 10, 11}};
  const auto batch = TokenBatch::from_sequences(seqs);
  Rng g(1, Stream::kGumbel);
  const auto out = model.forward_collaborative(batch, {.stochastic = true, .gumbel_rng = &g});
  auto loss = sparsity_loss(out.final_mask(), out.lengths, std::vector<double>{0.9, 0.0});
  nx::backward(loss);
  double mac = 0.0;
  for (const auto& p : model.parameters()) {
    if (p.name.find("mac") == std::string::npos) continue;
    for (double v : p.tensor.grad()) mac += std::abs(v);
  }
  CHECK(mac > 0.0);
}

TEST_CASE("balanced round robin") {
  Rng rng(1, Stream::kShuffle);
  using Streams = std::vector<std::vector<std::vector<std::size_t>>>;
  const Streams equal = {{{0}, {1}}, {{2}, {3}}, {{4}, {5}}};
  std::vector<std::size_t> order;
  for (const auto& s : balanced_round_robin(equal, rng)) order.push_back(s.aspect);
  CHECK(order == std::vector<std::size_t>{0, 1, 2, 0, 1, 2});

  const Streams unequal = {{{7}}, {{1}, {2}, {3}}};
  const auto sched = balanced_round_robin(unequal, rng);
  order.clear();
  std::set<std::size_t> aspect1;
  for (const auto& s : sched) {
    order.push_back(s.aspect);
    if (s.aspect == 0) CHECK(s.examples == std::vector<std::size_t>{7});
    if (s.aspect == 1) aspect1.insert(s.examples.front());
  }
  CHECK(order == std::vector<std::size_t>{0, 1, 0, 1, 0, 1});
  CHECK(aspect1 == std::set<std::size_t>{1, 2, 3});

  // Every aspect emits max |stream| batches; a recycled stream uses each
  // batch at most ceil(max / |stream|) times.
  const Streams ragged = {{{0}, {1}}, {{2}, {3}, {4}, {5}, {6}}, {{7}}};
  std::map<std::size_t, std::map<std::size_t, int>> uses;
  for (const auto& s : balanced_round_robin(ragged, rng)) ++uses[s.aspect][s.examples.front()];
  for (const auto& [a, m] : uses) {
    int total = 0;
    for (const auto& [b, c] : m) {
      total += c;
      CHECK(c <= static_cast<int>((5 + ragged[a].size() - 1) / ragged[a].size()));
    }
    CHECK(total == 5);
  }
  CHECK_THROWS_AS(balanced_round_robin(Streams{{{0}}, {}}, rng), ContractError);
  CHECK_THROWS_AS(balanced_round_robin(Streams{}, rng), ContractError);
}

TEST_CASE("aspect streams keep only labelled examples") {
  EncodedDataset data;
  data.num_aspects = 2;
  for (std::size_t i = 0; i < 10; ++i) {
    data.ids.push_back({2, 3});
    data.labels.push_back({i % 2 == 0 ? std::optional<std::size_t>(1) : std::nullopt, std::optional<std::size_t>(0)});
    data.rationales.push_back({std::nullopt, std::nullopt});
  }
  Rng rng(1, Stream::kShuffle);
  const auto streams = aspect_batch_streams(data, 3, rng);
  CHECK(streams[0].size() == 2);
  CHECK(streams[1].size() == 4);
  for (const auto& batch : streams[0]) {
    for (auto n : batch) CHECK(n % 2 == 0);
  }
  CHECK_THROWS_AS(aspect_batch_streams(data, 0, rng), ConfigError);
}

TEST_CASE("AdamW matches a hand-rolled update") {
  auto w = Tensor::from({2}, {1.0, -2.0}, true);
  AdamW opt({w}, {.learning_rate = 0.1, .weight_decay = 0.01});
  double m[2] = {0, 0}, v[2] = {0, 0}, x[2] = {1.0, -2.0};
  const double g[2][2] = {{0.5, -1.0}, {0.25, 2.0}};
  for (int t = 1; t <= 2; ++t) {
    opt.zero_grad();
    auto grad = w.mutable_grad();
    grad[0] = g[t - 1][0];
    grad[1] = g[t - 1][1];
    opt.step();
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[t - 1][i];
      v[i] = 0.999 * v[i] + 0.001 * g[t - 1][i] * g[t - 1][i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      x[i] -= 0.1 * (mh / (std::sqrt(vh) + 1e-8) + 0.01 * x[i]);
    }
    CHECK(w[0] == doctest::Approx(x[0]).epsilon(1e-14));
    CHECK(w[1] == doctest::Approx(x[1]).epsilon(1e-14));
  }
  CHECK(opt.steps() == 2);
  CHECK_THROWS_AS(AdamW({w}, {.learning_rate = 0.0}), ConfigError);
}

TEST_CASE("linearly separable toy reaches 99% train accuracy") {
  const auto ds = separable_toy(400, 11);
  const auto vocab = Vocabulary::build(ds);
  const auto data = encode(ds, vocab);
  auto cfg = tiny_config(1, vocab.size());
  cfg.sparsity_targets = {0.2};
  MareModel model(cfg, 1);
  TrainConfig tc;
  tc.max_epochs = 20;
  tc.batch_size = 16;
  double best = 0.0;
  std::size_t epochs = 0;
  for (; epochs < tc.max_epochs && best < 0.99; ++epochs) {
    auto one = tc;
    one.max_epochs = 1;
    one.seed = epochs + 1;
    train(model, data, nullptr, one);
    best = *evaluate(model, data, {.keep_examples = false}).aspects[0].accuracy;
  }
  MESSAGE("epochs used: " << epochs << ", accuracy " << best);
  CHECK(best >= 0.99);
}

TEST_CASE("training is deterministic for a fixed seed") {
  SynthGrammarConfig sc;
  sc.filler_min = 6;
  sc.filler_max = 8;
  const auto ds = synth_generate(sc, 60);
  const auto vocab = Vocabulary::build(ds);
  const auto data = encode(ds, vocab);
  auto run = [&] {
    MareModel model(tiny_config(3, vocab.size()), 4);
    TrainConfig tc;
    tc.max_epochs = 2;
    tc.batch_size = 8;
    tc.seed = 9;
    std::vector<nlohmann::json> log;
    train(model, data, &data, tc, {.on_epoch = [&](const EpochMetrics& e) {
            auto j = e.to_json();
            j.erase("wall_ms");
            log.push_back(j);
          }});
    return std::make_pair(log, param_values(model));
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  CHECK(a.first.size() == 2);
}

TEST_CASE("should_stop ends training after the epoch it returns true for") {
  SynthGrammarConfig sc;
  sc.filler_min = 6;
  sc.filler_max = 8;
  const auto ds = synth_generate(sc, 40);
  const auto vocab = Vocabulary::build(ds);
  const auto data = encode(ds, vocab);
  MareModel model(tiny_config(3, vocab.size()), 4);
  TrainConfig tc;
  tc.max_epochs = 5;
  tc.batch_size = 8;
  std::vector<std::size_t> seen;
  const auto result = train(model, data, nullptr, tc,
                            {.on_epoch = [&](const EpochMetrics& e) { seen.push_back(e.epoch); },
                             .should_stop = [](const EpochMetrics& e) { return e.epoch == 2; }});
  CHECK(result.epochs.size() == 2);
  CHECK(seen == std::vector<std::size_t>{1, 2});
}

TEST_CASE("a multitask step touches only shared and own-aspect parameters") {
  SynthGrammarConfig sc;
  sc.filler_min = 6;
  sc.filler_max = 8;
  const auto ds = synth_generate(sc, 20);
  const auto vocab = Vocabulary::build(ds);
  const auto data = encode(ds, vocab);
  for (auto strategy : {InitStrategy::kRandom, InitStrategy::kCls, InitStrategy::kShare}) {
    auto cfg = tiny_config(3, vocab.size());
    cfg.init_strategy = strategy;
    MareModel model(cfg, 2);
    const auto before = param_values(model);
    TrainConfig tc;
    tc.max_epochs = 1;
    tc.max_steps_per_epoch = 1;  // the first scheduled batch is aspect 0
    tc.batch_size = 4;
    train(model, data, nullptr, tc);
    const auto after = param_values(model);

    std::set<std::string> frozen;
    for (std::size_t a : {1, 2}) {
      for (const auto& t : model.aspect_parameters(a)) {
        for (const auto& p : model.parameters()) {
          if (p.tensor.node_ptr() == t.node_ptr()) frozen.insert(p.name);
        }
      }
    }
    REQUIRE_FALSE(frozen.empty());
    std::size_t changed = 0;
    for (const auto& [name, values] : before) {
      if (frozen.count(name)) {
        CHECK_MESSAGE(after.at(name) == values, name);
      } else if (after.at(name) != values) {
        ++changed;
      }
    }
    CHECK(changed > 0);
    if (strategy != InitStrategy::kShare) {
      const auto& b = before.at("special_tokens");
      const auto& a = after.at("special_tokens");
      const std::size_t d = cfg.encoder.model_dim;
      CHECK(std::vector<double>(a.begin(), a.begin() + d) != std::vector<double>(b.begin(), b.begin() + d));
      CHECK(std::vector<double>(a.begin() + d, a.end()) == std::vector<double>(b.begin() + d, b.end()));
    }
  }
}

TEST_CASE("collaborative training counts k masks per step") {
  SynthGrammarConfig sc;
  sc.filler_min = 6;
  sc.filler_max = 8;
  const auto ds = synth_generate(sc, 24);
  const auto vocab = Vocabulary::build(ds);
  const auto data = encode(ds, vocab);
  TrainConfig tc;
  tc.max_epochs = 1;
  tc.batch_size = 8;
  std::size_t counts[2];
  for (auto mode : {TrainingMode::kMultitask, TrainingMode::kCollaborative}) {
    MareModel model(tiny_config(3, vocab.size()), 3);
    tc.mode = mode;
    const auto r = train(model, data, nullptr, tc);
    counts[mode == TrainingMode::kCollaborative] = r.epochs[0].mask_computations;
    CHECK(r.epochs[0].steps == 9);
  }
  CHECK(counts[1] == 3 * counts[0]);
}

TEST_CASE("divergence restores the last good parameters") {
  SynthGrammarConfig sc;
  sc.filler_min = 6;
  sc.filler_max = 8;
  const auto ds = synth_generate(sc, 16);
  const auto vocab = Vocabulary::build(ds);
  const auto data = encode(ds, vocab);
  MareModel model(tiny_config(3, vocab.size()), 3);
  TrainConfig tc;
  tc.max_epochs = 1;
  tc.batch_size = 8;
  train(model, data, nullptr, tc);
  // Poison one head weight: the first step of the next epoch diverges.
  for (const auto& p : model.parameters()) {
    if (p.name == "head.aspect0.weight") {
      auto t = p.tensor;
      t.mutable_values()[0] = std::numeric_limits<double>::quiet_NaN();
    }
  }
  CHECK_THROWS_AS(train(model, data, nullptr, tc), DivergenceError);
}

TEST_CASE("train config validation and JSON") {
  TrainConfig tc;
  tc.batch_size = 0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc.batch_size = 4;
  tc.learning_rate = 0.0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc.learning_rate = 0.01;
  tc.mode = TrainingMode::kCollaborative;
  tc.sparsity_targets = {0.1, 0.2};
  const auto back = train_config_from_json(to_json(tc));
  CHECK(to_json(back) == to_json(tc));
  CHECK_THROWS_AS(parse_training_mode("joint"), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"batch_size", "many"}}), ConfigError);
}

TEST_CASE("metrics log writes one JSON object per line") {
  const auto path = (std::filesystem::temp_directory_path() / "mare_metrics_test.jsonl").string();
  MetricsLog log(path);
  EpochMetrics e;
  e.epoch = 1;
  e.val_acc = {0.5, std::nullopt};
  log.append(e);
  e.epoch = 2;
  log.append(e);
  std::ifstream in(path);
  std::string line;
  std::vector<nlohmann::json> rows;
  while (std::getline(in, line)) rows.push_back(nlohmann::json::parse(line));
  REQUIRE(rows.size() == 2);
  CHECK(rows[1]["epoch"] == 2);
  CHECK(rows[0]["val_acc"][1].is_null());
  for (const char* key : {"loss", "ce", "sparse", "cont", "val_sparsity", "wall_ms", "peak_live_bytes"}) {
    CHECK(rows[0].contains(key));
  }
  std::filesystem::remove(path);
}
