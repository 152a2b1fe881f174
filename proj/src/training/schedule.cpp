// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>

#include "mare/error.hpp"
#include "mare/ops.hpp"
#include "mare/training.hpp"

namespace mare {

std::vector<ScheduledBatch> balanced_round_robin(const std::vector<std::vector<std::vector<std::size_t>>>& streams,
                                                 Rng& rng) {
  if (streams.empty()) throw ContractError("balanced_round_robin: no streams");
  std::size_t longest = 0;
  for (std::size_t a = 0; a < streams.size(); ++a) {
    if (streams[a].empty()) throw ContractError("balanced_round_robin: aspect " + std::to_string(a) + " has no batches");
    longest = std::max(longest, streams[a].size());
  }
  // order[a] is the current pass over stream a; replaced by a fresh
  // permutation each time it is used up.
  std::vector<std::vector<std::size_t>> order(streams.size());
  std::vector<std::size_t> cursor(streams.size(), 0);
  for (std::size_t a = 0; a < streams.size(); ++a) {
    order[a].resize(streams[a].size());
    for (std::size_t i = 0; i < order[a].size(); ++i) order[a][i] = i;
  }
  std::vector<ScheduledBatch> out;
  out.reserve(longest * streams.size());
  for (std::size_t step = 0; step < longest; ++step) {
    for (std::size_t a = 0; a < streams.size(); ++a) {
      if (cursor[a] == order[a].size()) {
        rng.shuffle(order[a]);
        cursor[a] = 0;
      }
      out.push_back({a, streams[a][order[a][cursor[a]++]]});
    }
  }
  return out;
}

std::vector<std::vector<std::vector<std::size_t>>> aspect_batch_streams(const EncodedDataset& data,
                                                                        std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  std::vector<std::vector<std::vector<std::size_t>>> streams(data.num_aspects);
  for (std::size_t a = 0; a < data.num_aspects; ++a) {
    std::vector<std::size_t> pool;
    for (std::size_t n = 0; n < data.size(); ++n) {
      if (data.labels[n][a]) pool.push_back(n);
    }
    rng.shuffle(pool);
    for (std::size_t i = 0; i < pool.size(); i += batch_size) {
      streams[a].emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(i),
                              pool.begin() + static_cast<std::ptrdiff_t>(std::min(pool.size(), i + batch_size)));
    }
  }
  return streams;
}

AdamW::AdamW(std::vector<Tensor> params, Options options) : params_(std::move(params)), options_(options) {
  if (!(options_.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(options_.weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const auto& o = options_;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto w = p.mutable_values();
    const auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * g[j];
      v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * g[j] * g[j];
      const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + o.eps);
      w[j] -= o.learning_rate * (update + o.weight_decay * w[j]);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

TokenBatch make_batch(const EncodedDataset& data, std::span<const std::size_t> indices) {
  std::vector<std::vector<std::size_t>> seqs;
  seqs.reserve(indices.size());
  for (auto i : indices) seqs.push_back(data.ids.at(i));
  return TokenBatch::from_sequences(seqs);
}

}  // namespace mare
