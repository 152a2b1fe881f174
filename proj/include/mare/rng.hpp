// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <utility>
#include <vector>

namespace mare {

// Independent random streams. Every consumer draws from its own stream so
// that changing, e.g., the amount of Gumbel noise drawn never shifts the
// parameter initialisation or the data order.
enum class Stream : std::uint64_t {
  kInit = 1,
  kGumbel = 2,
  kShuffle = 3,
  kData = 4,
  kProbe = 5,
};

// Counter-based generator: draw n of stream s under seed is a pure function
// of (seed, s, n), so sequences are bit-identical across runs and platforms.
// The distributions are implemented here rather than taken from <random>
// because the standard distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);
  Rng(std::uint64_t seed, Stream stream)
      : Rng(seed, static_cast<std::uint64_t>(stream)) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  // Uniform in the open interval (0, 1).
  double uniform();
  double normal();
  // Standard Gumbel(0, 1) sample: -log(-log(u)).
  double gumbel();
  // Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }

  // Fisher-Yates with this generator.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace mare
