// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include "mare/rng.hpp"

#include <cmath>
#include <numbers>

#include "mare/error.hpp"

namespace mare {
namespace {

// SplitMix64 finaliser; a bijective avalanche mix of 64 bits.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

}  // namespace

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream), key_(mix64(mix64(seed) ^ (stream * kGolden + 0x632be59bd9b4e019ULL))) {}

std::uint64_t Rng::next_u64() {
  const std::uint64_t n = counter_++;
  return mix64(key_ ^ mix64(n * kGolden + 1));
}

double Rng::uniform() {
  // 53 random bits, shifted by half an ulp so neither 0 nor 1 is produced.
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double Rng::normal() {
  const double u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::gumbel() { return -std::log(-std::log(uniform())); }

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  if (n == 0) throw ParameterError("uniform_int: range must be positive");
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return x % n;
}

}  // namespace mare
