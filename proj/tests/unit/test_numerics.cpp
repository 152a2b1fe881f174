// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "mare/error.hpp"
#include "mare/gradcheck.hpp"
#include "mare/ops.hpp"
#include "mare/rng.hpp"

namespace nx = mare::numerics;
using nx::Tensor;

namespace {

Tensor random_tensor(nx::Shape shape, mare::Rng& rng, bool requires_grad = true) {
  std::vector<double> v(nx::numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

std::vector<double> as_vector(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

// Weighted sum with fixed random weights so every output entry carries a
// distinct, nonzero upstream gradient.
Tensor probe_loss(const Tensor& y, std::uint64_t seed) {
  mare::Rng rng(seed, 99);
  return nx::sum(nx::mul(y, random_tensor(y.shape(), rng, false)));
}

}  // namespace

TEST_CASE("matmul: hand-computable products") {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto b = Tensor::from({2, 2}, {3, 4, 5, 6});
  CHECK(as_vector(nx::matmul(eye, b)) == std::vector<double>{3, 4, 5, 6});
  auto row = Tensor::from({1, 2}, {1, 2});
  auto col = Tensor::from({2, 1}, {3, 4});
  auto out = nx::matmul(row, col);
  CHECK(out.shape() == nx::Shape{1, 1});
  CHECK(out.item() == 11.0);
}

TEST_CASE("matmul: shape mismatch names both shapes") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({4, 5});
  try {
    nx::matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const mare::DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4, 5]") != std::string::npos);
  }
}

TEST_CASE("matmul: gradient of sum(a.b) w.r.t. a is ones . b^T") {
  mare::Rng rng(7);
  auto a = random_tensor({4, 5}, rng);
  auto b = random_tensor({5, 3}, rng);
  nx::backward(nx::sum(nx::matmul(a, b)));
  // ones(4,3) . b^T has every row equal to the row sums of b.
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      double row_sum = 0.0;
      for (std::size_t c = 0; c < 3; ++c) row_sum += b[j * 3 + c];
      CHECK(a.grad()[i * 5 + j] == doctest::Approx(row_sum).epsilon(1e-14));
    }
  }
  auto check = nx::finite_difference_check([&] { return nx::sum(nx::matmul(a, b)); }, {a, b}, 1e-6);
  CHECK(check.max_rel_error < 1e-6);
}

TEST_CASE("softmax_last_dim") {
  auto uniform = nx::softmax_last_dim(Tensor::from({3}, {0, 0, 0}));
  for (double v : uniform.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  auto saturated = nx::softmax_last_dim(Tensor::from({3}, {1000, 0, 0}));
  CHECK(std::isfinite(saturated[0]));
  CHECK(saturated[0] == doctest::Approx(1.0));
  CHECK(saturated[1] == doctest::Approx(0.0));

  // e^x / sum(e^x) for [1, 2, 3], evaluated independently.
  auto s = nx::softmax_last_dim(Tensor::from({3}, {1, 2, 3}));
  CHECK(s[0] == doctest::Approx(0.09003057317038046).epsilon(1e-12));
  CHECK(s[1] == doctest::Approx(0.24472847105479767).epsilon(1e-12));
  CHECK(s[2] == doctest::Approx(0.6652409557748219).epsilon(1e-12));

  auto rows = nx::softmax_last_dim(Tensor::from({2, 4}, {1, -2, 3, 0.5, 9, 9, 9, -9}));
  for (std::size_t r = 0; r < 2; ++r) {
    double total = 0;
    for (std::size_t j = 0; j < 4; ++j) total += rows[r * 4 + j];
    CHECK(total == doctest::Approx(1.0).epsilon(1e-15));
  }
}

TEST_CASE("masked_softmax_last_dim") {
  auto x = Tensor::from({2, 3}, {1, 2, 3, 5, 5, 5});
  auto keep = Tensor::from({2, 3}, {1, 0, 1, 0, 0, 0});
  auto y = nx::masked_softmax_last_dim(x, keep);
  const double e = std::exp(2.0);
  CHECK(y[0] == doctest::Approx(1.0 / (1.0 + e)).epsilon(1e-15));
  CHECK(y[1] == 0.0);
  CHECK(y[2] == doctest::Approx(e / (1.0 + e)).epsilon(1e-15));
  for (std::size_t j = 3; j < 6; ++j) CHECK(y[j] == 0.0);
  // Dropped entries have no influence on the rest.
  auto x2 = Tensor::from({2, 3}, {1, -40, 3, 5, 5, 5});
  CHECK(as_vector(nx::masked_softmax_last_dim(x2, keep)) == as_vector(y));
  // Broadcast keep over rows; all kept matches plain softmax.
  auto all = nx::masked_softmax_last_dim(x, Tensor::full({1, 3}, 1.0));
  CHECK(as_vector(all) == as_vector(nx::softmax_last_dim(x)));
}

TEST_CASE("gumbel_softmax_hard: strongly preferred class wins") {
  mare::Rng rng(11, mare::Stream::kGumbel);
  auto logits = Tensor::from({2}, {10, -10});
  int first = 0;
  for (int i = 0; i < 1000; ++i) {
    auto y = nx::gumbel_softmax_hard(logits, 1.0, rng);
    if (y[0] == 1.0 && y[1] == 0.0) ++first;
  }
  CHECK(first >= 999);
}

TEST_CASE("gumbel_softmax_hard: symmetric logits split evenly") {
  mare::Rng rng(12, mare::Stream::kGumbel);
  auto logits = Tensor::from({10000, 2}, std::vector<double>(20000, 0.0));
  auto y = nx::gumbel_softmax_hard(logits, 1.0, rng);
  double ones = 0;
  for (std::size_t r = 0; r < 10000; ++r) ones += y[2 * r];
  const double freq = ones / 10000.0;
  CHECK(freq >= 0.45);
  CHECK(freq <= 0.55);
}

TEST_CASE("gumbel_softmax_hard: output is exactly one-hot for every temperature") {
  mare::Rng rng(13);
  for (double tau : {0.01, 0.5, 1.0, 5.0, 100.0}) {
    auto logits = random_tensor({6, 4}, rng);
    auto y = nx::gumbel_softmax_hard(logits, tau, rng);
    for (std::size_t r = 0; r < 6; ++r) {
      double total = 0;
      for (std::size_t j = 0; j < 4; ++j) {
        const double v = y[r * 4 + j];
        CHECK(v * (1.0 - v) == 0.0);
        total += v;
      }
      CHECK(total == 1.0);
    }
  }
}

TEST_CASE("gumbel_softmax_hard: non-positive temperature") {
  mare::Rng rng(1);
  auto logits = Tensor::from({2}, {0, 0});
  CHECK_THROWS_AS(nx::gumbel_softmax_hard(logits, 0.0, rng), mare::ParameterError);
  CHECK_THROWS_AS(nx::gumbel_softmax_hard(logits, -1.0, rng), mare::ParameterError);
}

TEST_CASE("gumbel_softmax_hard: frozen noise, soft path matches finite differences") {
  mare::Rng rng(21);
  auto logits = random_tensor({3, 2}, rng);
  auto noise = nx::sample_gumbel_noise({3, 2}, rng);
  nx::RelaxedStraightThroughGuard relaxed;
  auto result = nx::finite_difference_check(
      [&] { return probe_loss(nx::gumbel_softmax_hard(logits, 0.7, noise), 5); }, {logits}, 1e-6);
  CHECK(result.max_rel_error < 1e-4);
}

TEST_CASE("straight_through_combine") {
  SUBCASE("forward equals hard") {
    auto hard = Tensor::from({2}, {1, 0});
    auto soft = Tensor::from({2}, {0.8, 0.3}, true);
    auto y = nx::straight_through_combine(hard, soft);
    CHECK(as_vector(y) == std::vector<double>{1, 0});
    nx::backward(nx::sum(y));
    CHECK(as_vector(Tensor::from({2}, {soft.grad()[0], soft.grad()[1]})) == std::vector<double>{1, 1});
  }
  SUBCASE("gradient never reaches hard-only inputs") {
    // x -> hard = one_hot_argmax(x) (non-differentiable), soft = softmax(x).
    // Hand chain rule for loss = sum(c * y): dL/dx = s * (c - <s, c>).
    auto x = Tensor::from({3}, {0.2, -1.0, 0.7}, true);
    const std::vector<double> c = {1.0, 2.0, 3.0};
    auto soft = nx::softmax_last_dim(x);
    auto y = nx::straight_through_combine(nx::one_hot_argmax(x), soft);
    nx::backward(nx::sum(nx::mul(y, Tensor::from({3}, c))));
    double sc = 0;
    for (int i = 0; i < 3; ++i) sc += soft[i] * c[i];
    for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(soft[i] * (c[i] - sc)).epsilon(1e-14));

    auto hard_input = Tensor::from({3}, {0, 1, 0}, true);
    auto z = nx::straight_through_combine(hard_input, nx::softmax_last_dim(x));
    nx::backward(nx::sum(z));
    CHECK_FALSE(hard_input.has_grad());
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(nx::straight_through_combine(Tensor::zeros({2}), Tensor::zeros({3})), mare::DimensionError);
  }
}

TEST_CASE("backward") {
  SUBCASE("x^2 at 3") {
    auto x = Tensor::scalar(3.0, true);
    nx::backward(nx::mul(x, x));
    CHECK(x.grad()[0] == 6.0);
  }
  SUBCASE("sum of softmax is constant") {
    mare::Rng rng(3);
    auto x = random_tensor({2, 5}, rng);
    nx::backward(nx::sum(nx::softmax_last_dim(x)));
    for (double g : x.grad()) CHECK(std::abs(g) < 1e-15);
  }
  SUBCASE("non-scalar loss") { CHECK_THROWS_AS(nx::backward(Tensor::zeros({2}, true)), mare::ContractError); }
  SUBCASE("shared subexpression accumulates") {
    auto x = Tensor::scalar(2.0, true);
    auto y = nx::mul(x, x);
    nx::backward(nx::add(y, y));  // 2x^2 -> 4x
    CHECK(x.grad()[0] == 8.0);
  }
}

TEST_CASE("finite_difference_check") {
  SUBCASE("x.x") {
    auto x = Tensor::from({3}, {1, 2, 3}, true);
    auto r = nx::finite_difference_check([&] { return nx::sum(nx::mul(x, x)); }, {x}, 1e-6);
    CHECK(r.max_rel_error < 1e-8);
    CHECK(r.entries_checked == 3);
  }
  SUBCASE("cross entropy of a linear map, 4 classes") {
    mare::Rng rng(17);
    auto inputs = random_tensor({5, 3}, rng, false);
    auto w = random_tensor({3, 4}, rng);
    auto b = random_tensor({4}, rng);
    const std::vector<std::size_t> labels = {0, 3, 1, 2, 3};
    auto loss = [&] {
      return nx::scale(nx::sum(nx::gather_last(nx::log_softmax_last_dim(nx::linear(inputs, w, b)), labels)), -0.2);
    };
    auto r = nx::finite_difference_check(loss, {w, b}, 1e-6);
    CHECK(r.max_rel_error < 1e-6);
  }
  SUBCASE("non-deterministic function is rejected") {
    auto x = Tensor::from({1}, {1.0}, true);
    mare::Rng rng(5);
    auto noisy = [&] { return nx::add_scalar(nx::sum(x), rng.uniform()); };
    CHECK_THROWS_AS(nx::finite_difference_check(noisy, {x}, 1e-6), mare::ContractError);
  }
  SUBCASE("eps must be positive") {
    auto x = Tensor::from({1}, {1.0}, true);
    CHECK_THROWS_AS(nx::finite_difference_check([&] { return nx::sum(x); }, {x}, 0.0), mare::ParameterError);
  }
}

TEST_CASE("every differentiable op passes the finite-difference check") {
  using Fn = std::function<Tensor(const std::vector<Tensor>&)>;
  struct Case {
    const char* name;
    std::vector<nx::Shape> inputs;
    Fn fn;
  };
  const std::vector<std::size_t> ids = {2, 0, 2, 1};
  const std::vector<Case> cases = {
      {"add broadcast", {{2, 3, 4}, {3, 1}}, [](auto& in) { return nx::add(in[0], in[1]); }},
      {"sub broadcast", {{4}, {2, 4}}, [](auto& in) { return nx::sub(in[0], in[1]); }},
      {"mul broadcast", {{2, 1, 4}, {1, 3, 4}}, [](auto& in) { return nx::mul(in[0], in[1]); }},
      {"mul self", {{5}}, [](auto& in) { return nx::mul(in[0], in[0]); }},
      {"scale", {{3, 2}}, [](auto& in) { return nx::scale(in[0], -1.7); }},
      {"add_scalar", {{3}}, [](auto& in) { return nx::add_scalar(in[0], 0.3); }},
      {"abs", {{6}}, [](auto& in) { return nx::abs(nx::add_scalar(in[0], 5.0)); }},
      {"gelu", {{7}}, [](auto& in) { return nx::gelu(in[0]); }},
      {"mean", {{2, 3}}, [](auto& in) { return nx::mean(nx::mul(in[0], in[0])); }},
      {"sum_last_dim", {{2, 3, 4}}, [](auto& in) { return nx::sum_last_dim(in[0]); }},
      {"reshape", {{2, 6}}, [](auto& in) { return nx::reshape(in[0], {3, 4}); }},
      {"permute", {{2, 3, 4}}, [](auto& in) { return nx::permute(in[0], {2, 0, 1}); }},
      {"transpose_last2", {{2, 3, 4}}, [](auto& in) { return nx::transpose_last2(in[0]); }},
      {"narrow", {{3, 5}}, [](auto& in) { return nx::narrow(in[0], 1, 1, 3); }},
      {"select", {{3, 4, 2}}, [](auto& in) { return nx::select(in[0], -1, 1); }},
      {"concat", {{2, 3}, {2, 1}}, [](auto& in) { return nx::concat(std::vector<Tensor>{in[0], in[1]}, 1); }},
      {"matmul batched", {{2, 3, 4}, {2, 4, 2}}, [](auto& in) { return nx::matmul(in[0], in[1]); }},
      {"matmul shared rhs", {{2, 3, 4}, {4, 5}}, [](auto& in) { return nx::matmul(in[0], in[1]); }},
      {"linear", {{3, 4}, {4, 2}, {2}}, [](auto& in) { return nx::linear(in[0], in[1], in[2]); }},
      {"softmax", {{3, 5}}, [](auto& in) { return nx::softmax_last_dim(in[0]); }},
      {"log_softmax", {{3, 5}}, [](auto& in) { return nx::log_softmax_last_dim(in[0]); }},
      {"masked_softmax", {{3, 4}},
       [](auto& in) {
         return nx::masked_softmax_last_dim(in[0], Tensor::from({3, 4}, {1, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 1}));
       }},
      {"layer_norm", {{3, 6}, {6}, {6}}, [](auto& in) { return nx::layer_norm(in[0], in[1], in[2]); }},
      {"embedding", {{3, 4}}, [&ids](auto& in) { return nx::embedding(in[0], ids, {2, 2}); }},
      {"gather_last", {{4, 3}}, [&ids](auto& in) { return nx::gather_last(in[0], ids); }},
      {"straight_through (relaxed)", {{4, 3}}, [](auto& in) {
         auto soft = nx::softmax_last_dim(in[0]);
         return nx::straight_through_combine(nx::one_hot_argmax(soft), soft);
       }},
  };
  mare::Rng rng(2024);
  std::uint64_t seed = 0;
  for (const auto& c : cases) {
    CAPTURE(c.name);
    std::vector<Tensor> inputs;
    for (const auto& s : c.inputs) inputs.push_back(random_tensor(s, rng));
    ++seed;
    nx::RelaxedStraightThroughGuard relaxed;
    auto r = nx::finite_difference_check([&] { return probe_loss(c.fn(inputs), seed); }, inputs, 1e-6);
    CHECK(r.max_rel_error < 1e-5);
  }
}

TEST_CASE("determinism: identical seeds give identical values and gradients") {
  auto run = [] {
    mare::Rng init(42, mare::Stream::kInit);
    mare::Rng noise(42, mare::Stream::kGumbel);
    auto w = random_tensor({4, 3}, init);
    auto x = random_tensor({5, 4}, init, false);
    auto y = nx::gumbel_softmax_hard(nx::matmul(x, w), 0.5, noise);
    auto loss = nx::sum(nx::mul(y, nx::matmul(x, w)));
    nx::backward(loss);
    auto out = as_vector(y);
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    out.push_back(loss.item());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("rng streams") {
  mare::Rng a(1, mare::Stream::kInit), b(1, mare::Stream::kInit), c(1, mare::Stream::kGumbel), d(2, mare::Stream::kInit);
  const auto x = a.next_u64();
  CHECK(x == b.next_u64());
  CHECK(x != c.next_u64());
  CHECK(x != d.next_u64());
  mare::Rng u(3);
  double total = 0;
  for (int i = 0; i < 20000; ++i) {
    const double v = u.uniform();
    CHECK(v > 0.0);
    CHECK(v < 1.0);
    total += v;
  }
  CHECK(total / 20000 == doctest::Approx(0.5).epsilon(0.02));
  std::vector<int> items = {1, 2, 3, 4, 5, 6};
  u.shuffle(items);
  std::sort(items.begin(), items.end());
  CHECK(items == std::vector<int>{1, 2, 3, 4, 5, 6});
}

TEST_CASE("no-grad guard and live-byte accounting") {
  auto x = Tensor::from({2}, {1, 2}, true);
  {
    nx::NoGradGuard guard;
    CHECK_FALSE(nx::mul(x, x).requires_grad());
  }
  CHECK(nx::mul(x, x).requires_grad());
  CHECK_FALSE(nx::detach(x).requires_grad());

  const auto before = nx::live_tensor_bytes();
  {
    auto big = Tensor::zeros({1000});
    CHECK(nx::live_tensor_bytes() == before + 8000);
    CHECK(nx::peak_live_tensor_bytes() >= before + 8000);
  }
  CHECK(nx::live_tensor_bytes() == before);
}
