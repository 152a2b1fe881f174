// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mare/rng.hpp"
#include "mare/tensor.hpp"

namespace mare::numerics {

// Elementwise arithmetic with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
Tensor abs(const Tensor& x);
// tanh approximation of GELU.
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Sums out the last dimension: [..., n] -> [...].
Tensor sum_last_dim(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor transpose_last2(const Tensor& x);
Tensor narrow(const Tensor& x, int dim, std::size_t start, std::size_t length);
// Removes dimension `dim` by taking slice `index`.
Tensor select(const Tensor& x, int dim, std::size_t index);
Tensor concat(std::span<const Tensor> parts, int dim);

// [..., p, q] x [..., q, r] -> [..., p, r]. Leading dimensions must match,
// or b may be a plain [q, r] matrix shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);
// x [..., in] . weight [in, out] + bias [out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Max-subtracted softmax over the last dimension.
Tensor softmax_last_dim(const Tensor& x);
Tensor log_softmax_last_dim(const Tensor& x);
// Softmax over the entries where `keep` (broadcast to x, never carries
// gradient) is nonzero; other entries are exactly 0, and a row with nothing
// kept is all zeros.
Tensor masked_softmax_last_dim(const Tensor& x, const Tensor& keep);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Rows of `table` [vocab, d] picked by ids; result shape is index_shape + [d].
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids, const Shape& index_shape);
// x [..., C] indexed by one class per leading position -> [...].
Tensor gather_last(const Tensor& x, std::span<const std::size_t> index);

// Same values, no gradient path.
Tensor detach(const Tensor& x);
// 1 where x != 0, else 0. Never carries gradient.
Tensor binarize_nonzero(const Tensor& x);
// One-hot of the first maximum along the last dimension. Never carries gradient.
Tensor one_hot_argmax(const Tensor& x);

// Forward value is `hard` exactly; the gradient reaches `soft` unchanged and
// never reaches `hard`. Equivalent to hard + soft - stop_grad(soft) with hard
// detached.
Tensor straight_through_combine(const Tensor& hard, const Tensor& soft);

// Hard Gumbel-softmax over the last dimension: the forward value is the
// one-hot argmax of (logits + g) / temperature and the backward pass is the
// gradient of the continuous relaxation softmax((logits + g) / temperature).
Tensor gumbel_softmax_hard(const Tensor& logits, double temperature, Rng& rng);
// Same, with the Gumbel noise supplied (same shape as logits). A zero noise
// tensor gives the deterministic argmax used at inference.
Tensor gumbel_softmax_hard(const Tensor& logits, double temperature, const Tensor& noise);
Tensor sample_gumbel_noise(const Shape& shape, Rng& rng);

// While alive, straight_through_combine forwards `soft` instead of `hard`.
// The network then computes the smooth relaxation whose exact gradient is
// what the straight-through backward pass propagates, which makes the
// backward rules checkable by finite differences.
class RelaxedStraightThroughGuard {
 public:
  RelaxedStraightThroughGuard();
  ~RelaxedStraightThroughGuard();
  RelaxedStraightThroughGuard(const RelaxedStraightThroughGuard&) = delete;
  RelaxedStraightThroughGuard& operator=(const RelaxedStraightThroughGuard&) = delete;

 private:
  bool previous_;
};
bool relaxed_straight_through();

}  // namespace mare::numerics
