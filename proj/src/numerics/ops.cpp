// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include "mare/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "mare/error.hpp"

namespace mare::numerics {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

thread_local bool t_relaxed = false;

// Builds the output node and wires the backward closure when any input is
// tracked and recording is enabled.
Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> bw) {
  bool rg = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) rg = rg || t.requires_grad();
  }
  auto node = std::make_shared<Node>(std::move(shape), std::move(values), rg);
  if (rg) {
    for (const auto& t : inputs) node->parents.push_back(t.node_ptr());
    node->backward = std::move(bw);
  }
  return Tensor(std::move(node));
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

std::size_t normalize_dim(int dim, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int d = dim < 0 ? dim + r : dim;
  if (d < 0 || d >= r) {
    throw DimensionError(std::string(op) + ": dim " + std::to_string(dim) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(d);
}

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i > 1; --i) strides[i - 2] = strides[i - 1] * shape[i - 1];
  return strides;
}

// Index mapping from a broadcast output into both operands.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_strides;  // 0 on broadcast axes
  std::vector<std::size_t> b_strides;
  bool same = false;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  const std::size_t r = std::max(a.size(), b.size());
  plan.out.assign(r, 1);
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    plan.out[i] = std::max(pa[i], pb[i]);
  }
  const auto sa = contiguous_strides(pa);
  const auto sb = contiguous_strides(pb);
  plan.a_strides.resize(r);
  plan.b_strides.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    plan.a_strides[i] = pa[i] == 1 ? 0 : sa[i];
    plan.b_strides[i] = pb[i] == 1 ? 0 : sb[i];
  }
  return plan;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <typename Fn>
void for_each_broadcast(const Broadcast& plan, Fn&& fn) {
  const std::size_t n = numel(plan.out);
  if (plan.same) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const std::size_t r = plan.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += plan.a_strides[d];
      ib += plan.b_strides[d];
      if (idx[d] < plan.out[d]) break;
      ia -= plan.a_strides[d] * idx[d];
      ib -= plan.b_strides[d] * idx[d];
      idx[d] = 0;
    }
  }
}

// Elementwise binary op with forward f(a, b) and partials da(a, b), db(a, b).
template <typename F, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, DA da, DB db) {
  auto plan = plan_broadcast(a.shape(), b.shape(), op);
  std::vector<double> out(numel(plan.out));
  const auto av = a.values();
  const auto bv = b.values();
  for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = f(av[ia], bv[ib]); });
  auto shape = plan.out;
  return make_result(std::move(shape), std::move(out), {a, b}, [plan, da, db](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      const double g = self.grad[i];
      if (pa.requires_grad) pa.grad[ia] += g * da(pa.value[ia], pb.value[ib]);
      if (pb.requires_grad) pb.grad[ib] += g * db(pa.value[ia], pb.value[ib]);
    });
  });
}

template <typename F, typename DF>
Tensor unary(const Tensor& x, F f, DF df) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result(x.shape(), std::move(out), {x}, [df](Node& self) {
    Node& px = parent(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * df(px.value[i], self.value[i]);
  });
}

std::size_t last_dim(const Tensor& x, const char* op) {
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw DimensionError(std::string(op) + ": needs a non-empty last dimension, got " + to_string(x.shape()));
  }
  return x.shape().back();
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary(
      x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(c * (v + k * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * k * v * v);
      });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return make_result({}, {total}, {x}, [](Node& self) {
    Node& px = parent(self, 0);
    for (auto& g : px.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_last_dim(const Tensor& x) {
  const std::size_t n = last_dim(x, "sum_last_dim");
  const std::size_t rows = x.numel() / n;
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  std::vector<double> out(rows, 0.0);
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r] += xv[r * n + j];
  }
  return make_result(std::move(shape), std::move(out), {x}, [n, rows](Node& self) {
    Node& px = parent(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < n; ++j) px.grad[r * n + j] += self.grad[r];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " to " + to_string(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
    Node& px = parent(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const auto& in = x.shape();
  const std::size_t r = in.size();
  if (axes.size() != r) throw DimensionError("permute: axes do not match rank of " + to_string(in));
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (axes[i] >= r || seen[axes[i]]) throw DimensionError("permute: invalid axes");
    seen[axes[i]] = true;
    out_shape[i] = in[axes[i]];
  }
  const auto in_strides = contiguous_strides(in);
  // src[i] = flat input index of output element i.
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    src[i] = offset;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      offset += in_strides[axes[d]];
      if (idx[d] < out_shape[d]) break;
      offset -= in_strides[axes[d]] * idx[d];
      idx[d] = 0;
    }
  }
  std::vector<double> out(n);
  const auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[src[i]];
  return make_result(std::move(out_shape), std::move(out), {x}, [src = std::move(src)](Node& self) {
    Node& px = parent(self, 0);
    for (std::size_t i = 0; i < src.size(); ++i) px.grad[src[i]] += self.grad[i];
  });
}

Tensor transpose_last2(const Tensor& x) {
  const std::size_t r = x.rank();
  if (r < 2) throw DimensionError("transpose_last2 needs rank >= 2, got " + to_string(x.shape()));
  std::vector<std::size_t> axes(r);
  for (std::size_t i = 0; i < r; ++i) axes[i] = i;
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(x, axes);
}

Tensor narrow(const Tensor& x, int dim, std::size_t start, std::size_t length) {
  const std::size_t d = normalize_dim(dim, x.rank(), "narrow");
  const auto& in = x.shape();
  if (start + length > in[d]) {
    throw DimensionError("narrow: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") exceeds dim " + std::to_string(d) + " of " + to_string(in));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < d; ++i) outer *= in[i];
  for (std::size_t i = d + 1; i < in.size(); ++i) inner *= in[i];
  Shape shape = in;
  shape[d] = length;
  const std::size_t span_in = in[d] * inner;
  const std::size_t span_out = length * inner;
  std::vector<double> out(outer * span_out);
  const auto xv = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * span_in + start * inner), span_out,
                out.begin() + static_cast<std::ptrdiff_t>(o * span_out));
  }
  return make_result(std::move(shape), std::move(out), {x}, [=](Node& self) {
    Node& px = parent(self, 0);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < span_out; ++i) px.grad[o * span_in + start * inner + i] += self.grad[o * span_out + i];
    }
  });
}

Tensor select(const Tensor& x, int dim, std::size_t index) {
  const std::size_t d = normalize_dim(dim, x.rank(), "select");
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(d));
  return reshape(narrow(x, static_cast<int>(d), index, 1), std::move(shape));
}

Tensor concat(std::span<const Tensor> parts, int dim) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const std::size_t d = normalize_dim(dim, parts[0].rank(), "concat");
  Shape shape = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != shape.size()) throw DimensionError("concat: rank mismatch");
    probe[d] = shape[d];
    if (probe != shape) {
      throw DimensionError("concat: " + to_string(p.shape()) + " incompatible with " + to_string(parts[0].shape()));
    }
    total += p.shape()[d];
  }
  shape[d] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < d; ++i) outer *= shape[i];
  for (std::size_t i = d + 1; i < shape.size(); ++i) inner *= shape[i];
  std::vector<double> out(numel(shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[d] * inner;
    const auto pv = p.values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(o * total * inner + offset));
    }
    widths.push_back(w);
    offset += w;
  }

  bool rg = false;
  if (grad_enabled()) {
    for (const auto& p : parts) rg = rg || p.requires_grad();
  }
  auto node = std::make_shared<Node>(std::move(shape), std::move(out), rg);
  if (rg) {
    for (const auto& p : parts) node->parents.push_back(p.node_ptr());
    const std::size_t row = total * inner;
    node->backward = [widths, outer, row](Node& self) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < widths.size(); ++k) {
        Node& pk = parent(self, k);
        if (pk.requires_grad) {
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < widths[k]; ++i) pk.grad[o * widths[k] + i] += self.grad[o * row + off + i];
          }
        }
        off += widths[k];
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  auto mismatch = [&] { return DimensionError("matmul: cannot multiply " + to_string(sa) + " by " + to_string(sb)); };
  if (sa.size() < 2 || sb.size() < 2) throw mismatch();
  const std::size_t p = sa[sa.size() - 2], q = sa.back();
  const std::size_t r = sb.back();
  if (sb[sb.size() - 2] != q) throw mismatch();
  const bool shared_rhs = sb.size() == 2;
  if (!shared_rhs && !std::equal(sa.begin(), sa.end() - 2, sb.begin(), sb.end() - 2)) throw mismatch();
  const std::size_t batch = a.numel() / (p * q);
  Shape shape(sa.begin(), sa.end() - 1);
  shape.push_back(r);
  std::vector<double> out(batch * p * r);

  if (shared_rhs) {
    MatMap(out.data(), static_cast<Eigen::Index>(batch * p), static_cast<Eigen::Index>(r)).noalias() =
        ConstMatMap(a.values().data(), static_cast<Eigen::Index>(batch * p), static_cast<Eigen::Index>(q)) *
        ConstMatMap(b.values().data(), static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(r));
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      MatMap(out.data() + i * p * r, static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(r)).noalias() =
          ConstMatMap(a.values().data() + i * p * q, static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(q)) *
          ConstMatMap(b.values().data() + i * q * r, static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(r));
    }
  }
  return make_result(std::move(shape), std::move(out), {a, b}, [=](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    const auto P = static_cast<Eigen::Index>(p), Q = static_cast<Eigen::Index>(q), R = static_cast<Eigen::Index>(r);
    if (shared_rhs) {
      const auto N = static_cast<Eigen::Index>(batch * p);
      ConstMatMap g(self.grad.data(), N, R);
      if (pa.requires_grad) {
        MatMap(pa.grad.data(), N, Q).noalias() += g * ConstMatMap(pb.value.data(), Q, R).transpose();
      }
      if (pb.requires_grad) {
        MatMap(pb.grad.data(), Q, R).noalias() += ConstMatMap(pa.value.data(), N, Q).transpose() * g;
      }
      return;
    }
    for (std::size_t i = 0; i < batch; ++i) {
      ConstMatMap g(self.grad.data() + i * p * r, P, R);
      if (pa.requires_grad) {
        MatMap(pa.grad.data() + i * p * q, P, Q).noalias() +=
            g * ConstMatMap(pb.value.data() + i * q * r, Q, R).transpose();
      }
      if (pb.requires_grad) {
        MatMap(pb.grad.data() + i * q * r, Q, R).noalias() +=
            ConstMatMap(pa.value.data() + i * p * q, P, Q).transpose() * g;
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2) throw DimensionError("linear: weight must be 2-D, got " + to_string(weight.shape()));
  auto y = matmul(x, weight);
  if (!bias.defined()) return y;
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(1)) {
    throw DimensionError("linear: bias " + to_string(bias.shape()) + " does not match weight " +
                         to_string(weight.shape()));
  }
  return add(y, bias);
}

Tensor softmax_last_dim(const Tensor& x) {
  const std::size_t n = last_dim(x, "softmax_last_dim");
  const std::size_t rows = x.numel() / n;
  const auto xv = x.values();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    double* o = out.data() + r * n;
    const double m = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - m));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  return make_result(x.shape(), std::move(out), {x}, [n, rows](Node& self) {
    Node& px = parent(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * n;
      const double* g = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) px.grad[r * n + j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor masked_softmax_last_dim(const Tensor& x, const Tensor& keep) {
  const std::size_t n = last_dim(x, "masked_softmax_last_dim");
  const auto plan = plan_broadcast(x.shape(), keep.shape(), "masked_softmax_last_dim");
  if (plan.out != x.shape()) {
    throw DimensionError("masked_softmax_last_dim: keep " + to_string(keep.shape()) + " does not broadcast to " +
                         to_string(x.shape()));
  }
  std::vector<char> kept(x.numel());
  const auto kv = keep.values();
  for_each_broadcast(plan, [&](std::size_t i, std::size_t, std::size_t ik) { kept[i] = kv[ik] != 0.0; });

  const std::size_t rows = x.numel() / n;
  const auto xv = x.values();
  std::vector<double> out(x.numel(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    const char* k = kept.data() + r * n;
    double* o = out.data() + r * n;
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (k[j]) m = std::max(m, in[j]);
    }
    if (m == -std::numeric_limits<double>::infinity()) continue;
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (k[j]) z += (o[j] = std::exp(in[j] - m));
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  // Dropped entries have y = 0, so the plain softmax backward rule applies.
  return make_result(x.shape(), std::move(out), {x}, [n, rows](Node& self) {
    Node& px = parent(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * n;
      const double* g = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) px.grad[r * n + j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor log_softmax_last_dim(const Tensor& x) {
  const std::size_t n = last_dim(x, "log_softmax_last_dim");
  const std::size_t rows = x.numel() / n;
  const auto xv = x.values();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    const double m = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(in[j] - m);
    const double lse = m + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = in[j] - lse;
  }
  return make_result(x.shape(), std::move(out), {x}, [n, rows](Node& self) {
    Node& px = parent(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * n;
      const double* g = self.grad.data() + r * n;
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += g[j];
      for (std::size_t j = 0; j < n; ++j) px.grad[r * n + j] += g[j] - std::exp(y[j]) * total;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t n = last_dim(x, "layer_norm");
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw DimensionError("layer_norm: gamma/beta must be [" + std::to_string(n) + "], got " +
                         to_string(gamma.shape()) + " and " + to_string(beta.shape()));
  }
  const std::size_t rows = x.numel() / n;
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (in[j] - mu) * inv_std[r];
      xhat[r * n + j] = h;
      out[r * n + j] = h * gv[j] + bv[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       Node& px = parent(self, 0);
                       Node& pg = parent(self, 1);
                       Node& pb = parent(self, 2);
                       std::vector<double> dh(n);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* g = self.grad.data() + r * n;
                         const double* h = xhat.data() + r * n;
                         double mean_dh = 0.0, mean_dh_h = 0.0;
                         for (std::size_t j = 0; j < n; ++j) {
                           if (pg.requires_grad) pg.grad[j] += g[j] * h[j];
                           if (pb.requires_grad) pb.grad[j] += g[j];
                           dh[j] = g[j] * pg.value[j];
                           mean_dh += dh[j];
                           mean_dh_h += dh[j] * h[j];
                         }
                         if (!px.requires_grad) continue;
                         mean_dh /= static_cast<double>(n);
                         mean_dh_h /= static_cast<double>(n);
                         for (std::size_t j = 0; j < n; ++j) {
                           px.grad[r * n + j] += inv_std[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                         }
                       }
                     });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids, const Shape& index_shape) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be 2-D, got " + to_string(table.shape()));
  if (numel(index_shape) != ids.size()) throw DimensionError("embedding: index shape does not match id count");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  const auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw VocabularyError("token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                            std::to_string(vocab));
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  Shape shape = index_shape;
  shape.push_back(d);
  std::vector<std::size_t> rows(ids.begin(), ids.end());
  return make_result(std::move(shape), std::move(out), {table}, [rows = std::move(rows), d](Node& self) {
    Node& pt = parent(self, 0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) pt.grad[rows[i] * d + j] += self.grad[i * d + j];
    }
  });
}

Tensor gather_last(const Tensor& x, std::span<const std::size_t> index) {
  const std::size_t n = last_dim(x, "gather_last");
  const std::size_t rows = x.numel() / n;
  if (index.size() != rows) {
    throw DimensionError("gather_last: " + std::to_string(index.size()) + " indices for " + std::to_string(rows) +
                         " rows");
  }
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] >= n) throw DimensionError("gather_last: index " + std::to_string(index[r]) + " >= " + std::to_string(n));
    out[r] = x.values()[r * n + index[r]];
  }
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result(std::move(shape), std::move(out), {x}, [n, idx = std::move(idx)](Node& self) {
    Node& px = parent(self, 0);
    for (std::size_t r = 0; r < idx.size(); ++r) px.grad[r * n + idx[r]] += self.grad[r];
  });
}

Tensor detach(const Tensor& x) {
  return Tensor::from(x.shape(), std::vector<double>(x.values().begin(), x.values().end()));
}

Tensor binarize_nonzero(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] != 0.0 ? 1.0 : 0.0;
  return Tensor::from(x.shape(), std::move(out));
}

Tensor one_hot_argmax(const Tensor& x) {
  const std::size_t n = last_dim(x, "one_hot_argmax");
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel(), 0.0);
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    out[r * n + static_cast<std::size_t>(std::max_element(in, in + n) - in)] = 1.0;
  }
  return Tensor::from(x.shape(), std::move(out));
}

Tensor straight_through_combine(const Tensor& hard, const Tensor& soft) {
  if (hard.shape() != soft.shape()) {
    throw DimensionError("straight_through_combine: hard " + to_string(hard.shape()) + " vs soft " +
                         to_string(soft.shape()));
  }
  const auto src = t_relaxed ? soft.values() : hard.values();
  std::vector<double> out(src.begin(), src.end());
  return make_result(hard.shape(), std::move(out), {soft}, [](Node& self) {
    Node& ps = parent(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) ps.grad[i] += self.grad[i];
  });
}

Tensor sample_gumbel_noise(const Shape& shape, Rng& rng) {
  std::vector<double> g(numel(shape));
  for (auto& v : g) v = rng.gumbel();
  return Tensor::from(shape, std::move(g));
}

Tensor gumbel_softmax_hard(const Tensor& logits, double temperature, const Tensor& noise) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("gumbel_softmax_hard: temperature must be positive, got " + std::to_string(temperature));
  }
  auto soft = softmax_last_dim(scale(add(logits, noise), 1.0 / temperature));
  return straight_through_combine(one_hot_argmax(soft), soft);
}

Tensor gumbel_softmax_hard(const Tensor& logits, double temperature, Rng& rng) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("gumbel_softmax_hard: temperature must be positive, got " + std::to_string(temperature));
  }
  return gumbel_softmax_hard(logits, temperature, sample_gumbel_noise(logits.shape(), rng));
}

RelaxedStraightThroughGuard::RelaxedStraightThroughGuard() : previous_(t_relaxed) { t_relaxed = true; }
RelaxedStraightThroughGuard::~RelaxedStraightThroughGuard() { t_relaxed = previous_; }
bool relaxed_straight_through() { return t_relaxed; }

}  // namespace mare::numerics
