// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include "mare/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mare/error.hpp"

namespace mare::numerics {

GradCheckResult finite_difference_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                                        double eps) {
  if (!(eps > 0.0)) throw ParameterError("finite_difference_check: eps must be positive");

  for (auto& p : params) {
    if (p.has_grad()) p.zero_grad();
  }
  const Tensor loss = loss_fn();
  const double reference = loss.item();
  {
    NoGradGuard no_grad;
    const double again = loss_fn().item();
    if (again != reference) {
      throw ContractError("finite_difference_check: loss function is not deterministic (" +
                          std::to_string(reference) + " vs " + std::to_string(again) + ")");
    }
  }
  backward(loss);

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto values = p.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = loss_fn().item();
      values[i] = saved - eps;
      const double down = loss_fn().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-12});
      const double err = std::abs(analytic[i] - numeric) / denom;
      ++result.entries_checked;
      if (err > result.max_rel_error || (std::isnan(err) && !std::isnan(result.max_rel_error))) {
        result.max_rel_error = err;
        result.worst_param = p.name().empty() ? "param#" + std::to_string(pi) : p.name();
        result.worst_index = i;
        result.worst_analytic = analytic[i];
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace mare::numerics
