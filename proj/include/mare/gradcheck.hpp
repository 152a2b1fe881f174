// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mare/tensor.hpp"

namespace mare::numerics {

struct GradCheckResult {
  double max_rel_error = 0.0;
  // Where the worst entry lives, for diagnostics.
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
};

// Compares the reverse-mode gradient of `loss_fn` against central
// differences for every entry of every tensor in `params`:
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
// `loss_fn` must be deterministic; it is evaluated twice up front and a
// mismatch raises ContractError. Parameter values are restored on return.
GradCheckResult finite_difference_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                                        double eps);

}  // namespace mare::numerics
