#pragma once

#include <functional>
#include <span>

#include "mmbert/random.h"
#include "mmbert/tensor.h"

namespace mmbert {

// Compares reverse-mode gradients against central finite differences.
// The point must be f64. Returns
//   max_i |analytic_i - (f(x + h e_i) - f(x - h e_i)) / 2h| / max(1, |analytic_i|).
// f must be differentiable in a neighbourhood of the point; kinks (e.g. |x| at
// 0) are unsupported inputs and produce meaningless errors.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                  double h = 1e-5);

// Multi-parameter variant for composite models: `loss` is re-evaluated after
// perturbing parameter values in place. At most `coords_per_param` randomly
// chosen coordinates of each parameter are probed (0 = all).
double grad_check_params(const std::function<Tensor()>& loss, std::span<Tensor> params,
                         double h, std::size_t coords_per_param, Rng& rng);

}  // namespace mmbert
