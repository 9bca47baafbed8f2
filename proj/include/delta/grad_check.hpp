#pragma once

#include <functional>
#include <vector>

#include "delta/tensor.hpp"

namespace delta {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t checked = 0;  // coordinates compared
};

/// Compares reverse-mode gradients of `f` against central differences
/// (f(x + eps e) - f(x - eps e)) / (2 eps), coordinate by coordinate, over every
/// tensor in `params`. The error of one coordinate is |a - n| / max(1, |a|, |n|).
///
/// `params` must be leaves with requires_grad set; their grads are reset.
/// Values are perturbed in place and restored before returning.
GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps = 1e-6);

/// Single-point form: `f` maps a tensor to a scalar and is checked at `point`.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double eps = 1e-6);

}  // namespace delta
