#pragma once

#include <functional>
#include <vector>

#include "fsrf/tensor.hpp"

namespace fsrf::ad {

/// Scalar-valued function of several tensors, built from recorded ops.
using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares reverse-mode gradients of `fn` at `inputs` against central
/// finite differences with the given step. Returns the worst relative error
///   max_i |analytic_i - central_i| / max(1, |central_i|)
/// over every coordinate of every input. `step` must lie in [1e-7, 1e-3].
double grad_check(const LossFn& fn, const std::vector<Tensor>& inputs,
                  double step = 1e-5);

/// Same comparison for a caller-supplied analytic gradient of a plain
/// function; used to probe the checker itself (a corrupted gradient must
/// produce a large error).
double grad_check_explicit(
    const std::function<double(const std::vector<double>&)>& value_fn,
    const std::vector<double>& analytic_grad, const std::vector<double>& x0,
    double step = 1e-5);

}  // namespace fsrf::ad
