#pragma once

#include <functional>
#include <string>

#include "mabert/autograd.hpp"

namespace mabert {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t scalars_checked = 0;
};

// Compares backward() against central differences (f(θ+h) - f(θ-h)) / 2h for every
// scalar of every parameter in `params`. `loss_fn` must rebuild the loss from the
// current parameter values on each call. Relative error is
// |a - b| / max(|a|, |b|, 1e-8). Float64 only; h must lie in [1e-6, 1e-4].
GradCheckReport finite_diff_check(const std::function<Var<double>()>& loss_fn, ParamStore<double>& params,
                                  double h = 1e-5);

// Same comparison, but the differences are taken on an extended-precision replica.
// `replica` must hold the same names and shapes as `params`; its values are
// overwritten with the float64 values before probing. Resolves gradients far below
// the ~1e-7 floor that float64 rounding of f imposes at h = 1e-5.
GradCheckReport finite_diff_check(const std::function<Var<double>()>& loss_fn, ParamStore<double>& params,
                                  const std::function<Var<long double>()>& replica_loss_fn,
                                  ParamStore<long double>& replica, double h = 1e-5);

}  // namespace mabert
