#include "mabert/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace mabert {

namespace {

void check_step(double h) {
    if (!(h >= 1e-6 && h <= 1e-4)) {
        throw ContractError("finite_diff_check step " + std::to_string(h) + " outside [1e-6, 1e-4]");
    }
}

template <typename S>
GradCheckReport compare(const Gradients<double>& analytic, const std::function<Var<S>()>& loss_fn,
                        ParamStore<S>& params, double h) {
    GradCheckReport report;
    NoGradGuard no_grad;
    const S step = S(h);
    for (auto& entry : params.entries()) {
        Tensor<S>& theta = entry.var.mutable_value();
        const Tensor<double>& grad = analytic.at(entry.name);
        for (std::size_t i = 0; i < theta.numel(); ++i) {
            const S saved = theta[i];
            theta[i] = saved + step;
            const S plus = loss_fn().value().item();
            theta[i] = saved - step;
            const S minus = loss_fn().value().item();
            theta[i] = saved;
            if (!std::isfinite(plus) || !std::isfinite(minus)) {
                throw ContractError("finite-difference oracle produced a non-finite loss at " + entry.name + "[" +
                                    std::to_string(i) + "]");
            }
            const double numeric = static_cast<double>((plus - minus) / (S(2) * step));
            const double a = grad[i];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            ++report.scalars_checked;
            if (rel > report.max_rel_error || report.worst_param.empty()) {
                report.max_rel_error = std::max(rel, report.max_rel_error);
                report.worst_param = entry.name;
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace

GradCheckReport finite_diff_check(const std::function<Var<double>()>& loss_fn, ParamStore<double>& params,
                                  double h) {
    check_step(h);
    params.zero_grad();
    const Gradients<double> analytic = backward(loss_fn(), params);
    return compare<double>(analytic, loss_fn, params, h);
}

GradCheckReport finite_diff_check(const std::function<Var<double>()>& loss_fn, ParamStore<double>& params,
                                  const std::function<Var<long double>()>& replica_loss_fn,
                                  ParamStore<long double>& replica, double h) {
    check_step(h);
    params.zero_grad();
    const Gradients<double> analytic = backward(loss_fn(), params);
    const auto& src = params.entries();
    auto& dst = replica.entries();
    if (src.size() != dst.size()) throw ContractError("finite_diff_check replica has a different parameter count");
    for (std::size_t k = 0; k < src.size(); ++k) {
        const Tensor<double>& from = src[k].var.value();
        Tensor<long double>& to = dst[k].var.mutable_value();
        if (src[k].name != dst[k].name || from.shape() != to.shape()) {
            throw ContractError("finite_diff_check replica mismatch at " + src[k].name);
        }
        for (std::size_t i = 0; i < from.numel(); ++i) to[i] = from[i];
    }
    return compare<long double>(analytic, replica_loss_fn, replica, h);
}

}  // namespace mabert
