#pragma once

#include <functional>
#include <span>

#include "adares/autodiff.hpp"

namespace adares {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    std::size_t coordinates = 0;
};

/// Compares the tape gradient of a scalar function against central differences.
/// Error per coordinate is |analytic - numeric| / max(1, |analytic|).
inline GradCheckReport grad_check(const std::function<Var(Tape&, const Var&)>& f, const Tensor& x, double h = 1e-5) {
    Tensor analytic;
    {
        Tape tape;
        Var xv = tape.variable(x);
        Var y = f(tape, xv);
        tape.backward(y);
        analytic = xv.grad();
    }
    auto eval = [&](const Tensor& at) {
        Tape tape(false);
        return f(tape, tape.constant(at)).value().item();
    };
    GradCheckReport report;
    report.coordinates = x.size();
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + h;
        const double up = eval(probe);
        probe[i] = x[i] - h;
        const double down = eval(probe);
        probe[i] = x[i];
        const double numeric = (up - down) / (2.0 * h);
        if (!std::isfinite(numeric)) throw NumericError("non-finite finite-difference estimate");
        const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        if (err > report.max_rel_error) {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    return report;
}

/// Same check over every coordinate of a set of parameters. `loss` must rebuild the graph on the given tape.
inline GradCheckReport grad_check_params(const std::function<Var(Tape&)>& loss, std::span<Parameter* const> params,
                                         double h = 1e-5) {
    for (Parameter* p : params) p->zero_grad();
    {
        Tape tape;
        tape.backward(loss(tape));
    }
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) analytic.push_back(p->grad);

    auto eval = [&] {
        Tape tape(false);
        return loss(tape).value().item();
    };
    GradCheckReport report;
    std::size_t flat = 0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& v = params[k]->value;
        for (std::size_t i = 0; i < v.size(); ++i, ++flat) {
            const double orig = v[i];
            v[i] = orig + h;
            const double up = eval();
            v[i] = orig - h;
            const double down = eval();
            v[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            if (!std::isfinite(numeric)) throw NumericError("non-finite finite-difference estimate");
            const double a = analytic[k][i];
            const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
            if (err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_index = flat;
            }
        }
    }
    report.coordinates = flat;
    return report;
}

}  // namespace adares
