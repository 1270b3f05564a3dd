#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "ahmf/tensor.hpp"

// Central finite-difference gradient verification. The function under test is
// provided as a single callable `run(collect_grads)`: it must rebuild the
// whole forward pass from the current input values and return the scalar
// objective (sum over outputs, or an actual loss); when collect_grads is true
// it must additionally accumulate analytic gradients into each input's .grad.
// The callable has to be pure: repeated calls on the same values give the same
// result, and nothing outside the inputs is mutated.

namespace ahmf {

struct GradCheckReport {
    std::string op_name;
    double max_rel_error = 0.0;
    std::vector<double> per_input_errors;
    bool passed = false;
    std::string detail;  // location of the worst or non-finite element
};

template <typename S>
GradCheckReport grad_check(const std::string& op_name,
                           const std::vector<TensorT<S>*>& inputs,
                           const std::function<double(bool)>& run, double tol,
                           double h = 1e-4) {
    GradCheckReport report;
    report.op_name = op_name;

    for (TensorT<S>* t : inputs) {
        t->set_requires_grad(true);
        t->zero_grad();
    }
    run(true);

    std::vector<std::vector<S>> analytic;
    analytic.reserve(inputs.size());
    for (TensorT<S>* t : inputs) analytic.push_back(t->grad);

    bool all_finite = true;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        TensorT<S>* t = inputs[k];
        double worst = 0.0;
        for (std::size_t i = 0; i < t->numel(); ++i) {
            const S saved = t->data[i];
            t->data[i] = saved + static_cast<S>(h);
            const double f_plus = run(false);
            t->data[i] = saved - static_cast<S>(h);
            const double f_minus = run(false);
            t->data[i] = saved;  // exact restore

            const double fd = (f_plus - f_minus) / (2.0 * h);
            const double an = static_cast<double>(analytic[k][i]);
            if (!std::isfinite(fd) || !std::isfinite(an)) {
                all_finite = false;
                report.detail = op_name + ": non-finite gradient at input " +
                                std::to_string(k) + " element " + std::to_string(i) +
                                " (analytic " + std::to_string(an) + ", numeric " +
                                std::to_string(fd) + ")";
                worst = std::numeric_limits<double>::infinity();
                break;
            }
            const double denom = std::max({std::fabs(an), std::fabs(fd), 1e-8});
            const double rel = std::fabs(an - fd) / denom;
            if (rel > worst) {
                worst = rel;
                if (rel > report.max_rel_error)
                    report.detail = op_name + ": worst element input " + std::to_string(k) +
                                    " idx " + std::to_string(i) + " analytic " +
                                    std::to_string(an) + " numeric " + std::to_string(fd);
            }
        }
        report.per_input_errors.push_back(worst);
        if (worst > report.max_rel_error) report.max_rel_error = worst;
        if (!all_finite) break;
    }

    report.passed = all_finite && report.max_rel_error < tol;
    return report;
}

}  // namespace ahmf
