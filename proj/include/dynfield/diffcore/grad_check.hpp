#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace dynfield {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

/// Compares an analytic gradient against central differences of f.
///
/// f is evaluated with params perturbed in place and must be deterministic.
/// The relative error of a coordinate is |a - n| / max(|a|, |n|, floor).
/// When `indices` is empty every coordinate is checked.
template <typename F>
GradCheckResult grad_check(F&& f, std::span<double> params, std::span<const double> analytic,
                           double h, std::span<const std::size_t> indices = {}, double floor = 1e-8) {
    GradCheckResult r;
    auto check = [&](std::size_t i) {
        const double saved = params[i];
        params[i] = saved + h;
        const double fp = f();
        params[i] = saved - h;
        const double fm = f();
        params[i] = saved;
        const double numeric = (fp - fm) / (2.0 * h);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
        const double rel = std::abs(analytic[i] - numeric) / denom;
        if (rel > r.max_rel_error) {
            r.max_rel_error = rel;
            r.worst_index = i;
            r.worst_analytic = analytic[i];
            r.worst_numeric = numeric;
        }
    };
    if (indices.empty()) {
        for (std::size_t i = 0; i < params.size(); ++i) check(i);
    } else {
        for (std::size_t i : indices) check(i);
    }
    return r;
}

}  // namespace dynfield
