#pragma once

#include "dynfield/core/types.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dynfield {

template <typename T>
struct AdamState {
    std::vector<T> m;
    std::vector<T> v;
    std::int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-15;
    double lr = 1e-2;
};

/// One bias-corrected Adam update.
///
/// Entries whose gradient is exactly zero are skipped (moments and value left
/// untouched), so parameters that received no signal in a batch stay put. A
/// non-finite gradient aborts the whole step before anything is modified.
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& st) {
    if (params.size() != grads.size())
        throw ConfigError("adam_step: parameter/gradient size mismatch");
    if (!(st.lr > 0.0)) throw ConfigError("adam_step: learning rate must be positive");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!std::isfinite(static_cast<double>(grads[i])))
            throw NumericError("adam_step: non-finite gradient at index " + std::to_string(i));
    }
    if (st.m.size() > params.size()) throw ConfigError("adam_step: parameter buffer shrank");
    // Entries appended since the last step start with zero moments.
    st.m.resize(params.size(), T(0));
    st.v.resize(params.size(), T(0));
    ++st.step;
    const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    const T b1 = static_cast<T>(st.beta1), b2 = static_cast<T>(st.beta2);
    const T step_size = static_cast<T>(st.lr / c1);
    const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
    const T eps = static_cast<T>(st.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const T g = grads[i];
        if (g == T(0)) continue;
        st.m[i] = b1 * st.m[i] + (T(1) - b1) * g;
        st.v[i] = b2 * st.v[i] + (T(1) - b2) * g * g;
        params[i] -= step_size * st.m[i] / (std::sqrt(st.v[i]) * inv_sqrt_c2 + eps);
    }
}

}  // namespace dynfield
