#pragma once

#include "dynfield/render/camera.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

namespace dynfield {

/// Scene contraction: identity inside the unit ball, (2 - 1/|x|) x/|x| outside.
template <typename T>
Vec3<T> contract(const Vec3<T>& x) {
    const T n = x.norm();
    if (n <= T(1)) return x;
    return (T(2) - T(1) / n) * (x / n);
}

/// Vector-Jacobian product of contract at x (the Jacobian is symmetric).
template <typename T>
Vec3<T> contract_backward(const Vec3<T>& x, const Vec3<T>& g) {
    const T n = x.norm();
    if (n <= T(1)) return g;
    const T n2 = n * n, n3 = n2 * n, n4 = n2 * n2;
    const T a = T(2) / n - T(1) / n2;
    const T b = -T(2) / n3 + T(2) / n4;
    return a * g + x * (b * x.dot(g));
}

// Ray distances are spaced uniformly in s(t) = t (t < 1), 2 - 1/t (t >= 1):
// linear near the camera, uniform in disparity beyond unit distance.
template <typename T>
T spacing_forward(T t) {
    return t < T(1) ? t : T(2) - T(1) / t;
}

template <typename T>
T spacing_inverse(T s) {
    return s < T(1) ? s : T(1) / (T(2) - s);
}

/// Distances along a ray. Sample i lies inside bin [edge_i, edge_{i+1}] and
/// delta_i is that bin's length, so the deltas tile [near, far] exactly.
template <typename T>
struct RaySamples {
    std::vector<T> t;
    std::vector<T> delta;
};

/// Stratified samples, one draw per bin; rng == nullptr gives bin midpoints.
template <typename T, typename Rng = std::mt19937_64>
RaySamples<T> sample_ray(const Ray<T>& ray, int n, Rng* rng = nullptr) {
    if (n < 2) throw ConfigError("sample_ray: need at least 2 samples");
    if (!(ray.near > T(0) && ray.near < ray.far)) throw ConfigError("sample_ray: need 0 < near < far");
    const T s0 = spacing_forward(ray.near), s1 = spacing_forward(ray.far);
    RaySamples<T> out;
    out.t.resize(n);
    out.delta.resize(n);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    T lo = ray.near;
    for (int i = 0; i < n; ++i) {
        const T hi = i + 1 == n ? ray.far : spacing_inverse(s0 + (s1 - s0) * T(i + 1) / T(n));
        const T frac = rng ? static_cast<T>(unit(*rng)) : T(0.5);
        const T s = s0 + (s1 - s0) * (T(i) + frac) / T(n);
        out.t[i] = std::clamp(spacing_inverse(s), lo, hi);
        out.delta[i] = hi - lo;
        lo = hi;
    }
    return out;
}

}  // namespace dynfield
