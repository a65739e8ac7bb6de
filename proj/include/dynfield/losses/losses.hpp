#pragma once

#include "dynfield/pose/se3.hpp"
#include "dynfield/render/camera.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

namespace dynfield {

// ---------------------------------------------------------------------------
// Weights and annealing.

/// w0 * factor^(min(step, horizon) / horizon); factor 0.1 gives the usual decay to a tenth.
inline double anneal(double w0, double step, double horizon, double factor = 0.1) {
    if (!(horizon > 0.0)) throw ConfigError("anneal: horizon must be positive");
    const double s = std::clamp(step, 0.0, horizon);
    return w0 * std::pow(factor, s / horizon);
}

struct TermWeight {
    double initial = 0.0;
    double decay_factor = 1.0;  // value reached at the end of the annealing horizon, relative to initial

    double at(double step, double horizon) const {
        if (decay_factor == 1.0) return initial;
        return anneal(initial, step, horizon, decay_factor);
    }
};

struct LossWeights {
    TermWeight color{1.0, 1.0};
    TermWeight depth{0.05, 0.1};
    TermWeight flow{0.01, 0.1};
    TermWeight cycle{0.01, 1.0};
    TermWeight dynamic{0.001, 1.0};
    TermWeight shadow{0.01, 1.0};
    // Multiplier on the dynamic-density penalty for rays inside the motion mask.
    double masked_dynamic_factor = 0.1;

    void validate() const {
        for (const TermWeight* w : {&color, &depth, &flow, &cycle, &dynamic, &shadow}) {
            if (!(w->initial >= 0.0)) throw ConfigError("LossWeights: weights must be non-negative");
            if (!(w->decay_factor > 0.0 && w->decay_factor <= 1.0))
                throw ConfigError("LossWeights: decay factor must lie in (0, 1]");
        }
    }
};

/// Unweighted per-term values of one batch.
struct LossTerms {
    double color = 0.0;
    double depth = 0.0;
    double flow = 0.0;
    double cycle = 0.0;
    double dynamic = 0.0;
    double shadow = 0.0;
};

struct LossReport {
    LossTerms terms;
    LossTerms weights;
    double total = 0.0;
};

/// Weighted total. Stage A keeps color, depth and flow; the dynamic-only
/// terms (cycle, dynamic, shadow) join once the dynamic field is active.
inline LossReport assemble_total(const LossTerms& t, Stage stage, const LossWeights& w, double anneal_step,
                                 double anneal_horizon) {
    const bool dynamic = dynamic_active(stage);
    LossReport r;
    r.terms = t;
    if (!dynamic) {
        r.terms.cycle = r.terms.dynamic = r.terms.shadow = 0.0;
    }
    r.weights.color = w.color.at(anneal_step, anneal_horizon);
    r.weights.depth = w.depth.at(anneal_step, anneal_horizon);
    r.weights.flow = w.flow.at(anneal_step, anneal_horizon);
    r.weights.cycle = dynamic ? w.cycle.at(anneal_step, anneal_horizon) : 0.0;
    r.weights.dynamic = dynamic ? w.dynamic.at(anneal_step, anneal_horizon) : 0.0;
    r.weights.shadow = dynamic ? w.shadow.at(anneal_step, anneal_horizon) : 0.0;
    r.total = r.weights.color * r.terms.color + r.weights.depth * r.terms.depth + r.weights.flow * r.terms.flow +
              r.weights.cycle * r.terms.cycle + r.weights.dynamic * r.terms.dynamic +
              r.weights.shadow * r.terms.shadow;
    return r;
}

// ---------------------------------------------------------------------------
// Color.

/// ||rendered - gt||^2 for one ray. In stage A rays inside the motion mask contribute nothing.
template <typename T>
T color_loss(const Vec3<T>& rendered, const Vec3<T>& gt, bool masked, bool gate_by_mask) {
    if (gate_by_mask && masked) return T(0);
    return (rendered - gt).squaredNorm();
}

template <typename T>
Vec3<T> color_loss_grad(const Vec3<T>& rendered, const Vec3<T>& gt, bool masked, bool gate_by_mask) {
    if (gate_by_mask && masked) return Vec3<T>::Zero();
    return T(2) * (rendered - gt);
}

// ---------------------------------------------------------------------------
// Scale/shift-invariant depth.

template <typename T>
struct NormalizedDepth {
    std::vector<T> values;
    T median = T(0);
    T dispersion = T(0);  // mean absolute deviation from the median
    bool degenerate = false;
};

/// (v - median(v)) / mean(|v - median(v)|). A constant batch is degenerate and yields zeros.
template <typename T>
NormalizedDepth<T> normalize_depth(std::span<const T> v) {
    if (v.size() < 2) throw ConfigError("normalize_depth: need at least 2 values");
    NormalizedDepth<T> r;
    std::vector<T> sorted(v.begin(), v.end());
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    r.median = n % 2 ? sorted[n / 2] : (sorted[n / 2 - 1] + sorted[n / 2]) / T(2);
    T mad = T(0);
    for (T x : v) mad += std::abs(x - r.median);
    mad /= static_cast<T>(n);
    r.dispersion = mad;
    r.values.assign(n, T(0));
    const T scale = std::max(std::abs(r.median), T(1));
    if (!(mad > scale * T(1e-12))) {
        r.degenerate = true;
        return r;
    }
    for (std::size_t i = 0; i < n; ++i) r.values[i] = (v[i] - r.median) / mad;
    return r;
}

/// Vector-Jacobian product of normalize_depth (median treated through its selected element(s)).
template <typename T>
std::vector<T> normalize_depth_backward(std::span<const T> v, const NormalizedDepth<T>& fwd, std::span<const T> g) {
    const std::size_t n = v.size();
    std::vector<T> dv(n, T(0));
    if (fwd.degenerate) return dv;
    // Median selection weights.
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<T> dmed(n, T(0));
    if (n % 2) {
        dmed[order[n / 2]] = T(1);
    } else {
        dmed[order[n / 2 - 1]] += T(0.5);
        dmed[order[n / 2]] += T(0.5);
    }
    const T mad = fwd.dispersion;
    T sum_g = T(0), sum_gz = T(0), sum_s = T(0);
    std::vector<T> s(n);
    for (std::size_t i = 0; i < n; ++i) {
        const T dev = v[i] - fwd.median;
        s[i] = dev > T(0) ? T(1) : (dev < T(0) ? T(-1) : T(0));
        sum_g += g[i];
        sum_gz += g[i] * dev;
        sum_s += s[i];
    }
    for (std::size_t j = 0; j < n; ++j) {
        const T dmad = (s[j] - dmed[j] * sum_s) / static_cast<T>(n);
        dv[j] = (g[j] - dmed[j] * sum_g) / mad - sum_gz / (mad * mad) * dmad;
    }
    return dv;
}

template <typename T>
struct DepthLossResult {
    T value = T(0);
    std::vector<T> grad;  // d(value)/d(rendered)
    bool degenerate = false;
};

/// Mean squared difference of the normalized rendered and prior depth batches (one frame).
template <typename T>
DepthLossResult<T> depth_loss(std::span<const T> rendered, std::span<const T> prior) {
    if (rendered.size() != prior.size()) throw ConfigError("depth_loss: batch size mismatch");
    DepthLossResult<T> r;
    r.grad.assign(rendered.size(), T(0));
    const auto nr = normalize_depth(rendered);
    const auto np = normalize_depth(prior);
    if (nr.degenerate || np.degenerate) {
        r.degenerate = true;
        return r;
    }
    const T n = static_cast<T>(rendered.size());
    std::vector<T> g(rendered.size());
    for (std::size_t i = 0; i < rendered.size(); ++i) {
        const T diff = nr.values[i] - np.values[i];
        r.value += diff * diff / n;
        g[i] = T(2) * diff / n;
    }
    r.grad = normalize_depth_backward(rendered, nr, std::span<const T>(g));
    return r;
}

// ---------------------------------------------------------------------------
// Flow reprojection.

template <typename T>
struct ExpectedFlow {
    Vec2<T> flow = Vec2<T>::Zero();
    Vec3<T> point_world = Vec3<T>::Zero();
    Vec3<T> point_cam_j = Vec3<T>::Zero();
    bool valid = false;
};

/// Flow a pixel would have if its point X = o + depth * d (+ scene flow) were
/// viewed from camera j. o and d are the pixel's ray in frame i; depth is the
/// distance along the unit ray.
template <typename T>
ExpectedFlow<T> expected_flow(const Vec2<T>& pixel, const Vec3<T>& origin, const Vec3<T>& dir, T depth,
                              const Pose<T>& pose_j, const Intrinsics& K,
                              const std::optional<Vec3<T>>& scene_flow = std::nullopt, T min_z = T(1e-6)) {
    ExpectedFlow<T> r;
    r.point_world = origin + depth * dir;
    if (scene_flow) r.point_world += *scene_flow;
    r.point_cam_j = pose_j.R.transpose() * (r.point_world - pose_j.t);
    if (!(r.point_cam_j.z() > min_z)) return r;
    r.valid = true;
    r.flow = project<T>(K, r.point_cam_j) - pixel;
    return r;
}

/// Convenience form taking both poses and a pixel (depth along the unit ray).
template <typename T>
ExpectedFlow<T> expected_flow(const Vec2<T>& pixel, T depth, const Pose<T>& pose_i, const Pose<T>& pose_j,
                              const Intrinsics& K, const std::optional<Vec3<T>>& scene_flow = std::nullopt) {
    const Vec3<T> d = pose_i.R * camera_direction<T>(K, pixel.x(), pixel.y());
    return expected_flow<T>(pixel, pose_i.t, d, depth, pose_j, K, scene_flow);
}

template <typename T>
struct ExpectedFlowGrad {
    T depth = T(0);
    Vec3<T> origin = Vec3<T>::Zero();
    Vec3<T> dir = Vec3<T>::Zero();
    Vec3<T> scene_flow = Vec3<T>::Zero();
    Vec3<T> rot_j = Vec3<T>::Zero();    // right perturbation R_j Exp(phi)
    Vec3<T> trans_j = Vec3<T>::Zero();  // world translation of camera j
};

template <typename T>
ExpectedFlowGrad<T> expected_flow_backward(const ExpectedFlow<T>& fwd, const Vec3<T>& dir, T depth,
                                           const Pose<T>& pose_j, const Intrinsics& K, const Vec2<T>& dflow) {
    ExpectedFlowGrad<T> g;
    if (!fwd.valid) return g;
    const Vec3<T>& xc = fwd.point_cam_j;
    const T f = T(K.f), iz = T(1) / xc.z();
    Vec3<T> dxc(f * iz * dflow.x(), f * iz * dflow.y(),
                -f * iz * iz * (xc.x() * dflow.x() + xc.y() * dflow.y()));
    const Vec3<T> dX = pose_j.R * dxc;
    g.trans_j = -dX;
    g.rot_j = dxc.cross(xc);
    g.origin = dX;
    g.scene_flow = dX;
    g.depth = dX.dot(dir);
    g.dir = depth * dX;
    return g;
}

/// L1 flow error summed over the available directions (backward, forward).
template <typename T>
T flow_loss(const std::optional<Vec2<T>>& expected_bwd, const std::optional<Vec2<T>>& prior_bwd,
            const std::optional<Vec2<T>>& expected_fwd, const std::optional<Vec2<T>>& prior_fwd) {
    T v = T(0);
    if (expected_bwd && prior_bwd) v += (*expected_bwd - *prior_bwd).cwiseAbs().sum();
    if (expected_fwd && prior_fwd) v += (*expected_fwd - *prior_fwd).cwiseAbs().sum();
    return v;
}

template <typename T>
Vec2<T> l1_grad(const Vec2<T>& expected, const Vec2<T>& prior) {
    Vec2<T> g;
    for (int k = 0; k < 2; ++k) {
        const T d = expected(k) - prior(k);
        g(k) = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
    }
    return g;
}

// ---------------------------------------------------------------------------
// Scene-flow cycle consistency, dynamic density and shadow penalties.

/// (v_f(x,t) + v_b(x+v_f, t+1))^2 + (v_b(x,t) + v_f(x+v_b, t-1))^2, summed over components.
template <typename T>
T cycle_loss(const Vec3<T>& vf, const Vec3<T>& vb_at_fwd, const Vec3<T>& vb, const Vec3<T>& vf_at_bwd,
             bool has_next = true, bool has_prev = true) {
    T v = T(0);
    if (has_next) v += (vf + vb_at_fwd).squaredNorm();
    if (has_prev) v += (vb + vf_at_bwd).squaredNorm();
    return v;
}

/// Mean dynamic density along one ray, scaled by mask_factor for masked rays.
template <typename T>
T dynamic_loss(std::span<const T> sigma_d, bool masked = false, double mask_factor = 1.0) {
    if (sigma_d.empty()) return T(0);
    T s = T(0);
    for (T v : sigma_d) s += v;
    s /= static_cast<T>(sigma_d.size());
    return masked ? s * static_cast<T>(mask_factor) : s;
}

/// sum_i w_i rho_i^2 for one ray.
template <typename T>
T shadow_loss(std::span<const T> weights, std::span<const T> rho) {
    if (weights.size() != rho.size()) throw ConfigError("shadow_loss: size mismatch");
    T s = T(0);
    for (std::size_t i = 0; i < rho.size(); ++i) s += weights[i] * rho[i] * rho[i];
    return s;
}

}  // namespace dynfield
