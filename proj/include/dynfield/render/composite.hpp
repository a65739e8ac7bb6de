#pragma once

#include "dynfield/core/types.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace dynfield {

/// Batched volume compositing. Rays are stored back to back with a fixed
/// number of samples each; every sample carries K channels that are
/// accumulated with weights w_i = T_i * alpha_i.
template <typename T>
struct CompositeBatch {
    int samples_per_ray = 0;
    MatX<T> out;                // rays x K: sum_i w_i q_i
    VecX<T> opacity;            // rays: sum_i w_i
    VecX<T> weights;            // samples
    VecX<T> transmittance;      // samples: T_i before sample i
};

template <typename T>
CompositeBatch<T> composite(const VecX<T>& sigma, const VecX<T>& delta, const MatX<T>& channels,
                            int samples_per_ray) {
    const Eigen::Index S = sigma.size();
    if (samples_per_ray < 1 || S % samples_per_ray != 0 || delta.size() != S || channels.rows() != S)
        throw ConfigError("composite: inconsistent sample layout");
    const Eigen::Index R = S / samples_per_ray;
    const Eigen::Index K = channels.cols();
    CompositeBatch<T> r;
    r.samples_per_ray = samples_per_ray;
    r.out = MatX<T>::Zero(R, K);
    r.opacity = VecX<T>::Zero(R);
    r.weights.resize(S);
    r.transmittance.resize(S);
    for (Eigen::Index ray = 0; ray < R; ++ray) {
        T trans = T(1);
        for (int j = 0; j < samples_per_ray; ++j) {
            const Eigen::Index i = ray * samples_per_ray + j;
            if (!(sigma(i) >= T(0))) throw DomainError("composite: negative or non-finite density");
            if (!(delta(i) > T(0))) throw DomainError("composite: non-positive sample spacing");
            const T decay = std::exp(-sigma(i) * delta(i));
            const T w = trans * (T(1) - decay);
            r.transmittance(i) = trans;
            r.weights(i) = w;
            r.opacity(ray) += w;
            r.out.row(ray) += w * channels.row(i);
            trans *= decay;
        }
    }
    return r;
}

/// Gradients of composite. dweights_extra (optional, per sample) is added to
/// d(loss)/d(w_i) before propagating to densities.
template <typename T>
void composite_backward(const VecX<T>& sigma, const VecX<T>& delta, const MatX<T>& channels,
                        const CompositeBatch<T>& fwd, const MatX<T>& dout, const VecX<T>& dopacity,
                        VecX<T>& dsigma, MatX<T>& dchannels, const VecX<T>* dweights_extra = nullptr) {
    const int n = fwd.samples_per_ray;
    const Eigen::Index S = sigma.size();
    const Eigen::Index R = S / n;
    if (dout.rows() != R || dout.cols() != channels.cols() || dopacity.size() != R)
        throw UsageError("composite_backward: gradient shapes do not match forward pass");
    dsigma.setZero(S);
    dchannels.resize(S, channels.cols());
    for (Eigen::Index ray = 0; ray < R; ++ray) {
        // suffix = sum_{k > i} w_k G_k
        T suffix = T(0);
        for (int j = n - 1; j >= 0; --j) {
            const Eigen::Index i = ray * n + j;
            const T w = fwd.weights(i);
            T G = dout.row(ray).dot(channels.row(i)) + dopacity(ray);
            if (dweights_extra) G += (*dweights_extra)(i);
            dchannels.row(i) = w * dout.row(ray);
            const T trans_next = fwd.transmittance(i) * std::exp(-sigma(i) * delta(i));
            dsigma(i) = delta(i) * (trans_next * G - suffix);
            suffix += w * G;
        }
    }
}

/// Single-ray result of compositing color and depth.
template <typename T>
struct RayComposite {
    Vec3<T> color = Vec3<T>::Zero();
    T depth = T(0);
    T opacity = T(0);
    std::vector<T> weights;
};

/// Standard volume accumulation of one ray's samples: color, expected depth, opacity.
template <typename T>
RayComposite<T> composite_ray(std::span<const T> sigma, std::span<const T> delta,
                              std::span<const Vec3<T>> color, std::span<const T> t) {
    const int n = static_cast<int>(sigma.size());
    if (n < 1 || delta.size() != sigma.size() || color.size() != sigma.size() || t.size() != sigma.size())
        throw ConfigError("composite_ray: inconsistent sample arrays");
    VecX<T> s(n), d(n);
    MatX<T> ch(n, 4);
    for (int i = 0; i < n; ++i) {
        s(i) = sigma[i];
        d(i) = delta[i];
        ch.row(i) << color[i].x(), color[i].y(), color[i].z(), t[i];
    }
    const auto r = composite(s, d, ch, n);
    RayComposite<T> out;
    out.color = r.out.row(0).template head<3>().transpose();
    out.depth = r.out(0, 3);
    out.opacity = r.opacity(0);
    out.weights.assign(r.weights.data(), r.weights.data() + n);
    return out;
}

/// Static/dynamic color blend of one sample:
/// c = (1 - rho) (sigma_s / sigma) c_s + (sigma_d / sigma) c_d, sigma = sigma_s + sigma_d.
/// A sample with sigma == 0 contributes c = 0.
template <typename T>
Vec3<T> blend_point(T sigma_s, const Vec3<T>& c_s, T sigma_d, const Vec3<T>& c_d, T rho) {
    const T sigma = sigma_s + sigma_d;
    if (!(sigma > T(0))) return Vec3<T>::Zero();
    return (T(1) - rho) * (sigma_s / sigma) * c_s + (sigma_d / sigma) * c_d;
}

template <typename T>
struct BlendGrad {
    T sigma_s = T(0);
    T sigma_d = T(0);
    Vec3<T> c_s = Vec3<T>::Zero();
    Vec3<T> c_d = Vec3<T>::Zero();
    T rho = T(0);
};

template <typename T>
BlendGrad<T> blend_point_backward(T sigma_s, const Vec3<T>& c_s, T sigma_d, const Vec3<T>& c_d, T rho,
                                  const Vec3<T>& dc) {
    BlendGrad<T> g;
    const T sigma = sigma_s + sigma_d;
    if (!(sigma > T(0))) return g;
    const T inv = T(1) / sigma, inv2 = inv * inv;
    const Vec3<T> diff = (T(1) - rho) * c_s - c_d;
    g.sigma_s = sigma_d * inv2 * dc.dot(diff);
    g.sigma_d = -sigma_s * inv2 * dc.dot(diff);
    g.c_s = (T(1) - rho) * sigma_s * inv * dc;
    g.c_d = sigma_d * inv * dc;
    g.rho = -sigma_s * inv * dc.dot(c_s);
    return g;
}

}  // namespace dynfield
