#pragma once

#include "dynfield/core/types.hpp"

#include <cmath>
#include <numbers>

namespace dynfield {

inline constexpr int kShDim = 16;

/// Real spherical-harmonics basis up to degree 3 (16 terms) of a unit direction.
template <typename T>
void sh_encode(const T* d, T* out) {
    const T x = d[0], y = d[1], z = d[2];
    const T xx = x * x, yy = y * y, zz = z * z;
    out[0] = T(0.28209479177387814);
    out[1] = T(-0.48860251190291987) * y;
    out[2] = T(0.48860251190291987) * z;
    out[3] = T(-0.48860251190291987) * x;
    out[4] = T(1.0925484305920792) * x * y;
    out[5] = T(-1.0925484305920792) * y * z;
    out[6] = T(0.94617469575755997) * zz - T(0.31539156525251999);
    out[7] = T(-1.0925484305920792) * x * z;
    out[8] = T(0.54627421529603959) * (xx - yy);
    out[9] = T(0.59004358992664352) * y * (T(-3) * xx + yy);
    out[10] = T(2.8906114426405538) * x * y * z;
    out[11] = T(0.45704579946446572) * y * (T(1) - T(5) * zz);
    out[12] = T(0.3731763325901154) * z * (T(5) * zz - T(3));
    out[13] = T(0.45704579946446572) * x * (T(1) - T(5) * zz);
    out[14] = T(1.4453057213202769) * z * (xx - yy);
    out[15] = T(0.59004358992664352) * x * (-xx + T(3) * yy);
}

/// Accumulates d(loss)/d(direction) given d(loss)/d(sh) for one direction.
template <typename T>
void sh_backward(const T* d, const T* g, T* dd) {
    const T x = d[0], y = d[1], z = d[2];
    const T xx = x * x, yy = y * y, zz = z * z;
    const T a = T(0.48860251190291987), b = T(1.0925484305920792), c = T(0.54627421529603959);
    const T e = T(0.59004358992664352), gg = T(2.8906114426405538), h = T(0.45704579946446572);
    const T k = T(0.3731763325901154), m = T(1.4453057213202769), q = T(0.94617469575755997);
    T dx = T(0), dy = T(0), dz = T(0);
    dy += -a * g[1];
    dz += a * g[2];
    dx += -a * g[3];
    dx += b * y * g[4];
    dy += b * x * g[4];
    dy += -b * z * g[5];
    dz += -b * y * g[5];
    dz += T(2) * q * z * g[6];
    dx += -b * z * g[7];
    dz += -b * x * g[7];
    dx += T(2) * c * x * g[8];
    dy += T(-2) * c * y * g[8];
    dx += e * y * T(-6) * x * g[9];
    dy += e * (T(-3) * xx + T(3) * yy) * g[9];
    dx += gg * y * z * g[10];
    dy += gg * x * z * g[10];
    dz += gg * x * y * g[10];
    dy += h * (T(1) - T(5) * zz) * g[11];
    dz += h * y * T(-10) * z * g[11];
    dz += k * (T(15) * zz - T(3)) * g[12];
    dx += h * (T(1) - T(5) * zz) * g[13];
    dz += h * x * T(-10) * z * g[13];
    dx += T(2) * m * x * z * g[14];
    dy += T(-2) * m * y * z * g[14];
    dz += m * (xx - yy) * g[14];
    dx += e * (T(-3) * xx + T(3) * yy) * g[15];
    dy += T(6) * e * x * y * g[15];
    dd[0] += dx;
    dd[1] += dy;
    dd[2] += dz;
}

/// Sinusoidal features of normalized time t in [0, 1]: sin(k pi t), cos(k pi t), k = 1..K.
template <typename T>
void time_features(T t, int K, T* out) {
    for (int k = 1; k <= K; ++k) {
        out[2 * (k - 1)] = std::sin(T(k) * T(std::numbers::pi) * t);
        out[2 * (k - 1) + 1] = std::cos(T(k) * T(std::numbers::pi) * t);
    }
}

/// Low-frequency positional encoding: x, sin(2^k pi x), cos(2^k pi x) for k < n.
inline int posenc_dim(int n) { return 3 + 6 * n; }

template <typename T>
void posenc(const T* x, int n, T* out) {
    for (int a = 0; a < 3; ++a) out[a] = x[a];
    int o = 3;
    for (int k = 0; k < n; ++k) {
        const T w = T(std::numbers::pi) * T(1 << k);
        for (int a = 0; a < 3; ++a) {
            out[o++] = std::sin(w * x[a]);
            out[o++] = std::cos(w * x[a]);
        }
    }
}

template <typename T>
void posenc_backward(const T* x, int n, const T* g, T* dx) {
    for (int a = 0; a < 3; ++a) dx[a] += g[a];
    int o = 3;
    for (int k = 0; k < n; ++k) {
        const T w = T(std::numbers::pi) * T(1 << k);
        for (int a = 0; a < 3; ++a) {
            dx[a] += g[o++] * w * std::cos(w * x[a]);
            dx[a] += -g[o++] * w * std::sin(w * x[a]);
        }
    }
}

/// Numerically stable softplus and its derivative (the logistic sigmoid).
template <typename T>
T softplus(T x) {
    return x > T(20) ? x : std::log1p(std::exp(x));
}

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

}  // namespace dynfield
