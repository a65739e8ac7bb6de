#pragma once

#include "dynfield/core/types.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace dynfield {

template <typename T>
using Vec6 = Eigen::Matrix<T, 6, 1>;

template <typename T>
Mat3<T> hat(const Vec3<T>& w) {
    Mat3<T> m;
    m << T(0), -w.z(), w.y(), w.z(), T(0), -w.x(), -w.y(), w.x(), T(0);
    return m;
}

/// Camera-to-world rigid transform: x_world = R * x_cam + t.
template <typename T>
struct Pose {
    Mat3<T> R = Mat3<T>::Identity();
    Vec3<T> t = Vec3<T>::Zero();

    static Pose identity() { return {}; }

    Vec3<T> apply(const Vec3<T>& x) const { return R * x + t; }

    Pose inverse() const {
        Pose p;
        p.R = R.transpose();
        p.t = -(p.R * t);
        return p;
    }

    Pose operator*(const Pose& o) const {
        Pose p;
        p.R = R * o.R;
        p.t = R * o.t + t;
        return p;
    }

    double orthonormality_error() const {
        return static_cast<double>((R.transpose() * R - Mat3<T>::Identity()).cwiseAbs().maxCoeff());
    }

    bool is_valid(double tol = 1e-6) const {
        return orthonormality_error() < tol && R.determinant() > T(0) && t.allFinite();
    }

    // Projects R back onto SO(3) (nearest rotation via polar decomposition).
    void reorthonormalize() {
        Eigen::JacobiSVD<Mat3<T>> svd(R, Eigen::ComputeFullU | Eigen::ComputeFullV);
        Mat3<T> r = svd.matrixU() * svd.matrixV().transpose();
        if (r.determinant() < T(0)) {
            Mat3<T> U = svd.matrixU();
            U.col(2) *= T(-1);
            r = U * svd.matrixV().transpose();
        }
        R = r;
    }

    template <typename U>
    Pose<U> cast() const {
        Pose<U> p;
        p.R = R.template cast<U>();
        p.t = t.template cast<U>();
        return p;
    }
};

template <typename T>
Mat3<T> so3_exp(const Vec3<T>& w) {
    const T th2 = w.squaredNorm();
    const T th = std::sqrt(th2);
    T a, b;
    if (th < T(1e-6)) {
        a = T(1) - th2 / T(6);
        b = T(0.5) - th2 / T(24);
    } else {
        a = std::sin(th) / th;
        b = (T(1) - std::cos(th)) / th2;
    }
    const Mat3<T> W = hat(w);
    return Mat3<T>::Identity() + a * W + b * W * W;
}

template <typename T>
Vec3<T> so3_log(const Mat3<T>& R) {
    const T cos_th = std::clamp((R.trace() - T(1)) / T(2), T(-1), T(1));
    const T th = std::acos(cos_th);
    const Vec3<T> v(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
    if (th < T(1e-6)) return v / T(2);
    if (th > T(std::numbers::pi) - T(1e-4)) {
        Eigen::AngleAxis<T> aa(R);
        return aa.angle() * aa.axis();
    }
    return v * (th / (T(2) * std::sin(th)));
}

/// Right Jacobian of SO(3): Exp(w + dw) ~= Exp(w) Exp(Jr(w) dw).
template <typename T>
Mat3<T> so3_right_jacobian(const Vec3<T>& w) {
    const T th2 = w.squaredNorm();
    const T th = std::sqrt(th2);
    T b, c;
    if (th < T(1e-4)) {
        b = T(0.5) - th2 / T(24);
        c = T(1) / T(6) - th2 / T(120);
    } else {
        b = (T(1) - std::cos(th)) / th2;
        c = (th - std::sin(th)) / (th2 * th);
    }
    const Mat3<T> W = hat(w);
    return Mat3<T>::Identity() - b * W + c * W * W;
}

/// Rotation angle of R in radians.
template <typename T>
T rotation_angle(const Mat3<T>& R) {
    return so3_log(R).norm();
}

// PoseParam layout: (omega_x, omega_y, omega_z, u_x, u_y, u_z). Rotation and
// translation are decoupled: exp(w, u) = [Exp(w) | u].
template <typename T>
Pose<T> se3_exp(const Vec6<T>& xi) {
    Pose<T> p;
    p.R = so3_exp<T>(xi.template head<3>());
    p.t = xi.template tail<3>();
    return p;
}

template <typename T>
Vec6<T> se3_log(const Pose<T>& p) {
    Vec6<T> xi;
    xi.template head<3>() = so3_log<T>(p.R);
    xi.template tail<3>() = p.t;
    return xi;
}

/// Keeps |omega| < pi by mapping onto the equivalent shorter rotation.
template <typename T>
Vec3<T> recenter_rotation(const Vec3<T>& w) {
    const T th = w.norm();
    if (th < T(std::numbers::pi)) return w;
    const T two_pi = T(2 * std::numbers::pi);
    T wrapped = std::fmod(th, two_pi);
    if (wrapped > T(std::numbers::pi)) wrapped -= two_pi;
    return w * (wrapped / th);
}

}  // namespace dynfield
