#pragma once

#include "dynfield/pose/se3.hpp"

#include <cmath>

namespace dynfield {

/// Pinhole intrinsics; pixel (u, v) maps to camera direction ((u - cx)/f, (v - cy)/f, 1).
/// Camera frame convention: x right, y down, z forward.
struct Intrinsics {
    double f = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    int width = 1;
    int height = 1;

    void validate() const {
        if (!(f > 0.0) || !std::isfinite(f) || !std::isfinite(cx) || !std::isfinite(cy) || width < 1 ||
            height < 1)
            throw ConfigError("Intrinsics: focal length must be positive and image size >= 1");
    }
};

template <typename T>
struct Ray {
    Vec3<T> o = Vec3<T>::Zero();
    Vec3<T> d = Vec3<T>(T(0), T(0), T(1));
    T near = T(0.1);
    T far = T(100);
};

/// Unit direction in the camera frame for a continuous pixel coordinate.
template <typename T>
Vec3<T> camera_direction(const Intrinsics& K, T u, T v) {
    Vec3<T> d((u - T(K.cx)) / T(K.f), (v - T(K.cy)) / T(K.f), T(1));
    return d.normalized();
}

/// Ray through continuous pixel coordinate (u, v); pixel centres sit at (i + 0.5, j + 0.5).
template <typename T>
Ray<T> generate_ray(const Pose<T>& pose, const Intrinsics& K, T u, T v, T near, T far) {
    K.validate();
    if (!(u >= T(0) && u <= T(K.width) && v >= T(0) && v <= T(K.height)))
        throw DomainError("generate_ray: pixel outside the image");
    if (!(near > T(0) && near < far)) throw ConfigError("generate_ray: need 0 < near < far");
    Ray<T> r;
    r.o = pose.t;
    r.d = (pose.R * camera_direction<T>(K, u, v)).normalized();
    r.near = near;
    r.far = far;
    return r;
}

/// Projects a camera-frame point to continuous pixel coordinates.
template <typename T>
Vec2<T> project(const Intrinsics& K, const Vec3<T>& x_cam) {
    return {T(K.f) * x_cam.x() / x_cam.z() + T(K.cx), T(K.f) * x_cam.y() / x_cam.z() + T(K.cy)};
}

}  // namespace dynfield
