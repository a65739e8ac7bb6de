#pragma once

#include "dynfield/pose/trajectory.hpp"

#include <algorithm>
#include <map>
#include <span>
#include <vector>

namespace dynfield {

/// First pose of a new image: a copy of the most recent one, identity when empty.
inline Pose<double> init_new_pose(const Trajectory& traj) {
    return traj.empty() ? Pose<double>::identity() : traj[traj.size() - 1].pose;
}

/// Optimizable camera poses of one sub-scene.
///
/// Each frame stores a base pose and a 6-vector increment (omega, u); the
/// current pose is R = R_base Exp(omega), t = R_base u + t_base. Gradients are
/// accumulated in the same 6-vector layout so the table plugs into Adam.
template <typename T>
class PoseTable {
  public:
    int add(int frame, const Pose<double>& init, bool fixed = false) {
        if (index_.count(frame)) throw UsageError("PoseTable: frame already present");
        const int idx = static_cast<int>(frames_.size());
        frames_.push_back(frame);
        base_.push_back(init);
        fixed_.push_back(fixed);
        params_.resize(params_.size() + 6, T(0));
        grads_.resize(grads_.size() + 6, T(0));
        index_[frame] = idx;
        return idx;
    }

    std::size_t size() const { return frames_.size(); }
    bool contains(int frame) const { return index_.count(frame) > 0; }
    int index_of(int frame) const {
        auto it = index_.find(frame);
        if (it == index_.end()) throw UsageError("PoseTable: unknown frame " + std::to_string(frame));
        return it->second;
    }
    int frame_at(int idx) const { return frames_[idx]; }
    const std::vector<int>& frames() const { return frames_; }

    bool is_fixed(int idx) const { return fixed_[idx]; }
    void set_fixed(int idx, bool fixed) { fixed_[idx] = fixed; }

    Vec6<T> increment(int idx) const { return Eigen::Map<const Vec6<T>>(params_.data() + 6 * idx); }

    Pose<double> pose(int idx) const {
        const Vec6<double> xi = increment(idx).template cast<double>();
        Pose<double> p;
        p.R = base_[idx].R * so3_exp<double>(xi.head<3>());
        p.t = base_[idx].R * xi.tail<3>() + base_[idx].t;
        return p;
    }

    const Pose<double>& base(int idx) const { return base_[idx]; }

    std::span<T> params() { return params_; }
    std::span<const T> params() const { return params_; }
    std::span<T> grads() { return grads_; }
    std::span<const T> grads() const { return grads_; }
    void zero_grad() { std::fill(grads_.begin(), grads_.end(), T(0)); }

    /// Adds d(loss)/d(pose) given as a right perturbation of the current
    /// rotation (R Exp(phi)) and a world-space translation gradient.
    void accumulate(int idx, const Vec3d& drot_right, const Vec3d& dtrans) {
        if (fixed_[idx]) return;
        const Vec6<double> xi = increment(idx).template cast<double>();
        const Vec3d dw = so3_right_jacobian<double>(xi.head<3>()).transpose() * drot_right;
        const Vec3d du = base_[idx].R.transpose() * dtrans;
        for (int k = 0; k < 3; ++k) {
            grads_[6 * idx + k] += static_cast<T>(dw(k));
            grads_[6 * idx + 3 + k] += static_cast<T>(du(k));
        }
    }

    /// Folds every increment into its base pose and resets the increment to zero.
    void refresh_bases() {
        for (std::size_t i = 0; i < frames_.size(); ++i) {
            base_[i] = pose(static_cast<int>(i));
            if (!base_[i].is_valid()) base_[i].reorthonormalize();
            std::fill(params_.begin() + 6 * i, params_.begin() + 6 * i + 6, T(0));
        }
    }

    /// Keeps increments in the chart (|omega| < pi) after an optimizer step.
    void recenter() {
        for (std::size_t i = 0; i < frames_.size(); ++i) {
            Eigen::Map<Vec3<T>> w(params_.data() + 6 * i);
            if (w.norm() >= T(std::numbers::pi)) w = recenter_rotation<T>(Vec3<T>(w));
        }
    }

    void set_pose(int idx, const Pose<double>& p) {
        base_[idx] = p;
        std::fill(params_.begin() + 6 * idx, params_.begin() + 6 * idx + 6, T(0));
    }

    Trajectory trajectory() const {
        std::vector<int> order(frames_.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        std::sort(order.begin(), order.end(), [&](int a, int b) { return frames_[a] < frames_[b]; });
        Trajectory t;
        for (int i : order) t.push_back(frames_[i], pose(i));
        return t;
    }

  private:
    std::vector<int> frames_;
    std::vector<Pose<double>> base_;
    std::vector<bool> fixed_;
    std::vector<T> params_;
    std::vector<T> grads_;
    std::map<int, int> index_;
};

/// Gradient of a loss with respect to a right perturbation of R, given the
/// gradient g with respect to d = R * v for a fixed camera-frame vector v.
template <typename T>
Vec3<T> rotation_grad_from_direction(const Mat3<T>& R, const Vec3<T>& v, const Vec3<T>& g) {
    return v.cross(R.transpose() * g);
}

}  // namespace dynfield
