#pragma once

#include "dynfield/pose/se3.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

namespace dynfield {

struct TrajectoryEntry {
    int frame = 0;
    Pose<double> pose;
};

/// Ordered camera-to-world poses keyed by strictly increasing frame index.
class Trajectory {
  public:
    Trajectory() = default;

    void push_back(int frame, const Pose<double>& pose) {
        if (!entries_.empty() && frame <= entries_.back().frame)
            throw UsageError("Trajectory: frame indices must be strictly increasing");
        entries_.push_back({frame, pose});
    }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    const TrajectoryEntry& operator[](std::size_t i) const { return entries_[i]; }
    TrajectoryEntry& operator[](std::size_t i) { return entries_[i]; }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    std::vector<Vec3d> positions() const {
        std::vector<Vec3d> p;
        p.reserve(entries_.size());
        for (const auto& e : entries_) p.push_back(e.pose.t);
        return p;
    }

  private:
    std::vector<TrajectoryEntry> entries_;
};

/// Similarity transform x -> s * R * x + t.
struct Sim3 {
    double s = 1.0;
    Mat3d R = Mat3d::Identity();
    Vec3d t = Vec3d::Zero();

    Vec3d apply(const Vec3d& x) const { return s * (R * x) + t; }
};

inline void check_same_frames(const Trajectory& a, const Trajectory& b, const char* who) {
    if (a.size() != b.size())
        throw UsageError(std::string(who) + ": trajectory lengths differ (" + std::to_string(a.size()) +
                         " vs " + std::to_string(b.size()) + ")");
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].frame != b[i].frame)
            throw UsageError(std::string(who) + ": frame index mismatch at row " + std::to_string(i));
}

/// Least-squares Sim(3) mapping est positions onto gt positions (Umeyama 1991),
/// with the sign correction that keeps det(R) = +1.
inline Sim3 umeyama_align(const Trajectory& est, const Trajectory& gt) {
    check_same_frames(est, gt, "umeyama_align");
    const std::size_t n = est.size();
    if (n < 3) throw AlignmentError("umeyama_align: need at least 3 poses");
    const auto p = est.positions();
    const auto q = gt.positions();
    Vec3d mp = Vec3d::Zero(), mq = Vec3d::Zero();
    for (std::size_t i = 0; i < n; ++i) {
        mp += p[i];
        mq += q[i];
    }
    mp /= static_cast<double>(n);
    mq /= static_cast<double>(n);
    Mat3d cov = Mat3d::Zero(), cov_p = Mat3d::Zero(), cov_q = Mat3d::Zero();
    double var_p = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec3d dp = p[i] - mp, dq = q[i] - mq;
        cov += dq * dp.transpose();
        cov_p += dp * dp.transpose();
        cov_q += dq * dq.transpose();
        var_p += dp.squaredNorm();
    }
    cov /= static_cast<double>(n);
    var_p /= static_cast<double>(n);

    auto degenerate = [](const Mat3d& c) {
        Eigen::SelfAdjointEigenSolver<Mat3d> es(c);
        const auto ev = es.eigenvalues();  // ascending
        return ev(2) <= 1e-300 || ev(1) <= 1e-12 * ev(2);
    };
    if (degenerate(cov_p) || degenerate(cov_q))
        throw AlignmentError("umeyama_align: positions are collinear or coincident");

    Eigen::JacobiSVD<Mat3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3d S = Mat3d::Identity();
    if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) S(2, 2) = -1.0;
    Sim3 r;
    r.R = svd.matrixU() * S * svd.matrixV().transpose();
    r.s = (svd.singularValues().asDiagonal() * S).trace() / var_p;
    r.t = mq - r.s * (r.R * mp);
    return r;
}

/// Applies a similarity to camera poses (positions scaled, orientations rotated).
inline Trajectory apply_sim3(const Sim3& sim, const Trajectory& traj) {
    Trajectory out;
    for (const auto& e : traj) {
        Pose<double> p;
        p.R = sim.R * e.pose.R;
        p.t = sim.apply(e.pose.t);
        out.push_back(e.frame, p);
    }
    return out;
}

/// Absolute trajectory error: RMSE of position differences (inputs already aligned).
inline double ate(const Trajectory& est_aligned, const Trajectory& gt) {
    check_same_frames(est_aligned, gt, "ate");
    if (gt.empty()) return 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < gt.size(); ++i) sum += (est_aligned[i].pose.t - gt[i].pose.t).squaredNorm();
    return std::sqrt(sum / static_cast<double>(gt.size()));
}

struct RpeResult {
    double trans = 0.0;    // world units
    double rot_deg = 0.0;  // degrees
};

/// Relative pose error over frame pairs (i, i + delta).
inline RpeResult rpe(const Trajectory& est_aligned, const Trajectory& gt, int delta = 1) {
    check_same_frames(est_aligned, gt, "rpe");
    if (delta < 1) throw UsageError("rpe: delta must be >= 1");
    if (gt.size() < static_cast<std::size_t>(delta) + 1)
        throw UsageError("rpe: trajectory shorter than delta + 1");
    double st = 0.0, sr = 0.0;
    const std::size_t pairs = gt.size() - delta;
    for (std::size_t i = 0; i < pairs; ++i) {
        const Pose<double> rel_gt = gt[i].pose.inverse() * gt[i + delta].pose;
        const Pose<double> rel_est = est_aligned[i].pose.inverse() * est_aligned[i + delta].pose;
        const Pose<double> err = rel_gt.inverse() * rel_est;
        st += err.t.squaredNorm();
        const double ang = rotation_angle<double>(err.R) * 180.0 / std::numbers::pi;
        sr += ang * ang;
    }
    return {std::sqrt(st / pairs), std::sqrt(sr / pairs)};
}

struct PoseMetrics {
    double ate = 0.0;
    double rpe_t = 0.0;
    double rpe_r = 0.0;
    Sim3 alignment;
};

/// Umeyama-aligns est onto gt, then reports ATE and RPE (delta = 1).
inline PoseMetrics evaluate_trajectory(const Trajectory& est, const Trajectory& gt) {
    PoseMetrics m;
    m.alignment = umeyama_align(est, gt);
    const Trajectory aligned = apply_sim3(m.alignment, est);
    m.ate = ate(aligned, gt);
    const RpeResult r = rpe(aligned, gt, 1);
    m.rpe_t = r.trans;
    m.rpe_r = r.rot_deg;
    return m;
}

/// ATE of a trajectory collapsed to a single point: the best similarity maps it
/// onto the gt centroid, leaving the RMS spread of gt about its centroid.
inline double collapsed_trajectory_ate(const Trajectory& gt) {
    if (gt.empty()) return 0.0;
    Vec3d mean = Vec3d::Zero();
    for (const auto& e : gt) mean += e.pose.t;
    mean /= static_cast<double>(gt.size());
    double sum = 0.0;
    for (const auto& e : gt) sum += (e.pose.t - mean).squaredNorm();
    return std::sqrt(sum / static_cast<double>(gt.size()));
}

/// Head-to-tail distance between first and last camera centres.
inline double trajectory_span(const Trajectory& traj) {
    if (traj.size() < 2) return 0.0;
    return (traj[traj.size() - 1].pose.t - traj[0].pose.t).norm();
}

// CSV rows: frame_index,tx,ty,tz,qw,qx,qy,qz
inline void write_trajectory_csv(const Trajectory& traj, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write trajectory " + path);
    out << "frame_index,tx,ty,tz,qw,qx,qy,qz\n";
    out << std::setprecision(17);
    for (const auto& e : traj) {
        Eigen::Quaterniond q(e.pose.R);
        q.normalize();
        if (q.w() < 0) q.coeffs() *= -1.0;
        out << e.frame << ',' << e.pose.t.x() << ',' << e.pose.t.y() << ',' << e.pose.t.z() << ',' << q.w()
            << ',' << q.x() << ',' << q.y() << ',' << q.z() << '\n';
    }
}

inline Trajectory read_trajectory_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read trajectory " + path);
    Trajectory traj;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (lineno == 1 && line.rfind("frame", 0) == 0) continue;
        std::stringstream ss(line);
        std::string cell;
        double v[8];
        for (int k = 0; k < 8; ++k) {
            if (!std::getline(ss, cell, ','))
                throw IoError(path + ":" + std::to_string(lineno) + ": expected 8 columns");
            try {
                v[k] = std::stod(cell);
            } catch (const std::exception&) {
                throw IoError(path + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
            }
        }
        Pose<double> p;
        p.t = Vec3d(v[1], v[2], v[3]);
        Eigen::Quaterniond q(v[4], v[5], v[6], v[7]);
        if (std::abs(q.norm() - 1.0) > 1e-6)
            throw IoError(path + ":" + std::to_string(lineno) + ": quaternion is not unit");
        p.R = q.normalized().toRotationMatrix();
        traj.push_back(static_cast<int>(v[0]), p);
    }
    return traj;
}

}  // namespace dynfield
