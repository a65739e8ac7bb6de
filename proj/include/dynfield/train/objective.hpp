#pragma once

#include "dynfield/io/dataset.hpp"
#include "dynfield/losses/losses.hpp"
#include "dynfield/pose/pose_table.hpp"
#include "dynfield/render/renderer.hpp"
#include "dynfield/scheduler/scheduler.hpp"

#include <map>
#include <optional>
#include <vector>

namespace dynfield {

/// Supervision attached to one sampled pixel.
struct RaySupervision {
    int frame = 0;
    int x = 0;
    int y = 0;
    Vec3d color = Vec3d::Zero();
    std::optional<double> depth;
    std::optional<Vec2<double>> flow_fwd;
    std::optional<Vec2<double>> flow_bwd;
    bool masked = false;
};

inline RaySupervision make_supervision(const SceneDataset& ds, const PixelSample& p) {
    const FrameData& f = ds.frames.at(p.frame);
    RaySupervision s;
    s.frame = p.frame;
    s.x = p.x;
    s.y = p.y;
    for (int c = 0; c < 3; ++c) s.color(c) = f.color.at(p.x, p.y, c);
    if (f.depth) s.depth = f.depth->at(p.x, p.y);
    if (f.flow_fwd) s.flow_fwd = Vec2<double>(f.flow_fwd->at(p.x, p.y, 0), f.flow_fwd->at(p.x, p.y, 1));
    if (f.flow_bwd) s.flow_bwd = Vec2<double>(f.flow_bwd->at(p.x, p.y, 0), f.flow_bwd->at(p.x, p.y, 1));
    if (f.mask) s.masked = f.mask->at(p.x, p.y) > 0.5;
    return s;
}

/// Sample distances drawn once per batch; rays are rebuilt from the current poses.
template <typename T>
struct SampledBatch {
    std::vector<RaySupervision> sup;
    MatX<T> t, delta;
};

template <typename T, typename Rng>
SampledBatch<T> sample_batch(const SceneDataset& ds, const std::vector<PixelSample>& px, const RenderSettings& rs,
                             Rng* rng) {
    SampledBatch<T> b;
    const int R = static_cast<int>(px.size()), N = rs.samples;
    b.t.resize(R, N);
    b.delta.resize(R, N);
    Ray<T> proto;
    proto.near = T(rs.near);
    proto.far = T(rs.far);
    for (int r = 0; r < R; ++r) {
        b.sup.push_back(make_supervision(ds, px[r]));
        const RaySamples<T> s = sample_ray<T, Rng>(proto, N, rng);
        for (int j = 0; j < N; ++j) {
            b.t(r, j) = s.t[j];
            b.delta(r, j) = s.delta[j];
        }
    }
    return b;
}

/// Unit camera-frame direction through the centre of pixel (x, y).
inline Vec3d pixel_direction(const Intrinsics& K, int x, int y) {
    return camera_direction<double>(K, x + 0.5, y + 0.5);
}

template <typename T>
RayBatch<T> build_rays(const PoseTable<T>& poses, const Intrinsics& K, const SampledBatch<T>& b, int num_frames) {
    RayBatch<T> rb;
    const int R = static_cast<int>(b.sup.size());
    rb.origin.resize(R, 3);
    rb.dir.resize(R, 3);
    rb.t = b.t;
    rb.delta = b.delta;
    rb.frame.resize(R);
    rb.num_frames = num_frames;
    for (int r = 0; r < R; ++r) {
        const Pose<double> p = poses.pose(poses.index_of(b.sup[r].frame));
        const Vec3d d = (p.R * pixel_direction(K, b.sup[r].x, b.sup[r].y)).normalized();
        rb.origin.row(r) = p.t.cast<T>().transpose();
        rb.dir.row(r) = d.cast<T>().transpose();
        rb.frame[r] = b.sup[r].frame;
    }
    return rb;
}

struct ObjectiveSettings {
    Stage stage = Stage::A_ProgressivePose;  // scheduler stage (controls mask gating)
    bool dynamic = false;                    // dynamic field evaluated and its losses enabled
    bool use_motion_masks = true;
    LossWeights weights;
    double anneal_step = 0.0;
    double anneal_horizon = 1.0;
};

struct ObjectiveStats {
    LossReport report;
    int flow_behind_camera = 0;
    int flow_pairs = 0;
    int depth_groups = 0;
};

/// Evaluates the weighted training objective on one batch and, when
/// backward is set, accumulates gradients into the models and poses.
template <typename T>
ObjectiveStats evaluate_objective(SceneModels<T>& m, PoseTable<T>& poses, const Intrinsics& K,
                                  const SampledBatch<T>& batch, int num_frames, const ObjectiveSettings& os,
                                  bool backward, RenderTape<T>* tape_in = nullptr) {
    RenderTape<T> local;
    RenderTape<T>& tape = tape_in ? *tape_in : local;
    const RayBatch<T> rays = build_rays(poses, K, batch, num_frames);
    const int R = rays.rays(), N = rays.samples();
    const bool cycle = os.dynamic && os.weights.cycle.initial > 0.0;
    const BatchRender<T>& out = tape.forward(m, rays, os.dynamic, cycle);
    const ShadeOutputs<T>& sh = tape.shading();
    const Stage loss_stage = os.dynamic ? Stage::B_DynamicActive : Stage::A_ProgressivePose;
    const bool gate = os.stage == Stage::A_ProgressivePose && os.use_motion_masks;

    // Weights first so the per-term gradients can be scaled directly.
    const LossReport wr = assemble_total(LossTerms{}, loss_stage, os.weights, os.anneal_step, os.anneal_horizon);
    const LossTerms& w = wr.weights;

    LossTerms terms;
    ObjectiveStats stats;
    BatchRenderGrad<T> g;
    g.zeros(R);
    ShadeGrads<T> sg;
    MatX<T> extra_dorigin = MatX<T>::Zero(R, 3), extra_ddir = MatX<T>::Zero(R, 3);
    const T inv_r = T(1) / T(R);

    // Color.
    for (int r = 0; r < R; ++r) {
        const auto& s = batch.sup[r];
        const Vec3<T> c = out.color.row(r).transpose();
        const Vec3<T> gt = s.color.template cast<T>();
        terms.color += static_cast<double>(color_loss<T>(c, gt, s.masked, gate)) / R;
        g.color.row(r) += (T(w.color) * inv_r * color_loss_grad<T>(c, gt, s.masked, gate)).transpose();
    }

    // Scale/shift-invariant depth per frame.
    if (w.depth > 0.0) {
        std::map<int, std::vector<int>> groups;
        int used = 0;
        for (int r = 0; r < R; ++r) {
            const auto& s = batch.sup[r];
            if (!s.depth || (gate && s.masked)) continue;
            groups[s.frame].push_back(r);
        }
        for (const auto& [f, rows] : groups) used += rows.size() >= 2 ? static_cast<int>(rows.size()) : 0;
        for (const auto& [f, rows] : groups) {
            if (rows.size() < 2) continue;
            std::vector<T> dr, dp;
            for (int r : rows) {
                dr.push_back(out.depth(r));
                dp.push_back(static_cast<T>(*batch.sup[r].depth));
            }
            const auto dl = depth_loss<T>(dr, dp);
            ++stats.depth_groups;
            if (dl.degenerate) continue;
            const double share = double(rows.size()) / used;
            terms.depth += share * static_cast<double>(dl.value);
            for (std::size_t k = 0; k < rows.size(); ++k) g.depth(rows[k]) += T(w.depth * share) * dl.grad[k];
        }
    }

    // Flow reprojection toward the admitted neighbours.
    if (w.flow > 0.0) {
        for (int r = 0; r < R; ++r) {
            const auto& s = batch.sup[r];
            if (gate && s.masked) continue;
            const Vec2<T> px(T(s.x + 0.5), T(s.y + 0.5));
            const Vec3<T> o = rays.origin.row(r).transpose(), d = rays.dir.row(r).transpose();
            for (int dirn = 0; dirn < 2; ++dirn) {
                const auto& prior = dirn == 0 ? s.flow_bwd : s.flow_fwd;
                const int j = s.frame + (dirn == 0 ? -1 : 1);
                if (!prior || !poses.contains(j)) continue;
                const int pj = poses.index_of(j);
                const Pose<T> pose_j = poses.pose(pj).template cast<T>();
                std::optional<Vec3<T>> sf;
                if (os.dynamic)
                    sf = Vec3<T>((dirn == 0 ? out.flow_b : out.flow_f).row(r).transpose());
                const auto ef = expected_flow<T>(px, o, d, out.depth(r), pose_j, K, sf);
                ++stats.flow_pairs;
                if (!ef.valid) {
                    ++stats.flow_behind_camera;
                    continue;
                }
                const Vec2<T> pr = prior->template cast<T>();
                terms.flow += static_cast<double>((ef.flow - pr).cwiseAbs().sum()) / R;
                if (!backward) continue;
                const Vec2<T> gl = T(w.flow) * inv_r * l1_grad<T>(ef.flow, pr);
                const auto eg = expected_flow_backward<T>(ef, d, out.depth(r), pose_j, K, gl);
                g.depth(r) += eg.depth;
                extra_dorigin.row(r) += eg.origin.transpose();
                extra_ddir.row(r) += eg.dir.transpose();
                if (os.dynamic) (dirn == 0 ? g.flow_b : g.flow_f).row(r) += eg.scene_flow.transpose();
                poses.accumulate(pj, eg.rot_j.template cast<double>(), eg.trans_j.template cast<double>());
            }
        }
    }

    const Eigen::Index S = Eigen::Index(R) * N;
    if (os.dynamic) {
        sg.sigma_d = VecX<T>::Zero(S);
        // Dynamic density: mean over each ray's samples, then over rays.
        for (int r = 0; r < R; ++r) {
            const bool masked = os.use_motion_masks && batch.sup[r].masked;
            const std::span<const T> sd(sh.sigma_d.data() + Eigen::Index(r) * N, N);
            terms.dynamic += static_cast<double>(dynamic_loss<T>(sd, masked, os.weights.masked_dynamic_factor)) / R;
            const T gd = T(w.dynamic) * inv_r / T(N) * T(masked ? os.weights.masked_dynamic_factor : 1.0);
            sg.sigma_d.segment(Eigen::Index(r) * N, N).setConstant(gd);
        }
        // Shadow: composited rho^2.
        for (int r = 0; r < R; ++r) {
            terms.shadow += static_cast<double>(out.shadow_sq(r)) / R;
            g.shadow_sq(r) += T(w.shadow) * inv_r;
        }
        if (cycle) {
            sg.flow_f = MatX<T>::Zero(S, 3);
            sg.flow_b = MatX<T>::Zero(S, 3);
            sg.flow_b_at_fwd = MatX<T>::Zero(S, 3);
            sg.flow_f_at_bwd = MatX<T>::Zero(S, 3);
            const T scale = T(w.cycle) / T(S);
            for (Eigen::Index i = 0; i < S; ++i) {
                const bool next = sh.cycle_mask(i, 0) > T(0), prev = sh.cycle_mask(i, 1) > T(0);
                const Vec3<T> vf = sh.flow_f.row(i).transpose(), vb = sh.flow_b.row(i).transpose();
                const Vec3<T> vbf = sh.flow_b_at_fwd.row(i).transpose(), vfb = sh.flow_f_at_bwd.row(i).transpose();
                terms.cycle += static_cast<double>(cycle_loss<T>(vf, vbf, vb, vfb, next, prev)) / S;
                if (next) {
                    const Vec3<T> e = T(2) * scale * (vf + vbf);
                    sg.flow_f.row(i) += e.transpose();
                    sg.flow_b_at_fwd.row(i) += e.transpose();
                }
                if (prev) {
                    const Vec3<T> e = T(2) * scale * (vb + vfb);
                    sg.flow_b.row(i) += e.transpose();
                    sg.flow_f_at_bwd.row(i) += e.transpose();
                }
            }
        }
    }

    stats.report = assemble_total(terms, loss_stage, os.weights, os.anneal_step, os.anneal_horizon);
    if (!std::isfinite(stats.report.total)) throw NumericError("objective: non-finite loss");
    if (!backward) return stats;

    MatX<T> dorigin, ddir;
    tape.backward(m, g, os.dynamic ? &sg : nullptr, &dorigin, &ddir);
    dorigin += extra_dorigin;
    ddir += extra_ddir;
    for (int r = 0; r < R; ++r) {
        const int pi = poses.index_of(batch.sup[r].frame);
        if (poses.is_fixed(pi)) continue;
        const Pose<double> p = poses.pose(pi);
        const Vec3d v = pixel_direction(K, batch.sup[r].x, batch.sup[r].y);
        const Vec3d gdir = ddir.row(r).transpose().template cast<double>();
        poses.accumulate(pi, rotation_grad_from_direction<double>(p.R, v, gdir),
                         dorigin.row(r).transpose().template cast<double>());
    }
    return stats;
}

}  // namespace dynfield
