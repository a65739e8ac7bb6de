#pragma once

#include "dynfield/core/image.hpp"
#include "dynfield/fields/fields.hpp"
#include "dynfield/render/composite.hpp"

#include <optional>

namespace dynfield {

/// Rays of one batch with their sample distances (rays x samples).
template <typename T>
struct RayBatch {
    MatX<T> origin;
    MatX<T> dir;
    MatX<T> t;
    MatX<T> delta;
    std::vector<int> frame;
    int num_frames = 1;

    void resize(int rays, int samples) {
        origin.resize(rays, 3);
        dir.resize(rays, 3);
        t.resize(rays, samples);
        delta.resize(rays, samples);
        frame.assign(rays, 0);
    }

    int rays() const { return static_cast<int>(origin.rows()); }
    int samples() const { return static_cast<int>(t.cols()); }

    template <typename Rng = std::mt19937_64>
    void set_ray(int i, const Ray<T>& ray, int frame_index, Rng* rng = nullptr) {
        const RaySamples<T> s = sample_ray<T, Rng>(ray, samples(), rng);
        origin.row(i) = ray.o.transpose();
        dir.row(i) = ray.d.transpose();
        for (int j = 0; j < samples(); ++j) {
            t(i, j) = s.t[j];
            delta(i, j) = s.delta[j];
        }
        frame[i] = frame_index;
    }
};

/// Per-ray outputs. Color channels include the background behind the
/// remaining transmittance; depth and shadow use the blended density.
template <typename T>
struct BatchRender {
    MatX<T> color, color_s, color_d;
    VecX<T> depth, depth_s, shadow, shadow_sq;
    VecX<T> opacity, opacity_s, opacity_d;
    MatX<T> flow_f, flow_b;  // 3D scene flow composited with the blended weights
};

template <typename T>
struct BatchRenderGrad {
    MatX<T> color, color_s, color_d, flow_f, flow_b;
    VecX<T> depth, depth_s, shadow, shadow_sq;

    void zeros(int rays) {
        color = color_s = color_d = flow_f = flow_b = MatX<T>::Zero(rays, 3);
        depth = depth_s = shadow = shadow_sq = VecX<T>::Zero(rays);
    }
};

/// Differentiable renderer for a ray batch. Blended channel per sample:
/// (blended color, t, rho, rho^2, v_f, v_b) composited with sigma_s + sigma_d.
template <typename T>
class RenderTape {
  public:
    static constexpr int kBlendChannels = 12;

    const BatchRender<T>& forward(const SceneModels<T>& m, const RayBatch<T>& batch, bool dynamic,
                                  bool cycle = false) {
        const int R = batch.rays(), N = batch.samples();
        const Eigen::Index S = Eigen::Index(R) * N;
        models_ = &m;
        dynamic_ = dynamic;
        batch_ = &batch;
        in_.x.resize(S, 3);
        in_.dir.resize(S, 3);
        in_.frame.resize(S);
        in_.num_frames = batch.num_frames;
        in_.dynamic = dynamic;
        in_.cycle = cycle;
        t_.resize(S);
        delta_.resize(S);
        for (int r = 0; r < R; ++r) {
            for (int j = 0; j < N; ++j) {
                const Eigen::Index i = Eigen::Index(r) * N + j;
                in_.x.row(i) = batch.origin.row(r) + batch.t(r, j) * batch.dir.row(r);
                in_.dir.row(i) = batch.dir.row(r);
                in_.frame[i] = batch.frame[r];
                t_(i) = batch.t(r, j);
                delta_(i) = batch.delta(r, j);
            }
        }
        shade_ = tape_.forward(m, in_);
        const ShadeOutputs<T>& sh = shade_;
        bg_ = m.background_color();

        sigma_ = sh.sigma_s + sh.sigma_d;
        blend_q_.resize(S, kBlendChannels);
        for (Eigen::Index i = 0; i < S; ++i) {
            const Vec3<T> c = blend_point<T>(sh.sigma_s(i), sh.color_s.row(i).transpose(), sh.sigma_d(i),
                                             sh.color_d.row(i).transpose(), sh.rho(i));
            blend_q_.row(i).template head<3>() = c.transpose();
            blend_q_(i, 3) = t_(i);
            blend_q_(i, 4) = sh.rho(i);
            blend_q_(i, 5) = sh.rho(i) * sh.rho(i);
            blend_q_.row(i).template segment<3>(6) = sh.flow_f.row(i);
            blend_q_.row(i).template segment<3>(9) = sh.flow_b.row(i);
        }
        comp_b_ = composite(sigma_, delta_, blend_q_, N);

        BatchRender<T>& o = out_;
        o.opacity = comp_b_.opacity;
        o.color = comp_b_.out.leftCols(3);
        add_background(o.color, o.opacity);
        o.depth = comp_b_.out.col(3);
        o.shadow = comp_b_.out.col(4);
        o.shadow_sq = comp_b_.out.col(5);
        o.flow_f = comp_b_.out.middleCols(6, 3);
        o.flow_b = comp_b_.out.middleCols(9, 3);

        if (dynamic) {
            static_q_.resize(S, 4);
            static_q_.leftCols(3) = sh.color_s;
            static_q_.col(3) = t_;
            comp_s_ = composite(VecX<T>(sh.sigma_s), delta_, static_q_, N);
            o.color_s = comp_s_.out.leftCols(3);
            o.opacity_s = comp_s_.opacity;
            add_background(o.color_s, o.opacity_s);
            o.depth_s = comp_s_.out.col(3);
            comp_d_ = composite(VecX<T>(sh.sigma_d), delta_, sh.color_d, N);
            o.color_d = comp_d_.out;
            o.opacity_d = comp_d_.opacity;
            add_background(o.color_d, o.opacity_d);
        } else {
            // sigma_d = 0 and rho = 0: the blended pass is the static pass.
            o.color_s = o.color;
            o.opacity_s = o.opacity;
            o.depth_s = o.depth;
            o.opacity_d = VecX<T>::Zero(R);
            o.color_d = MatX<T>::Zero(R, 3);
            add_background(o.color_d, o.opacity_d);
        }
        return out_;
    }

    const ShadeOutputs<T>& shading() const { return shade_; }
    const VecX<T>& weights() const { return comp_b_.weights; }
    const BatchRender<T>& output() const { return out_; }

    /// Accumulates parameter gradients into m. sample_grads carries optional
    /// per-sample gradients (dynamic density penalty, cycle terms). Returns
    /// per-ray gradients with respect to origins and directions when requested.
    void backward(SceneModels<T>& m, const BatchRenderGrad<T>& g, const ShadeGrads<T>* sample_grads = nullptr,
                  MatX<T>* dorigin = nullptr, MatX<T>* ddir = nullptr) {
        if (models_ != &m) throw UsageError("RenderTape::backward: models differ from forward pass");
        const RayBatch<T>& batch = *batch_;
        const int R = batch.rays(), N = batch.samples();
        const Eigen::Index S = Eigen::Index(R) * N;
        const ShadeOutputs<T>& sh = shade_;
        Vec3<T> dbg = Vec3<T>::Zero();

        MatX<T> dq(R, kBlendChannels);
        VecX<T> dop(R);
        for (int r = 0; r < R; ++r) {
            Vec3<T> gc = g.color.row(r).transpose();
            T gd = g.depth(r);
            if (!dynamic_) {
                gc += g.color_s.row(r).transpose();
                gd += g.depth_s(r);
            }
            dq.row(r).template head<3>() = gc.transpose();
            dq(r, 3) = gd;
            dq(r, 4) = g.shadow(r);
            dq(r, 5) = g.shadow_sq(r);
            dq.row(r).template segment<3>(6) = g.flow_f.row(r);
            dq.row(r).template segment<3>(9) = g.flow_b.row(r);
            dop(r) = -gc.dot(bg_);
            dbg += (T(1) - out_.opacity(r)) * gc;
        }
        VecX<T> dsigma_b;
        MatX<T> dq_s;
        composite_backward(sigma_, delta_, blend_q_, comp_b_, dq, dop, dsigma_b, dq_s);

        ShadeGrads<T> sg;
        sg.zeros_like(sh);
        if (sample_grads) {
            if (sample_grads->sigma_d.size() == S) sg.sigma_d += sample_grads->sigma_d;
            if (sample_grads->flow_f.rows() == S) sg.flow_f += sample_grads->flow_f;
            if (sample_grads->flow_b.rows() == S) sg.flow_b += sample_grads->flow_b;
            if (sample_grads->flow_b_at_fwd.rows() == S) sg.flow_b_at_fwd += sample_grads->flow_b_at_fwd;
            if (sample_grads->flow_f_at_bwd.rows() == S) sg.flow_f_at_bwd += sample_grads->flow_f_at_bwd;
            if (sample_grads->rho.size() == S) sg.rho += sample_grads->rho;
        }
        for (Eigen::Index i = 0; i < S; ++i) {
            const Vec3<T> dc = dq_s.row(i).template head<3>().transpose();
            const BlendGrad<T> bgr =
                blend_point_backward<T>(sh.sigma_s(i), sh.color_s.row(i).transpose(), sh.sigma_d(i),
                                        sh.color_d.row(i).transpose(), sh.rho(i), dc);
            sg.sigma_s(i) += dsigma_b(i) + bgr.sigma_s;
            sg.sigma_d(i) += dsigma_b(i) + bgr.sigma_d;
            sg.color_s.row(i) += bgr.c_s.transpose();
            sg.color_d.row(i) += bgr.c_d.transpose();
            sg.rho(i) += bgr.rho + dq_s(i, 4) + T(2) * sh.rho(i) * dq_s(i, 5);
            sg.flow_f.row(i) += dq_s.row(i).template segment<3>(6);
            sg.flow_b.row(i) += dq_s.row(i).template segment<3>(9);
        }

        if (dynamic_) {
            MatX<T> dqs(R, 4), dqs_s;
            VecX<T> dops(R), dsig;
            for (int r = 0; r < R; ++r) {
                const Vec3<T> gc = g.color_s.row(r).transpose();
                dqs.row(r).template head<3>() = gc.transpose();
                dqs(r, 3) = g.depth_s(r);
                dops(r) = -gc.dot(bg_);
                dbg += (T(1) - out_.opacity_s(r)) * gc;
            }
            composite_backward(VecX<T>(sh.sigma_s), delta_, static_q_, comp_s_, dqs, dops, dsig, dqs_s);
            sg.sigma_s += dsig;
            sg.color_s += dqs_s.leftCols(3);

            VecX<T> dopd(R);
            for (int r = 0; r < R; ++r) {
                dopd(r) = -g.color_d.row(r).dot(bg_.transpose());
                dbg += (T(1) - out_.opacity_d(r)) * g.color_d.row(r).transpose();
            }
            MatX<T> dcd;
            composite_backward(VecX<T>(sh.sigma_d), delta_, sh.color_d, comp_d_, g.color_d, dopd, dsig, dcd);
            sg.sigma_d += dsig;
            sg.color_d += dcd;
        } else {
            for (int r = 0; r < R; ++r) dbg += (T(1) - out_.opacity_d(r)) * g.color_d.row(r).transpose();
        }
        m.accumulate_background_grad(dbg);

        const bool want_dir = ddir != nullptr;
        MatX<T> ddir_s;
        const MatX<T> dx = tape_.backward(m, sg, want_dir ? &ddir_s : nullptr);
        if (dorigin) dorigin->setZero(R, 3);
        if (ddir) ddir->setZero(R, 3);
        for (int r = 0; r < R; ++r) {
            for (int j = 0; j < N; ++j) {
                const Eigen::Index i = Eigen::Index(r) * N + j;
                if (dorigin) dorigin->row(r) += dx.row(i);
                if (ddir) ddir->row(r) += t_(i) * dx.row(i) + ddir_s.row(i);
            }
        }
    }

  private:
    void add_background(MatX<T>& color, const VecX<T>& opacity) const {
        for (Eigen::Index r = 0; r < color.rows(); ++r) color.row(r) += (T(1) - opacity(r)) * bg_.transpose();
    }

    const SceneModels<T>* models_ = nullptr;
    const RayBatch<T>* batch_ = nullptr;
    bool dynamic_ = false;
    ShadeInputs<T> in_;
    ShadeTape<T> tape_;
    ShadeOutputs<T> shade_;
    VecX<T> t_, delta_, sigma_;
    Vec3<T> bg_ = Vec3<T>::Zero();
    MatX<T> blend_q_, static_q_;
    CompositeBatch<T> comp_b_, comp_s_, comp_d_;
    BatchRender<T> out_;
};

template <typename T>
struct PixelRender {
    Vec3<T> color = Vec3<T>::Zero();
    Vec3<T> color_s = Vec3<T>::Zero();
    Vec3<T> color_d = Vec3<T>::Zero();
    T depth = T(0);
    T depth_s = T(0);
    T shadow = T(0);
    T opacity = T(0);
    T opacity_s = T(0);
    T opacity_d = T(0);
    std::vector<T> weights;
};

struct RenderSettings {
    int samples = 128;
    double near = 0.05;
    double far = 1000.0;
};

template <typename T>
PixelRender<T> render_pixel(const SceneModels<T>& m, const Pose<T>& pose, const Intrinsics& K, T u, T v,
                            int frame, int num_frames, Stage stage, const RenderSettings& rs) {
    RayBatch<T> batch;
    batch.resize(1, rs.samples);
    batch.num_frames = num_frames;
    batch.set_ray(0, generate_ray<T>(pose, K, u, v, T(rs.near), T(rs.far)), frame);
    RenderTape<T> tape;
    const auto& o = tape.forward(m, batch, dynamic_active(stage));
    PixelRender<T> p;
    p.color = o.color.row(0).transpose();
    p.color_s = o.color_s.row(0).transpose();
    p.color_d = o.color_d.row(0).transpose();
    p.depth = o.depth(0);
    p.depth_s = o.depth_s(0);
    p.shadow = o.shadow(0);
    p.opacity = o.opacity(0);
    p.opacity_s = o.opacity_s(0);
    p.opacity_d = o.opacity_d(0);
    p.weights.assign(tape.weights().data(), tape.weights().data() + rs.samples);
    return p;
}

struct RenderedImages {
    Image color, color_s, color_d;
    Image depth, depth_s, shadow, opacity, opacity_d;
};

/// Renders every pixel centre of the image in fixed-size tiles.
template <typename T>
RenderedImages render_image(const SceneModels<T>& m, const Pose<T>& pose, const Intrinsics& K, int frame,
                            int num_frames, Stage stage, const RenderSettings& rs, int tile = 256) {
    K.validate();
    const int W = K.width, H = K.height;
    RenderedImages img{Image(W, H, 3), Image(W, H, 3), Image(W, H, 3), Image(W, H, 1),
                       Image(W, H, 1), Image(W, H, 1), Image(W, H, 1), Image(W, H, 1)};
    const int total = W * H;
    RenderTape<T> tape;
    for (int start = 0; start < total; start += tile) {
        const int n = std::min(tile, total - start);
        RayBatch<T> batch;
        batch.resize(n, rs.samples);
        batch.num_frames = num_frames;
        for (int k = 0; k < n; ++k) {
            const int px = (start + k) % W, py = (start + k) / W;
            batch.set_ray(k, generate_ray<T>(pose, K, T(px + 0.5), T(py + 0.5), T(rs.near), T(rs.far)), frame);
        }
        const auto& o = tape.forward(m, batch, dynamic_active(stage));
        for (int k = 0; k < n; ++k) {
            const int px = (start + k) % W, py = (start + k) / W;
            for (int c = 0; c < 3; ++c) {
                img.color.at(px, py, c) = static_cast<double>(o.color(k, c));
                img.color_s.at(px, py, c) = static_cast<double>(o.color_s(k, c));
                img.color_d.at(px, py, c) = static_cast<double>(o.color_d(k, c));
            }
            img.depth.at(px, py) = static_cast<double>(o.depth(k));
            img.depth_s.at(px, py) = static_cast<double>(o.depth_s(k));
            img.shadow.at(px, py) = static_cast<double>(o.shadow(k));
            img.opacity.at(px, py) = static_cast<double>(o.opacity(k));
            img.opacity_d.at(px, py) = static_cast<double>(o.opacity_d(k));
        }
    }
    return img;
}

}  // namespace dynfield
