#pragma once

#include "dynfield/diffcore/hash_grid.hpp"
#include "dynfield/diffcore/mlp.hpp"
#include "dynfield/fields/encoding.hpp"
#include "dynfield/render/sampling.hpp"

#include <array>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace dynfield {

struct FieldConfig {
    HashGridConfig static_grid{};
    HashGridConfig dynamic_grid{};
    HashGridConfig flow_grid{4, 12, 2, 8, 1.5};
    int feature_dim = 15;
    std::vector<int> base_hidden{64, 64};
    std::vector<int> color_hidden{64, 64};
    std::vector<int> shadow_hidden{32};
    std::vector<int> flow_hidden{32};
    int time_frequencies = 4;
    int shadow_posenc_frequencies = 2;
    double max_flow = 0.5;
    // Initial output biases used by init_random (zero-initialized models ignore them).
    double dynamic_density_bias = -5.0;
    double shadow_bias = -3.0;
};

enum class ParamGroup { Static, Dynamic, Flow, Shadow };

inline const char* to_string(ParamGroup g) {
    switch (g) {
        case ParamGroup::Static: return "static";
        case ParamGroup::Dynamic: return "dynamic";
        case ParamGroup::Flow: return "flow";
        case ParamGroup::Shadow: return "shadow";
    }
    return "?";
}

template <typename T>
struct ParamRef {
    std::string name;
    ParamGroup group;
    std::span<T> values;
    std::span<T> grads;
};

/// Normalized time of a frame: index / (num_frames - 1).
template <typename T>
T frame_time(int frame, int num_frames) {
    return num_frames > 1 ? T(frame) / T(num_frames - 1) : T(0);
}

/// Temporal aggregation weights for (t - 1, t, t + 1). Interior frames use
/// (0.25, 0.5, 0.25); a missing neighbour is dropped and the rest renormalized.
inline std::array<double, 3> aggregation_weights(int frame, int num_frames) {
    double w[3] = {0.25, 0.5, 0.25};
    if (frame <= 0) w[0] = 0.0;
    if (frame >= num_frames - 1) w[2] = 0.0;
    const double s = w[0] + w[1] + w[2];
    return {w[0] / s, w[1] / s, w[2] / s};
}

/// Maps the contracted domain (radius-2 ball) into the unit cube.
template <typename T>
Vec3<T> contracted_to_unit(const Vec3<T>& xc) {
    return (xc.array() + T(2)).matrix() / T(4);
}

/// All learnable fields of one sub-scene: static and dynamic density fields,
/// flow field, shadow head, one shared color head and a background color.
template <typename T>
struct SceneModels {
    FieldConfig cfg;
    HashGrid<T> static_grid;
    HashGrid<T> dynamic_grid;
    HashGrid<T> flow_grid;
    Mlp<T> static_mlp;
    Mlp<T> dynamic_mlp;
    Mlp<T> flow_mlp;
    Mlp<T> shadow_mlp;
    Mlp<T> color_mlp;
    std::vector<T> background;  // RGB, clamped to [0, 1] on use
    std::vector<T> background_grad;

    SceneModels() = default;

    explicit SceneModels(const FieldConfig& c)
        : cfg(c),
          static_grid(c.static_grid),
          dynamic_grid(c.dynamic_grid),
          flow_grid(c.flow_grid),
          static_mlp(static_grid.output_dim(), c.base_hidden, 1 + c.feature_dim),
          dynamic_mlp(dynamic_grid.output_dim() + 2 * c.time_frequencies, c.base_hidden, 1 + c.feature_dim),
          flow_mlp(flow_grid.output_dim() + 2 * c.time_frequencies, c.flow_hidden, 6),
          shadow_mlp(c.feature_dim + posenc_dim(c.shadow_posenc_frequencies), c.shadow_hidden, 1,
                     Activation::Sigmoid),
          color_mlp(c.feature_dim + kShDim, c.color_hidden, 3, Activation::Sigmoid),
          background(3, T(0)),
          background_grad(3, T(0)) {
        require(c.feature_dim >= 1, "FieldConfig: feature_dim must be >= 1");
        require(c.time_frequencies >= 1, "FieldConfig: time_frequencies must be >= 1");
        require(c.max_flow > 0.0, "FieldConfig: max_flow must be positive");
    }

    int time_dim() const { return 2 * cfg.time_frequencies; }

    template <typename Rng>
    void init_random(Rng& rng) {
        static_grid.init_uniform(rng);
        dynamic_grid.init_uniform(rng);
        flow_grid.init_uniform(rng);
        static_mlp.init_uniform(rng);
        dynamic_mlp.init_uniform(rng);
        flow_mlp.init_uniform(rng, 0.01);
        shadow_mlp.init_uniform(rng, 0.1);
        color_mlp.init_uniform(rng);
        dynamic_mlp.bias(dynamic_mlp.num_layers() - 1)(0) = static_cast<T>(cfg.dynamic_density_bias);
        shadow_mlp.bias(shadow_mlp.num_layers() - 1)(0) = static_cast<T>(cfg.shadow_bias);
        std::fill(background.begin(), background.end(), T(0));
    }

    Vec3<T> background_color() const {
        return Vec3<T>(background[0], background[1], background[2]).cwiseMax(T(0)).cwiseMin(T(1));
    }

    // Straight-through gradient for the clamp.
    void accumulate_background_grad(const Vec3<T>& g) {
        for (int k = 0; k < 3; ++k) background_grad[k] += g(k);
    }

    std::vector<ParamRef<T>> parameters() {
        return {
            {"static_grid", ParamGroup::Static, static_grid.params(), static_grid.grads()},
            {"static_mlp", ParamGroup::Static, static_mlp.params(), static_mlp.grads()},
            {"color_mlp", ParamGroup::Static, color_mlp.params(), color_mlp.grads()},
            {"background", ParamGroup::Static, background, background_grad},
            {"dynamic_grid", ParamGroup::Dynamic, dynamic_grid.params(), dynamic_grid.grads()},
            {"dynamic_mlp", ParamGroup::Dynamic, dynamic_mlp.params(), dynamic_mlp.grads()},
            {"flow_grid", ParamGroup::Flow, flow_grid.params(), flow_grid.grads()},
            {"flow_mlp", ParamGroup::Flow, flow_mlp.params(), flow_mlp.grads()},
            {"shadow_mlp", ParamGroup::Shadow, shadow_mlp.params(), shadow_mlp.grads()},
        };
    }

    void zero_grad() {
        for (auto& p : parameters()) std::fill(p.grads.begin(), p.grads.end(), T(0));
    }
};

// ---------------------------------------------------------------------------
// Grid + MLP query shared by the static, dynamic and flow fields.

template <typename T>
struct GridMlpCache {
    typename HashGrid<T>::Cache grid;
    typename Mlp<T>::Cache mlp;
    int grid_dim = 0;
};

/// Encodes contracted positions (n x 3) and runs the MLP on [grid features, extra].
template <typename T>
MatX<T> grid_mlp_forward(const HashGrid<T>& grid, const Mlp<T>& mlp, const MatX<T>& xc,
                         const std::type_identity_t<MatX<T>>* extra,
                         std::type_identity_t<GridMlpCache<T>>* cache) {
    MatX<T> unit = ((xc.array() + T(2)) / T(4)).matrix();
    MatX<T> enc = grid.encode(unit, cache ? &cache->grid : nullptr);
    if (cache) cache->grid_dim = static_cast<int>(enc.cols());
    if (extra) {
        MatX<T> in(enc.rows(), enc.cols() + extra->cols());
        in << enc, *extra;
        return mlp.forward(in, cache ? &cache->mlp : nullptr);
    }
    return mlp.forward(enc, cache ? &cache->mlp : nullptr);
}

/// Returns d(loss)/d(xc) and accumulates grid and MLP gradients.
template <typename T>
MatX<T> grid_mlp_backward(HashGrid<T>& grid, Mlp<T>& mlp, const GridMlpCache<T>& cache, const MatX<T>& dout) {
    MatX<T> din = mlp.backward(cache.mlp, dout);
    MatX<T> denc = din.leftCols(cache.grid_dim);
    MatX<T> dunit;
    grid.backward(cache.grid, denc, &dunit);
    return dunit / T(4);
}

template <typename T>
MatX<T> contract_rows(const MatX<T>& x) {
    MatX<T> out(x.rows(), 3);
    for (Eigen::Index i = 0; i < x.rows(); ++i) out.row(i) = contract<T>(x.row(i).transpose()).transpose();
    return out;
}

template <typename T>
MatX<T> contract_rows_backward(const MatX<T>& x, const MatX<T>& g) {
    MatX<T> out(x.rows(), 3);
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        out.row(i) = contract_backward<T>(x.row(i).transpose(), g.row(i).transpose()).transpose();
    return out;
}

template <typename T>
Vec3<T> clamp_flow(const Vec3<T>& v, T vmax) {
    const T n = v.norm();
    return n > vmax ? Vec3<T>(v * (vmax / n)) : v;
}

template <typename T>
Vec3<T> clamp_flow_backward(const Vec3<T>& v, T vmax, const Vec3<T>& g) {
    const T n = v.norm();
    if (n <= vmax) return g;
    const Vec3<T> u = v / n;
    return (vmax / n) * (g - u * u.dot(g));
}

// ---------------------------------------------------------------------------
// Batched shading of samples (x, d, t).

template <typename T>
struct ShadeInputs {
    MatX<T> x;               // samples x 3, world coordinates
    MatX<T> dir;             // samples x 3, unit view directions
    std::vector<int> frame;  // per-sample frame index
    int num_frames = 1;
    bool dynamic = false;    // evaluate the dynamic branch
    bool cycle = false;      // also query flows at displaced points for the cycle term
};

/// SampleShading for a batch: (sigma_s, sigma_d, c_s, c_d, rho, v_f, v_b) per row.
template <typename T>
struct ShadeOutputs {
    VecX<T> sigma_s;
    VecX<T> sigma_d;  // aggregated over (t-1, t, t+1); zero when dynamic is off
    VecX<T> rho;      // zero when dynamic is off
    MatX<T> color_s;
    MatX<T> color_d;
    MatX<T> flow_f;
    MatX<T> flow_b;
    MatX<T> flow_b_at_fwd;  // v_b(x + v_f, t + 1)
    MatX<T> flow_f_at_bwd;  // v_f(x + v_b, t - 1)
    MatX<T> cycle_mask;     // samples x 2: 1 where the neighbour timestep exists
};

template <typename T>
struct ShadeGrads {
    VecX<T> sigma_s, sigma_d, rho;
    MatX<T> color_s, color_d, flow_f, flow_b, flow_b_at_fwd, flow_f_at_bwd;

    void zeros_like(const ShadeOutputs<T>& o) {
        sigma_s = VecX<T>::Zero(o.sigma_s.size());
        sigma_d = VecX<T>::Zero(o.sigma_d.size());
        rho = VecX<T>::Zero(o.rho.size());
        color_s = MatX<T>::Zero(o.color_s.rows(), 3);
        color_d = MatX<T>::Zero(o.color_d.rows(), 3);
        flow_f = MatX<T>::Zero(o.flow_f.rows(), 3);
        flow_b = MatX<T>::Zero(o.flow_b.rows(), 3);
        flow_b_at_fwd = MatX<T>::Zero(o.flow_b_at_fwd.rows(), 3);
        flow_f_at_bwd = MatX<T>::Zero(o.flow_f_at_bwd.rows(), 3);
    }
};

/// Forward/backward tape for batched shading. forward() records everything
/// backward() needs; backward() accumulates parameter gradients into the
/// models and returns gradients with respect to sample positions and directions.
template <typename T>
class ShadeTape {
  public:
    ShadeOutputs<T> forward(const SceneModels<T>& m, const ShadeInputs<T>& in) {
        const Eigen::Index S = in.x.rows();
        if (in.dir.rows() != S || static_cast<Eigen::Index>(in.frame.size()) != S || in.x.cols() != 3 ||
            in.dir.cols() != 3)
            throw ConfigError("ShadeTape::forward: inconsistent sample arrays");
        for (Eigen::Index i = 0; i < S; ++i) {
            if (!in.x.row(i).allFinite()) throw DomainError("shade: non-finite sample position");
            if (std::abs(in.dir.row(i).norm() - T(1)) > T(1e-5)) throw DomainError("shade: non-unit direction");
        }
        models_ = &m;
        in_ = &in;
        dynamic_ = in.dynamic;
        cycle_ = in.dynamic && in.cycle;
        const int fd = m.cfg.feature_dim;
        ShadeOutputs<T> out;

        xc_ = contract_rows(in.x);
        sh_.resize(S, kShDim);
        for (Eigen::Index i = 0; i < S; ++i) {
            Eigen::Matrix<T, 1, 3> d = in.dir.row(i);
            sh_encode(d.data(), sh_.row(i).data());
        }

        // Static field.
        static_raw_ = grid_mlp_forward(m.static_grid, m.static_mlp, xc_, nullptr, &static_cache_);
        out.sigma_s.resize(S);
        for (Eigen::Index i = 0; i < S; ++i) out.sigma_s(i) = softplus(static_raw_(i, 0));
        MatX<T> feat_s = static_raw_.rightCols(fd);
        out.color_s = color_forward(m, feat_s, color_s_cache_);

        out.sigma_d = VecX<T>::Zero(S);
        out.rho = VecX<T>::Zero(S);
        out.color_d = MatX<T>::Zero(S, 3);
        out.flow_f = MatX<T>::Zero(S, 3);
        out.flow_b = MatX<T>::Zero(S, 3);
        out.flow_b_at_fwd = MatX<T>::Zero(S, 3);
        out.flow_f_at_bwd = MatX<T>::Zero(S, 3);
        out.cycle_mask = MatX<T>::Zero(S, 2);
        if (!dynamic_) return out;

        const int K = m.cfg.time_frequencies;
        const T vmax = static_cast<T>(m.cfg.max_flow);
        for (int k = 0; k < 3; ++k) tf_[k].resize(S, 2 * K);
        lambda_.resize(S, 3);
        for (Eigen::Index i = 0; i < S; ++i) {
            const int f = in.frame[i];
            for (int k = 0; k < 3; ++k)
                time_features(frame_time<T>(f + k - 1, in.num_frames), K, tf_[k].row(i).data());
            const auto w = aggregation_weights(f, in.num_frames);
            for (int k = 0; k < 3; ++k) lambda_(i, k) = static_cast<T>(w[k]);
            out.cycle_mask(i, 0) = f < in.num_frames - 1 ? T(1) : T(0);
            out.cycle_mask(i, 1) = f > 0 ? T(1) : T(0);
        }

        // Flow field at (x, t).
        flow_raw_ = grid_mlp_forward(m.flow_grid, m.flow_mlp, xc_, &tf_[1], &flow_cache_);
        for (Eigen::Index i = 0; i < S; ++i) {
            out.flow_f.row(i) = clamp_flow<T>(flow_raw_.row(i).template head<3>().transpose(), vmax).transpose();
            out.flow_b.row(i) = clamp_flow<T>(flow_raw_.row(i).template tail<3>().transpose(), vmax).transpose();
        }

        // Dynamic field at (x + v_b, t - 1), (x, t), (x + v_f, t + 1).
        pos_[0] = in.x + out.flow_b;
        pos_[1] = in.x;
        pos_[2] = in.x + out.flow_f;
        MatX<T> sum_feat = MatX<T>::Zero(S, fd);
        for (int k = 0; k < 3; ++k) {
            pos_c_[k] = k == 1 ? xc_ : contract_rows(pos_[k]);
            dyn_raw_[k] = grid_mlp_forward(m.dynamic_grid, m.dynamic_mlp, pos_c_[k], &tf_[k], &dyn_cache_[k]);
            for (Eigen::Index i = 0; i < S; ++i) {
                out.sigma_d(i) += lambda_(i, k) * softplus(dyn_raw_[k](i, 0));
                sum_feat.row(i) += lambda_(i, k) * dyn_raw_[k].row(i).rightCols(fd);
            }
        }
        feat_d_ = sum_feat;

        // Shadow head on [aggregated feature, low-frequency encoding of the contracted position].
        const int pe = posenc_dim(m.cfg.shadow_posenc_frequencies);
        MatX<T> shadow_in(S, fd + pe);
        for (Eigen::Index i = 0; i < S; ++i) {
            shadow_in.row(i).head(fd) = feat_d_.row(i);
            Vec3<T> u = contracted_to_unit<T>(xc_.row(i).transpose());
            posenc(u.data(), m.cfg.shadow_posenc_frequencies, shadow_in.row(i).data() + fd);
        }
        MatX<T> rho = m.shadow_mlp.forward(shadow_in, &shadow_cache_);
        out.rho = rho.col(0);
        out.color_d = color_forward(m, feat_d_, color_d_cache_);

        if (cycle_) {
            cyc_raw_[0] = grid_mlp_forward(m.flow_grid, m.flow_mlp, pos_c_[2], &tf_[2], &cyc_cache_[0]);
            cyc_raw_[1] = grid_mlp_forward(m.flow_grid, m.flow_mlp, pos_c_[0], &tf_[0], &cyc_cache_[1]);
            for (Eigen::Index i = 0; i < S; ++i) {
                out.flow_b_at_fwd.row(i) =
                    clamp_flow<T>(cyc_raw_[0].row(i).template tail<3>().transpose(), vmax).transpose();
                out.flow_f_at_bwd.row(i) =
                    clamp_flow<T>(cyc_raw_[1].row(i).template head<3>().transpose(), vmax).transpose();
            }
        }
        return out;
    }

    /// Returns d(loss)/d(x) and, via ddir, d(loss)/d(dir).
    MatX<T> backward(SceneModels<T>& m, const ShadeGrads<T>& g, MatX<T>* ddir = nullptr) {
        if (models_ != &m) throw UsageError("ShadeTape::backward: models differ from forward pass");
        const ShadeInputs<T>& in = *in_;
        const Eigen::Index S = in.x.rows();
        const int fd = m.cfg.feature_dim;
        MatX<T> dsh = MatX<T>::Zero(S, kShDim);
        MatX<T> dxc = MatX<T>::Zero(S, 3);
        MatX<T> dx = MatX<T>::Zero(S, 3);

        // Static branch.
        MatX<T> dstatic_raw(S, 1 + fd);
        {
            MatX<T> dfeat_s = color_backward(m, color_s_cache_, g.color_s, dsh);
            for (Eigen::Index i = 0; i < S; ++i) dstatic_raw(i, 0) = g.sigma_s(i) * sigmoid(static_raw_(i, 0));
            dstatic_raw.rightCols(fd) = dfeat_s;
            dxc += grid_mlp_backward(m.static_grid, m.static_mlp, static_cache_, dstatic_raw);
        }

        if (dynamic_) {
            const T vmax = static_cast<T>(m.cfg.max_flow);
            MatX<T> dfeat_d = color_backward(m, color_d_cache_, g.color_d, dsh);
            {
                MatX<T> drho = g.rho;
                MatX<T> dshadow_in = m.shadow_mlp.backward(shadow_cache_, drho);
                dfeat_d += dshadow_in.leftCols(fd);
                const int nf = m.cfg.shadow_posenc_frequencies;
                for (Eigen::Index i = 0; i < S; ++i) {
                    Vec3<T> u = contracted_to_unit<T>(xc_.row(i).transpose());
                    T du[3] = {T(0), T(0), T(0)};
                    posenc_backward(u.data(), nf, dshadow_in.row(i).data() + fd, du);
                    for (int a = 0; a < 3; ++a) dxc(i, a) += du[a] / T(4);
                }
            }

            MatX<T> dflow_f = g.flow_f, dflow_b = g.flow_b;
            for (int k = 0; k < 3; ++k) {
                MatX<T> draw(S, 1 + fd);
                for (Eigen::Index i = 0; i < S; ++i) {
                    draw(i, 0) = lambda_(i, k) * g.sigma_d(i) * sigmoid(dyn_raw_[k](i, 0));
                    draw.row(i).rightCols(fd) = lambda_(i, k) * dfeat_d.row(i);
                }
                MatX<T> dpc = grid_mlp_backward(m.dynamic_grid, m.dynamic_mlp, dyn_cache_[k], draw);
                if (k == 1) {
                    dxc += dpc;
                } else {
                    MatX<T> dp = contract_rows_backward(pos_[k], dpc);
                    dx += dp;
                    (k == 0 ? dflow_b : dflow_f) += dp;
                }
            }

            if (cycle_) {
                // v_b(x + v_f, t + 1) and v_f(x + v_b, t - 1).
                for (int c = 0; c < 2; ++c) {
                    const MatX<T>& gout = c == 0 ? g.flow_b_at_fwd : g.flow_f_at_bwd;
                    MatX<T> draw = MatX<T>::Zero(S, 6);
                    for (Eigen::Index i = 0; i < S; ++i) {
                        if (c == 0)
                            draw.row(i).template tail<3>() =
                                clamp_flow_backward<T>(cyc_raw_[0].row(i).template tail<3>().transpose(), vmax,
                                                       gout.row(i).transpose())
                                    .transpose();
                        else
                            draw.row(i).template head<3>() =
                                clamp_flow_backward<T>(cyc_raw_[1].row(i).template head<3>().transpose(), vmax,
                                                       gout.row(i).transpose())
                                    .transpose();
                    }
                    MatX<T> dpc = grid_mlp_backward(m.flow_grid, m.flow_mlp, cyc_cache_[c], draw);
                    MatX<T> dp = contract_rows_backward(pos_[c == 0 ? 2 : 0], dpc);
                    dx += dp;
                    (c == 0 ? dflow_f : dflow_b) += dp;
                }
            }

            MatX<T> dflow_raw(S, 6);
            for (Eigen::Index i = 0; i < S; ++i) {
                dflow_raw.row(i).template head<3>() =
                    clamp_flow_backward<T>(flow_raw_.row(i).template head<3>().transpose(), vmax,
                                           dflow_f.row(i).transpose())
                        .transpose();
                dflow_raw.row(i).template tail<3>() =
                    clamp_flow_backward<T>(flow_raw_.row(i).template tail<3>().transpose(), vmax,
                                           dflow_b.row(i).transpose())
                        .transpose();
            }
            dxc += grid_mlp_backward(m.flow_grid, m.flow_mlp, flow_cache_, dflow_raw);
        }

        dx += contract_rows_backward(in.x, dxc);
        if (ddir) {
            ddir->setZero(S, 3);
            for (Eigen::Index i = 0; i < S; ++i) {
                Eigen::Matrix<T, 1, 3> d = in.dir.row(i);
                sh_backward(d.data(), dsh.row(i).data(), ddir->row(i).data());
            }
        }
        return dx;
    }

  private:
    MatX<T> color_forward(const SceneModels<T>& m, const MatX<T>& feat, typename Mlp<T>::Cache& cache) const {
        MatX<T> in(feat.rows(), feat.cols() + kShDim);
        in << feat, sh_;
        return m.color_mlp.forward(in, &cache);
    }

    MatX<T> color_backward(SceneModels<T>& m, const typename Mlp<T>::Cache& cache, const MatX<T>& dc,
                           MatX<T>& dsh) {
        MatX<T> din = m.color_mlp.backward(cache, dc);
        const int fd = m.cfg.feature_dim;
        dsh += din.rightCols(kShDim);
        return din.leftCols(fd);
    }

    const SceneModels<T>* models_ = nullptr;
    const ShadeInputs<T>* in_ = nullptr;
    bool dynamic_ = false;
    bool cycle_ = false;
    MatX<T> xc_, sh_, static_raw_, flow_raw_, feat_d_, lambda_;
    GridMlpCache<T> static_cache_, flow_cache_;
    typename Mlp<T>::Cache color_s_cache_, color_d_cache_, shadow_cache_;
    MatX<T> tf_[3], pos_[3], pos_c_[3], dyn_raw_[3], cyc_raw_[2];
    GridMlpCache<T> dyn_cache_[3], cyc_cache_[2];
};

// ---------------------------------------------------------------------------
// Single-sample queries.

template <typename T>
struct DensityFeature {
    T sigma = T(0);
    VecX<T> feature;
};

/// Static density and feature at a contracted position.
template <typename T>
DensityFeature<T> query_static(const Vec3<T>& x_contracted, const SceneModels<T>& m) {
    if (!x_contracted.allFinite()) throw DomainError("query_static: non-finite position");
    MatX<T> xc = x_contracted.transpose();
    MatX<T> raw = grid_mlp_forward(m.static_grid, m.static_mlp, xc, nullptr, nullptr);
    return {softplus(raw(0, 0)), raw.row(0).tail(m.cfg.feature_dim).transpose()};
}

/// Dynamic density and feature at a contracted position and frame, before aggregation.
template <typename T>
DensityFeature<T> query_dynamic_raw(const Vec3<T>& x_contracted, int frame, int num_frames,
                                    const SceneModels<T>& m) {
    if (!x_contracted.allFinite()) throw DomainError("query_dynamic_raw: non-finite position");
    MatX<T> xc = x_contracted.transpose();
    MatX<T> tf(1, m.time_dim());
    time_features(frame_time<T>(frame, num_frames), m.cfg.time_frequencies, tf.data());
    MatX<T> raw = grid_mlp_forward(m.dynamic_grid, m.dynamic_mlp, xc, &tf, nullptr);
    return {softplus(raw(0, 0)), raw.row(0).tail(m.cfg.feature_dim).transpose()};
}

template <typename T>
struct FlowPair {
    Vec3<T> forward = Vec3<T>::Zero();
    Vec3<T> backward = Vec3<T>::Zero();
};

/// Forward and backward 3D scene flow at a world position, clamped to max_flow.
template <typename T>
FlowPair<T> query_flow(const Vec3<T>& x_world, int frame, int num_frames, const SceneModels<T>& m) {
    if (!x_world.allFinite()) throw DomainError("query_flow: non-finite position");
    MatX<T> xc = contract<T>(x_world).transpose();
    MatX<T> tf(1, m.time_dim());
    time_features(frame_time<T>(frame, num_frames), m.cfg.time_frequencies, tf.data());
    MatX<T> raw = grid_mlp_forward(m.flow_grid, m.flow_mlp, xc, &tf, nullptr);
    const T vmax = static_cast<T>(m.cfg.max_flow);
    return {clamp_flow<T>(raw.row(0).template head<3>().transpose(), vmax),
            clamp_flow<T>(raw.row(0).template tail<3>().transpose(), vmax)};
}

/// Weighted combination of per-timestep values with weights lambda.
template <typename T>
T aggregate_values(const std::array<T, 3>& v, const std::array<double, 3>& lambda) {
    return T(lambda[0]) * v[0] + T(lambda[1]) * v[1] + T(lambda[2]) * v[2];
}

/// Aggregated dynamic density and feature at a world position (flow-displaced neighbours).
template <typename T>
DensityFeature<T> aggregate_temporal(const Vec3<T>& x_world, int frame, int num_frames,
                                     const SceneModels<T>& m) {
    const FlowPair<T> v = query_flow(x_world, frame, num_frames, m);
    const auto lambda = aggregation_weights(frame, num_frames);
    const Vec3<T> pos[3] = {x_world + v.backward, x_world, x_world + v.forward};
    DensityFeature<T> r;
    r.feature = VecX<T>::Zero(m.cfg.feature_dim);
    for (int k = 0; k < 3; ++k) {
        const auto q = query_dynamic_raw<T>(contract<T>(pos[k]), frame + k - 1, num_frames, m);
        r.sigma += T(lambda[k]) * q.sigma;
        r.feature += T(lambda[k]) * q.feature;
    }
    return r;
}

/// Shadow weight from the aggregated dynamic feature and contracted position.
template <typename T>
T query_shadow(const VecX<T>& feat_d, const Vec3<T>& x_contracted, const SceneModels<T>& m) {
    const int fd = m.cfg.feature_dim;
    if (feat_d.size() != fd) throw ConfigError("query_shadow: feature dimension mismatch");
    MatX<T> in(1, fd + posenc_dim(m.cfg.shadow_posenc_frequencies));
    in.row(0).head(fd) = feat_d.transpose();
    Vec3<T> u = contracted_to_unit<T>(x_contracted);
    posenc(u.data(), m.cfg.shadow_posenc_frequencies, in.row(0).data() + fd);
    return m.shadow_mlp.forward(in)(0, 0);
}

/// Shared color head: RGB in [0, 1] from a feature and a unit view direction.
template <typename T>
Vec3<T> query_color(const VecX<T>& feat, const Vec3<T>& d, const SceneModels<T>& m) {
    if (std::abs(d.norm() - T(1)) > T(1e-6)) throw DomainError("query_color: direction is not unit length");
    if (feat.size() != m.cfg.feature_dim) throw ConfigError("query_color: feature dimension mismatch");
    MatX<T> in(1, feat.size() + kShDim);
    in.row(0).head(feat.size()) = feat.transpose();
    sh_encode(d.data(), in.row(0).data() + feat.size());
    return m.color_mlp.forward(in).row(0).transpose();
}

template <typename T>
struct SampleShading {
    T sigma_s = T(0);
    T sigma_d = T(0);
    Vec3<T> c_s = Vec3<T>::Zero();
    Vec3<T> c_d = Vec3<T>::Zero();
    T rho = T(0);
    Vec3<T> v_f = Vec3<T>::Zero();
    Vec3<T> v_b = Vec3<T>::Zero();
};

/// Full shading of one sample; the dynamic branch is only evaluated when `dynamic` is set.
template <typename T>
SampleShading<T> shade_sample(const Vec3<T>& x_world, const Vec3<T>& d, int frame, int num_frames, bool dynamic,
                              const SceneModels<T>& m) {
    ShadeInputs<T> in;
    in.x = x_world.transpose();
    in.dir = d.transpose();
    in.frame = {frame};
    in.num_frames = num_frames;
    in.dynamic = dynamic;
    ShadeTape<T> tape;
    const ShadeOutputs<T> o = tape.forward(m, in);
    SampleShading<T> s;
    s.sigma_s = o.sigma_s(0);
    s.sigma_d = o.sigma_d(0);
    s.c_s = o.color_s.row(0).transpose();
    s.c_d = o.color_d.row(0).transpose();
    s.rho = o.rho(0);
    s.v_f = o.flow_f.row(0).transpose();
    s.v_b = o.flow_b.row(0).transpose();
    return s;
}

}  // namespace dynfield
