#pragma once

#include "dynfield/core/types.hpp"

#include <cmath>
#include <random>
#include <span>
#include <vector>

namespace dynfield {

enum class Activation { Linear, ReLU, Sigmoid };

/// Dense multilayer perceptron with hand-derived reverse mode.
///
/// Inputs are row batches (one sample per row). Parameters live in one flat
/// buffer laid out layer by layer as W (out x in, row-major) followed by b.
/// Hidden layers use ReLU; the output layer uses the activation given at
/// construction.
template <typename T>
class Mlp {
  public:
    struct Cache {
        const Mlp* owner = nullptr;
        // acts[0] is the input batch, acts[l + 1] the post-activation output of layer l.
        std::vector<MatX<T>> acts;
    };

    Mlp() = default;

    Mlp(int input_dim, const std::vector<int>& hidden, int output_dim,
        Activation output_act = Activation::Linear)
        : output_act_(output_act) {
        require(input_dim > 0 && output_dim > 0, "Mlp: dimensions must be positive");
        dims_.push_back(input_dim);
        for (int h : hidden) {
            require(h > 0, "Mlp: hidden width must be positive");
            dims_.push_back(h);
        }
        dims_.push_back(output_dim);
        std::size_t total = 0;
        for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
            offsets_.push_back(total);
            total += static_cast<std::size_t>(dims_[l + 1]) * (dims_[l] + 1);
        }
        params_.assign(total, T(0));
        grads_.assign(total, T(0));
    }

    int input_dim() const { return dims_.front(); }
    int output_dim() const { return dims_.back(); }
    int num_layers() const { return static_cast<int>(dims_.size()) - 1; }
    int layer_in(int l) const { return dims_[l]; }
    int layer_out(int l) const { return dims_[l + 1]; }
    Activation output_activation() const { return output_act_; }

    std::span<T> params() { return params_; }
    std::span<const T> params() const { return params_; }
    std::span<T> grads() { return grads_; }
    std::span<const T> grads() const { return grads_; }

    Eigen::Map<MatX<T>> weight(int l) {
        return {params_.data() + offsets_[l], dims_[l + 1], dims_[l]};
    }
    Eigen::Map<const MatX<T>> weight(int l) const {
        return {params_.data() + offsets_[l], dims_[l + 1], dims_[l]};
    }
    Eigen::Map<VecX<T>> bias(int l) {
        return {params_.data() + offsets_[l] + static_cast<std::size_t>(dims_[l + 1]) * dims_[l],
                dims_[l + 1]};
    }
    Eigen::Map<const VecX<T>> bias(int l) const {
        return {params_.data() + offsets_[l] + static_cast<std::size_t>(dims_[l + 1]) * dims_[l],
                dims_[l + 1]};
    }

    void zero_grad() { std::fill(grads_.begin(), grads_.end(), T(0)); }

    // He-uniform hidden layers; the output layer is additionally scaled by out_scale.
    template <typename Rng>
    void init_uniform(Rng& rng, double out_scale = 1.0) {
        for (int l = 0; l < num_layers(); ++l) {
            const double bound = std::sqrt(6.0 / dims_[l]) * (l + 1 == num_layers() ? out_scale : 1.0);
            std::uniform_real_distribution<double> dist(-bound, bound);
            auto W = weight(l);
            for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = static_cast<T>(dist(rng));
            bias(l).setZero();
        }
    }

    MatX<T> forward(const MatX<T>& X, Cache* cache = nullptr) const {
        if (X.cols() != input_dim())
            throw ConfigError("Mlp::forward: input has " + std::to_string(X.cols()) +
                              " columns, expected " + std::to_string(input_dim()));
        if (cache) {
            cache->owner = this;
            cache->acts.resize(num_layers() + 1);
            cache->acts[0] = X;
        }
        MatX<T> h = X;
        for (int l = 0; l < num_layers(); ++l) {
            MatX<T> z = h * weight(l).transpose();
            z.rowwise() += bias(l).transpose();
            apply_activation(z, l + 1 == num_layers() ? output_act_ : Activation::ReLU);
            if (cache) cache->acts[l + 1] = z;
            h = std::move(z);
        }
        return h;
    }

    VecX<T> forward(const VecX<T>& x) const {
        MatX<T> X = x.transpose();
        return forward(X).row(0).transpose();
    }

    /// Accumulates parameter gradients into grads() and returns d(loss)/d(input).
    MatX<T> backward(const Cache& cache, const MatX<T>& dY) {
        if (cache.owner != this || static_cast<int>(cache.acts.size()) != num_layers() + 1)
            throw UsageError("Mlp::backward: cache was produced by a different network");
        if (dY.rows() != cache.acts[0].rows() || dY.cols() != output_dim())
            throw UsageError("Mlp::backward: upstream gradient shape does not match cache");
        MatX<T> g = dY;
        for (int l = num_layers() - 1; l >= 0; --l) {
            activation_backward(g, cache.acts[l + 1], l + 1 == num_layers() ? output_act_ : Activation::ReLU);
            Eigen::Map<MatX<T>> dW(grads_.data() + offsets_[l], dims_[l + 1], dims_[l]);
            Eigen::Map<VecX<T>> db(grads_.data() + offsets_[l] + static_cast<std::size_t>(dims_[l + 1]) * dims_[l],
                                   dims_[l + 1]);
            dW.noalias() += g.transpose() * cache.acts[l];
            db += g.colwise().sum().transpose();
            g = g * weight(l);
        }
        return g;
    }

  private:
    static void apply_activation(MatX<T>& z, Activation act) {
        switch (act) {
            case Activation::Linear: break;
            case Activation::ReLU: z = z.cwiseMax(T(0)); break;
            case Activation::Sigmoid:
                z = z.unaryExpr([](T v) { return T(1) / (T(1) + std::exp(-v)); });
                break;
        }
    }

    static void activation_backward(MatX<T>& g, const MatX<T>& y, Activation act) {
        switch (act) {
            case Activation::Linear: break;
            case Activation::ReLU: g = (y.array() > T(0)).select(g, T(0)); break;
            case Activation::Sigmoid: g = (g.array() * y.array() * (T(1) - y.array())).matrix(); break;
        }
    }

    std::vector<int> dims_;
    std::vector<std::size_t> offsets_;
    AlignedVector<T> params_;
    AlignedVector<T> grads_;
    Activation output_act_ = Activation::Linear;
};

}  // namespace dynfield
