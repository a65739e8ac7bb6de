#pragma once

#include "dynfield/core/types.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <span>
#include <vector>

namespace dynfield {

struct HashGridConfig {
    int levels = 8;
    int log2_table_size = 14;
    int features = 2;
    int base_resolution = 16;
    double growth = 1.5;
};

// Spatial hash primes (per-axis multipliers, XOR-folded, masked to the table size).
inline constexpr std::uint32_t kHashPrimeX = 1u;
inline constexpr std::uint32_t kHashPrimeY = 2654435761u;
inline constexpr std::uint32_t kHashPrimeZ = 805459861u;

/// Multi-resolution hash encoding of points in the unit cube.
///
/// Level l has resolution floor(base * growth^l). Coarse levels whose vertex
/// lattice fits in the table are indexed densely; finer levels go through the
/// spatial hash. Each level contributes `features` trilinearly interpolated
/// values, concatenated level by level.
template <typename T>
class HashGrid {
  public:
    struct Cache {
        const HashGrid* owner = nullptr;
        MatX<T> x;
    };

    HashGrid() = default;

    explicit HashGrid(const HashGridConfig& cfg) : cfg_(cfg) {
        require(cfg.levels >= 1, "HashGrid: need at least one level");
        require(cfg.features >= 1, "HashGrid: need at least one feature");
        require(cfg.log2_table_size >= 1 && cfg.log2_table_size <= 24, "HashGrid: table size out of range");
        require(cfg.base_resolution >= 1 && cfg.growth > 1.0, "HashGrid: resolutions must strictly increase");
        table_size_ = std::size_t{1} << cfg.log2_table_size;
        for (int l = 0; l < cfg.levels; ++l) {
            const int res = static_cast<int>(std::floor(cfg.base_resolution * std::pow(cfg.growth, l)));
            require(res_.empty() || res > res_.back(), "HashGrid: resolutions must strictly increase");
            res_.push_back(res);
            const double verts = std::pow(res + 1.0, 3);
            dense_.push_back(verts <= static_cast<double>(table_size_));
        }
        params_.assign(static_cast<std::size_t>(cfg.levels) * table_size_ * cfg.features, T(0));
        grads_.assign(params_.size(), T(0));
    }

    const HashGridConfig& config() const { return cfg_; }
    int output_dim() const { return cfg_.levels * cfg_.features; }
    int resolution(int level) const { return res_[level]; }
    bool is_dense(int level) const { return dense_[level]; }
    std::size_t table_size() const { return table_size_; }

    std::span<T> params() { return params_; }
    std::span<const T> params() const { return params_; }
    std::span<T> grads() { return grads_; }
    std::span<const T> grads() const { return grads_; }
    void zero_grad() { std::fill(grads_.begin(), grads_.end(), T(0)); }

    template <typename Rng>
    void init_uniform(Rng& rng, double bound = 1e-4) {
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& p : params_) p = static_cast<T>(dist(rng));
    }

    /// Table slot of an integer lattice vertex at the given level.
    std::size_t slot(int level, int ix, int iy, int iz) const {
        if (dense_[level]) {
            const std::size_t n = static_cast<std::size_t>(res_[level]) + 1;
            return static_cast<std::size_t>(ix) + n * (static_cast<std::size_t>(iy) + n * static_cast<std::size_t>(iz));
        }
        const std::uint32_t h = (static_cast<std::uint32_t>(ix) * kHashPrimeX) ^
                                (static_cast<std::uint32_t>(iy) * kHashPrimeY) ^
                                (static_cast<std::uint32_t>(iz) * kHashPrimeZ);
        return static_cast<std::size_t>(h) & (table_size_ - 1);
    }

    /// Offset into params() of the feature vector stored at (level, slot).
    std::size_t entry_offset(int level, std::size_t slot_index) const {
        return (static_cast<std::size_t>(level) * table_size_ + slot_index) * cfg_.features;
    }

    MatX<T> encode(const MatX<T>& X, Cache* cache = nullptr) const {
        if (X.cols() != 3) throw ConfigError("HashGrid::encode: expected n x 3 input");
        for (Eigen::Index i = 0; i < X.size(); ++i) {
            const T v = X.data()[i];
            if (!(v >= T(0) && v <= T(1)))
                throw DomainError("HashGrid::encode: query outside the unit cube");
        }
        const int F = cfg_.features;
        MatX<T> out = MatX<T>::Zero(X.rows(), output_dim());
        for (Eigen::Index i = 0; i < X.rows(); ++i) {
            for (int l = 0; l < cfg_.levels; ++l) {
                Cell c = locate(l, X(i, 0), X(i, 1), X(i, 2));
                for (int corner = 0; corner < 8; ++corner) {
                    const T w = corner_weight(c, corner);
                    const T* e = params_.data() + c.offset[corner];
                    for (int f = 0; f < F; ++f) out(i, l * F + f) += w * e[f];
                }
            }
        }
        if (cache) {
            cache->owner = this;
            cache->x = X;
        }
        return out;
    }

    VecX<T> encode(const Vec3<T>& x) const {
        MatX<T> X = x.transpose();
        return encode(X).row(0).transpose();
    }

    /// Scatters dfeat into the table gradients; optionally returns d(loss)/d(x).
    void backward(const Cache& cache, const MatX<T>& dfeat, MatX<T>* dX = nullptr) {
        if (cache.owner != this) throw UsageError("HashGrid::backward: cache from a different grid");
        if (dfeat.rows() != cache.x.rows() || dfeat.cols() != output_dim())
            throw UsageError("HashGrid::backward: gradient shape does not match cache");
        const int F = cfg_.features;
        if (dX) dX->setZero(cache.x.rows(), 3);
        for (Eigen::Index i = 0; i < cache.x.rows(); ++i) {
            for (int l = 0; l < cfg_.levels; ++l) {
                const T* g = dfeat.data() + i * dfeat.cols() + l * F;
                bool any = false;
                for (int f = 0; f < F; ++f) any |= g[f] != T(0);
                if (!any) continue;
                Cell c = locate(l, cache.x(i, 0), cache.x(i, 1), cache.x(i, 2));
                T dfrac[3] = {T(0), T(0), T(0)};
                for (int corner = 0; corner < 8; ++corner) {
                    const T w = corner_weight(c, corner);
                    T* ge = grads_.data() + c.offset[corner];
                    for (int f = 0; f < F; ++f) ge[f] += w * g[f];
                    if (dX) {
                        const T* e = params_.data() + c.offset[corner];
                        T dot = T(0);
                        for (int f = 0; f < F; ++f) dot += e[f] * g[f];
                        for (int k = 0; k < 3; ++k) dfrac[k] += dot * corner_weight_dfrac(c, corner, k);
                    }
                }
                if (dX)
                    for (int k = 0; k < 3; ++k) (*dX)(i, k) += dfrac[k] * static_cast<T>(res_[l]);
            }
        }
    }

  private:
    struct Cell {
        std::array<std::size_t, 8> offset;
        T frac[3];
    };

    Cell locate(int l, T x, T y, T z) const {
        const int res = res_[l];
        const T p[3] = {x * res, y * res, z * res};
        int base[3];
        Cell c{};
        for (int k = 0; k < 3; ++k) {
            int b = static_cast<int>(std::floor(p[k]));
            b = std::clamp(b, 0, res - 1);
            base[k] = b;
            c.frac[k] = p[k] - static_cast<T>(b);
        }
        for (int corner = 0; corner < 8; ++corner) {
            const int ix = base[0] + (corner & 1);
            const int iy = base[1] + ((corner >> 1) & 1);
            const int iz = base[2] + ((corner >> 2) & 1);
            c.offset[corner] = entry_offset(l, slot(l, ix, iy, iz));
        }
        return c;
    }

    static T corner_weight(const Cell& c, int corner) {
        T w = T(1);
        for (int k = 0; k < 3; ++k) w *= ((corner >> k) & 1) ? c.frac[k] : T(1) - c.frac[k];
        return w;
    }

    static T corner_weight_dfrac(const Cell& c, int corner, int axis) {
        T w = ((corner >> axis) & 1) ? T(1) : T(-1);
        for (int k = 0; k < 3; ++k)
            if (k != axis) w *= ((corner >> k) & 1) ? c.frac[k] : T(1) - c.frac[k];
        return w;
    }

    HashGridConfig cfg_;
    std::size_t table_size_ = 0;
    std::vector<int> res_;
    std::vector<bool> dense_;
    std::vector<T> params_;
    std::vector<T> grads_;
};

}  // namespace dynfield
