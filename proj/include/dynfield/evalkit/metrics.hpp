#pragma once

#include "dynfield/core/image.hpp"
#include "dynfield/io/formats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <string>
#include <vector>

namespace dynfield {

inline constexpr double kPsnrCap = 99.0;

inline double mse(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw UsageError("mse: image dimensions differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = std::clamp(a.data[i], 0.0, 1.0) - std::clamp(b.data[i], 0.0, 1.0);
        s += d * d;
    }
    return s / static_cast<double>(a.data.size());
}

/// Peak-1 PSNR; identical images report kPsnrCap.
inline double psnr(const Image& a, const Image& b) {
    const double m = mse(a, b);
    if (m <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, -10.0 * std::log10(m));
}

struct SsimOptions {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
};

namespace detail {

inline std::vector<double> gaussian_kernel(int size, double sigma) {
    std::vector<double> k(size);
    const double c = (size - 1) / 2.0;
    double s = 0.0;
    for (int i = 0; i < size; ++i) {
        k[i] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
        s += k[i];
    }
    for (double& v : k) v /= s;
    return k;
}

// Separable "valid" filtering of one channel.
inline std::vector<double> filter_valid(const std::vector<double>& img, int w, int h, const std::vector<double>& k) {
    const int n = static_cast<int>(k.size());
    const int ow = w - n + 1, oh = h - n + 1;
    std::vector<double> tmp(std::size_t(ow) * h), out(std::size_t(ow) * oh);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int i = 0; i < n; ++i) s += k[i] * img[std::size_t(y) * w + x + i];
            tmp[std::size_t(y) * ow + x] = s;
        }
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int i = 0; i < n; ++i) s += k[i] * tmp[std::size_t(y + i) * ow + x];
            out[std::size_t(y) * ow + x] = s;
        }
    return out;
}

}  // namespace detail

/// Mean local SSIM over valid windows, computed per channel then averaged.
inline double ssim(const Image& a, const Image& b, const SsimOptions& o = {}) {
    if (!a.same_shape(b)) throw UsageError("ssim: image dimensions differ");
    if (a.width < o.window || a.height < o.window) throw UsageError("ssim: image smaller than the window");
    const auto k = detail::gaussian_kernel(o.window, o.sigma);
    const double c1 = o.k1 * o.k1, c2 = o.k2 * o.k2;
    const int w = a.width, h = a.height;
    double total = 0.0;
    for (int c = 0; c < a.channels; ++c) {
        std::vector<double> x(a.pixels()), y(a.pixels()), xx(a.pixels()), yy(a.pixels()), xy(a.pixels());
        for (int py = 0; py < h; ++py)
            for (int px = 0; px < w; ++px) {
                const std::size_t i = std::size_t(py) * w + px;
                x[i] = std::clamp(a.at(px, py, c), 0.0, 1.0);
                y[i] = std::clamp(b.at(px, py, c), 0.0, 1.0);
                xx[i] = x[i] * x[i];
                yy[i] = y[i] * y[i];
                xy[i] = x[i] * y[i];
            }
        const auto mx = detail::filter_valid(x, w, h, k), my = detail::filter_valid(y, w, h, k);
        const auto sxx = detail::filter_valid(xx, w, h, k), syy = detail::filter_valid(yy, w, h, k);
        const auto sxy = detail::filter_valid(xy, w, h, k);
        double s = 0.0;
        for (std::size_t i = 0; i < mx.size(); ++i) {
            const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
            s += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) /
                 ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += s / static_cast<double>(mx.size());
    }
    return total / a.channels;
}

struct Histogram {
    std::vector<double> edges;  // bins + 1 edges over [0, 1]
    std::vector<std::size_t> counts;
    std::vector<double> percent;
    std::size_t total = 0;
};

/// Left-closed bins over [0, 1]; the value 1 lands in the last bin.
inline Histogram shadow_histogram(const Image& map, int bins = 10) {
    if (bins < 1) throw ConfigError("shadow_histogram: need at least one bin");
    Histogram h;
    h.edges.resize(bins + 1);
    for (int i = 0; i <= bins; ++i) h.edges[i] = double(i) / bins;
    h.counts.assign(bins, 0);
    for (double v : map.data) {
        const double c = std::clamp(v, 0.0, 1.0);
        const int b = static_cast<int>(std::floor(c * bins));
        h.counts[std::clamp(b, 0, bins - 1)]++;
    }
    h.total = map.data.size();
    h.percent.resize(bins);
    for (int i = 0; i < bins; ++i) h.percent[i] = h.total ? 100.0 * h.counts[i] / h.total : 0.0;
    return h;
}

inline void write_histogram_csv(const Histogram& h, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << "bin_lo,bin_hi,count,percent\n" << std::setprecision(10);
    for (std::size_t i = 0; i < h.counts.size(); ++i)
        f << h.edges[i] << "," << h.edges[i + 1] << "," << h.counts[i] << "," << h.percent[i] << "\n";
}

/// Bar chart with a log10 count axis, white background, one dark bar per bin.
inline Image histogram_plot(const Histogram& h, int width = 320, int height = 200) {
    Image img(width, height, 3, 1.0);
    const int bins = static_cast<int>(h.counts.size());
    const int pad = 10;
    const double top = std::log10(std::max<double>(10.0, static_cast<double>(h.total) + 1.0));
    const int plot_w = width - 2 * pad, plot_h = height - 2 * pad;
    for (int x = pad; x < width - pad; ++x)
        for (int c = 0; c < 3; ++c) img.at(x, height - pad, c) = 0.0;
    for (int b = 0; b < bins; ++b) {
        const double v = h.counts[b] > 0 ? std::log10(static_cast<double>(h.counts[b]) + 1.0) / top : 0.0;
        const int bar = static_cast<int>(std::round(v * plot_h));
        const int x0 = pad + b * plot_w / bins + 1, x1 = pad + (b + 1) * plot_w / bins - 1;
        for (int x = x0; x < x1; ++x)
            for (int y = height - pad - bar; y < height - pad; ++y) {
                img.at(x, y, 0) = 0.2;
                img.at(x, y, 1) = 0.3;
                img.at(x, y, 2) = 0.6;
            }
    }
    return img;
}

/// Held-out frames: skipping the first, every tenth frame (10, 20, ...).
inline std::vector<int> holdout_frames(int num_frames, int every = 10) {
    std::vector<int> out;
    for (int i = every; i < num_frames; i += every) out.push_back(i);
    return out;
}

struct ImageMetrics {
    int frame = 0;
    double psnr = 0.0;
    double ssim = 0.0;
};

inline void write_metrics_csv(const std::vector<ImageMetrics>& rows, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << "frame,psnr,ssim\n" << std::setprecision(10);
    double p = 0, s = 0;
    for (const auto& r : rows) {
        f << r.frame << "," << r.psnr << "," << r.ssim << "\n";
        p += r.psnr;
        s += r.ssim;
    }
    if (!rows.empty()) f << "mean," << p / rows.size() << "," << s / rows.size() << "\n";
}

/// Intersection-over-union of two binary masks (value > 0.5 counts as set).
inline double mask_iou(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height) throw UsageError("mask_iou: size mismatch");
    std::size_t inter = 0, uni = 0;
    for (int y = 0; y < a.height; ++y)
        for (int x = 0; x < a.width; ++x) {
            const bool p = a.at(x, y) > 0.5, q = b.at(x, y) > 0.5;
            inter += p && q;
            uni += p || q;
        }
    return uni ? double(inter) / double(uni) : 1.0;
}

}  // namespace dynfield
