#pragma once

#include "dynfield/core/types.hpp"

#include <vector>

namespace dynfield {

/// Row-major interleaved image of doubles (row y, column x, channel c).
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, int c, double fill = 0.0) : width(w), height(h), channels(c), data(std::size_t(w) * h * c, fill) {
        if (w < 1 || h < 1 || c < 1) throw ConfigError("Image: dimensions must be >= 1");
    }

    double& at(int x, int y, int c = 0) { return data[(std::size_t(y) * width + x) * channels + c]; }
    double at(int x, int y, int c = 0) const { return data[(std::size_t(y) * width + x) * channels + c]; }
    std::size_t pixels() const { return std::size_t(width) * height; }
    bool same_shape(const Image& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }
};

}  // namespace dynfield
