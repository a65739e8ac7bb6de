#pragma once

#include "dynfield/core/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace dynfield {

// ---------------------------------------------------------------------------
// PNG (8-bit gray or RGB) through libpng.

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void png_error_fn(png_structp png, png_const_charp msg) {
    auto* what = static_cast<std::string*>(png_get_error_ptr(png));
    if (what) *what = msg;
    png_longjmp(png, 1);
}

inline void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace detail

inline std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Writes a 1- or 3-channel image with values in [0, 1] as 8-bit PNG.
inline void write_png(const std::string& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw IoError(path + ": PNG needs 1 or 3 channels");
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open " + path + " for writing");
    std::string err;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn,
                                              detail::png_warning_fn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError(path + ": libpng initialization failed");
    }
    std::vector<std::uint8_t> row(std::size_t(img.width) * img.channels);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError(path + ": " + err);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 8, img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) row[std::size_t(x) * img.channels + c] = to_byte(img.at(x, y, c));
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

/// Reads an 8-bit PNG into [0, 1]; palette/16-bit/alpha inputs are normalized to gray or RGB.
inline Image read_png(const std::string& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path);
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8)) throw IoError(path + ": not a PNG file");
    std::string err;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn,
                                             detail::png_warning_fn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(path + ": libpng initialization failed");
    }
    Image img;
    std::vector<std::uint8_t> buf;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(path + ": " + err);
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_packing(png);
    const int ct = png_get_color_type(png, info);
    if (ct == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (ct == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int ch = png_get_channels(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    buf.resize(rowbytes * h);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = buf.data() + rowbytes * y;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    if (ch != 1 && ch != 3) throw IoError(path + ": unsupported channel count " + std::to_string(ch));
    img = Image(w, h, ch);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < ch; ++c) img.at(x, y, c) = rows[y][std::size_t(x) * ch + c] / 255.0;
    return img;
}

// ---------------------------------------------------------------------------
// PFM: "Pf" (1 channel) or "PF" (3 channels), little-endian (negative scale),
// rows stored bottom to top.

inline void write_pfm(const std::string& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw IoError(path + ": PFM needs 1 or 3 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << (img.channels == 3 ? "PF" : "Pf") << "\n" << img.width << " " << img.height << "\n-1.0\n";
    std::vector<float> row(std::size_t(img.width) * img.channels);
    for (int y = img.height - 1; y >= 0; --y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                row[std::size_t(x) * img.channels + c] = static_cast<float>(img.at(x, y, c));
        out.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size() * sizeof(float)));
    }
    if (!out) throw IoError("failed writing " + path);
}

inline Image read_pfm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string magic;
    int w = 0, h = 0;
    double scale = 0.0;
    if (!(in >> magic >> w >> h >> scale) || (magic != "Pf" && magic != "PF") || w < 1 || h < 1 || scale == 0.0)
        throw IoError(path + ": corrupted PFM header");
    in.get();  // single whitespace byte after the scale
    if (scale > 0.0) throw IoError(path + ": big-endian PFM is not supported");
    const int ch = magic == "PF" ? 3 : 1;
    Image img(w, h, ch);
    std::vector<float> row(std::size_t(w) * ch);
    for (int y = h - 1; y >= 0; --y) {
        in.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size() * sizeof(float)));
        if (!in) throw IoError(path + ": truncated PFM data");
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < ch; ++c) img.at(x, y, c) = row[std::size_t(x) * ch + c];
    }
    return img;
}

// ---------------------------------------------------------------------------
// Middlebury .flo: float tag 202021.25 ("PIEH"), int32 width, height, then
// row-major (u, v) float pairs.

inline constexpr float kFloTag = 202021.25f;

inline void write_flo(const std::string& path, const Image& flow) {
    if (flow.channels != 2) throw IoError(path + ": flow image needs 2 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    const float tag = kFloTag;
    const std::int32_t w = flow.width, h = flow.height;
    out.write(reinterpret_cast<const char*>(&tag), 4);
    out.write(reinterpret_cast<const char*>(&w), 4);
    out.write(reinterpret_cast<const char*>(&h), 4);
    std::vector<float> data(flow.data.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(flow.data[i]);
    out.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size() * sizeof(float)));
    if (!out) throw IoError("failed writing " + path);
}

inline Image read_flo(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    float tag = 0.0f;
    std::int32_t w = 0, h = 0;
    in.read(reinterpret_cast<char*>(&tag), 4);
    in.read(reinterpret_cast<char*>(&w), 4);
    in.read(reinterpret_cast<char*>(&h), 4);
    if (!in || tag != kFloTag) throw IoError(path + ": bad .flo tag");
    if (w < 1 || h < 1 || w > 1 << 15 || h > 1 << 15) throw IoError(path + ": bad .flo dimensions");
    Image flow(w, h, 2);
    std::vector<float> data(flow.data.size());
    in.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size() * sizeof(float)));
    if (!in) throw IoError(path + ": truncated .flo data");
    for (std::size_t i = 0; i < data.size(); ++i) flow.data[i] = data[i];
    return flow;
}

}  // namespace dynfield
