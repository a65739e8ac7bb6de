#pragma once

#include "dynfield/core/types.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace dynfield {

// Layout: "DYNFCKPT", u64 LE header length, JSON header, then float32 LE
// buffers back to back in header["buffers"] order.
inline constexpr char kCheckpointMagic[8] = {'D', 'Y', 'N', 'F', 'C', 'K', 'P', 'T'};

struct CheckpointBuffer {
    std::string name;
    std::vector<float> data;
};

struct Checkpoint {
    nlohmann::json header;
    std::vector<CheckpointBuffer> buffers;

    const std::vector<float>& buffer(const std::string& name) const {
        for (const auto& b : buffers)
            if (b.name == name) return b.data;
        throw IoError("checkpoint has no buffer '" + name + "'");
    }
};

namespace detail {

inline void write_u64_le(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64_le(std::istream& in) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) throw IoError("checkpoint: truncated header length");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

inline void write_f32_le(std::ostream& out, std::span<const float> data) {
    static_assert(sizeof(float) == 4);
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size() * 4));
    } else {
        for (float f : data) {
            std::uint32_t u;
            std::memcpy(&u, &f, 4);
            unsigned char b[4] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8),
                                  static_cast<unsigned char>(u >> 16), static_cast<unsigned char>(u >> 24)};
            out.write(reinterpret_cast<const char*>(b), 4);
        }
    }
}

inline void read_f32_le(std::istream& in, std::vector<float>& out) {
    std::vector<unsigned char> raw(out.size() * 4);
    if (!in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size())))
        throw IoError("checkpoint: truncated parameter data");
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::uint32_t u = std::uint32_t(raw[4 * i]) | std::uint32_t(raw[4 * i + 1]) << 8 |
                                std::uint32_t(raw[4 * i + 2]) << 16 | std::uint32_t(raw[4 * i + 3]) << 24;
        std::memcpy(&out[i], &u, 4);
    }
}

}  // namespace detail

/// Writes through a temporary file that is renamed into place.
inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
    nlohmann::json header = ck.header;
    header["buffers"] = nlohmann::json::array();
    for (const auto& b : ck.buffers) header["buffers"].push_back({{"name", b.name}, {"size", b.data.size()}});
    const std::string text = header.dump();
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot write checkpoint " + tmp);
        out.write(kCheckpointMagic, 8);
        detail::write_u64_le(out, text.size());
        out.write(text.data(), std::streamsize(text.size()));
        for (const auto& b : ck.buffers) detail::write_f32_le(out, b.data);
        if (!out) throw IoError("failed writing checkpoint " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw IoError(path + ": not a checkpoint file");
    const std::uint64_t len = detail::read_u64_le(in);
    if (len > (std::uint64_t(1) << 32)) throw IoError(path + ": implausible header length");
    std::string text(len, '\0');
    if (!in.read(text.data(), std::streamsize(len))) throw IoError(path + ": truncated header");
    Checkpoint ck;
    try {
        ck.header = nlohmann::json::parse(text);
        for (const auto& b : ck.header.at("buffers")) {
            CheckpointBuffer buf;
            buf.name = b.at("name");
            buf.data.resize(b.at("size").get<std::size_t>());
            detail::read_f32_le(in, buf.data);
            ck.buffers.push_back(std::move(buf));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": " + e.what());
    }
    return ck;
}

}  // namespace dynfield
