#pragma once

#include "dynfield/io/formats.hpp"
#include "dynfield/pose/trajectory.hpp"
#include "dynfield/render/camera.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace dynfield {

struct FrameData {
    int index = 0;
    Image color;
    std::optional<Image> depth;
    std::optional<Image> flow_fwd;  // toward index + 1
    std::optional<Image> flow_bwd;  // toward index - 1
    std::optional<Image> mask;      // 1 where the pixel is flagged dynamic
};

struct SceneDataset {
    std::string root;
    Intrinsics K;
    std::vector<FrameData> frames;
    std::optional<Trajectory> gt_trajectory;
    std::vector<std::string> warnings;
    nlohmann::json manifest;

    int num_frames() const { return static_cast<int>(frames.size()); }
    int width() const { return K.width; }
    int height() const { return K.height; }
};

/// Reads a manifest.json dataset. Missing color images and size mismatches
/// are fatal; missing depth, flow or mask files only disable the matching
/// supervision (recorded in warnings).
inline SceneDataset load_dataset(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open manifest " + manifest_path);
    SceneDataset ds;
    try {
        in >> ds.manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(manifest_path + ": " + e.what());
    }
    const fs::path root = fs::path(manifest_path).parent_path();
    ds.root = root.string();
    const auto& m = ds.manifest;
    try {
        ds.K.width = m.at("width");
        ds.K.height = m.at("height");
        ds.K.f = m.at("intrinsics").at("f");
        ds.K.cx = m.at("intrinsics").value("cx", ds.K.width / 2.0);
        ds.K.cy = m.at("intrinsics").value("cy", ds.K.height / 2.0);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(manifest_path + ": " + e.what());
    }
    ds.K.validate();

    auto check_size = [&](const Image& img, const std::string& path) {
        if (img.width != ds.K.width || img.height != ds.K.height)
            throw IoError(path + ": resolution " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                          " does not match the manifest");
    };
    auto optional_file = [&](const nlohmann::json& f, const char* key, int index) -> std::optional<std::string> {
        if (!f.contains(key)) return std::nullopt;
        const std::string p = (root / f.at(key).get<std::string>()).string();
        if (!fs::exists(p)) {
            ds.warnings.push_back("frame " + std::to_string(index) + ": missing " + key + " file " + p);
            return std::nullopt;
        }
        return p;
    };

    const auto& frames = m.at("frames");
    for (std::size_t i = 0; i < frames.size(); ++i) {
        const auto& f = frames[i];
        FrameData fd;
        fd.index = f.at("index");
        if (fd.index != static_cast<int>(i))
            throw ConfigError(manifest_path + ": frames must be listed in order with indices 0..n-1");
        const std::string cpath = (root / f.at("color").get<std::string>()).string();
        if (!fs::exists(cpath)) throw IoError("frame " + std::to_string(fd.index) + ": missing color image " + cpath);
        fd.color = read_png(cpath);
        if (fd.color.channels != 3) throw IoError(cpath + ": color image must be RGB");
        check_size(fd.color, cpath);
        if (auto p = optional_file(f, "depth", fd.index)) {
            fd.depth = read_pfm(*p);
            check_size(*fd.depth, *p);
        }
        if (auto p = optional_file(f, "mask", fd.index)) {
            Image raw = read_png(*p);
            check_size(raw, *p);
            Image mk(raw.width, raw.height, 1);
            for (int y = 0; y < raw.height; ++y)
                for (int x = 0; x < raw.width; ++x) mk.at(x, y) = raw.at(x, y, 0) > 0.0 ? 1.0 : 0.0;
            fd.mask = std::move(mk);
        }
        if (auto p = optional_file(f, "flow_fwd", fd.index)) {
            fd.flow_fwd = read_flo(*p);
            check_size(*fd.flow_fwd, *p);
        }
        if (auto p = optional_file(f, "flow_bwd", fd.index)) {
            fd.flow_bwd = read_flo(*p);
            check_size(*fd.flow_bwd, *p);
        }
        ds.frames.push_back(std::move(fd));
    }
    if (ds.frames.empty()) throw ConfigError(manifest_path + ": no frames");
    if (m.contains("trajectory")) {
        const std::string tp = (root / m.at("trajectory").get<std::string>()).string();
        if (fs::exists(tp))
            ds.gt_trajectory = read_trajectory_csv(tp);
        else
            ds.warnings.push_back("missing trajectory file " + tp);
    }
    return ds;
}

}  // namespace dynfield
