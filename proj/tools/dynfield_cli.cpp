#include "dynfield/evalkit/metrics.hpp"
#include "dynfield/synth/synth.hpp"
#include "dynfield/train/trainer.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <regex>

using namespace dynfield;
namespace fs = std::filesystem;

namespace {

std::string manifest_path(const std::string& data) {
    return fs::is_directory(data) ? (fs::path(data) / "manifest.json").string() : data;
}

nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

std::vector<int> parse_frames(const std::string& spec, int num_frames) {
    std::vector<int> out;
    if (spec == "all") {
        for (int i = 0; i < num_frames; ++i) out.push_back(i);
        return out;
    }
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        const auto dash = tok.find('-');
        try {
            if (dash == std::string::npos) {
                out.push_back(std::stoi(tok));
            } else {
                const int a = std::stoi(tok.substr(0, dash)), b = std::stoi(tok.substr(dash + 1));
                for (int i = a; i <= b; ++i) out.push_back(i);
            }
        } catch (const std::logic_error&) {
            throw UsageError("bad frame list '" + spec + "'");
        }
    }
    return out;
}

struct TrainSummary {
    PoseMetrics metrics;
    bool has_gt = false;
    double span = 0.0;
};

TrainSummary run_training(const RunConfig& cfg, const SceneDataset& ds, const std::string& out,
                          const std::string& resume) {
    Trainer t(cfg, ds, out);
    if (!resume.empty()) t.load_checkpoint(resume);
    const auto t0 = std::chrono::steady_clock::now();
    std::int64_t last_print = -1;
    try {
        while (t.step()) {
            const std::int64_t it = t.iteration();
            if (it / 500 != last_print) {
                last_print = it / 500;
                const auto& r = t.last_report();
                std::cout << "iter " << it << " stage " << to_string(t.scheduler().state().stage) << " images "
                          << t.scheduler().state().admitted() << " loss " << r.total << "\n";
            }
        }
    } catch (const NumericError& e) {
        std::cerr << "training aborted: " << e.what() << "; last periodic checkpoint kept in " << out << "\n";
        throw;
    }
    if (!t.holdout().empty()) t.register_holdout();
    t.write_outputs();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "finished " << t.iteration() << " iterations in " << secs << " s\n";
    TrainSummary s;
    if (ds.gt_trajectory) {
        const Trajectory est = t.trajectory();
        Trajectory gt;
        for (const auto& e : *ds.gt_trajectory)
            for (const auto& f : est)
                if (f.frame == e.frame) gt.push_back(e.frame, e.pose);
        s.metrics = evaluate_trajectory(est, gt);
        s.span = trajectory_span(gt);
        s.has_gt = true;
        std::cout << "ATE " << s.metrics.ate << " RPE_t " << s.metrics.rpe_t << " RPE_r " << s.metrics.rpe_r
                  << " (span " << s.span << ")\n";
    }
    return s;
}

int cmd_synth(const std::string& spec_path, const std::string& out) {
    const nlohmann::json j = spec_path.empty() ? nlohmann::json::object() : read_json(spec_path);
    const SynthSpec spec = SynthSpec::from_json(j);
    export_dataset(make_scene(spec), out, spec.to_json());
    std::cout << "wrote " << spec.frames << " frames to " << out << "\n";
    return 0;
}

int cmd_render(const std::string& ckpt, const std::string& frames_spec, const std::string& out,
               const std::string& poses_csv) {
    const LoadedScene sc = load_scene_checkpoint(ckpt);
    std::optional<Trajectory> override_poses;
    if (!poses_csv.empty()) override_poses = read_trajectory_csv(poses_csv);
    fs::create_directories(out);
    char name[64];
    for (int f : parse_frames(frames_spec, sc.num_frames)) {
        if (f < 0 || f >= sc.num_frames)
            throw DomainError("frame " + std::to_string(f) + " is outside the trained range [0, " +
                              std::to_string(sc.num_frames - 1) + "]");
        SceneView v = sc.view_for(f);
        if (override_poses) {
            bool found = false;
            for (const auto& e : *override_poses)
                if (e.frame == f) {
                    v.pose = e.pose;
                    found = true;
                }
            if (!found) throw UsageError("pose file has no entry for frame " + std::to_string(f));
        }
        const auto img = render_image<TrainScalar>(*v.models, v.pose.cast<TrainScalar>(), sc.K, f, sc.num_frames,
                                                   v.stage, sc.cfg.render);
        auto path = [&](const char* what, const char* ext) {
            std::snprintf(name, sizeof(name), "%s_%04d.%s", what, f, ext);
            return (fs::path(out) / name).string();
        };
        write_png(path("color", "png"), img.color);
        write_png(path("static", "png"), img.color_s);
        write_png(path("dynamic", "png"), img.color_d);
        write_png(path("dynamic_opacity", "png"), img.opacity_d);
        write_pfm(path("depth", "pfm"), img.depth);
        write_pfm(path("depth_static", "pfm"), img.depth_s);
        write_pfm(path("shadow", "pfm"), img.shadow);
        const Histogram h = shadow_histogram(img.shadow, 10);
        write_histogram_csv(h, path("shadow_hist", "csv"));
        write_png(path("shadow_hist", "png"), histogram_plot(h));
    }
    std::cout << "rendered to " << out << "\n";
    return 0;
}

int cmd_eval_poses(const std::string& est_csv, const std::string& gt_csv, const std::string& out) {
    const PoseMetrics m = evaluate_trajectory(read_trajectory_csv(est_csv), read_trajectory_csv(gt_csv));
    std::cout << std::setprecision(10) << "ATE " << m.ate << "\nRPE_t " << m.rpe_t << "\nRPE_r " << m.rpe_r << "\n";
    if (!out.empty()) {
        std::ofstream f(out);
        f << std::setprecision(12) << "ate,rpe_t,rpe_r\n" << m.ate << "," << m.rpe_t << "," << m.rpe_r << "\n";
    }
    return 0;
}

// Frame-indexed color images in a directory: NNNN.png or color_NNNN.png.
std::map<int, std::string> index_images(const std::string& dir) {
    std::map<int, std::string> out;
    const fs::path manifest = fs::path(dir) / "manifest.json";
    if (fs::exists(manifest)) {
        const auto j = read_json(manifest.string());
        for (const auto& f : j.at("frames")) out[f.at("index")] = (fs::path(dir) / f.at("color").get<std::string>()).string();
        return out;
    }
    const std::regex re(R"((?:color_)?(\d+)\.png)");
    for (const auto& e : fs::directory_iterator(dir)) {
        std::smatch m;
        const std::string n = e.path().filename().string();
        if (std::regex_match(n, m, re)) out[std::stoi(m[1])] = e.path().string();
    }
    return out;
}

int cmd_eval_images(const std::string& rendered, const std::string& gt, bool holdout, const std::string& out) {
    const auto r = index_images(rendered), g = index_images(gt);
    std::vector<int> frames;
    if (holdout) {
        const int n = g.empty() ? 0 : g.rbegin()->first + 1;
        frames = holdout_frames(n);
    } else {
        for (const auto& [f, p] : r) frames.push_back(f);
    }
    std::vector<ImageMetrics> rows;
    for (int f : frames) {
        if (!r.count(f)) throw IoError("rendered frame " + std::to_string(f) + " is missing in " + rendered);
        if (!g.count(f)) throw IoError("ground-truth frame " + std::to_string(f) + " is missing in " + gt);
        const Image a = read_png(r.at(f)), b = read_png(g.at(f));
        rows.push_back({f, psnr(a, b), ssim(a, b)});
        std::cout << "frame " << f << " PSNR " << rows.back().psnr << " SSIM " << rows.back().ssim << "\n";
    }
    if (!out.empty()) write_metrics_csv(rows, out);
    double p = 0, s = 0;
    for (const auto& row : rows) {
        p += row.psnr;
        s += row.ssim;
    }
    if (!rows.empty()) std::cout << "mean PSNR " << p / rows.size() << " SSIM " << s / rows.size() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dynamic radiance fields with progressive pose estimation"};
    app.require_subcommand(1);

    std::string spec_path, out, config_path, data, resume, ckpt, frames = "all", poses, est, gt, flag, csv;
    bool holdout = false;

    auto* synth = app.add_subcommand("synth", "Export an analytic synthetic dataset");
    synth->add_option("--spec", spec_path, "Scene spec JSON (defaults when omitted)");
    synth->add_option("--out", out, "Output directory")->required();

    auto* train = app.add_subcommand("train", "Train on a dataset");
    train->add_option("--config", config_path, "Run configuration JSON");
    train->add_option("--data", data, "Dataset directory or manifest")->required();
    train->add_option("--out", out, "Output directory")->required();
    train->add_option("--resume", resume, "Checkpoint to resume from");

    auto* render = app.add_subcommand("render", "Render views from a checkpoint");
    render->add_option("--ckpt", ckpt, "Checkpoint")->required();
    render->add_option("--frames", frames, "Frames: all, or a list such as 0,4,10-12");
    render->add_option("--poses", poses, "Trajectory CSV overriding the checkpoint poses");
    render->add_option("--out", out, "Output directory")->required();

    auto* evp = app.add_subcommand("eval-poses", "Aligned ATE / RPE between trajectories");
    evp->add_option("--est", est, "Estimated trajectory CSV")->required();
    evp->add_option("--gt", gt, "Ground-truth trajectory CSV")->required();
    evp->add_option("--out", csv, "Report CSV");

    auto* evi = app.add_subcommand("eval-images", "PSNR / SSIM of rendered frames");
    evi->add_option("--rendered", out, "Directory of rendered frames")->required();
    evi->add_option("--gt", gt, "Dataset directory or directory of frames")->required();
    evi->add_flag("--holdout", holdout, "Evaluate only the held-out frames (every tenth after the first)");
    evi->add_option("--csv", csv, "Report CSV");

    auto* ablate = app.add_subcommand("ablate", "Train with and without one method component");
    ablate->add_option("--config", config_path, "Run configuration JSON");
    ablate->add_option("--flag", flag, "use_motion_masks | fix_poses_in_B | freeze_dynamic_in_A")->required();
    ablate->add_option("--data", data, "Dataset directory or manifest")->required();
    ablate->add_option("--out", out, "Output directory")->required();

    CLI11_PARSE(app, argc, argv);
    try {
        if (*synth) return cmd_synth(spec_path, out);
        if (*train) {
            const RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
            const SceneDataset ds = load_dataset(manifest_path(data));
            for (const auto& w : ds.warnings) std::cerr << "warning: " << w << "\n";
            run_training(cfg, ds, out, resume);
            return 0;
        }
        if (*render) return cmd_render(ckpt, frames, out, poses);
        if (*evp) return cmd_eval_poses(est, gt, csv);
        if (*evi) return cmd_eval_images(out, gt, holdout, csv);
        if (*ablate) {
            RunConfig full = config_path.empty() ? RunConfig{} : load_config(config_path);
            RunConfig off = full;
            set_flag(off, flag, false);
            const SceneDataset ds = load_dataset(manifest_path(data));
            for (const auto& w : ds.warnings) std::cerr << "warning: " << w << "\n";
            const auto a = run_training(full, ds, (fs::path(out) / "full").string(), "");
            const auto b = run_training(off, ds, (fs::path(out) / ("without_" + flag)).string(), "");
            if (a.has_gt) {
                std::ofstream f(fs::path(out) / "ablation.csv");
                f << std::setprecision(10) << "run,ate,rpe_t,rpe_r\n"
                  << "full," << a.metrics.ate << "," << a.metrics.rpe_t << "," << a.metrics.rpe_r << "\n"
                  << "without_" << flag << "," << b.metrics.ate << "," << b.metrics.rpe_t << "," << b.metrics.rpe_r
                  << "\n";
                std::cout << "ATE full " << a.metrics.ate << " vs without " << flag << " " << b.metrics.ate << "\n";
            }
            return 0;
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
