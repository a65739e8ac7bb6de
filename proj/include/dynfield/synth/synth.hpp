#pragma once

#include "dynfield/core/image.hpp"
#include "dynfield/io/dataset.hpp"
#include "dynfield/io/formats.hpp"
#include "dynfield/pose/trajectory.hpp"
#include "dynfield/render/camera.hpp"
#include "dynfield/render/composite.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace dynfield {

/// Smooth procedural albedo: per channel base + amp * (sin(k1 . x + p1) + sin(k2 . x + p2)) / 2.
struct Albedo {
    Vec3d base = Vec3d::Constant(0.5);
    Vec3d amp = Vec3d::Zero();
    std::array<Vec3d, 3> k1{}, k2{};
    Vec3d p1 = Vec3d::Zero(), p2 = Vec3d::Zero();

    Vec3d eval(const Vec3d& x) const {
        Vec3d c;
        for (int ch = 0; ch < 3; ++ch)
            c(ch) = base(ch) + amp(ch) * 0.5 * (std::sin(k1[ch].dot(x) + p1(ch)) + std::sin(k2[ch].dot(x) + p2(ch)));
        return c.cwiseMax(0.0).cwiseMin(1.0);
    }
};

struct Primitive {
    enum class Kind { Box, Sphere };
    Kind kind = Kind::Box;
    Vec3d lo = Vec3d::Zero(), hi = Vec3d::Zero();  // box extent
    Vec3d center = Vec3d::Zero();                   // sphere centre at frame 0
    double radius = 0.0;
    double density = 0.0;
    Albedo albedo;
    bool dynamic = false;
    Vec3d velocity = Vec3d::Zero();  // world units per frame
    bool receives_shadow = false;

    Vec3d center_at(int frame) const { return center + velocity * static_cast<double>(frame); }

    /// Entry/exit distances of the ray inside the primitive at a frame.
    std::optional<std::pair<double, double>> interval(const Vec3d& o, const Vec3d& d, int frame) const {
        if (kind == Kind::Box) {
            double t0 = -1e300, t1 = 1e300;
            const Vec3d shift = velocity * static_cast<double>(frame);
            for (int a = 0; a < 3; ++a) {
                const double lo_a = lo(a) + shift(a), hi_a = hi(a) + shift(a);
                if (std::abs(d(a)) < 1e-15) {
                    if (o(a) < lo_a || o(a) > hi_a) return std::nullopt;
                    continue;
                }
                double ta = (lo_a - o(a)) / d(a), tb = (hi_a - o(a)) / d(a);
                if (ta > tb) std::swap(ta, tb);
                t0 = std::max(t0, ta);
                t1 = std::min(t1, tb);
            }
            if (t1 <= t0) return std::nullopt;
            return std::make_pair(t0, t1);
        }
        const Vec3d oc = o - center_at(frame);
        const double b = oc.dot(d), c = oc.squaredNorm() - radius * radius;
        const double disc = b * b - c;
        if (disc <= 0.0) return std::nullopt;
        const double s = std::sqrt(disc);
        return std::make_pair(-b - s, -b + s);
    }
};

struct SynthSpec {
    std::uint64_t seed = 7;
    double difficulty = 1.0;
    int frames = 30;
    int width = 32;
    int height = 32;
    double focal = 32.0;
    std::string track = "forward_drive";
    bool parked = false;        // dynamic sphere with zero velocity
    bool shadow_patch = false;  // darkened ground patch that follows the dynamic sphere
    bool empty = false;         // no primitives at all
    int march_steps = 4096;

    static SynthSpec from_json(const nlohmann::json& j) {
        SynthSpec s;
        s.seed = j.value("seed", s.seed);
        s.difficulty = j.value("difficulty", s.difficulty);
        s.frames = j.value("frames", s.frames);
        s.width = j.value("width", s.width);
        s.height = j.value("height", s.height);
        s.focal = j.value("focal", s.focal);
        s.track = j.value("track", s.track);
        s.parked = j.value("parked", s.parked);
        s.shadow_patch = j.value("shadow_patch", s.shadow_patch);
        s.empty = j.value("empty", s.empty);
        s.march_steps = j.value("march_steps", s.march_steps);
        return s;
    }

    nlohmann::json to_json() const {
        return {{"seed", seed},         {"difficulty", difficulty},
                {"frames", frames},     {"width", width},
                {"height", height},     {"focal", focal},
                {"track", track},       {"parked", parked},
                {"shadow_patch", shadow_patch}, {"empty", empty},
                {"march_steps", march_steps}};
    }
};

struct AnalyticScene {
    std::vector<Primitive> primitives;
    Vec3d background = Vec3d::Zero();
    std::vector<Pose<double>> track;
    Intrinsics K;
    int march_steps = 4096;
    double near = 0.05;
    bool shadow_patch = false;

    int frames() const { return static_cast<int>(track.size()); }

    Trajectory trajectory() const {
        Trajectory t;
        for (int i = 0; i < frames(); ++i) t.push_back(i, track[i]);
        return t;
    }

    const Primitive* dynamic_object() const {
        for (const auto& p : primitives)
            if (p.dynamic) return &p;
        return nullptr;
    }
};

namespace detail {

inline Albedo random_albedo(std::mt19937_64& rng, const Vec3d& base, double amp, double freq) {
    std::normal_distribution<double> n;
    std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
    Albedo a;
    a.base = base;
    a.amp = Vec3d::Constant(amp);
    for (int ch = 0; ch < 3; ++ch) {
        a.k1[ch] = Vec3d(n(rng), n(rng), n(rng)).normalized() * freq;
        a.k2[ch] = Vec3d(n(rng), n(rng), n(rng)).normalized() * freq * 1.7;
        a.p1(ch) = u(rng);
        a.p2(ch) = u(rng);
    }
    return a;
}

inline Primitive box(const Vec3d& lo, const Vec3d& hi, double density, const Albedo& a) {
    Primitive p;
    p.kind = Primitive::Kind::Box;
    p.lo = lo;
    p.hi = hi;
    p.density = density;
    p.albedo = a;
    return p;
}

inline Primitive sphere(const Vec3d& c, double r, double density, const Albedo& a) {
    Primitive p;
    p.kind = Primitive::Kind::Sphere;
    p.center = c;
    p.radius = r;
    p.density = density;
    p.albedo = a;
    return p;
}

}  // namespace detail

/// Deterministic scene for a spec. World axes follow the camera convention
/// (x right, y down, z forward); the ground is below the cameras at y > 0.
inline AnalyticScene make_scene(const SynthSpec& spec) {
    if (spec.frames < 2) throw ConfigError("synth: need at least 2 frames");
    if (spec.width < 1 || spec.height < 1 || !(spec.focal > 0.0)) throw ConfigError("synth: bad image geometry");
    if (!(spec.difficulty > 0.0)) throw ConfigError("synth: difficulty must be positive");
    if (spec.march_steps < 16) throw ConfigError("synth: march_steps must be >= 16");
    if (spec.track != "forward_drive") throw ConfigError("synth: unknown camera track '" + spec.track + "'");
    std::mt19937_64 rng(spec.seed);
    AnalyticScene s;
    s.K = Intrinsics{spec.focal, spec.width / 2.0, spec.height / 2.0, spec.width, spec.height};
    s.march_steps = spec.march_steps;
    s.shadow_patch = spec.shadow_patch;
    s.background = Vec3d(0.1, 0.1, 0.1);
    const double freq = 2.5 * spec.difficulty;
    const double dense = 60.0;

    if (!spec.empty) {
        Primitive ground = detail::box({-3.0, 0.5, -1.0}, {3.0, 0.7, 6.0}, dense,
                                       detail::random_albedo(rng, {0.45, 0.42, 0.38}, 0.35, freq));
        ground.receives_shadow = true;
        s.primitives.push_back(ground);
        s.primitives.push_back(detail::box({-3.0, -3.0, 4.0}, {3.0, 0.7, 4.2}, dense,
                                           detail::random_albedo(rng, {0.35, 0.45, 0.6}, 0.35, freq)));
        s.primitives.push_back(detail::box({-1.9, -3.0, -1.0}, {-1.7, 0.7, 4.2}, dense,
                                           detail::random_albedo(rng, {0.6, 0.4, 0.35}, 0.3, freq)));
        s.primitives.push_back(detail::box({1.7, -3.0, -1.0}, {1.9, 0.7, 4.2}, dense,
                                           detail::random_albedo(rng, {0.4, 0.55, 0.35}, 0.3, freq)));
        s.primitives.push_back(detail::sphere({0.75, 0.15, 3.3}, 0.32, dense,
                                              detail::random_albedo(rng, {0.7, 0.65, 0.3}, 0.25, 2.0 * freq)));
        Primitive obj = detail::sphere({-0.35, 0.1, 2.9}, 0.3, dense,
                                       detail::random_albedo(rng, {0.85, 0.25, 0.2}, 0.12, freq));
        obj.dynamic = true;
        obj.velocity = spec.parked ? Vec3d(Vec3d::Zero()) : Vec3d(Vec3d(0.016, 0.0, 0.008) * spec.difficulty);
        s.primitives.push_back(obj);
    }

    // Forward drive: steady progress along z with lateral sway, bob and small yaw/pitch.
    std::uniform_real_distribution<double> ph(0.0, 2.0 * std::numbers::pi);
    const double p_sway = ph(rng), p_bob = ph(rng), p_yaw = ph(rng);
    const double dz = 0.035 * spec.difficulty;
    const double n = spec.frames - 1;
    for (int i = 0; i < spec.frames; ++i) {
        const double a = 2.0 * std::numbers::pi * i / std::max(n, 1.0);
        Pose<double> p;
        p.t = Vec3d(0.08 * std::sin(a + p_sway), 0.03 * std::sin(2.0 * a + p_bob), dz * i);
        const double yaw = 0.06 * std::sin(a + p_yaw), pitch = 0.02 * std::cos(a + p_bob);
        p.R = so3_exp<double>(Vec3d(0.0, yaw, 0.0)) * so3_exp<double>(Vec3d(pitch, 0.0, 0.0));
        s.track.push_back(p);
    }

    if (const Primitive* obj = s.dynamic_object()) {
        for (int i = 0; i < spec.frames; ++i) {
            const Pose<double>& p = s.track[i];
            const Vec3d xc = p.R.transpose() * (obj->center_at(i) - p.t);
            const double margin = obj->radius / std::max(xc.z(), 1e-9) * s.K.f;
            const Vec2<double> px = project<double>(s.K, xc);
            if (xc.z() <= obj->radius || px.x() - margin < 0 || px.x() + margin > s.K.width ||
                px.y() - margin < 0 || px.y() + margin > s.K.height)
                throw ConfigError("synth: dynamic object leaves the camera frustum at frame " + std::to_string(i));
        }
    }
    return s;
}

/// Result of marching one ray through the analytic scene.
struct MarchResult {
    Vec3d color = Vec3d::Zero();
    double depth = 0.0;
    double opacity = 0.0;
    double dynamic_share = 0.0;  // sum_i w_i sigma_dyn,i / sigma_i
};

/// Volume compositing of the analytic fields with exact per-step optical depth.
inline MarchResult march_ray(const AnalyticScene& s, const Vec3d& o, const Vec3d& d, int frame, int steps) {
    struct Hit {
        const Primitive* p;
        double t0, t1;
    };
    std::vector<Hit> hits;
    double far = s.near;
    for (const auto& p : s.primitives) {
        auto iv = p.interval(o, d, frame);
        if (!iv || iv->second <= s.near) continue;
        hits.push_back({&p, std::max(iv->first, s.near), iv->second});
        far = std::max(far, iv->second);
    }
    MarchResult r;
    if (hits.empty()) {
        r.color = s.background;
        return r;
    }
    const Primitive* obj = s.dynamic_object();
    const double dt = (far - s.near) / steps;
    VecX<double> sigma(steps), delta = VecX<double>::Constant(steps, dt);
    MatX<double> ch(steps, 5);
    for (int i = 0; i < steps; ++i) {
        const double a = s.near + i * dt, b = a + dt;
        double tau = 0.0, tau_dyn = 0.0;
        Vec3d c = Vec3d::Zero();
        for (const auto& h : hits) {
            const double lo = std::max(a, h.t0), hi = std::min(b, h.t1);
            if (hi <= lo) continue;
            const double part = h.p->density * (hi - lo);
            const Vec3d x = o + 0.5 * (lo + hi) * d;
            Vec3d alb = h.p->albedo.eval(h.p->dynamic ? Vec3d(x - h.p->velocity * frame) : x);
            if (s.shadow_patch && h.p->receives_shadow && obj) {
                const Vec3d oc = obj->center_at(frame);
                const double r2 = std::pow(x.x() - oc.x(), 2) + std::pow(x.z() - oc.z(), 2);
                alb *= 1.0 - 0.55 * std::exp(-r2 / (obj->radius * obj->radius * 1.5));
            }
            tau += part;
            c += part * alb;
            if (h.p->dynamic) tau_dyn += part;
        }
        sigma(i) = tau / dt;
        if (tau > 0.0) c /= tau;
        ch.row(i) << c.x(), c.y(), c.z(), 0.5 * (a + b), tau > 0.0 ? tau_dyn / tau : 0.0;
    }
    const auto comp = composite(sigma, delta, ch, steps);
    r.opacity = comp.opacity(0);
    r.color = comp.out.row(0).head<3>().transpose() + (1.0 - r.opacity) * s.background;
    r.depth = comp.out(0, 3);
    r.dynamic_share = comp.out(0, 4);
    return r;
}

struct GroundTruthFrame {
    int frame = 0;
    double time = 0.0;
    Pose<double> pose;
    Image color;
    Image depth;
    Image mask;
    std::optional<Image> flow_fwd;  // to frame + 1
    std::optional<Image> flow_bwd;  // to frame - 1
};

/// Pixel flow toward frame j of the point at depth along the pixel ray,
/// displaced by the composited rigid motion of the dynamic object.
inline Vec2<double> gt_flow(const AnalyticScene& s, int i, int j, double px, double py, const Vec3d& d, double depth,
                     double dyn_fraction) {
    Vec3d X = s.track[i].t + depth * d;
    if (const Primitive* obj = s.dynamic_object()) X += dyn_fraction * obj->velocity * static_cast<double>(j - i);
    const Vec3d xc = s.track[j].R.transpose() * (X - s.track[j].t);
    if (xc.z() <= 1e-9) return Vec2<double>::Zero();
    return project<double>(s.K, xc) - Vec2<double>(px, py);
}

inline GroundTruthFrame render_gt(const AnalyticScene& s, int frame, int steps = 0) {
    if (frame < 0 || frame >= s.frames()) throw ConfigError("render_gt: frame outside the track");
    if (steps <= 0) steps = s.march_steps;
    const int W = s.K.width, H = s.K.height;
    GroundTruthFrame g;
    g.frame = frame;
    g.time = s.frames() > 1 ? double(frame) / (s.frames() - 1) : 0.0;
    g.pose = s.track[frame];
    g.color = Image(W, H, 3);
    g.depth = Image(W, H, 1);
    g.mask = Image(W, H, 1);
    if (frame + 1 < s.frames()) g.flow_fwd = Image(W, H, 2);
    if (frame > 0) g.flow_bwd = Image(W, H, 2);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            const Vec3d d = (g.pose.R * camera_direction<double>(s.K, px, py)).normalized();
            const MarchResult m = march_ray(s, g.pose.t, d, frame, steps);
            for (int c = 0; c < 3; ++c) g.color.at(x, y, c) = m.color(c);
            g.depth.at(x, y) = m.depth;
            g.mask.at(x, y) = m.dynamic_share > 0.5 ? 1.0 : 0.0;
            const double frac = m.opacity > 0.0 ? std::clamp(m.dynamic_share / m.opacity, 0.0, 1.0) : 0.0;
            if (g.flow_fwd) {
                const Vec2<double> f = gt_flow(s, frame, frame + 1, px, py, d, m.depth, frac);
                g.flow_fwd->at(x, y, 0) = f.x();
                g.flow_fwd->at(x, y, 1) = f.y();
            }
            if (g.flow_bwd) {
                const Vec2<double> f = gt_flow(s, frame, frame - 1, px, py, d, m.depth, frac);
                g.flow_bwd->at(x, y, 0) = f.x();
                g.flow_bwd->at(x, y, 1) = f.y();
            }
        }
    }
    return g;
}

/// In-memory dataset with the exact oracle renders (no 8-bit quantization).
inline SceneDataset make_dataset(const AnalyticScene& s) {
    SceneDataset ds;
    ds.K = s.K;
    for (int i = 0; i < s.frames(); ++i) {
        GroundTruthFrame g = render_gt(s, i);
        FrameData f;
        f.index = i;
        f.color = std::move(g.color);
        f.depth = std::move(g.depth);
        f.mask = std::move(g.mask);
        f.flow_fwd = std::move(g.flow_fwd);
        f.flow_bwd = std::move(g.flow_bwd);
        ds.frames.push_back(std::move(f));
    }
    ds.gt_trajectory = s.trajectory();
    return ds;
}

/// Writes the dataset layout read by load_dataset: manifest.json, color/,
/// depth/, flow/, mask/ and trajectory_gt.csv.
inline void export_dataset(const AnalyticScene& s, const std::string& dir, const nlohmann::json& spec_json = {}) {
    namespace fs = std::filesystem;
    for (const char* sub : {"color", "depth", "flow", "mask"}) fs::create_directories(fs::path(dir) / sub);
    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["width"] = s.K.width;
    manifest["height"] = s.K.height;
    manifest["intrinsics"] = {{"f", s.K.f}, {"cx", s.K.cx}, {"cy", s.K.cy}};
    manifest["trajectory"] = "trajectory_gt.csv";
    if (!spec_json.is_null()) manifest["synth_spec"] = spec_json;
    nlohmann::json frames = nlohmann::json::array();
    char name[64];
    for (int i = 0; i < s.frames(); ++i) {
        const GroundTruthFrame g = render_gt(s, i);
        nlohmann::json f;
        f["index"] = i;
        std::snprintf(name, sizeof(name), "color/%04d.png", i);
        write_png((fs::path(dir) / name).string(), g.color);
        f["color"] = name;
        std::snprintf(name, sizeof(name), "depth/%04d.pfm", i);
        write_pfm((fs::path(dir) / name).string(), g.depth);
        f["depth"] = name;
        std::snprintf(name, sizeof(name), "mask/%04d.png", i);
        write_png((fs::path(dir) / name).string(), g.mask);
        f["mask"] = name;
        if (g.flow_fwd) {
            std::snprintf(name, sizeof(name), "flow/%04d_fwd.flo", i);
            write_flo((fs::path(dir) / name).string(), *g.flow_fwd);
            f["flow_fwd"] = name;
        }
        if (g.flow_bwd) {
            std::snprintf(name, sizeof(name), "flow/%04d_bwd.flo", i);
            write_flo((fs::path(dir) / name).string(), *g.flow_bwd);
            f["flow_bwd"] = name;
        }
        frames.push_back(f);
    }
    manifest["frames"] = frames;
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw IoError("cannot write manifest in " + dir);
    out << manifest.dump(2) << "\n";
    write_trajectory_csv(s.trajectory(), (fs::path(dir) / "trajectory_gt.csv").string());
}

}  // namespace dynfield
