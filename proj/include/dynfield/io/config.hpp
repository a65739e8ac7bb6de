#pragma once

#include "dynfield/fields/fields.hpp"
#include "dynfield/losses/losses.hpp"
#include "dynfield/render/renderer.hpp"
#include "dynfield/scheduler/scheduler.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

namespace dynfield {

struct OptimConfig {
    double lr_nerf = 1e-2;
    double lr_pose = 2e-3;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-15;
};

struct AblationFlags {
    bool use_motion_masks = true;
    bool fix_poses_in_B = true;
    bool freeze_dynamic_in_A = true;
};

struct RunConfig {
    std::uint64_t seed = 1;
    FieldConfig field;
    RenderSettings render;
    LossWeights loss;
    ScheduleConfig schedule;
    OptimConfig optim;
    AblationFlags flags;
    int holdout_every = 10;       // 0 trains on every frame
    int registration_steps = 300;  // pose-only steps per held-out frame
    int registration_rays = 512;
    double registration_lr = 2e-3;
    int pose_refresh_every = 1000;  // fold pose increments into their base poses; 0 disables
    bool stop_at_freeze = false;  // end training once poses freeze (pose-only experiments)
    int checkpoint_every = 1000;
    int max_iterations = 0;  // 0 = run the schedule to the end

    void validate() const {
        loss.validate();
        schedule.validate();
        if (render.samples < 2) throw ConfigError("RunConfig: render.samples must be >= 2");
        if (!(render.near > 0.0 && render.near < render.far)) throw ConfigError("RunConfig: need 0 < near < far");
        if (!(optim.lr_nerf > 0.0 && optim.lr_pose >= 0.0)) throw ConfigError("RunConfig: learning rates");
        if (holdout_every < 0 || registration_steps < 0 || registration_rays < 1 || checkpoint_every < 0 ||
            pose_refresh_every < 0 || max_iterations < 0)
            throw ConfigError("RunConfig: counts must be non-negative");
    }
};

namespace detail {

// Reads known keys; finish() rejects anything left over.
class JsonReader {
  public:
    JsonReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    }

    template <typename V>
    void get(const char* key, V& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<V>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(where_ + "." + key + ": " + e.what());
        }
    }

    const nlohmann::json* child(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }

    const std::string& where() const { return where_; }

  private:
    const nlohmann::json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

inline nlohmann::json grid_to_json(const HashGridConfig& g) {
    return {{"levels", g.levels}, {"log2_table_size", g.log2_table_size}, {"features", g.features},
            {"base_resolution", g.base_resolution}, {"growth", g.growth}};
}

inline void grid_from_json(const nlohmann::json& j, HashGridConfig& g, const std::string& where) {
    JsonReader r(j, where);
    r.get("levels", g.levels);
    r.get("log2_table_size", g.log2_table_size);
    r.get("features", g.features);
    r.get("base_resolution", g.base_resolution);
    r.get("growth", g.growth);
    r.finish();
}

inline nlohmann::json weight_to_json(const TermWeight& w) { return {{"initial", w.initial}, {"decay", w.decay_factor}}; }

inline void weight_from_json(const nlohmann::json& j, TermWeight& w, const std::string& where) {
    JsonReader r(j, where);
    r.get("initial", w.initial);
    r.get("decay", w.decay_factor);
    r.finish();
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
    using detail::grid_to_json;
    using detail::weight_to_json;
    const FieldConfig& f = c.field;
    return {
        {"seed", c.seed},
        {"field",
         {{"static_grid", grid_to_json(f.static_grid)},
          {"dynamic_grid", grid_to_json(f.dynamic_grid)},
          {"flow_grid", grid_to_json(f.flow_grid)},
          {"feature_dim", f.feature_dim},
          {"base_hidden", f.base_hidden},
          {"color_hidden", f.color_hidden},
          {"shadow_hidden", f.shadow_hidden},
          {"flow_hidden", f.flow_hidden},
          {"time_frequencies", f.time_frequencies},
          {"shadow_posenc_frequencies", f.shadow_posenc_frequencies},
          {"max_flow", f.max_flow},
          {"dynamic_density_bias", f.dynamic_density_bias},
          {"shadow_bias", f.shadow_bias}}},
        {"render", {{"samples", c.render.samples}, {"near", c.render.near}, {"far", c.render.far}}},
        {"loss",
         {{"color", weight_to_json(c.loss.color)},
          {"depth", weight_to_json(c.loss.depth)},
          {"flow", weight_to_json(c.loss.flow)},
          {"cycle", weight_to_json(c.loss.cycle)},
          {"dynamic", weight_to_json(c.loss.dynamic)},
          {"shadow", weight_to_json(c.loss.shadow)},
          {"masked_dynamic_factor", c.loss.masked_dynamic_factor}}},
        {"schedule",
         {{"initial_images", c.schedule.initial_images},
          {"admit_interval", c.schedule.admit_interval},
          {"max_span", c.schedule.max_span},
          {"max_images", c.schedule.max_images},
          {"iters_per_image", c.schedule.iters_per_image},
          {"joint_divisor", c.schedule.joint_divisor},
          {"decay_factor", c.schedule.decay_factor},
          {"overlap", c.schedule.overlap},
          {"batch_rays", c.schedule.batch_rays}}},
        {"optim",
         {{"lr_nerf", c.optim.lr_nerf},
          {"lr_pose", c.optim.lr_pose},
          {"beta1", c.optim.beta1},
          {"beta2", c.optim.beta2},
          {"eps", c.optim.eps}}},
        {"flags",
         {{"use_motion_masks", c.flags.use_motion_masks},
          {"fix_poses_in_B", c.flags.fix_poses_in_B},
          {"freeze_dynamic_in_A", c.flags.freeze_dynamic_in_A}}},
        {"holdout_every", c.holdout_every},
        {"registration_steps", c.registration_steps},
        {"registration_rays", c.registration_rays},
        {"registration_lr", c.registration_lr},
        {"pose_refresh_every", c.pose_refresh_every},
        {"stop_at_freeze", c.stop_at_freeze},
        {"checkpoint_every", c.checkpoint_every},
        {"max_iterations", c.max_iterations},
    };
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline RunConfig config_from_json(const nlohmann::json& j) {
    using namespace detail;
    RunConfig c;
    JsonReader r(j, "config");
    r.get("seed", c.seed);
    if (const auto* f = r.child("field")) {
        JsonReader fr(*f, "config.field");
        if (const auto* g = fr.child("static_grid")) grid_from_json(*g, c.field.static_grid, "config.field.static_grid");
        if (const auto* g = fr.child("dynamic_grid"))
            grid_from_json(*g, c.field.dynamic_grid, "config.field.dynamic_grid");
        if (const auto* g = fr.child("flow_grid")) grid_from_json(*g, c.field.flow_grid, "config.field.flow_grid");
        fr.get("feature_dim", c.field.feature_dim);
        fr.get("base_hidden", c.field.base_hidden);
        fr.get("color_hidden", c.field.color_hidden);
        fr.get("shadow_hidden", c.field.shadow_hidden);
        fr.get("flow_hidden", c.field.flow_hidden);
        fr.get("time_frequencies", c.field.time_frequencies);
        fr.get("shadow_posenc_frequencies", c.field.shadow_posenc_frequencies);
        fr.get("max_flow", c.field.max_flow);
        fr.get("dynamic_density_bias", c.field.dynamic_density_bias);
        fr.get("shadow_bias", c.field.shadow_bias);
        fr.finish();
    }
    if (const auto* rs = r.child("render")) {
        JsonReader rr(*rs, "config.render");
        rr.get("samples", c.render.samples);
        rr.get("near", c.render.near);
        rr.get("far", c.render.far);
        rr.finish();
    }
    if (const auto* l = r.child("loss")) {
        JsonReader lr(*l, "config.loss");
        const std::pair<const char*, TermWeight*> terms[] = {{"color", &c.loss.color},   {"depth", &c.loss.depth},
                                                             {"flow", &c.loss.flow},     {"cycle", &c.loss.cycle},
                                                             {"dynamic", &c.loss.dynamic}, {"shadow", &c.loss.shadow}};
        for (const auto& [name, w] : terms)
            if (const auto* t = lr.child(name)) weight_from_json(*t, *w, std::string("config.loss.") + name);
        lr.get("masked_dynamic_factor", c.loss.masked_dynamic_factor);
        lr.finish();
    }
    if (const auto* s = r.child("schedule")) {
        JsonReader sr(*s, "config.schedule");
        sr.get("initial_images", c.schedule.initial_images);
        sr.get("admit_interval", c.schedule.admit_interval);
        sr.get("max_span", c.schedule.max_span);
        sr.get("max_images", c.schedule.max_images);
        sr.get("iters_per_image", c.schedule.iters_per_image);
        sr.get("joint_divisor", c.schedule.joint_divisor);
        sr.get("decay_factor", c.schedule.decay_factor);
        sr.get("overlap", c.schedule.overlap);
        sr.get("batch_rays", c.schedule.batch_rays);
        sr.finish();
    }
    if (const auto* o = r.child("optim")) {
        JsonReader orr(*o, "config.optim");
        orr.get("lr_nerf", c.optim.lr_nerf);
        orr.get("lr_pose", c.optim.lr_pose);
        orr.get("beta1", c.optim.beta1);
        orr.get("beta2", c.optim.beta2);
        orr.get("eps", c.optim.eps);
        orr.finish();
    }
    if (const auto* fl = r.child("flags")) {
        JsonReader fr(*fl, "config.flags");
        fr.get("use_motion_masks", c.flags.use_motion_masks);
        fr.get("fix_poses_in_B", c.flags.fix_poses_in_B);
        fr.get("freeze_dynamic_in_A", c.flags.freeze_dynamic_in_A);
        fr.finish();
    }
    r.get("holdout_every", c.holdout_every);
    r.get("registration_steps", c.registration_steps);
    r.get("registration_rays", c.registration_rays);
    r.get("registration_lr", c.registration_lr);
    r.get("pose_refresh_every", c.pose_refresh_every);
    r.get("stop_at_freeze", c.stop_at_freeze);
    r.get("checkpoint_every", c.checkpoint_every);
    r.get("max_iterations", c.max_iterations);
    r.finish();
    c.validate();
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return config_from_json(j);
}

/// Hash of the settings that shape the optimization; bookkeeping-only keys are excluded.
inline std::uint64_t config_hash(const RunConfig& c) {
    nlohmann::json j = to_json(c);
    j.erase("checkpoint_every");
    j.erase("max_iterations");
    return fnv1a(j.dump());
}

/// Sets one ablation flag by name ("use_motion_masks", "fix_poses_in_B", "freeze_dynamic_in_A").
inline void set_flag(RunConfig& c, const std::string& name, bool value) {
    if (name == "use_motion_masks")
        c.flags.use_motion_masks = value;
    else if (name == "fix_poses_in_B")
        c.flags.fix_poses_in_B = value;
    else if (name == "freeze_dynamic_in_A")
        c.flags.freeze_dynamic_in_A = value;
    else
        throw UsageError("unknown ablation flag '" + name + "'");
}

}  // namespace dynfield
