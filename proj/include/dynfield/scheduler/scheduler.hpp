#pragma once

#include "dynfield/core/types.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace dynfield {

struct ScheduleConfig {
    int initial_images = 5;
    int admit_interval = 600;
    double max_span = 4.0;
    int max_images = 70;
    int iters_per_image = 840;
    int joint_divisor = 7;  // the joint pose + static phase takes 1/joint_divisor of the refinement
    double decay_factor = 0.1;
    int overlap = 20;
    int batch_rays = 4096;

    void validate() const {
        if (initial_images < 1 || admit_interval < 1 || iters_per_image < 1 || joint_divisor < 1 ||
            max_images < initial_images || overlap < 1 || batch_rays < 1)
            throw ConfigError("ScheduleConfig: counts must be positive and max_images >= initial_images");
        if (!(max_span > 0.0)) throw ConfigError("ScheduleConfig: max_span must be positive");
        if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw ConfigError("ScheduleConfig: decay_factor in (0, 1]");
    }
};

enum class Action { AdmitImage, StopAdmission, FreezePoses, ActivateDynamic, CreateSubScene, Done };

inline const char* to_string(Action a) {
    switch (a) {
        case Action::AdmitImage: return "AdmitImage";
        case Action::StopAdmission: return "StopAdmission";
        case Action::FreezePoses: return "FreezePoses";
        case Action::ActivateDynamic: return "ActivateDynamic";
        case Action::CreateSubScene: return "CreateSubScene";
        case Action::Done: return "Done";
    }
    return "?";
}

struct ActionRecord {
    Action action;
    std::int64_t iteration = 0;  // global
    std::int64_t local = 0;      // within the sub-scene
    int subscene = 0;
    int frame = -1;      // admitted frame for AdmitImage
    int admitted = 0;    // M after the action
    std::int64_t n_refine = 0;

    nlohmann::json to_json() const {
        nlohmann::json j{{"iter", iteration}, {"local", local}, {"subscene", subscene}, {"action", to_string(action)},
                         {"admitted", admitted}};
        if (frame >= 0) j["frame"] = frame;
        if (n_refine > 0) j["n_refine"] = n_refine;
        return j;
    }
};

/// Frames of one sub-scene in admission order; the first `overlap` entries
/// were inherited from the predecessor.
struct SubScenePlan {
    int index = 0;
    std::vector<int> frames;
    int overlap = 0;
};

/// Successor sub-scene seeded with the last min(overlap, |prev|) admitted frames.
inline SubScenePlan create_subscene(const SubScenePlan& prev, int overlap) {
    if (overlap < 1) throw ConfigError("create_subscene: overlap must be positive");
    SubScenePlan next;
    next.index = prev.index + 1;
    const int n = std::min<int>(overlap, static_cast<int>(prev.frames.size()));
    next.frames.assign(prev.frames.end() - n, prev.frames.end());
    next.overlap = n;
    return next;
}

struct TrainState {
    Stage stage = Stage::A_ProgressivePose;
    std::int64_t iteration = 0;
    std::int64_t local = 0;
    bool admitting = true;
    bool poses_frozen = false;
    bool done = false;
    std::int64_t refine_start = -1;
    std::int64_t n_refine = 0;
    double span = 0.0;
    std::size_t cursor = 0;  // next unadmitted entry of the training frame list
    SubScenePlan subscene;

    int admitted() const { return static_cast<int>(subscene.frames.size()); }
    std::int64_t joint_end(int divisor) const { return refine_start + n_refine / divisor; }
    std::int64_t refine_end() const { return refine_start + n_refine; }

    nlohmann::json to_json() const {
        return {{"stage", to_string(stage)}, {"iteration", iteration}, {"local", local},
                {"admitting", admitting},    {"poses_frozen", poses_frozen}, {"done", done},
                {"refine_start", refine_start}, {"n_refine", n_refine}, {"span", span},
                {"cursor", cursor},          {"subscene", subscene.index}, {"frames", subscene.frames},
                {"overlap", subscene.overlap}};
    }

    static TrainState from_json(const nlohmann::json& j) {
        TrainState s;
        const std::string st = j.at("stage");
        s.stage = st == "A" ? Stage::A_ProgressivePose : st == "B" ? Stage::B_DynamicActive : Stage::C_Handoff;
        s.iteration = j.at("iteration");
        s.local = j.at("local");
        s.admitting = j.at("admitting");
        s.poses_frozen = j.at("poses_frozen");
        s.done = j.at("done");
        s.refine_start = j.at("refine_start");
        s.n_refine = j.at("n_refine");
        s.span = j.at("span");
        s.cursor = j.at("cursor");
        s.subscene.index = j.at("subscene");
        s.subscene.frames = j.at("frames").get<std::vector<int>>();
        s.subscene.overlap = j.at("overlap");
        return s;
    }
};

/// Progressive training state machine. Call tick() at the top of every
/// iteration, apply the returned actions, optimize, then advance().
class Scheduler {
  public:
    Scheduler(const ScheduleConfig& cfg, std::vector<int> frames) : cfg_(cfg), frames_(std::move(frames)) {
        cfg_.validate();
        if (frames_.empty()) throw ConfigError("Scheduler: no training frames");
        const int n = std::min<int>(cfg_.initial_images, static_cast<int>(frames_.size()));
        state_.subscene.frames.assign(frames_.begin(), frames_.begin() + n);
        state_.cursor = n;
    }

    const ScheduleConfig& config() const { return cfg_; }
    const TrainState& state() const { return state_; }
    void restore(const TrainState& s) { state_ = s; }
    const std::vector<int>& training_frames() const { return frames_; }
    bool done() const { return state_.done; }

    /// Actions due at the current iteration. `span` is the head-to-tail distance of the current poses.
    std::vector<ActionRecord> tick(double span) {
        check_invariants();
        std::vector<ActionRecord> out;
        if (state_.done) return out;
        TrainState& s = state_;
        s.span = span;
        auto emit = [&](Action a, int frame = -1) {
            ActionRecord r{a, s.iteration, s.local, s.subscene.index, frame, s.admitted(), s.n_refine};
            out.push_back(r);
        };
        if (s.admitting) {
            if (s.local > 0 && s.local % cfg_.admit_interval == 0) {
                const bool full = s.admitted() >= cfg_.max_images;
                const bool exhausted = s.cursor >= frames_.size();
                if (full || exhausted || span > cfg_.max_span) {
                    s.admitting = false;
                    s.refine_start = s.local;
                    s.n_refine = std::int64_t(cfg_.iters_per_image) * s.admitted();
                    emit(Action::StopAdmission);
                } else {
                    const int f = frames_[s.cursor++];
                    s.subscene.frames.push_back(f);
                    emit(Action::AdmitImage, f);
                }
            }
        }
        if (!s.admitting && !s.poses_frozen && s.local == s.joint_end(cfg_.joint_divisor)) {
            s.poses_frozen = true;
            s.stage = Stage::B_DynamicActive;
            emit(Action::FreezePoses);
            emit(Action::ActivateDynamic);
        }
        if (!s.admitting && s.local == s.refine_end()) {
            s.stage = Stage::C_Handoff;
            if (s.cursor >= frames_.size()) {
                s.done = true;
                emit(Action::Done);
            } else {
                emit(Action::CreateSubScene);
                s.subscene = create_subscene(s.subscene, cfg_.overlap);
                s.stage = Stage::A_ProgressivePose;
                s.local = 0;
                s.admitting = true;
                s.poses_frozen = false;
                s.refine_start = -1;
                s.n_refine = 0;
                out.back().admitted = s.admitted();
            }
        }
        return out;
    }

    void advance() {
        if (state_.done) throw UsageError("Scheduler: advance after Done");
        ++state_.iteration;
        ++state_.local;
    }

    enum class Phase { Admission, Joint, Dynamic };

    Phase phase() const {
        if (state_.admitting) return Phase::Admission;
        return state_.poses_frozen ? Phase::Dynamic : Phase::Joint;
    }

    /// Iterations elapsed in the current phase and that phase's length.
    std::pair<std::int64_t, std::int64_t> phase_progress() const {
        const TrainState& s = state_;
        switch (phase()) {
            case Phase::Admission: return {s.local, 0};
            case Phase::Joint: return {s.local - s.refine_start, s.n_refine / cfg_.joint_divisor};
            case Phase::Dynamic: {
                const std::int64_t j = s.joint_end(cfg_.joint_divisor);
                return {s.local - j, s.refine_end() - j};
            }
        }
        return {0, 0};
    }

  private:
    void check_invariants() const {
        const TrainState& s = state_;
        if (s.admitted() < 1) throw UsageError("Scheduler: sub-scene without images");
        if (s.stage != Stage::A_ProgressivePose && s.admitting)
            throw UsageError("Scheduler: dynamic stage reached while still admitting images");
        if (s.poses_frozen != (s.stage != Stage::A_ProgressivePose) && !s.done)
            throw UsageError("Scheduler: pose freezing out of step with the stage");
        if (s.span < 0.0) throw UsageError("Scheduler: negative span");
    }

    ScheduleConfig cfg_;
    std::vector<int> frames_;
    TrainState state_;
};

struct LearningRates {
    double pose = 0.0;
    double nerf = 0.0;
};

/// Pose rate decays to decay_factor over the joint phase and is 0 once poses
/// freeze; the field rate decays over the dynamic phase.
inline LearningRates lr_schedule(Scheduler::Phase phase, double step_in_phase, double horizon, double lr_pose0,
                                 double lr_nerf0, double decay_factor = 0.1) {
    auto decay = [&](double w0) {
        if (!(horizon > 0.0)) throw ConfigError("lr_schedule: horizon must be positive");
        return w0 * std::pow(decay_factor, std::clamp(step_in_phase, 0.0, horizon) / horizon);
    };
    switch (phase) {
        case Scheduler::Phase::Admission: return {lr_pose0, lr_nerf0};
        case Scheduler::Phase::Joint: return {decay(lr_pose0), lr_nerf0};
        case Scheduler::Phase::Dynamic: return {0.0, decay(lr_nerf0)};
    }
    return {};
}

struct PixelSample {
    int frame = 0;
    int x = 0;
    int y = 0;
};

/// Pixels drawn uniformly over the admitted images (image first, then pixel).
template <typename Rng>
std::vector<PixelSample> ray_batch(const std::vector<int>& admitted, int width, int height, int count, Rng& rng) {
    if (admitted.empty()) throw UsageError("ray_batch: no admitted images");
    std::uniform_int_distribution<std::size_t> pick(0, admitted.size() - 1);
    std::uniform_int_distribution<int> ux(0, width - 1), uy(0, height - 1);
    std::vector<PixelSample> out(count);
    for (auto& p : out) {
        p.frame = admitted[pick(rng)];
        p.x = ux(rng);
        p.y = uy(rng);
    }
    return out;
}

/// Runs the schedule with no optimization. span_of(state) supplies the span at each tick.
inline std::vector<ActionRecord> dry_run(const ScheduleConfig& cfg, std::vector<int> frames,
                                         const std::function<double(const TrainState&)>& span_of,
                                         std::int64_t max_iterations = 100000000) {
    Scheduler s(cfg, std::move(frames));
    std::vector<ActionRecord> trace;
    for (std::int64_t i = 0; i < max_iterations; ++i) {
        auto acts = s.tick(span_of(s.state()));
        trace.insert(trace.end(), acts.begin(), acts.end());
        if (s.done()) return trace;
        s.advance();
    }
    throw UsageError("dry_run: iteration limit reached before Done");
}

inline void write_trace(std::ostream& out, const std::vector<ActionRecord>& trace) {
    for (const auto& r : trace) out << r.to_json().dump() << "\n";
}

}  // namespace dynfield
