#pragma once

#include "dynfield/diffcore/adam.hpp"
#include "dynfield/evalkit/metrics.hpp"
#include "dynfield/io/checkpoint.hpp"
#include "dynfield/io/config.hpp"
#include "dynfield/train/objective.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <random>
#include <sstream>

namespace dynfield {

using TrainScalar = float;

/// A finished sub-scene: its models and optimized poses.
struct SubSceneResult {
    int index = 0;
    std::vector<int> frames;
    SceneModels<TrainScalar> models;
    PoseTable<TrainScalar> poses;
    bool dynamic_trained = false;
};

namespace detail {

inline nlohmann::json pose_to_json(const Pose<double>& p) {
    std::vector<double> v;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) v.push_back(p.R(r, c));
    for (int k = 0; k < 3; ++k) v.push_back(p.t(k));
    return v;
}

inline Pose<double> pose_from_json(const nlohmann::json& j) {
    const auto v = j.get<std::vector<double>>();
    if (v.size() != 12) throw IoError("checkpoint: pose entry needs 12 numbers");
    Pose<double> p;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) p.R(r, c) = v[3 * r + c];
    p.t = Vec3d(v[9], v[10], v[11]);
    return p;
}

inline nlohmann::json pose_table_to_json(const PoseTable<TrainScalar>& t) {
    nlohmann::json a = nlohmann::json::array();
    for (std::size_t i = 0; i < t.size(); ++i)
        a.push_back({{"frame", t.frame_at(int(i))}, {"base", pose_to_json(t.base(int(i)))}, {"fixed", t.is_fixed(int(i))}});
    return a;
}

inline PoseTable<TrainScalar> pose_table_from_json(const nlohmann::json& a, const std::vector<float>* increments) {
    PoseTable<TrainScalar> t;
    for (const auto& e : a) t.add(e.at("frame"), pose_from_json(e.at("base")), e.at("fixed"));
    if (increments) {
        if (increments->size() != t.params().size()) throw IoError("checkpoint: pose buffer size mismatch");
        std::copy(increments->begin(), increments->end(), t.params().begin());
    }
    return t;
}

inline void copy_into(std::span<TrainScalar> dst, const std::vector<float>& src, const std::string& name) {
    if (dst.size() != src.size()) throw IoError("checkpoint: buffer '" + name + "' has the wrong size");
    std::copy(src.begin(), src.end(), dst.begin());
}

}  // namespace detail

struct SceneView {
    const SceneModels<TrainScalar>* models = nullptr;
    Pose<double> pose;
    Stage stage = Stage::A_ProgressivePose;  // B when the dynamic field was trained
};

/// Sub-scene that holds the frame, or for a registered frame the one whose range brackets it.
inline SceneView find_view(const std::vector<SubSceneResult>& subs, const std::map<int, Pose<double>>& registered,
                           int frame) {
    auto stage_of = [](const SubSceneResult& s) {
        return s.dynamic_trained ? Stage::B_DynamicActive : Stage::A_ProgressivePose;
    };
    for (const auto& s : subs)
        if (s.poses.contains(frame)) return {&s.models, s.poses.pose(s.poses.index_of(frame)), stage_of(s)};
    auto reg = registered.find(frame);
    if (reg == registered.end() || subs.empty()) throw UsageError("no pose for frame " + std::to_string(frame));
    const SubSceneResult* best = &subs.back();
    for (const auto& s : subs)
        if (!s.frames.empty() && frame > *std::min_element(s.frames.begin(), s.frames.end()) &&
            frame < *std::max_element(s.frames.begin(), s.frames.end())) {
            best = &s;
            break;
        }
    return {&best->models, reg->second, stage_of(*best)};
}

/// Progressive joint pose and field optimization over a dataset.
class Trainer {
  public:
    Trainer(const RunConfig& cfg, const SceneDataset& ds, std::string out_dir = {})
        : cfg_(cfg), ds_(ds), out_(std::move(out_dir)), rng_(cfg.seed) {
        cfg_.validate();
        const int n = ds_.num_frames();
        if (cfg_.holdout_every > 0) holdout_ = holdout_frames(n, cfg_.holdout_every);
        std::vector<int> train;
        for (int i = 0; i < n; ++i)
            if (std::find(holdout_.begin(), holdout_.end(), i) == holdout_.end()) train.push_back(i);
        sched_ = std::make_unique<Scheduler>(cfg_.schedule, train);
        start_subscene(/*seed_poses=*/nullptr);
        if (!out_.empty()) {
            std::filesystem::create_directories(out_);
            log_.open(std::filesystem::path(out_) / "loss_log.csv");
            log_ << "step,subscene,stage,color,depth,flow,cycle,dynamic,shadow,w_color,w_depth,w_flow,w_cycle,"
                    "w_dynamic,w_shadow,total,lr_pose,lr_nerf\n";
            actions_.open(std::filesystem::path(out_) / "actions.jsonl");
        }
    }

    const RunConfig& config() const { return cfg_; }
    const Scheduler& scheduler() const { return *sched_; }
    SceneModels<TrainScalar>& models() { return models_; }
    const SceneModels<TrainScalar>& models() const { return models_; }
    PoseTable<TrainScalar>& poses() { return poses_; }
    const PoseTable<TrainScalar>& poses() const { return poses_; }
    const std::vector<SubSceneResult>& finished() const { return finished_; }
    const std::vector<int>& holdout() const { return holdout_; }
    const LossReport& last_report() const { return last_.report; }
    const ObjectiveStats& last_stats() const { return last_; }
    const std::vector<ActionRecord>& trace() const { return trace_; }
    bool dynamic_active() const { return dynamic_; }
    bool finished_training() const { return done_; }
    std::int64_t iteration() const { return sched_->state().iteration; }

    /// One scheduler tick plus one optimization step. Returns false once training is over.
    bool step() {
        if (done_) return false;
        const auto acts = sched_->tick(current_span());
        for (const auto& a : acts) apply(a);
        if (sched_->done() || (cfg_.stop_at_freeze && sched_->state().poses_frozen)) {
            finish();
            return false;
        }
        optimize();
        sched_->advance();
        const std::int64_t it = sched_->state().iteration;
        if (!out_.empty() && cfg_.checkpoint_every > 0 && it % cfg_.checkpoint_every == 0)
            save_checkpoint((std::filesystem::path(out_) / "checkpoint.ckpt").string());
        if (cfg_.max_iterations > 0 && it >= cfg_.max_iterations) {
            finish();
            return false;
        }
        return true;
    }

    void run() {
        while (step()) {
        }
    }

    /// Current estimate for every frame seen so far: training frames from the
    /// first sub-scene that holds them, then registered held-out frames.
    Trajectory trajectory() const {
        std::map<int, Pose<double>> poses;
        for (const auto& s : finished_)
            for (std::size_t i = 0; i < s.poses.size(); ++i) poses.emplace(s.poses.frame_at(int(i)), s.poses.pose(int(i)));
        if (!done_)
            for (std::size_t i = 0; i < poses_.size(); ++i) poses.emplace(poses_.frame_at(int(i)), poses_.pose(int(i)));
        for (const auto& [f, p] : registered_) poses.emplace(f, p);
        Trajectory t;
        for (const auto& [f, p] : poses) t.push_back(f, p);
        return t;
    }

    /// Models and pose of the sub-scene best suited to render a frame.
    SceneView view_for(int frame) const { return find_view(finished_, registered_, frame); }

    /// Pose-only registration of the held-out frames against the frozen models.
    void register_holdout() {
        if (!done_) throw UsageError("register_holdout: training has not finished");
        for (int h : holdout_) {
            int nearest = -1;
            for (const auto& e : trajectory())
                if (!registered_.contains(e.frame) && (nearest < 0 || std::abs(e.frame - h) < std::abs(nearest - h)))
                    nearest = e.frame;
            if (nearest < 0) throw UsageError("register_holdout: no trained poses");
            SubSceneResult* owner = nullptr;
            for (auto& s : finished_)
                if (s.poses.contains(nearest)) {
                    owner = &s;
                    break;
                }
            SceneModels<TrainScalar>& m = owner ? owner->models : models_;
            const PoseTable<TrainScalar>& src = owner ? owner->poses : poses_;
            PoseTable<TrainScalar> table;
            for (std::size_t i = 0; i < src.size(); ++i) table.add(src.frame_at(int(i)), src.pose(int(i)), true);
            const int idx = table.add(h, src.pose(src.index_of(nearest)), false);
            AdamState<TrainScalar> st = make_adam(cfg_.registration_lr);
            const bool dyn = owner ? owner->dynamic_trained : dynamic_steps_ > 0;
            ObjectiveSettings os = objective_settings(dyn ? Stage::B_DynamicActive : Stage::A_ProgressivePose, dyn);
            os.anneal_step = os.anneal_horizon;
            std::mt19937_64 rng(cfg_.seed ^ (0x9e3779b97f4a7c15ull * (h + 1)));
            for (int it = 0; it < cfg_.registration_steps; ++it) {
                const auto px = ray_batch(std::vector<int>{h}, ds_.width(), ds_.height(), cfg_.registration_rays, rng);
                const auto batch = sample_batch<TrainScalar>(ds_, px, cfg_.render, &rng);
                table.zero_grad();
                m.zero_grad();
                evaluate_objective(m, table, ds_.K, batch, ds_.num_frames(), os, true);
                adam_step<TrainScalar>(table.params(), table.grads(), st);
                table.recenter();
            }
            m.zero_grad();
            registered_[h] = table.pose(idx);
        }
    }

    void save_checkpoint(const std::string& path) const {
        Checkpoint ck;
        nlohmann::json& h = ck.header;
        h["format"] = "dynfield-checkpoint";
        h["version"] = 1;
        h["config"] = to_json(cfg_);
        h["config_hash"] = std::to_string(config_hash(cfg_));
        h["state"] = sched_->state().to_json();
        std::ostringstream rs;
        rs << rng_;
        h["rng"] = rs.str();
        h["dynamic"] = dynamic_;
        h["dynamic_steps"] = dynamic_steps_;
        h["done"] = done_;
        h["num_frames"] = ds_.num_frames();
        h["intrinsics"] = {{"f", ds_.K.f}, {"cx", ds_.K.cx}, {"cy", ds_.K.cy}, {"width", ds_.K.width},
                           {"height", ds_.K.height}};
        h["poses"] = detail::pose_table_to_json(poses_);
        h["pose_adam_step"] = pose_adam_.step;
        nlohmann::json steps;
        for (const auto& [name, st] : adam_) steps[name] = st.step;
        h["adam_steps"] = steps;
        nlohmann::json reg = nlohmann::json::object();
        for (const auto& [f, p] : registered_) reg[std::to_string(f)] = detail::pose_to_json(p);
        h["registered"] = reg;
        h["holdout"] = holdout_;
        auto& models = const_cast<SceneModels<TrainScalar>&>(models_);
        for (auto& p : models.parameters()) {
            ck.buffers.push_back({"model/" + p.name, {p.values.begin(), p.values.end()}});
            auto it = adam_.find(p.name);
            std::vector<float> m(p.values.size(), 0.f), v(p.values.size(), 0.f);
            if (it != adam_.end() && !it->second.m.empty()) {
                m = it->second.m;
                v = it->second.v;
            }
            ck.buffers.push_back({"adam_m/" + p.name, m});
            ck.buffers.push_back({"adam_v/" + p.name, v});
        }
        ck.buffers.push_back({"pose/params", {poses_.params().begin(), poses_.params().end()}});
        std::vector<float> pm = pose_adam_.m, pv = pose_adam_.v;
        pm.resize(poses_.params().size(), 0.f);
        pv.resize(poses_.params().size(), 0.f);
        ck.buffers.push_back({"pose/m", pm});
        ck.buffers.push_back({"pose/v", pv});
        nlohmann::json fin = nlohmann::json::array();
        for (const auto& s : finished_) {
            fin.push_back({{"index", s.index},
                           {"frames", s.frames},
                           {"dynamic_trained", s.dynamic_trained},
                           {"poses", detail::pose_table_to_json(s.poses)}});
            const std::string pre = "sub" + std::to_string(s.index) + "/";
            auto& sm = const_cast<SceneModels<TrainScalar>&>(s.models);
            for (auto& p : sm.parameters()) ck.buffers.push_back({pre + p.name, {p.values.begin(), p.values.end()}});
            ck.buffers.push_back({pre + "pose/params", {s.poses.params().begin(), s.poses.params().end()}});
        }
        h["finished"] = fin;
        write_checkpoint(path, ck);
    }

    /// Restores a checkpoint written by an identically configured trainer.
    void load_checkpoint(const std::string& path) {
        const Checkpoint ck = read_checkpoint(path);
        const auto& h = ck.header;
        if (h.value("format", "") != "dynfield-checkpoint") throw IoError(path + ": not a training checkpoint");
        if (h.at("config_hash").get<std::string>() != std::to_string(config_hash(cfg_)))
            throw ConfigError(path + ": checkpoint was written with a different configuration");
        sched_->restore(TrainState::from_json(h.at("state")));
        std::istringstream rs(h.at("rng").get<std::string>());
        rs >> rng_;
        dynamic_ = h.at("dynamic");
        dynamic_steps_ = h.at("dynamic_steps");
        done_ = h.at("done");
        models_ = SceneModels<TrainScalar>(cfg_.field);
        adam_.clear();
        for (auto& p : models_.parameters()) {
            detail::copy_into(p.values, ck.buffer("model/" + p.name), p.name);
            AdamState<TrainScalar> st = make_adam(cfg_.optim.lr_nerf);
            st.m = ck.buffer("adam_m/" + p.name);
            st.v = ck.buffer("adam_v/" + p.name);
            st.step = h.at("adam_steps").at(p.name);
            adam_[p.name] = std::move(st);
        }
        poses_ = detail::pose_table_from_json(h.at("poses"), &ck.buffer("pose/params"));
        pose_adam_ = make_adam(cfg_.optim.lr_pose);
        pose_adam_.m = ck.buffer("pose/m");
        pose_adam_.v = ck.buffer("pose/v");
        pose_adam_.step = h.at("pose_adam_step");
        registered_.clear();
        for (auto it = h.at("registered").begin(); it != h.at("registered").end(); ++it)
            registered_[std::stoi(it.key())] = detail::pose_from_json(it.value());
        finished_.clear();
        for (const auto& f : h.at("finished")) {
            SubSceneResult s;
            s.index = f.at("index");
            s.frames = f.at("frames").get<std::vector<int>>();
            s.dynamic_trained = f.at("dynamic_trained");
            const std::string pre = "sub" + std::to_string(s.index) + "/";
            s.models = SceneModels<TrainScalar>(cfg_.field);
            for (auto& p : s.models.parameters()) detail::copy_into(p.values, ck.buffer(pre + p.name), pre + p.name);
            s.poses = detail::pose_table_from_json(f.at("poses"), &ck.buffer(pre + "pose/params"));
            finished_.push_back(std::move(s));
        }
    }

    /// Writes the trajectory CSV, the per-sub-scene model files and a final checkpoint.
    void write_outputs() const {
        if (out_.empty()) return;
        namespace fs = std::filesystem;
        write_trajectory_csv(trajectory(), (fs::path(out_) / "trajectory.csv").string());
        save_checkpoint((fs::path(out_) / "final.ckpt").string());
    }

    ObjectiveSettings objective_settings(Stage stage, bool dynamic) const {
        ObjectiveSettings os;
        os.stage = stage;
        os.dynamic = dynamic;
        os.use_motion_masks = cfg_.flags.use_motion_masks;
        os.weights = cfg_.loss;
        const auto [step, horizon] = sched_->phase_progress();
        switch (sched_->phase()) {
            case Scheduler::Phase::Admission:
                os.anneal_step = 0.0;
                os.anneal_horizon = 1.0;
                break;
            case Scheduler::Phase::Joint:
                os.anneal_step = double(step);
                os.anneal_horizon = std::max<double>(1.0, double(horizon));
                break;
            case Scheduler::Phase::Dynamic:
                os.anneal_step = os.anneal_horizon = 1.0;
                break;
        }
        return os;
    }

  private:
    AdamState<TrainScalar> make_adam(double lr) const {
        AdamState<TrainScalar> st;
        st.beta1 = cfg_.optim.beta1;
        st.beta2 = cfg_.optim.beta2;
        st.eps = cfg_.optim.eps;
        st.lr = lr;
        return st;
    }

    void start_subscene(const PoseTable<TrainScalar>* seed_poses) {
        models_ = SceneModels<TrainScalar>(cfg_.field);
        models_.init_random(rng_);
        adam_.clear();
        for (const auto& p : models_.parameters()) adam_[p.name] = make_adam(cfg_.optim.lr_nerf);
        pose_adam_ = make_adam(cfg_.optim.lr_pose);
        poses_ = PoseTable<TrainScalar>();
        const auto& frames = sched_->state().subscene.frames;
        for (std::size_t i = 0; i < frames.size(); ++i) {
            Pose<double> init;
            if (seed_poses && seed_poses->contains(frames[i]))
                init = seed_poses->pose(seed_poses->index_of(frames[i]));
            else
                init = init_new_pose(poses_.trajectory());
            poses_.add(frames[i], init, i == 0);
        }
        dynamic_ = !cfg_.flags.freeze_dynamic_in_A;
        dynamic_steps_ = 0;
    }

    double current_span() const {
        if (poses_.size() < 2) return 0.0;
        const auto& f = sched_->state().subscene.frames;
        return (poses_.pose(poses_.index_of(f.back())).t - poses_.pose(poses_.index_of(f.front())).t).norm();
    }

    void apply(const ActionRecord& a) {
        trace_.push_back(a);
        if (actions_.is_open()) actions_ << a.to_json().dump() << "\n";
        switch (a.action) {
            case Action::AdmitImage:
                poses_.add(a.frame, init_new_pose(poses_.trajectory()));
                break;
            case Action::StopAdmission:
                break;
            case Action::FreezePoses:
                if (cfg_.flags.fix_poses_in_B)
                    for (std::size_t i = 0; i < poses_.size(); ++i) poses_.set_fixed(int(i), true);
                break;
            case Action::ActivateDynamic:
                dynamic_ = true;
                break;
            case Action::CreateSubScene: {
                finished_.push_back({a.subscene, poses_.frames(), std::move(models_), poses_, dynamic_steps_ > 0});
                const PoseTable<TrainScalar> prev = poses_;
                start_subscene(&prev);
                break;
            }
            case Action::Done:
                break;
        }
    }

    void optimize() {
        const TrainState& s = sched_->state();
        const auto [step, horizon] = sched_->phase_progress();
        LearningRates lr{cfg_.optim.lr_pose, cfg_.optim.lr_nerf};
        if (sched_->phase() != Scheduler::Phase::Admission)
            lr = lr_schedule(sched_->phase(), double(step), double(std::max<std::int64_t>(horizon, 1)),
                             cfg_.optim.lr_pose, cfg_.optim.lr_nerf, cfg_.schedule.decay_factor);
        if (sched_->phase() == Scheduler::Phase::Dynamic && !cfg_.flags.fix_poses_in_B)
            lr.pose = cfg_.optim.lr_pose * cfg_.schedule.decay_factor;

        const auto px = ray_batch(s.subscene.frames, ds_.width(), ds_.height(), cfg_.schedule.batch_rays, rng_);
        const auto batch = sample_batch<TrainScalar>(ds_, px, cfg_.render, &rng_);
        models_.zero_grad();
        poses_.zero_grad();
        if (dynamic_) ++dynamic_steps_;
        last_ = evaluate_objective(models_, poses_, ds_.K, batch, ds_.num_frames(), objective_settings(s.stage, dynamic_),
                                   true, &tape_);
        for (auto& p : models_.parameters()) {
            AdamState<TrainScalar>& st = adam_.at(p.name);
            st.lr = lr.nerf;
            adam_step<TrainScalar>(p.values, std::span<const TrainScalar>(p.grads), st);
        }
        if (lr.pose > 0.0) {
            pose_adam_.lr = lr.pose;
            adam_step<TrainScalar>(poses_.params(), poses_.grads(), pose_adam_);
            poses_.recenter();
            if (cfg_.pose_refresh_every > 0 && (s.local + 1) % cfg_.pose_refresh_every == 0) poses_.refresh_bases();
        }
        if (log_.is_open()) {
            const auto& r = last_.report;
            log_ << s.iteration << "," << s.subscene.index << "," << to_string(s.stage) << std::setprecision(9) << ","
                 << r.terms.color << "," << r.terms.depth << "," << r.terms.flow << "," << r.terms.cycle << ","
                 << r.terms.dynamic << "," << r.terms.shadow << "," << r.weights.color << "," << r.weights.depth << ","
                 << r.weights.flow << "," << r.weights.cycle << "," << r.weights.dynamic << "," << r.weights.shadow
                 << "," << r.total << "," << lr.pose << "," << lr.nerf << "\n";
        }
    }

    void finish() {
        done_ = true;
        finished_.push_back({sched_->state().subscene.index, poses_.frames(), models_, poses_, dynamic_steps_ > 0});
    }

    RunConfig cfg_;
    const SceneDataset& ds_;
    std::string out_;
    std::mt19937_64 rng_;
    std::unique_ptr<Scheduler> sched_;
    std::vector<int> holdout_;
    SceneModels<TrainScalar> models_;
    PoseTable<TrainScalar> poses_;
    std::map<std::string, AdamState<TrainScalar>> adam_;
    AdamState<TrainScalar> pose_adam_;
    RenderTape<TrainScalar> tape_;
    std::vector<SubSceneResult> finished_;
    std::map<int, Pose<double>> registered_;
    std::vector<ActionRecord> trace_;
    ObjectiveStats last_;
    bool dynamic_ = false;
    std::int64_t dynamic_steps_ = 0;
    bool done_ = false;
    std::ofstream log_, actions_;
};

}  // namespace dynfield

namespace dynfield {

/// Everything needed to render from a training checkpoint, without the dataset.
struct LoadedScene {
    RunConfig cfg;
    Intrinsics K;
    int num_frames = 0;
    std::vector<SubSceneResult> subscenes;
    std::map<int, Pose<double>> registered;

    SceneView view_for(int frame) const { return find_view(subscenes, registered, frame); }
};

inline LoadedScene load_scene_checkpoint(const std::string& path) {
    const Checkpoint ck = read_checkpoint(path);
    const auto& h = ck.header;
    if (h.value("format", "") != "dynfield-checkpoint") throw IoError(path + ": not a training checkpoint");
    LoadedScene sc;
    sc.cfg = config_from_json(h.at("config"));
    const auto& k = h.at("intrinsics");
    sc.K = Intrinsics{k.at("f"), k.at("cx"), k.at("cy"), k.at("width"), k.at("height")};
    sc.num_frames = h.at("num_frames");
    for (const auto& f : h.at("finished")) {
        SubSceneResult s;
        s.index = f.at("index");
        s.frames = f.at("frames").get<std::vector<int>>();
        s.dynamic_trained = f.at("dynamic_trained");
        const std::string pre = "sub" + std::to_string(s.index) + "/";
        s.models = SceneModels<TrainScalar>(sc.cfg.field);
        for (auto& p : s.models.parameters()) detail::copy_into(p.values, ck.buffer(pre + p.name), pre + p.name);
        s.poses = detail::pose_table_from_json(f.at("poses"), &ck.buffer(pre + "pose/params"));
        sc.subscenes.push_back(std::move(s));
    }
    if (!h.at("done").get<bool>()) {
        SubSceneResult s;
        s.index = h.at("state").at("subscene");
        s.models = SceneModels<TrainScalar>(sc.cfg.field);
        for (auto& p : s.models.parameters()) detail::copy_into(p.values, ck.buffer("model/" + p.name), p.name);
        s.poses = detail::pose_table_from_json(h.at("poses"), &ck.buffer("pose/params"));
        s.frames = s.poses.frames();
        s.dynamic_trained = h.at("dynamic_steps").get<std::int64_t>() > 0;
        sc.subscenes.push_back(std::move(s));
    }
    for (auto it = h.at("registered").begin(); it != h.at("registered").end(); ++it)
        sc.registered[std::stoi(it.key())] = detail::pose_from_json(it.value());
    return sc;
}

}  // namespace dynfield
