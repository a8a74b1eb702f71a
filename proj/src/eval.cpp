#include "xworld/eval.hpp"

#include <filesystem>
#include <fstream>

namespace xworld {

namespace {

nlohmann::json series_of(const std::vector<double>& y) {
    nlohmann::json xs = nlohmann::json::array(), ys = nlohmann::json::array();
    for (size_t i = 0; i < y.size(); ++i) {
        xs.push_back(i);
        ys.push_back(y[i]);
    }
    return {{"x", xs}, {"y", ys}};
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0;
    double s = 0;
    for (double x : v) s += x;
    return s / double(v.size());
}

// Assemble the decoded chunks of one streamed generation into a single video.
Tensor<float> concat_chunks(const std::vector<Tensor<float>>& chunks) {
    if (chunks.empty()) throw ShapeError("concat_chunks: no chunks");
    const int64_t V = chunks[0].dim(0), H = chunks[0].dim(2), W = chunks[0].dim(3);
    int64_t total = 0;
    for (const auto& c : chunks) total += c.dim(1);
    Tensor<float> out({V, total, H, W, 3});
    const int64_t px = H * W * 3;
    int64_t at = 0;
    for (const auto& c : chunks) {
        const int64_t F = c.dim(1);
        for (int64_t v = 0; v < V; ++v)
            std::memcpy(out.ptr() + (v * total + at) * px, c.ptr() + v * F * px,
                        sizeof(float) * size_t(F * px));
        at += F;
    }
    return out;
}

// Drive a streaming session across an episode's full action track, returning
// the assembled video and the evaluation count.
Tensor<float> stream_episode(WorldModel<float>& model, const Episode& ep, int history_frames,
                             uint64_t seed, const RolloutConfig& rcfg, int latent_total,
                             int* evals_out) {
    RolloutSession<float> sess(model, ep, history_frames, seed, rcfg);
    const int cs = model.config().backbone.chunk_size;
    std::vector<Tensor<float>> chunks;
    int evals = 0;
    while (sess.next_latent_frame() < latent_total) {
        const int base = sess.next_latent_frame() == 0 ? 0 : 2 * sess.next_latent_frame() - 1;
        const int need = sess.expected_action_frames();
        if (base + need > int(ep.actions.size()))
            throw ShapeError("stream: episode action track too short for the horizon");
        ChunkRequest req;
        req.actions.assign(ep.actions.begin() + base, ep.actions.begin() + base + need);
        ChunkResponse res = sess.step(req);
        evals += res.evals;
        chunks.push_back(std::move(res.frames));
        (void)cs;
    }
    if (evals_out) *evals_out = evals;
    return concat_chunks(chunks);
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
    return {{"mode", mode},
            {"config_hash", config_hash},
            {"checkpoint_hash", checkpoint_hash},
            {"metrics", metrics},
            {"per_episode", per_episode},
            {"series", series}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport r;
    r.mode = j.at("mode");
    r.config_hash = j.at("config_hash");
    r.checkpoint_hash = j.at("checkpoint_hash");
    r.metrics = j.at("metrics");
    r.per_episode = j.at("per_episode");
    r.series = j.at("series");
    return r;
}

nlohmann::json eval_report_schema() {
    return {{"type", "object"},
            {"required", {"mode", "config_hash", "checkpoint_hash", "metrics", "per_episode",
                          "series"}},
            {"properties",
             {{"mode", {{"type", "string"}}},
              {"config_hash", {{"type", "string"}}},
              {"checkpoint_hash", {{"type", "string"}}},
              {"metrics", {{"type", "object"}, {"values", "number"}}},
              {"per_episode", {{"type", "array"}}},
              {"series", {{"type", "object"}}}}}};
}

bool validate_report(const nlohmann::json& report, const nlohmann::json& schema,
                     std::string* why) {
    auto fail = [&](const std::string& m) {
        if (why) *why = m;
        return false;
    };
    auto type_ok = [](const nlohmann::json& v, const std::string& t) {
        if (t == "object") return v.is_object();
        if (t == "array") return v.is_array();
        if (t == "string") return v.is_string();
        if (t == "number") return v.is_number() || v.is_boolean();
        return false;
    };
    if (!type_ok(report, schema.value("type", "object"))) return fail("root is not an object");
    for (const auto& key : schema.value("required", nlohmann::json::array()))
        if (!report.contains(key.get<std::string>()))
            return fail("missing required field: " + key.get<std::string>());
    if (schema.contains("properties"))
        for (auto& [name, sub] : schema.at("properties").items()) {
            if (!report.contains(name)) continue;
            const std::string t = sub.value("type", "");
            if (!t.empty() && !type_ok(report.at(name), t))
                return fail("field '" + name + "' is not of type " + t);
            if (sub.value("values", "") == "number")
                for (auto& [k, v] : report.at(name).items())
                    if (!v.is_number() && !v.is_boolean())
                        return fail("metric '" + k + "' is not numeric");
        }
    return true;
}

void write_report(const EvalReport& rep, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    {
        std::ofstream f(out_dir + "/report.json");
        f << rep.to_json().dump(2) << "\n";
    }
    {
        std::ofstream f(out_dir + "/report.schema.json");
        f << eval_report_schema().dump(2) << "\n";
    }
    {
        std::ofstream f(out_dir + "/metrics.csv");
        f << "metric,value\n";
        for (auto& [k, v] : rep.metrics.items()) f << k << "," << v.dump() << "\n";
    }
    for (auto& [name, s] : rep.series.items()) {
        std::ofstream f(out_dir + "/" + name + ".xy");
        const auto& xs = s.at("x");
        const auto& ys = s.at("y");
        for (size_t i = 0; i < xs.size(); ++i)
            f << xs[i].dump() << " " << ys[i].dump() << "\n";
    }
}

std::string report_summary(const nlohmann::json& report) {
    std::string s;
    s += "mode:       " + report.value("mode", "?") + "\n";
    s += "config:     " + report.value("config_hash", "?") + "\n";
    s += "checkpoint: " + report.value("checkpoint_hash", "?") + "\n";
    s += "episodes:   " + std::to_string(report.value("per_episode", nlohmann::json::array())
                                             .size()) + "\n\n";
    size_t w = 6;
    for (auto& [k, v] : report.at("metrics").items()) w = std::max(w, k.size());
    for (auto& [k, v] : report.at("metrics").items()) {
        s += k;
        s.append(w + 2 - k.size(), ' ');
        s += v.dump() + "\n";
    }
    return s;
}

EvalContext make_eval_context(const ExperimentConfig& cfg, const MotionProbe* pretrained) {
    EvalContext ctx;
    ctx.probe = pretrained ? *pretrained : train_probe(cfg.model.world, cfg.eval.probe);
    ctx.stats = dataset_stats(cfg.model.world, cfg.eval.stats_episodes, cfg.eval.stats_seed0);
    // ground-truth cross-view floor over a small slice of the eval range
    const int n = std::min(8, cfg.eval.episodes);
    std::vector<double> floors;
    for (int i = 0; i < n; ++i) {
        Episode ep = generate_episode(cfg.model.world, cfg.eval.seed0 + uint64_t(i));
        CrossViewConsistency cv = crossview_consistency(ep.frames, ep.rig, ep.ego);
        if (cv.applicable) floors.push_back(cv.overlap_mse);
    }
    ctx.crossview_floor = mean_of(floors);
    return ctx;
}

EvalReport run_eval(const ExperimentConfig& cfg, const std::string& ckpt_path,
                    const std::string& mode, const std::string& out_dir,
                    const EvalContext* ctx_in) {
    if (mode != "stage1" && mode != "stage2")
        throw ConfigError("eval mode must be 'stage1' or 'stage2', got '" + mode + "'");

    EvalContext local;
    const EvalContext* ctx = ctx_in;
    if (!ctx) {
        local = make_eval_context(cfg);
        ctx = &local;
    }
    if (!ctx->probe.gate_passed())
        throw InvariantError("eval: motion probe gate not passed; action metrics are void");

    WorldModel<float> model(cfg.model, cfg.stage1.seed);
    model.load(ckpt_path);

    EvalReport rep;
    rep.mode = mode;
    rep.config_hash = cfg.hash();
    rep.checkpoint_hash = file_hash_hex(ckpt_path);
    rep.metrics["probe_velocity_mae"] = ctx->probe.velocity_mae;
    rep.metrics["probe_mean_speed"] = ctx->probe.mean_speed;
    rep.metrics["probe_curvature_sign_acc"] = ctx->probe.curvature_sign_acc;
    rep.metrics["crossview_floor"] = ctx->crossview_floor;
    rep.per_episode = nlohmann::json::array();

    const WorldConfig& world = cfg.model.world;
    const double fps = world.fps;
    const int LT = latent_time_of(world.frames);

    std::vector<double> vel_mae, sign_acc, maneuver_ok, appearance, hit, lane, crossview;
    std::vector<double> evals_per_frame;

    for (uint64_t seed : cfg.eval_seeds()) {
        Episode ep = generate_episode(world, seed);
        Tensor<float> video;
        int evals = 0;
        if (mode == "stage1") {
            CondInputs<float> conds = model.build_conditions(ep, 0);
            SamplerConfig scfg;
            scfg.steps = cfg.eval.sample_steps;
            scfg.cfg_branch = cfg.eval.cfg_branch;
            scfg.cfg_w = cfg.eval.cfg_w;
            scfg.noise_seed = seed;
            SampleResult<float> res =
                sample_bidirectional(model, ep.actions, conds,
                                     static_cast<const Tensor<float>*>(nullptr), 0, scfg);
            video = model.decode_video(res.latents, LT);
            evals = res.evals;
        } else {
            video = stream_episode(model, ep, /*history_frames=*/0, seed, cfg.rollout, LT,
                                   &evals);
        }
        evals_per_frame.push_back(double(evals) / double(LT) *
                                  double(mode == "stage1" ? LT : cfg.model.backbone.chunk_size));

        ActionFollowing af = action_following(ctx->probe, video, ep.actions, fps);
        ControlAdherence ca = control_adherence(video, ep.agents, ep.statics, ep.rig, ep.actions,
                                                fps, world.attitude_limit);
        const double app = appearance_adherence(video, ep.appearance);
        std::vector<EgoState> ego =
            integrate_actions(ep.actions, int(video.dim(1)), fps, world.attitude_limit);
        CrossViewConsistency cv = crossview_consistency(video, ep.rig, ego);

        vel_mae.push_back(af.velocity_mae);
        if (af.sign_pairs > 0) sign_acc.push_back(af.curvature_sign_acc);
        maneuver_ok.push_back(af.maneuver_match ? 1.0 : 0.0);
        appearance.push_back(app);
        if (ca.applicable && ca.agent_boxes > 0) hit.push_back(ca.agent_hit_rate);
        if (ca.applicable && ca.lane_samples > 0) lane.push_back(ca.lane_alignment);
        if (cv.applicable) crossview.push_back(cv.overlap_mse);

        rep.per_episode.push_back({{"seed", seed},
                                   {"family", family_name(ep.family)},
                                   {"velocity_mae", af.velocity_mae},
                                   {"curvature_sign_acc", af.curvature_sign_acc},
                                   {"maneuver_commanded", maneuver_name(af.commanded)},
                                   {"maneuver_observed", maneuver_name(af.observed)},
                                   {"maneuver_match", af.maneuver_match},
                                   {"appearance_adherence", app},
                                   {"agent_hit_rate", ca.agent_hit_rate},
                                   {"agent_boxes", ca.agent_boxes},
                                   {"lane_alignment", ca.lane_alignment},
                                   {"lane_samples", ca.lane_samples},
                                   {"crossview_mse", cv.overlap_mse},
                                   {"evals", evals}});
    }

    rep.metrics["velocity_mae"] = mean_of(vel_mae);
    rep.metrics["curvature_sign_acc"] = mean_of(sign_acc);
    rep.metrics["maneuver_acc"] = mean_of(maneuver_ok);
    rep.metrics["appearance_adherence"] = mean_of(appearance);
    rep.metrics["agent_hit_rate"] = mean_of(hit);
    rep.metrics["lane_alignment"] = mean_of(lane);
    rep.metrics["crossview_mse"] = mean_of(crossview);
    rep.metrics["crossview_ratio"] =
        ctx->crossview_floor > 0 ? mean_of(crossview) / ctx->crossview_floor : 0.0;
    rep.metrics["evals_per_latent_frame"] = mean_of(evals_per_frame);
    rep.series["velocity_mae_per_episode"] = series_of(vel_mae);
    rep.series["crossview_mse_per_episode"] = series_of(crossview);

    if (mode == "stage2") {
        // long-horizon drift at 4x the training horizon (or as configured)
        WorldConfig long_world = world;
        const int cs = cfg.model.backbone.chunk_size;
        const int long_lt = 1 + cfg.eval.horizon_chunks * cs;
        long_world.frames = frames_of_latent_time(long_lt);
        std::vector<double> worst_mean, worst_var;
        bool within = true;
        DriftReport drift;
        for (int i = 0; i < std::min(4, cfg.eval.episodes); ++i) {
            Episode ep = generate_episode(long_world, cfg.eval.seed0 + uint64_t(i));
            int evals = 0;
            Tensor<float> video = stream_episode(model, ep, /*history_frames=*/1,
                                                 cfg.eval.seed0 + uint64_t(i), cfg.rollout,
                                                 long_lt, &evals);
            drift = long_horizon_drift(video, 2 * cs, ctx->stats, &ctx->probe);
            within = within && drift.within(cfg.eval.drift_band);
            double wm = 0, wv = 1;
            for (double d : drift.mean_divergence) wm = std::max(wm, d);
            for (double r : drift.var_ratio) wv = std::max(wv, std::abs(r - 1.0));
            worst_mean.push_back(wm);
            worst_var.push_back(wv);
        }
        rep.metrics["drift_within_band"] = within;
        rep.metrics["drift_worst_mean_divergence"] = *std::max_element(worst_mean.begin(),
                                                                       worst_mean.end());
        rep.metrics["drift_worst_var_deviation"] = *std::max_element(worst_var.begin(),
                                                                     worst_var.end());
        rep.series["drift_mean_divergence"] = series_of(drift.mean_divergence);
        rep.series["drift_var_ratio"] = series_of(drift.var_ratio);
        rep.series["drift_probe_speed"] = series_of(drift.probe_speed);
    }

    write_report(rep, out_dir);
    cfg.write_resolved(out_dir);
    return rep;
}

}  // namespace xworld
