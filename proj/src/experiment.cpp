#include "xworld/experiment.hpp"

#include <filesystem>
#include <fstream>

namespace xworld {

void ExperimentConfig::finalize() {
    model.finalize();
    if (data.episodes < 0) throw ConfigError("data.episodes must be non-negative");
    if (eval.episodes <= 0) throw ConfigError("eval.episodes must be positive");
    if (eval.sample_steps <= 0) throw ConfigError("eval.sample_steps must be positive");
    if (eval.horizon_chunks <= 0) throw ConfigError("eval.horizon_chunks must be positive");
    if (eval.stats_episodes <= 0) throw ConfigError("eval.stats_episodes must be positive");
    if (latent_time_of(model.world.frames) % model.backbone.chunk_size != 0)
        throw ConfigError("latent clip length must divide by the generation chunk size");
    if (rollout.capacity < model.backbone.chunk_size)
        throw ConfigError("rollout.capacity must cover at least one chunk");
    if (rollout.denoise_steps <= 0) throw ConfigError("rollout.denoise_steps must be positive");
    // the eval seed ranges must not leak into the training range
    const uint64_t t0 = data.seed0, t1 = data.seed0 + uint64_t(data.episodes);
    for (auto [lo, n] : {std::pair<uint64_t, int>{eval.seed0, eval.episodes},
                         {eval.stats_seed0, eval.stats_episodes},
                         {eval.probe.seed,
                          eval.probe.train_episodes + eval.probe.holdout_episodes}}) {
        const uint64_t hi = lo + uint64_t(n);
        if (lo < t1 && t0 < hi)
            throw ConfigError("evaluation seed range overlaps the training range");
    }
}

nlohmann::json ExperimentConfig::to_json() const {
    nlohmann::json j = model.to_json();  // sections: world/codec/backbone/cond
    j["data"] = {{"episodes", data.episodes}, {"seed0", data.seed0}};
    j["codec_train"] = {{"steps", codec_train.steps},
                        {"lr", codec_train.lr},
                        {"weight_decay", codec_train.weight_decay},
                        {"clip_norm", codec_train.clip_norm},
                        {"kl_weight", codec_train.kl_weight},
                        {"log_every", codec_train.log_every},
                        {"ckpt_every", codec_train.ckpt_every},
                        {"seed", codec_train.seed}};
    j["stage1"] = {{"steps", stage1.steps},
                   {"lr", stage1.lr},
                   {"weight_decay", stage1.weight_decay},
                   {"clip_norm", stage1.clip_norm},
                   {"warmup_frac", stage1.warmup_frac},
                   {"log_every", stage1.log_every},
                   {"ckpt_every", stage1.ckpt_every},
                   {"seed", stage1.seed}};
    j["stage2"] = {{"generator_steps", stage2.generator_steps},
                   {"critic_per_gen", stage2.critic_per_gen},
                   {"lr_gen", stage2.lr_gen},
                   {"lr_critic", stage2.lr_critic},
                   {"clip_norm", stage2.clip_norm},
                   {"student_steps", stage2.student_steps},
                   {"critic_t_min", stage2.critic_t_min},
                   {"critic_t_max", stage2.critic_t_max},
                   {"log_every", stage2.log_every},
                   {"ckpt_every", stage2.ckpt_every},
                   {"seed", stage2.seed}};
    j["rollout"] = {{"capacity", rollout.capacity},
                    {"denoise_steps", rollout.denoise_steps},
                    {"cfg_branch", rollout.sampler.cfg_branch},
                    {"cfg_w", rollout.sampler.cfg_w}};
    j["eval"] = {{"episodes", eval.episodes},
                 {"seed0", eval.seed0},
                 {"sample_steps", eval.sample_steps},
                 {"cfg_branch", eval.cfg_branch},
                 {"cfg_w", eval.cfg_w},
                 {"horizon_chunks", eval.horizon_chunks},
                 {"stats_episodes", eval.stats_episodes},
                 {"stats_seed0", eval.stats_seed0},
                 {"drift_band", eval.drift_band},
                 {"probe",
                  {{"ridge", eval.probe.ridge},
                   {"curv_min", eval.probe.curv_min},
                   {"train_episodes", eval.probe.train_episodes},
                   {"holdout_episodes", eval.probe.holdout_episodes},
                   {"seed", eval.probe.seed}}}};
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    c.model = ModelConfig::from_json(j);
    if (j.contains("data")) {
        const auto& d = j.at("data");
        c.data.episodes = d.value("episodes", c.data.episodes);
        c.data.seed0 = d.value("seed0", c.data.seed0);
    }
    if (j.contains("codec_train")) {
        const auto& t = j.at("codec_train");
        c.codec_train.steps = t.value("steps", c.codec_train.steps);
        c.codec_train.lr = t.value("lr", c.codec_train.lr);
        c.codec_train.weight_decay = t.value("weight_decay", c.codec_train.weight_decay);
        c.codec_train.clip_norm = t.value("clip_norm", c.codec_train.clip_norm);
        c.codec_train.kl_weight = t.value("kl_weight", c.codec_train.kl_weight);
        c.codec_train.log_every = t.value("log_every", c.codec_train.log_every);
        c.codec_train.ckpt_every = t.value("ckpt_every", c.codec_train.ckpt_every);
        c.codec_train.seed = t.value("seed", c.codec_train.seed);
    }
    if (j.contains("stage1")) {
        const auto& s = j.at("stage1");
        c.stage1.steps = s.value("steps", c.stage1.steps);
        c.stage1.lr = s.value("lr", c.stage1.lr);
        c.stage1.weight_decay = s.value("weight_decay", c.stage1.weight_decay);
        c.stage1.clip_norm = s.value("clip_norm", c.stage1.clip_norm);
        c.stage1.warmup_frac = s.value("warmup_frac", c.stage1.warmup_frac);
        c.stage1.log_every = s.value("log_every", c.stage1.log_every);
        c.stage1.ckpt_every = s.value("ckpt_every", c.stage1.ckpt_every);
        c.stage1.seed = s.value("seed", c.stage1.seed);
    }
    if (j.contains("stage2")) {
        const auto& s = j.at("stage2");
        c.stage2.generator_steps = s.value("generator_steps", c.stage2.generator_steps);
        c.stage2.critic_per_gen = s.value("critic_per_gen", c.stage2.critic_per_gen);
        c.stage2.lr_gen = s.value("lr_gen", c.stage2.lr_gen);
        c.stage2.lr_critic = s.value("lr_critic", c.stage2.lr_critic);
        c.stage2.clip_norm = s.value("clip_norm", c.stage2.clip_norm);
        c.stage2.student_steps = s.value("student_steps", c.stage2.student_steps);
        c.stage2.critic_t_min = s.value("critic_t_min", c.stage2.critic_t_min);
        c.stage2.critic_t_max = s.value("critic_t_max", c.stage2.critic_t_max);
        c.stage2.log_every = s.value("log_every", c.stage2.log_every);
        c.stage2.ckpt_every = s.value("ckpt_every", c.stage2.ckpt_every);
        c.stage2.seed = s.value("seed", c.stage2.seed);
    }
    if (j.contains("rollout")) {
        const auto& r = j.at("rollout");
        c.rollout.capacity = r.value("capacity", c.rollout.capacity);
        c.rollout.denoise_steps = r.value("denoise_steps", c.rollout.denoise_steps);
        c.rollout.sampler.cfg_branch = r.value("cfg_branch", c.rollout.sampler.cfg_branch);
        c.rollout.sampler.cfg_w = r.value("cfg_w", c.rollout.sampler.cfg_w);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        c.eval.episodes = e.value("episodes", c.eval.episodes);
        c.eval.seed0 = e.value("seed0", c.eval.seed0);
        c.eval.sample_steps = e.value("sample_steps", c.eval.sample_steps);
        c.eval.cfg_branch = e.value("cfg_branch", c.eval.cfg_branch);
        c.eval.cfg_w = e.value("cfg_w", c.eval.cfg_w);
        c.eval.horizon_chunks = e.value("horizon_chunks", c.eval.horizon_chunks);
        c.eval.stats_episodes = e.value("stats_episodes", c.eval.stats_episodes);
        c.eval.stats_seed0 = e.value("stats_seed0", c.eval.stats_seed0);
        c.eval.drift_band = e.value("drift_band", c.eval.drift_band);
        if (e.contains("probe")) {
            const auto& p = e.at("probe");
            c.eval.probe.ridge = p.value("ridge", c.eval.probe.ridge);
            c.eval.probe.curv_min = p.value("curv_min", c.eval.probe.curv_min);
            c.eval.probe.train_episodes = p.value("train_episodes", c.eval.probe.train_episodes);
            c.eval.probe.holdout_episodes =
                p.value("holdout_episodes", c.eval.probe.holdout_episodes);
            c.eval.probe.seed = p.value("seed", c.eval.probe.seed);
        }
    }
    c.finalize();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse failure in " + path + ": " + e.what());
    }
    return from_json(j);
}

void ExperimentConfig::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write config file: " + path);
    out << to_json().dump(2) << "\n";
}

std::string ExperimentConfig::hash() const { return hash_hex(to_json().dump()); }

void ExperimentConfig::write_resolved(const std::string& out_dir) const {
    std::filesystem::create_directories(out_dir);
    save(out_dir + "/resolved_config.json");
}

std::vector<uint64_t> ExperimentConfig::train_seeds() const {
    std::vector<uint64_t> s(size_t(data.episodes));
    for (size_t i = 0; i < s.size(); ++i) s[i] = data.seed0 + uint64_t(i);
    return s;
}

std::vector<uint64_t> ExperimentConfig::eval_seeds() const {
    std::vector<uint64_t> s(size_t(eval.episodes));
    for (size_t i = 0; i < s.size(); ++i) s[i] = eval.seed0 + uint64_t(i);
    return s;
}

}  // namespace xworld
