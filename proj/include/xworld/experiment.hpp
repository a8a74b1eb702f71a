#pragma once

#include "xworld/harness.hpp"
#include "xworld/model.hpp"
#include "xworld/rollout.hpp"
#include "xworld/training.hpp"

namespace xworld {

// Dataset definition: the world is procedural, so a dataset is a seed range.
struct DataConfig {
    int episodes = 2000;
    uint64_t seed0 = 100000;
};

// Evaluation settings shared by the report runner and the acceptance gates.
struct EvalConfig {
    int episodes = 24;           // held-out command episodes per run
    uint64_t seed0 = 500000;     // held-out seed range (disjoint from training)
    int sample_steps = 50;       // full sampler steps (stage-1 generation)
    int cfg_branch = 1;          // guidance branch for generation (1 = static)
    double cfg_w = 3.0;
    int horizon_chunks = 8;      // stage-2 long-rollout length in chunks
    int stats_episodes = 64;     // dataset-statistics reference set
    uint64_t stats_seed0 = 700000;
    double drift_band = 0.30;    // per-chunk mean/var tolerance vs dataset stats
    ProbeConfig probe;
};

// One structured config file with named sections drives every CLI entry
// point; each run writes its resolved form beside its outputs.
struct ExperimentConfig {
    ModelConfig model;
    DataConfig data;
    CodecTrainConfig codec_train;
    Stage1Config stage1;
    Stage2Config stage2;
    RolloutConfig rollout;
    EvalConfig eval;

    // Fill derived model fields and cross-check section consistency.
    void finalize();

    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const std::string& path);
    void save(const std::string& path) const;

    // Identity of the fully resolved config (out_dirs excluded: they are
    // run-time placement, not experiment identity).
    std::string hash() const;
    void write_resolved(const std::string& out_dir) const;

    std::vector<uint64_t> train_seeds() const;
    std::vector<uint64_t> eval_seeds() const;
};

}  // namespace xworld
