#pragma once

#include "xworld/experiment.hpp"

namespace xworld {

// Quantitative report for one checkpoint: scalar metrics, per-episode
// breakdown, and per-metric plot series. Reproducible given (checkpoint,
// config, seed): the JSON bytes are identical across reruns.
struct EvalReport {
    std::string mode;  // "stage1" or "stage2"
    std::string config_hash;
    std::string checkpoint_hash;
    nlohmann::json metrics;      // flat map: name -> scalar
    nlohmann::json per_episode;  // array of per-episode objects
    nlohmann::json series;       // name -> {"x": [...], "y": [...]}

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
};

// Minimal schema contract for the published report format, and its checker.
nlohmann::json eval_report_schema();
bool validate_report(const nlohmann::json& report, const nlohmann::json& schema,
                     std::string* why = nullptr);

// Writes report.json + metrics.csv + one "<name>.xy" file per series, plus
// the schema file, into out_dir.
void write_report(const EvalReport& rep, const std::string& out_dir);

// Human-readable summary of a report (for the report CLI).
std::string report_summary(const nlohmann::json& report);

// Shared measurement instruments, computed once from ground truth.
struct EvalContext {
    MotionProbe probe;
    DatasetStats stats;
    double crossview_floor = 0;  // ground-truth overlap MSE
};

// Builds the instruments from ground truth; a pretrained probe may be passed
// to skip probe training.
EvalContext make_eval_context(const ExperimentConfig& cfg,
                              const MotionProbe* pretrained = nullptr);

// Runs every applicable metric for the checkpoint and writes the report
// bundle into out_dir. mode "stage1" evaluates full-sampler generation;
// "stage2" evaluates few-step chunked rollouts plus long-horizon drift.
// A prebuilt context may be passed to avoid retraining the probe.
EvalReport run_eval(const ExperimentConfig& cfg, const std::string& ckpt_path,
                    const std::string& mode, const std::string& out_dir,
                    const EvalContext* ctx = nullptr);

}  // namespace xworld
