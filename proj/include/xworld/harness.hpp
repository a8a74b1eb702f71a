#pragma once

#include "xworld/episode_io.hpp"

#include "json.hpp"

namespace xworld {

// ---------------------------------------------------------------------------
// Motion probe
// ---------------------------------------------------------------------------
// A deliberately small measurement instrument: a photometric ground-plane
// ego-motion estimate from consecutive front-view frames, ridge-regressed
// onto the commanded (velocity, curvature). It is trained and gated on
// ground-truth synthetic clips only, then frozen before it ever sees
// generated video, so action metrics inherit a verified error bar.

struct ProbeConfig {
    double ridge = 1e-4;
    double curv_min = 0.02;  // |commanded curvature| that counts for sign accuracy
    int train_episodes = 80;
    int holdout_episodes = 40;
    uint64_t seed = 0;
};

// Direct two-frame ego-motion estimate from the front view: hypothesize a
// (forward, yaw) step, warp the ground plane, minimize photometric error.
// Units are meters / radians per frame. The attitude of each frame is taken
// as known (from the commanded roll/pitch channels); getting it right matters
// because the assumed horizon sets every ground depth.
struct FrameAttitude {
    double roll = 0, pitch = 0;
};
struct EgoMotionEstimate {
    double fwd = 0;
    double yaw = 0;
    double residual = 0;  // mean absolute photometric error at the optimum
};
EgoMotionEstimate estimate_ego_motion(const float* f0, const float* f1, int H, int W,
                                      FrameAttitude a0 = {}, FrameAttitude a1 = {});

struct MotionProbe {
    ProbeConfig cfg;
    int n_features = 0;
    std::vector<double> weights;  // [(n_features + 1) x 2], bias row last

    // held-out gate statistics, fixed at training time
    double velocity_mae = 0;
    double mean_speed = 0;
    double curvature_sign_acc = 0;

    bool gate_passed() const {
        return velocity_mae <= 0.10 * mean_speed && curvature_sign_acc >= 0.95;
    }

    // (velocity, curvature) estimate for one consecutive frame pair
    std::pair<double, double> estimate_pair(const float* f0, const float* f1, int H, int W,
                                            FrameAttitude a0 = {}, FrameAttitude a1 = {}) const;
    // per-pair estimates over one view of a video tensor [V, F, H, W, 3];
    // commanded actions, when given, supply the attitude channels
    std::vector<std::pair<double, double>> estimate(const Tensor<float>& video, int view = 0,
                                                    const std::vector<ActionFrame>* actions =
                                                        nullptr) const;

    nlohmann::json to_json() const;
    static MotionProbe from_json(const nlohmann::json& j);
};

// Feature vector the probe regresses from: the raw ego-motion estimate plus a
// derived curvature ratio. Exposed for tests.
std::vector<double> motion_features(const float* f0, const float* f1, int H, int W,
                                    FrameAttitude a0 = {}, FrameAttitude a1 = {});

// Trains on generated ground-truth episodes and verifies the gate on a
// held-out set; throws InvariantError when the gate fails since every action
// metric downstream would be meaningless.
MotionProbe train_probe(const WorldConfig& wcfg, const ProbeConfig& pcfg);

// ---------------------------------------------------------------------------
// Maneuver vocabulary
// ---------------------------------------------------------------------------

enum class Maneuver : int { Left = 0, Straight = 1, Right = 2, Stop = 3, LaneChange = 4 };
const char* maneuver_name(Maneuver m);

struct ManeuverThresholds {
    double stop_speed = 2.0;      // min smoothed speed below this => stop
    double turn_heading = 0.12;   // |net heading change| above this => turn, radians
    double lane_swing = 0.07;     // max |heading excursion| for a returning s-curve
};

// Classify a (velocity, curvature) sequence sampled at dt.
Maneuver classify_maneuver(const std::vector<std::pair<double, double>>& vk, double dt,
                           const ManeuverThresholds& th = {});
Maneuver maneuver_of_family(ScenarioFamily f);

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct ActionFollowing {
    double velocity_mae = 0;
    double curvature_sign_acc = 0;  // over pairs with |commanded curvature| >= curv_min
    int sign_pairs = 0;
    Maneuver commanded = Maneuver::Straight;
    Maneuver observed = Maneuver::Straight;
    bool maneuver_match = false;
};

// Probe the generated video against the commanded action sequence.
// video: [V, F, H, W, 3]; one action per frame; pair (f, f+1) is driven by
// actions[f].
ActionFollowing action_following(const MotionProbe& probe, const Tensor<float>& video,
                                 const std::vector<ActionFrame>& commanded, double fps,
                                 const ManeuverThresholds& th = {});

struct ControlAdherence {
    double agent_hit_rate = 0;
    int agent_boxes = 0;       // projected, visible boxes that were scored
    double lane_alignment = 0;
    int lane_samples = 0;
    bool applicable = false;   // false when no controls were visible/scoreable
};

// Projects the controlled scene layout into the generated frames with ego
// poses integrated from the commanded actions, and scores color agreement.
// agents: per video frame (empty inner lists allowed).
ControlAdherence control_adherence(const Tensor<float>& video,
                                   const std::vector<std::vector<AgentSpec>>& agents,
                                   const std::vector<StaticElement>& statics,
                                   const std::vector<CameraSpec>& rig,
                                   const std::vector<ActionFrame>& actions, double fps,
                                   double attitude_limit);

// Ego trajectory integrated from commanded actions; the initial pose inherits
// the first action's attitude channels (matching the world generator).
std::vector<EgoState> integrate_actions(const std::vector<ActionFrame>& actions, int frames,
                                        double fps, double attitude_limit);

struct CrossViewConsistency {
    double overlap_mse = 0;
    int64_t compared_pixels = 0;
    bool applicable = false;
};

// Ground-plane reprojection agreement between the front view and each side
// view, using the known rig and ego attitude.
CrossViewConsistency crossview_consistency(const Tensor<float>& video,
                                           const std::vector<CameraSpec>& rig,
                                           const std::vector<EgoState>& ego);

struct DatasetStats {
    double pixel_mean = 0;
    double pixel_var = 0;
    nlohmann::json to_json() const;
    static DatasetStats from_json(const nlohmann::json& j);
};

DatasetStats dataset_stats(const WorldConfig& cfg, int episodes, uint64_t seed0);

struct DriftReport {
    std::vector<double> mean_divergence;  // per chunk: |chunk mean - dataset mean|
    std::vector<double> var_ratio;        // per chunk: chunk var / dataset var
    std::vector<double> probe_speed;      // per chunk: mean probe velocity estimate
    bool within(double rel_band) const;   // every chunk's mean/var within the band
};

// Per-chunk statistics of a long rollout against the dataset reference.
// chunk_frames = video frames per reported chunk.
DriftReport long_horizon_drift(const Tensor<float>& video, int chunk_frames,
                               const DatasetStats& ref, const MotionProbe* probe = nullptr);

// Peak signal-to-noise ratio between two same-shape tensors on the [0, 1]
// pixel scale; identical inputs report 99 dB.
double psnr(const Tensor<float>& a, const Tensor<float>& b);

// Fraction of frames whose sky region (top quarter, all views) classifies to
// the commanded (weather, time_of_day) under the nearest-palette rule.
double appearance_adherence(const Tensor<float>& video, const AppearanceSpec& app);
// The classifier itself, exposed for calibration tests.
std::pair<Weather, TimeOfDay> classify_sky(const float* frame, int H, int W);

}  // namespace xworld
