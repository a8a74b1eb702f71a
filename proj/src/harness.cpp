#include "xworld/harness.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "xworld/errors.hpp"
#include "xworld/geometry.hpp"

namespace xworld {

namespace {

// grayscale intensity at (r, c) of an [H, W, 3] frame
inline double gray(const float* f, int W, int r, int c) {
    const float* p = f + (r * W + c) * 3;
    return (double(p[0]) + double(p[1]) + double(p[2])) / 3.0;
}

inline bool color_close(const float* px, const std::array<float, 3>& want, float tol) {
    return std::abs(px[0] - want[0]) <= tol && std::abs(px[1] - want[1]) <= tol &&
           std::abs(px[2] - want[2]) <= tol;
}

const float* frame_ptr(const Tensor<float>& video, int64_t v, int64_t f) {
    const int64_t px = video.dim(2) * video.dim(3) * 3;
    return video.ptr() + (v * video.dim(1) + f) * px;
}

}  // namespace

// ---------------------------------------------------------------------------
// Motion probe
// ---------------------------------------------------------------------------

namespace {

std::vector<double> to_gray(const float* f, int H, int W) {
    std::vector<double> g(size_t(H) * W);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) g[size_t(r) * W + c] = gray(f, W, r, c);
    return g;
}

// separable 3x3 binomial blur with clamped borders
std::vector<double> blur3(const std::vector<double>& g, int H, int W) {
    std::vector<double> tmp(g.size()), out(g.size());
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            const int cl = std::max(0, c - 1), cr = std::min(W - 1, c + 1);
            tmp[size_t(r) * W + c] = 0.25 * g[size_t(r) * W + cl] + 0.5 * g[size_t(r) * W + c] +
                                     0.25 * g[size_t(r) * W + cr];
        }
    for (int r = 0; r < H; ++r) {
        const int ru = std::max(0, r - 1), rd = std::min(H - 1, r + 1);
        for (int c = 0; c < W; ++c)
            out[size_t(r) * W + c] = 0.25 * tmp[size_t(ru) * W + c] + 0.5 * tmp[size_t(r) * W + c] +
                                     0.25 * tmp[size_t(rd) * W + c];
    }
    return out;
}

// 1-d parabolic refinement around a discrete minimum
double refine_min(double s_minus, double s0, double s_plus, double step) {
    const double denom = s_minus - 2.0 * s0 + s_plus;
    if (denom <= 1e-12) return 0.0;
    return std::clamp(0.5 * (s_minus - s_plus) / denom, -1.0, 1.0) * step;
}

// single-direction estimate: anchors from f0, warped into f1; [fwd_lo, fwd_hi]
// bounds the coarse forward search (reversed-time calls expect negative fwd)
EgoMotionEstimate estimate_one_way(const float* f0, const float* f1, int H, int W,
                                   FrameAttitude a0, FrameAttitude a1, double fwd_lo,
                                   double fwd_hi) {
    if (H < 8 || W < 8) throw ShapeError("ego motion: image too small");
    // the probe reads the front camera of the standard rig; geometry is a
    // fixed function of the image size
    const CameraSpec cam = default_rig(H, W)[0];
    // a light binomial blur on both frames suppresses the point-sampled
    // rendering aliasing that otherwise shifts the photometric minimum
    const std::vector<double> g0 = blur3(to_gray(f0, H, W), H, W);
    const std::vector<double> g1 = blur3(to_gray(f1, H, W), H, W);

    // ground-plane anchor points from the first frame
    struct Samp {
        double gx, gy, val;
    };
    EgoState e0;
    e0.roll = a0.roll;
    e0.pitch = a0.pitch;
    auto make_samples = [&](int col_stride) {
        std::vector<Samp> samples;
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; c += col_stride) {
                Vec2 gpt;
                if (!unproject_ground(e0, cam, c + 0.5, r + 0.5, gpt)) continue;
                if (std::hypot(gpt.x, gpt.y) > 25.0) continue;  // fog kills contrast past this
                samples.push_back({gpt.x, gpt.y, g0[size_t(r) * W + c]});
            }
        return samples;
    };

    // photometric cost of a hypothesized per-frame (forward, yaw) step:
    // reproject the anchors into the moved camera and compare bilinearly
    auto cost_on = [&](const std::vector<Samp>& samples, double fwd, double yaw) -> double {
        EgoState e1;
        if (std::abs(yaw) > 1e-9) {
            const double radius = fwd / yaw;
            e1.x = radius * std::sin(yaw);
            e1.y = radius * (1.0 - std::cos(yaw));
        } else {
            e1.x = fwd;
        }
        e1.heading = yaw;
        e1.roll = a1.roll;
        e1.pitch = a1.pitch;
        std::vector<double> diffs;
        diffs.reserve(samples.size());
        for (const Samp& sp : samples) {
            PixelProjection pp = project_to_camera({sp.gx, sp.gy, 0.0}, e1, cam);
            if (pp.behind) continue;
            const double u = pp.u - 0.5, v = pp.v - 0.5;
            const int c0 = int(std::floor(u)), r0 = int(std::floor(v));
            if (c0 < 0 || c0 + 1 >= W || r0 < 0 || r0 + 1 >= H) continue;
            const double fu = u - c0, fv = v - r0;
            const double val =
                (1 - fv) * ((1 - fu) * g1[size_t(r0) * W + c0] + fu * g1[size_t(r0) * W + c0 + 1]) +
                fv * ((1 - fu) * g1[size_t(r0 + 1) * W + c0] +
                      fu * g1[size_t(r0 + 1) * W + c0 + 1]);
            diffs.push_back(std::abs(val - sp.val));
        }
        if (diffs.size() < samples.size() / 2 || diffs.size() < 40) return 1e9;
        // saturated loss: texture-edge mismatches (small) stay linear, while
        // pixels covered by a moving agent (large, unfixable by any ego
        // hypothesis) all plateau at the cap instead of dragging the minimum.
        // A hard trim would be worse: at zero motion only edge pixels differ,
        // and trimming throws exactly those away.
        double s = 0;
        for (double d : diffs) s += std::min(d, 0.12);
        return s / double(diffs.size());
    };

    EgoMotionEstimate out;

    // stage 1: joint coarse grid over (forward, yaw); the cost surface has
    // texture-induced local minima a greedy axis-by-axis descent can fall into
    const std::vector<Samp> coarse = make_samples(4);
    if (coarse.size() < 40) {
        out.residual = 1.0;
        return out;
    }
    double fwd = 0, yaw = 0, best = 1e18;
    for (double f = fwd_lo; f <= fwd_hi + 1e-12; f += 0.05)
        for (double y = -0.26; y <= 0.26 + 1e-12; y += 0.02) {
            const double s = cost_on(coarse, f, y);
            if (s < best) {
                best = s;
                fwd = f;
                yaw = y;
            }
        }
    if (best > 1e8) {
        out.residual = 1.0;
        return out;
    }

    // stage 2: refine on densely sampled anchors, one parameter at a time
    const std::vector<Samp> samples = make_samples(2);
    auto line_search = [&](double lo, double hi, double step, auto f) -> double {
        double best_x = lo, best_s = 1e18;
        for (double x = lo; x <= hi + 1e-12; x += step) {
            const double s = f(x);
            if (s < best_s) {
                best_s = s;
                best_x = x;
            }
        }
        if (best_x > lo + 1e-12 && best_x < hi - 1e-12 && best_s < 1e8)
            best_x += refine_min(f(best_x - step), best_s, f(best_x + step), step);
        return best_x;
    };
    fwd = line_search(fwd - 0.06, fwd + 0.06, 0.02,
                      [&](double x) { return cost_on(samples, x, yaw); });
    yaw = line_search(yaw - 0.02, yaw + 0.02, 0.004,
                      [&](double x) { return cost_on(samples, fwd, x); });
    fwd = line_search(fwd - 0.02, fwd + 0.02, 0.005,
                      [&](double x) { return cost_on(samples, x, yaw); });
    out.fwd = fwd;
    out.yaw = yaw;
    out.residual = cost_on(samples, fwd, yaw);
    return out;
}

}  // namespace

EgoMotionEstimate estimate_ego_motion(const float* f0, const float* f1, int H, int W,
                                      FrameAttitude a0, FrameAttitude a1) {
    // The inverse of an arc step (forward, yaw) is exactly (-forward, -yaw),
    // so running the estimator both ways re-measures the same motion with the
    // anchor/target sampling roles swapped; averaging cancels most of the
    // texture-sampling bias either direction picks up on its own.
    const EgoMotionEstimate a = estimate_one_way(f0, f1, H, W, a0, a1, -0.2, 1.2);
    const EgoMotionEstimate b = estimate_one_way(f1, f0, H, W, a1, a0, -1.2, 0.2);
    const bool a_ok = a.residual < 0.999, b_ok = b.residual < 0.999;
    if (a_ok && !b_ok) return a;
    if (b_ok && !a_ok) return {-b.fwd, -b.yaw, b.residual};
    EgoMotionEstimate out;
    out.fwd = 0.5 * (a.fwd - b.fwd);
    out.yaw = 0.5 * (a.yaw - b.yaw);
    out.residual = 0.5 * (a.residual + b.residual);
    return out;
}

std::vector<double> motion_features(const float* f0, const float* f1, int H, int W,
                                    FrameAttitude a0, FrameAttitude a1) {
    const EgoMotionEstimate m = estimate_ego_motion(f0, f1, H, W, a0, a1);
    // fwd/yaw are per frame; the regression head learns the fps scale. The
    // ratio term hands curvature (= yaw rate / speed) to a linear model.
    return {m.fwd, m.yaw, m.yaw / std::max(m.fwd, 0.05), m.residual};
}

std::pair<double, double> MotionProbe::estimate_pair(const float* f0, const float* f1, int H,
                                                     int W, FrameAttitude a0,
                                                     FrameAttitude a1) const {
    std::vector<double> x = motion_features(f0, f1, H, W, a0, a1);
    if (int(x.size()) != n_features) throw ShapeError("probe: feature size mismatch");
    double out[2] = {0, 0};
    for (int j = 0; j < 2; ++j) {
        for (int i = 0; i < n_features; ++i) out[j] += x[size_t(i)] * weights[size_t(i) * 2 + j];
        out[j] += weights[size_t(n_features) * 2 + j];  // bias
    }
    return {out[0], out[1]};
}

std::vector<std::pair<double, double>> MotionProbe::estimate(
    const Tensor<float>& video, int view, const std::vector<ActionFrame>* actions) const {
    if (video.rank() != 5) throw ShapeError("probe: video must be [V, F, H, W, 3]");
    if (actions && int64_t(actions->size()) < video.dim(1))
        throw ShapeError("probe: fewer actions than frames");
    const int H = int(video.dim(2)), W = int(video.dim(3));
    std::vector<std::pair<double, double>> out;
    for (int64_t f = 0; f + 1 < video.dim(1); ++f) {
        FrameAttitude a0, a1;
        if (actions) {
            // frame f's attitude is set by the action that produced it; the
            // initial pose inherits the first action's attitude channels
            const size_t prev = size_t(f > 0 ? f - 1 : 0);
            a0.roll = std::clamp((*actions)[prev].roll, -0.2, 0.2);
            a0.pitch = std::clamp((*actions)[prev].pitch, -0.2, 0.2);
            a1.roll = std::clamp((*actions)[size_t(f)].roll, -0.2, 0.2);
            a1.pitch = std::clamp((*actions)[size_t(f)].pitch, -0.2, 0.2);
        }
        out.push_back(estimate_pair(frame_ptr(video, view, f), frame_ptr(video, view, f + 1), H, W,
                                    a0, a1));
    }
    return out;
}

nlohmann::json MotionProbe::to_json() const {
    return {{"ridge", cfg.ridge},
            {"curv_min", cfg.curv_min},
            {"n_features", n_features},
            {"weights", weights},
            {"velocity_mae", velocity_mae},
            {"mean_speed", mean_speed},
            {"curvature_sign_acc", curvature_sign_acc}};
}

MotionProbe MotionProbe::from_json(const nlohmann::json& j) {
    MotionProbe p;
    p.cfg.ridge = j.at("ridge");
    p.cfg.curv_min = j.at("curv_min");
    p.n_features = j.at("n_features");
    p.weights = j.at("weights").get<std::vector<double>>();
    p.velocity_mae = j.at("velocity_mae");
    p.mean_speed = j.at("mean_speed");
    p.curvature_sign_acc = j.at("curvature_sign_acc");
    return p;
}

MotionProbe train_probe(const WorldConfig& wcfg, const ProbeConfig& pcfg) {
    MotionProbe probe;
    probe.cfg = pcfg;
    probe.n_features = 4;  // fwd, yaw, yaw/speed ratio, residual
    const int d = probe.n_features + 1;
    const int H = wcfg.image_h, W = wcfg.image_w;

    std::vector<std::vector<double>> X;
    std::vector<std::array<double, 2>> Y;
    auto collect = [&](uint64_t seed, std::vector<std::vector<double>>& xs,
                       std::vector<std::array<double, 2>>& ys) {
        Episode ep = generate_episode(wcfg, seed);
        for (int f = 0; f + 1 < wcfg.frames; ++f) {
            xs.push_back(motion_features(
                frame_ptr(ep.frames, 0, f), frame_ptr(ep.frames, 0, f + 1), H, W,
                {ep.ego[size_t(f)].roll, ep.ego[size_t(f)].pitch},
                {ep.ego[size_t(f + 1)].roll, ep.ego[size_t(f + 1)].pitch}));
            ys.push_back({ep.actions[size_t(f)].velocity, ep.actions[size_t(f)].curvature});
        }
    };
    for (int i = 0; i < pcfg.train_episodes; ++i) collect(pcfg.seed + uint64_t(i), X, Y);

    // Fit through the origin: zero photometric motion must read as zero
    // velocity and curvature, so the bias row is pinned to zero rather than
    // letting it absorb a constant offset that would misread parked clips.
    const int k = probe.n_features;
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(k, k);
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(k, 2);
    for (size_t i = 0; i < X.size(); ++i) {
        Eigen::VectorXd x(k);
        for (int j = 0; j < k; ++j) x[j] = X[i][size_t(j)];
        A.noalias() += x * x.transpose();
        B.col(0).noalias() += x * Y[i][0];
        B.col(1).noalias() += x * Y[i][1];
    }
    A.diagonal().array() += pcfg.ridge * double(X.size());
    Eigen::MatrixXd Wmat = A.ldlt().solve(B);
    probe.weights.assign(size_t(d) * 2, 0.0);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < 2; ++j) probe.weights[size_t(i) * 2 + j] = Wmat(i, j);

    // held-out gate
    double abs_err = 0, speed_sum = 0;
    int n_pairs = 0, sign_ok = 0, sign_n = 0;
    for (int i = 0; i < pcfg.holdout_episodes; ++i) {
        Episode ep = generate_episode(wcfg, pcfg.seed + uint64_t(pcfg.train_episodes + i));
        auto est = probe.estimate(ep.frames, 0, &ep.actions);
        for (size_t f = 0; f < est.size(); ++f) {
            const ActionFrame& a = ep.actions[f];
            abs_err += std::abs(est[f].first - a.velocity);
            speed_sum += a.velocity;
            ++n_pairs;
            if (std::abs(a.curvature) >= pcfg.curv_min) {
                ++sign_n;
                if ((est[f].second > 0) == (a.curvature > 0)) ++sign_ok;
            }
        }
    }
    probe.velocity_mae = n_pairs ? abs_err / n_pairs : 0.0;
    probe.mean_speed = n_pairs ? speed_sum / n_pairs : 0.0;
    probe.curvature_sign_acc = sign_n ? double(sign_ok) / sign_n : 1.0;
    if (!probe.gate_passed())
        throw InvariantError("motion probe gate failed: velocity MAE " +
                             std::to_string(probe.velocity_mae) + " (mean speed " +
                             std::to_string(probe.mean_speed) + "), curvature sign accuracy " +
                             std::to_string(probe.curvature_sign_acc));
    return probe;
}

// ---------------------------------------------------------------------------
// Maneuver vocabulary
// ---------------------------------------------------------------------------

const char* maneuver_name(Maneuver m) {
    switch (m) {
        case Maneuver::Left: return "left";
        case Maneuver::Straight: return "straight";
        case Maneuver::Right: return "right";
        case Maneuver::Stop: return "stop";
        case Maneuver::LaneChange: return "lane-change";
    }
    return "?";
}

Maneuver classify_maneuver(const std::vector<std::pair<double, double>>& vk, double dt,
                           const ManeuverThresholds& th) {
    if (vk.empty()) throw ShapeError("classify_maneuver: empty sequence");
    const int n = int(vk.size());
    double mean_v = 0;
    for (auto& p : vk) mean_v += p.first;
    mean_v /= n;
    // 3-sample smoothed minimum speed
    double min_smooth = 1e9;
    for (int i = 0; i < n; ++i) {
        double s = 0;
        int c = 0;
        for (int j = std::max(0, i - 1); j <= std::min(n - 1, i + 1); ++j, ++c) s += vk[j].first;
        min_smooth = std::min(min_smooth, s / c);
    }
    if (mean_v < 0.5 || min_smooth < th.stop_speed) return Maneuver::Stop;

    double psi = 0, swing = 0;
    for (auto& p : vk) {
        psi += p.first * p.second * dt;
        swing = std::max(swing, std::abs(psi));
    }
    if (psi > th.turn_heading) return Maneuver::Left;
    if (psi < -th.turn_heading) return Maneuver::Right;
    if (swing > th.lane_swing) return Maneuver::LaneChange;
    return Maneuver::Straight;
}

Maneuver maneuver_of_family(ScenarioFamily f) {
    switch (f) {
        case ScenarioFamily::Straight: return Maneuver::Straight;
        case ScenarioFamily::TurnLeft: return Maneuver::Left;
        case ScenarioFamily::TurnRight: return Maneuver::Right;
        case ScenarioFamily::LaneChange: return Maneuver::LaneChange;
        case ScenarioFamily::StopAndGo: return Maneuver::Stop;
        case ScenarioFamily::Stationary: return Maneuver::Stop;
    }
    return Maneuver::Straight;
}

// ---------------------------------------------------------------------------
// Action following
// ---------------------------------------------------------------------------

ActionFollowing action_following(const MotionProbe& probe, const Tensor<float>& video,
                                 const std::vector<ActionFrame>& commanded, double fps,
                                 const ManeuverThresholds& th) {
    if (video.rank() != 5 || video.dim(1) != int64_t(commanded.size()))
        throw ShapeError("action following: video frames and commanded actions disagree");
    const double dt = 1.0 / fps;
    auto est = probe.estimate(video, 0, &commanded);

    ActionFollowing out;
    std::vector<std::pair<double, double>> cmd;
    int sign_ok = 0;
    for (size_t f = 0; f < est.size(); ++f) {
        const ActionFrame& a = commanded[f];
        cmd.push_back({a.velocity, a.curvature});
        out.velocity_mae += std::abs(est[f].first - a.velocity);
        if (std::abs(a.curvature) >= probe.cfg.curv_min) {
            ++out.sign_pairs;
            if ((est[f].second > 0) == (a.curvature > 0)) ++sign_ok;
        }
    }
    out.velocity_mae /= double(est.size());
    out.curvature_sign_acc = out.sign_pairs ? double(sign_ok) / out.sign_pairs : 1.0;
    out.commanded = classify_maneuver(cmd, dt, th);
    out.observed = classify_maneuver(est, dt, th);
    out.maneuver_match = out.commanded == out.observed;
    return out;
}

// ---------------------------------------------------------------------------
// Control adherence
// ---------------------------------------------------------------------------

namespace {

struct Box2D {
    int c0, c1, r0, r1;  // clipped pixel bounds, inclusive
    double area;
    bool ok = false;
};

Box2D project_box(const AgentSpec& ag, const EgoState& ego, const CameraSpec& cam) {
    Box2D box{0, 0, 0, 0, 0, false};
    const double ch = std::cos(ag.heading), sh = std::sin(ag.heading);
    const double hgt = agent_height(ag.category);
    double minx = 1e18, maxx = -1e18, miny = 1e18, maxy = -1e18;
    for (int corner = 0; corner < 8; ++corner) {
        double sx = (corner & 1) ? ag.ext_x : -ag.ext_x;
        double sy = (corner & 2) ? ag.ext_y : -ag.ext_y;
        double z = (corner & 4) ? hgt : 0.0;
        Vec3 p{ag.cx + ch * sx - sh * sy, ag.cy + sh * sx + ch * sy, z};
        PixelProjection pp = project_to_camera(p, ego, cam);
        if (pp.behind) return box;
        minx = std::min(minx, pp.u);
        maxx = std::max(maxx, pp.u);
        miny = std::min(miny, pp.v);
        maxy = std::max(maxy, pp.v);
    }
    box.c0 = std::max(0, int(std::floor(minx)));
    box.c1 = std::min(cam.image_w - 1, int(std::ceil(maxx)));
    box.r0 = std::max(0, int(std::floor(miny)));
    box.r1 = std::min(cam.image_h - 1, int(std::ceil(maxy)));
    if (box.c1 <= box.c0 || box.r1 <= box.r0) return box;
    box.area = double(box.c1 - box.c0 + 1) * double(box.r1 - box.r0 + 1);
    box.ok = true;
    return box;
}

double fraction_matching(const float* frame, int W, const Box2D& b,
                         const std::array<float, 3>& color, float tol) {
    int64_t hits = 0, total = 0;
    for (int r = b.r0; r <= b.r1; ++r)
        for (int c = b.c0; c <= b.c1; ++c, ++total)
            if (color_close(frame + (r * W + c) * 3, color, tol)) ++hits;
    return total ? double(hits) / double(total) : 0.0;
}

}  // namespace

std::vector<EgoState> integrate_actions(const std::vector<ActionFrame>& actions, int frames,
                                        double fps, double attitude_limit) {
    if (int(actions.size()) + 1 < frames)
        throw ShapeError("integrate_actions: fewer actions than frame transitions");
    const double dt = 1.0 / fps;
    std::vector<EgoState> ego(static_cast<size_t>(frames));
    if (!actions.empty() && frames > 0) {
        ego[0].roll = std::clamp(actions[0].roll, -attitude_limit, attitude_limit);
        ego[0].pitch = std::clamp(actions[0].pitch, -attitude_limit, attitude_limit);
    }
    for (int f = 0; f + 1 < frames; ++f)
        ego[size_t(f + 1)] = step_ego(ego[size_t(f)], actions[size_t(f)], dt, attitude_limit);
    return ego;
}

ControlAdherence control_adherence(const Tensor<float>& video,
                                   const std::vector<std::vector<AgentSpec>>& agents,
                                   const std::vector<StaticElement>& statics,
                                   const std::vector<CameraSpec>& rig,
                                   const std::vector<ActionFrame>& actions, double fps,
                                   double attitude_limit) {
    if (video.rank() != 5) throw ShapeError("control adherence: bad video shape");
    const int64_t V = video.dim(0), F = video.dim(1);
    const int W = int(video.dim(3));
    const double dt = 1.0 / fps;
    constexpr float kColorTol = 0.30f;
    constexpr double kMaxRange = 45.0;

    std::vector<EgoState> ego = integrate_actions(actions, int(F), fps, attitude_limit);

    ControlAdherence out;
    int hits = 0;
    for (int64_t f = 0; f < F; ++f) {
        if (f >= int64_t(agents.size())) break;
        for (const AgentSpec& ag : agents[size_t(f)]) {
            if (std::hypot(ag.cx - ego[size_t(f)].x, ag.cy - ego[size_t(f)].y) > kMaxRange)
                continue;
            // score in the view where the box is largest
            int best_v = -1;
            Box2D best{};
            for (int64_t v = 0; v < V && v < int64_t(rig.size()); ++v) {
                Box2D b = project_box(ag, ego[size_t(f)], rig[size_t(v)]);
                if (b.ok && b.area > best.area) {
                    best = b;
                    best_v = int(v);
                }
            }
            if (best_v < 0 || best.area < 6.0) continue;
            const float* frm = frame_ptr(video, best_v, f);
            double inside = fraction_matching(frm, W, best, agent_color(ag.category), kColorTol);
            // surround ring: inflated bounds minus the box
            Box2D ring = best;
            const CameraSpec& cam = rig[size_t(best_v)];
            int mw = std::max(2, (best.c1 - best.c0) / 2), mh = std::max(2, (best.r1 - best.r0) / 2);
            ring.c0 = std::max(0, best.c0 - mw);
            ring.c1 = std::min(cam.image_w - 1, best.c1 + mw);
            ring.r0 = std::max(0, best.r0 - mh);
            ring.r1 = std::min(cam.image_h - 1, best.r1 + mh);
            int64_t ring_hits = 0, ring_n = 0;
            for (int r = ring.r0; r <= ring.r1; ++r)
                for (int c = ring.c0; c <= ring.c1; ++c) {
                    if (r >= best.r0 && r <= best.r1 && c >= best.c0 && c <= best.c1) continue;
                    ++ring_n;
                    if (color_close(frm + (r * W + c) * 3, agent_color(ag.category), kColorTol))
                        ++ring_hits;
                }
            double surround = ring_n ? double(ring_hits) / double(ring_n) : 0.0;
            ++out.agent_boxes;
            if (inside >= 0.20 && inside > surround) ++hits;
        }
    }
    out.agent_hit_rate = out.agent_boxes ? double(hits) / out.agent_boxes : 0.0;

    // lane overlay alignment: projected dashed-lane samples must land within
    // 2 px of a lane-colored pixel in the front view
    const auto lane_color = static_color(StaticCategory::LaneMarking);
    int aligned = 0;
    const CameraSpec& front = rig.at(0);
    for (int64_t f = 0; f < F; f += 2) {
        const float* frm = frame_ptr(video, 0, f);
        for (const StaticElement& se : statics) {
            if (se.category != StaticCategory::LaneMarking) continue;
            double arc = 0;
            for (size_t i = 0; i + 1 < se.polyline.size(); ++i) {
                const Vec2 a = se.polyline[i], b = se.polyline[i + 1];
                const double seg = std::hypot(b.x - a.x, b.y - a.y);
                for (double s = 0; s < seg; s += 0.25) {
                    const double arc_here = arc + s;
                    // sample only well inside the renderer's dash pattern
                    const double m = std::fmod(arc_here, 2.0);
                    if (m > 1.0) continue;
                    const double t = s / seg;
                    const double gx = a.x + t * (b.x - a.x), gy = a.y + t * (b.y - a.y);
                    if (std::hypot(gx - ego[size_t(f)].x, gy - ego[size_t(f)].y) > 20.0) continue;
                    PixelProjection pp = project_to_camera({gx, gy, 0.0}, ego[size_t(f)], front);
                    if (pp.behind) continue;
                    const int uc = int(std::lround(pp.u)), vr = int(std::lround(pp.v));
                    if (uc < 2 || uc >= front.image_w - 2 || vr < 2 || vr >= front.image_h - 2)
                        continue;
                    ++out.lane_samples;
                    bool found = false;
                    for (int drr = -2; drr <= 2 && !found; ++drr)
                        for (int dcc = -2; dcc <= 2 && !found; ++dcc)
                            if (color_close(frm + ((vr + drr) * W + uc + dcc) * 3, lane_color,
                                            kColorTol))
                                found = true;
                    if (found) ++aligned;
                }
                arc += seg;
            }
        }
    }
    out.lane_alignment = out.lane_samples ? double(aligned) / out.lane_samples : 0.0;
    out.applicable = out.agent_boxes > 0 || out.lane_samples > 0;
    return out;
}

// ---------------------------------------------------------------------------
// Cross-view consistency
// ---------------------------------------------------------------------------

CrossViewConsistency crossview_consistency(const Tensor<float>& video,
                                           const std::vector<CameraSpec>& rig,
                                           const std::vector<EgoState>& ego) {
    if (video.rank() != 5) throw ShapeError("crossview: bad video shape");
    const int64_t V = video.dim(0), F = video.dim(1);
    const int H = int(video.dim(2)), W = int(video.dim(3));
    if (int64_t(ego.size()) < F) throw ShapeError("crossview: missing ego poses");
    CrossViewConsistency out;
    if (V < 2 || rig.size() < 2) return out;

    double sum_sq = 0;
    for (int64_t f = 0; f < F; ++f) {
        const float* front = frame_ptr(video, 0, f);
        for (int64_t v = 1; v < V && v < int64_t(rig.size()); ++v) {
            const float* side = frame_ptr(video, v, f);
            for (int r = H / 2; r < H; r += 2) {
                for (int c = 0; c < W; c += 2) {
                    Vec2 g;
                    if (!unproject_ground(ego[size_t(f)], rig[size_t(v)], c + 0.5, r + 0.5, g))
                        continue;
                    if (std::hypot(g.x - ego[size_t(f)].x, g.y - ego[size_t(f)].y) > 40.0)
                        continue;
                    PixelProjection pp =
                        project_to_camera({g.x, g.y, 0.0}, ego[size_t(f)], rig[0]);
                    if (pp.behind) continue;
                    const int uc = int(std::lround(pp.u - 0.5)), vr = int(std::lround(pp.v - 0.5));
                    if (uc < 0 || uc >= W || vr < 0 || vr >= H) continue;
                    const float* pa = side + (r * W + c) * 3;
                    const float* pb = front + (vr * W + uc) * 3;
                    double d = 0;
                    for (int i = 0; i < 3; ++i)
                        d += double(pa[i] - pb[i]) * double(pa[i] - pb[i]);
                    sum_sq += d / 3.0;
                    ++out.compared_pixels;
                }
            }
        }
    }
    if (out.compared_pixels > 0) {
        out.overlap_mse = sum_sq / double(out.compared_pixels);
        out.applicable = true;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Long-horizon drift
// ---------------------------------------------------------------------------

nlohmann::json DatasetStats::to_json() const {
    return {{"pixel_mean", pixel_mean}, {"pixel_var", pixel_var}};
}

DatasetStats DatasetStats::from_json(const nlohmann::json& j) {
    DatasetStats s;
    s.pixel_mean = j.at("pixel_mean");
    s.pixel_var = j.at("pixel_var");
    return s;
}

DatasetStats dataset_stats(const WorldConfig& cfg, int episodes, uint64_t seed0) {
    double sum = 0, sum_sq = 0;
    int64_t n = 0;
    for (int i = 0; i < episodes; ++i) {
        Episode ep = generate_episode(cfg, seed0 + uint64_t(i));
        for (int64_t j = 0; j < ep.frames.numel(); ++j) {
            sum += ep.frames[j];
            sum_sq += double(ep.frames[j]) * ep.frames[j];
        }
        n += ep.frames.numel();
    }
    DatasetStats s;
    s.pixel_mean = sum / double(n);
    s.pixel_var = sum_sq / double(n) - s.pixel_mean * s.pixel_mean;
    return s;
}

bool DriftReport::within(double rel_band) const {
    for (double m : mean_divergence)
        if (m > rel_band) return false;
    for (double r : var_ratio)
        if (r < 1.0 - rel_band || r > 1.0 + rel_band) return false;
    return !mean_divergence.empty();
}

DriftReport long_horizon_drift(const Tensor<float>& video, int chunk_frames,
                               const DatasetStats& ref, const MotionProbe* probe) {
    if (video.rank() != 5) throw ShapeError("drift: bad video shape");
    if (chunk_frames <= 0) throw ConfigError("drift: chunk_frames must be positive");
    const int64_t V = video.dim(0), F = video.dim(1);
    const int64_t px = video.dim(2) * video.dim(3) * 3;
    DriftReport out;
    std::vector<std::pair<double, double>> est;
    if (probe) est = probe->estimate(video, 0);
    for (int64_t f0 = 0; f0 < F; f0 += chunk_frames) {
        const int64_t f1 = std::min(F, f0 + chunk_frames);
        double sum = 0, sum_sq = 0;
        for (int64_t v = 0; v < V; ++v)
            for (int64_t f = f0; f < f1; ++f) {
                const float* p = frame_ptr(video, v, f);
                for (int64_t i = 0; i < px; ++i) {
                    sum += p[i];
                    sum_sq += double(p[i]) * p[i];
                }
            }
        const double n = double(V * (f1 - f0) * px);
        const double mean = sum / n;
        const double var = sum_sq / n - mean * mean;
        out.mean_divergence.push_back(std::abs(mean - ref.pixel_mean) /
                                      std::max(1e-9, ref.pixel_mean));
        out.var_ratio.push_back(var / std::max(1e-9, ref.pixel_var));
        if (probe) {
            double sv = 0;
            int c = 0;
            for (int64_t f = f0; f < std::min<int64_t>(f1, int64_t(est.size())); ++f, ++c)
                sv += est[size_t(f)].first;
            out.probe_speed.push_back(c ? sv / c : 0.0);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Appearance adherence
// ---------------------------------------------------------------------------

std::pair<Weather, TimeOfDay> classify_sky(const float* frame, int H, int W) {
    // mean color of the top quarter (exact palette region in the renderer)
    double m[3] = {0, 0, 0};
    const int rows = std::max(1, H / 4);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < W; ++c)
            for (int i = 0; i < 3; ++i) m[i] += frame[(r * W + c) * 3 + i];
    for (double& v : m) v /= double(rows * W);

    double best = 1e18;
    std::pair<Weather, TimeOfDay> out{Weather::Sunny, TimeOfDay::Day};
    for (int w = 0; w < kNumWeather; ++w)
        for (int t = 0; t < kNumTimeOfDay; ++t) {
            AppearanceSpec app;
            app.weather = Weather(w);
            app.time_of_day = TimeOfDay(t);
            auto sky = sky_color(app);
            double d = 0;
            for (int i = 0; i < 3; ++i) d += (m[i] - sky[i]) * (m[i] - sky[i]);
            if (d < best) {
                best = d;
                out = {Weather(w), TimeOfDay(t)};
            }
        }
    return out;
}

double psnr(const Tensor<float>& a, const Tensor<float>& b) {
    if (a.shape != b.shape) throw ShapeError("psnr: shape mismatch");
    if (a.numel() == 0) throw ShapeError("psnr: empty tensors");
    double mse = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = double(a[i]) - double(b[i]);
        mse += d * d;
    }
    mse /= double(a.numel());
    if (mse < 1e-12) return 99.0;
    return 10.0 * std::log10(1.0 / mse);
}

double appearance_adherence(const Tensor<float>& video, const AppearanceSpec& app) {
    if (video.rank() != 5) throw ShapeError("appearance: bad video shape");
    const int64_t V = video.dim(0), F = video.dim(1);
    const int H = int(video.dim(2)), W = int(video.dim(3));
    int64_t ok = 0;
    for (int64_t v = 0; v < V; ++v)
        for (int64_t f = 0; f < F; ++f) {
            auto [w, t] = classify_sky(frame_ptr(video, v, f), H, W);
            if (w == app.weather && t == app.time_of_day) ++ok;
        }
    return double(ok) / double(V * F);
}

}  // namespace xworld
