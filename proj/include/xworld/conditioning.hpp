#pragma once

#include "xworld/codec.hpp"
#include "xworld/errors.hpp"
#include "xworld/geometry.hpp"
#include "xworld/ops.hpp"
#include "xworld/params.hpp"
#include "xworld/synthworld.hpp"

namespace xworld {

inline double symlog(double x) {
    if (!std::isfinite(x)) throw std::invalid_argument("symlog: non-finite input");
    return x >= 0 ? std::log1p(x) : -std::log1p(-x);
}
inline double symexp(double y) {
    if (!std::isfinite(y)) throw std::invalid_argument("symexp: non-finite input");
    return y >= 0 ? std::expm1(y) : -std::expm1(-y);
}

struct FourierSpec {
    int octaves = 6;
    double base_freq = 1.0;
};

// [sin(2^k pi f x), cos(2^k pi f x)] for k = 0..K-1.
inline void fourier_features(double x, const FourierSpec& spec, double* out) {
    if (spec.octaves < 1) throw std::invalid_argument("fourier: K must be >= 1");
    double f = spec.base_freq * M_PI * x;
    for (int k = 0; k < spec.octaves; ++k) {
        out[2 * k] = std::sin(f);
        out[2 * k + 1] = std::cos(f);
        f *= 2.0;
    }
}

inline std::vector<double> fourier_features(double x, const FourierSpec& spec) {
    std::vector<double> out(2 * size_t(spec.octaves));
    fourier_features(x, spec, out.data());
    return out;
}

struct CondConfig {
    int d_model = 128;
    int d_cond = 128;
    int fourier_k = 6;
    int polyline_points = 8;
    double scene_extent = 60.0;
    double extent_norm = 5.0;  // agent half-extent normalizer
    int max_latent_frames = 64;
    double dropout_dynamic = 0.1;
    double dropout_static = 0.1;
    double dropout_appearance = 0.1;
};

enum class CondModality : int { Dynamic = 0, Static = 1, Appearance = 2 };
constexpr int kNumCondModalities = 3;

// Agent attributes already moved into the conditioning ego frame and
// normalized to roughly [-1, 1].
struct DynamicTokenInput {
    int category = 0;
    double x = 0, y = 0, heading = 0;
    double ext_x = 0, ext_y = 0;
    int latent_frame = 0;
};

template <typename T>
struct ConditionTokens {
    CondModality modality = CondModality::Dynamic;
    ag::Var<T> tokens;  // [count, d_model], count >= 1
    bool is_null = false;
};

inline AgentSpec to_ego_frame(const AgentSpec& a, const EgoState& ref) {
    AgentSpec out = a;
    double dx = a.cx - ref.x, dy = a.cy - ref.y;
    double c = std::cos(-ref.heading), s = std::sin(-ref.heading);
    out.cx = c * dx - s * dy;
    out.cy = s * dx + c * dy;
    out.heading = wrap_angle(a.heading - ref.heading);
    double vxr = c * a.vx - s * a.vy, vyr = s * a.vx + c * a.vy;
    out.vx = vxr;
    out.vy = vyr;
    return out;
}

// All condition encoders of the model. Owns its parameter registry slice via
// the shared registry passed in.
template <typename T>
class Conditioning {
public:
    Conditioning(const CondConfig& cfg, ParamRegistry<T>& reg) : cfg_(cfg) {
        const int64_t twoK = 2 * cfg.fourier_k;
        const int64_t d = cfg.d_model;
        const int64_t dc = cfg.d_cond;
        act_w1_ = reg.add_linear_weight("cond.act.w1", 4 * twoK, dc);
        act_b1_ = reg.add_zeros("cond.act.b1", {dc});
        act_w2_ = reg.add_linear_weight("cond.act.w2", dc, dc);
        act_b2_ = reg.add_zeros("cond.act.b2", {dc});
        t_w1_ = reg.add_linear_weight("cond.t.w1", kTimeDim, dc);
        t_b1_ = reg.add_zeros("cond.t.b1", {dc});
        t_w2_ = reg.add_linear_weight("cond.t.w2", dc, dc);
        t_b2_ = reg.add_zeros("cond.t.b2", {dc});
        cam_w1_ = reg.add_linear_weight("cond.cam.w1", 8, d);
        cam_b1_ = reg.add_zeros("cond.cam.b1", {d});
        cam_w2_ = reg.add_linear_weight("cond.cam.w2", d, d);
        cam_b2_ = reg.add_zeros("cond.cam.b2", {d});
        dyn_cat_ = reg.add_normal("cond.dyn.cat", {kNumAgentCategories, kCatDim}, 0.02);
        dyn_frame_ = reg.add_normal("cond.dyn.frame", {cfg.max_latent_frames, kFrameDim}, 0.02);
        const int64_t dyn_in = kCatDim + 5 * twoK + kFrameDim;
        dyn_w1_ = reg.add_linear_weight("cond.dyn.w1", dyn_in, d);
        dyn_b1_ = reg.add_zeros("cond.dyn.b1", {d});
        dyn_w2_ = reg.add_linear_weight("cond.dyn.w2", d, d);
        dyn_b2_ = reg.add_zeros("cond.dyn.b2", {d});
        dyn_null_ = reg.add_normal("cond.dyn.null", {1, d}, 0.02);
        sta_cat_ = reg.add_normal("cond.sta.cat", {kNumStaticCategories, kCatDim}, 0.02);
        const int64_t sta_in = kCatDim + 2 * cfg.polyline_points * twoK;
        sta_w1_ = reg.add_linear_weight("cond.sta.w1", sta_in, d);
        sta_b1_ = reg.add_zeros("cond.sta.b1", {d});
        sta_w2_ = reg.add_linear_weight("cond.sta.w2", d, d);
        sta_b2_ = reg.add_zeros("cond.sta.b2", {d});
        sta_null_ = reg.add_normal("cond.sta.null", {1, d}, 0.02);
        app_weather_ = reg.add_normal("cond.app.weather", {kNumWeather, d}, 0.02);
        app_tod_ = reg.add_normal("cond.app.tod", {kNumTimeOfDay, d}, 0.02);
        app_locale_ = reg.add_normal("cond.app.locale", {kNumLocale, d}, 0.02);
        app_null_ = reg.add_normal("cond.app.null", {1, d}, 0.02);
    }

    const CondConfig& config() const { return cfg_; }

    // Per-latent-frame adaLN input: pooled action embedding + flow-timestep
    // embedding. flow_t has one entry per latent frame (a scalar t is
    // broadcast by the caller).
    ag::Var<T> encode_actions(const std::vector<ActionFrame>& actions,
                              const std::vector<double>& flow_t) {
        const int F = int(actions.size());
        if (F < 1 || F % 2 != 1) throw ShapeError("action count must be 1 + 2k");
        const int LT = latent_time_of(F);
        std::vector<std::vector<ActionFrame>> spans;
        spans.push_back({actions[0]});
        for (int k = 1; k < LT; ++k)
            spans.push_back({actions[size_t(2 * k - 1)], actions[size_t(2 * k)]});
        return encode_action_spans(spans, flow_t);
    }

    // Same encoder for arbitrary latent-frame subsequences (chunked rollout):
    // spans[i] holds the raw action frames pooled into latent frame i. Pooling
    // averages the per-frame MLP embeddings, identical to the full-sequence
    // path.
    ag::Var<T> encode_action_spans(const std::vector<std::vector<ActionFrame>>& spans,
                                   const std::vector<double>& flow_t) {
        const int LT = int(spans.size());
        if (LT < 1) throw ShapeError("action spans must be non-empty");
        if (int(flow_t.size()) != LT) throw ShapeError("flow_t length != latent frames");
        const int twoK = 2 * cfg_.fourier_k;
        FourierSpec fs{cfg_.fourier_k, 1.0};
        int total = 0;
        for (const auto& s : spans) {
            if (s.empty()) throw ShapeError("empty action span");
            total += int(s.size());
        }
        Tensor<T> feats({total, int64_t(4 * twoK)});
        std::vector<double> buf(static_cast<size_t>(twoK));
        int row = 0;
        for (const auto& s : spans)
            for (const ActionFrame& af : s) {
                const double chans[4] = {af.velocity, af.curvature, af.roll, af.pitch};
                for (int c = 0; c < 4; ++c) {
                    fourier_features(symlog(chans[c]), fs, buf.data());
                    for (int i = 0; i < twoK; ++i)
                        feats.at2(row, c * twoK + i) = static_cast<T>(buf[i]);
                }
                ++row;
            }
        auto rows = ag::constant(std::move(feats));
        auto emb = ag::linear(ag::silu(ag::linear(rows, act_w1_, act_b1_)), act_w2_, act_b2_);
        std::vector<ag::Var<T>> pooled;
        int off = 0;
        for (const auto& s : spans) {
            int n = int(s.size());
            auto part = ag::slice_rows(emb, off, n);
            pooled.push_back(n == 1 ? part
                                    : ag::scale(ag::sum_list<T>(split_rows(part, n)), 1.0 / n));
            off += n;
        }
        auto act = ag::concat_rows(pooled);

        Tensor<T> temb({LT, int64_t(kTimeDim)});
        for (int k = 0; k < LT; ++k) timestep_embedding(flow_t[size_t(k)], temb.ptr() + k * kTimeDim);
        auto trows = ag::constant(std::move(temb));
        auto tpart = ag::linear(ag::silu(ag::linear(trows, t_w1_, t_b1_)), t_w2_, t_b2_);
        return ag::add(act, tpart);
    }

    ag::Var<T> encode_actions(const std::vector<ActionFrame>& actions, double flow_t) {
        std::vector<double> ts(size_t(latent_time_of(int(actions.size()))), flow_t);
        return encode_actions(actions, ts);
    }

    // Per-view additive embedding [V, d_model].
    ag::Var<T> encode_camera(const std::vector<CameraSpec>& rig) {
        if (rig.empty()) throw std::invalid_argument("encode_camera: empty rig");
        Tensor<T> feats({int64_t(rig.size()), 8});
        for (size_t v = 0; v < rig.size(); ++v) {
            const CameraSpec& c = rig[v];
            if (!c.valid()) throw std::invalid_argument("encode_camera: invalid camera");
            T* row = feats.ptr() + v * 8;
            row[0] = T(c.fx / c.image_w);
            row[1] = T(c.fy / c.image_h);
            row[2] = T(c.cx / c.image_w);
            row[3] = T(c.cy / c.image_h);
            row[4] = T(c.yaw / M_PI);
            row[5] = T(c.tx / cfg_.scene_extent);
            row[6] = T(c.ty / cfg_.scene_extent);
            row[7] = T(c.height / cfg_.scene_extent);
        }
        auto rows = ag::constant(std::move(feats));
        return ag::linear(ag::silu(ag::linear(rows, cam_w1_, cam_b1_)), cam_w2_, cam_b2_);
    }

    ConditionTokens<T> encode_dynamic(const std::vector<DynamicTokenInput>& agents) {
        if (agents.empty())
            return {CondModality::Dynamic, gather_null(dyn_null_), true};
        const int twoK = 2 * cfg_.fourier_k;
        FourierSpec fs{cfg_.fourier_k, 1.0};
        auto idx = std::make_shared<std::vector<int32_t>>();
        auto fidx = std::make_shared<std::vector<int32_t>>();
        Tensor<T> feats({int64_t(agents.size()), int64_t(5 * twoK)});
        std::vector<double> buf(static_cast<size_t>(twoK));
        for (size_t i = 0; i < agents.size(); ++i) {
            const auto& a = agents[i];
            if (a.category < 0 || a.category >= kNumAgentCategories)
                throw VocabularyError("unknown agent category");
            if (a.latent_frame < 0 || a.latent_frame >= cfg_.max_latent_frames)
                throw ShapeError("agent latent frame out of range");
            idx->push_back(int32_t(a.category));
            fidx->push_back(int32_t(a.latent_frame));
            const double scalars[5] = {a.x, a.y, a.heading, a.ext_x, a.ext_y};
            for (int c = 0; c < 5; ++c) {
                fourier_features(scalars[c], fs, buf.data());
                for (int k = 0; k < twoK; ++k)
                    feats.at2(int64_t(i), c * twoK + k) = static_cast<T>(buf[k]);
            }
        }
        auto cat = ag::gather_rows(dyn_cat_, idx);
        auto frame = ag::gather_rows(dyn_frame_, fidx);
        auto pos = ag::constant(std::move(feats));
        auto joined = concat_cols({cat, pos, frame});
        auto tok = ag::linear(ag::silu(ag::linear(joined, dyn_w1_, dyn_b1_)), dyn_w2_, dyn_b2_);
        return {CondModality::Dynamic, tok, false};
    }

    // Canonical resample (P arc-uniform points, first point nearer the ego)
    // happens here; inputs are world-frame elements plus the conditioning
    // ego pose.
    ConditionTokens<T> encode_static(const std::vector<StaticElement>& elements,
                                     const EgoState& ref) {
        if (elements.empty())
            return {CondModality::Static, gather_null(sta_null_), true};
        const int P = cfg_.polyline_points;
        const int twoK = 2 * cfg_.fourier_k;
        FourierSpec fs{cfg_.fourier_k, 1.0};
        auto idx = std::make_shared<std::vector<int32_t>>();
        Tensor<T> feats({int64_t(elements.size()), int64_t(2 * P * twoK)});
        std::vector<double> buf(static_cast<size_t>(twoK));
        for (size_t e = 0; e < elements.size(); ++e) {
            auto pts = canonical_polyline(elements[e].polyline, ref, P);
            idx->push_back(int32_t(elements[e].category));
            for (int p = 0; p < P; ++p) {
                const double scalars[2] = {pts[size_t(p)].x / cfg_.scene_extent,
                                           pts[size_t(p)].y / cfg_.scene_extent};
                for (int c = 0; c < 2; ++c) {
                    fourier_features(scalars[c], fs, buf.data());
                    for (int k = 0; k < twoK; ++k)
                        feats.at2(int64_t(e), (p * 2 + c) * twoK + k) = static_cast<T>(buf[k]);
                }
            }
        }
        auto cat = ag::gather_rows(sta_cat_, idx);
        auto pos = ag::constant(std::move(feats));
        auto joined = concat_cols({cat, pos});
        auto tok = ag::linear(ag::silu(ag::linear(joined, sta_w1_, sta_b1_)), sta_w2_, sta_b2_);
        return {CondModality::Static, tok, false};
    }

    ConditionTokens<T> encode_appearance(const AppearanceSpec& app) {
        int w = int(app.weather), t = int(app.time_of_day), l = int(app.locale);
        if (w < 0 || w >= kNumWeather || t < 0 || t >= kNumTimeOfDay || l < 0 || l >= kNumLocale)
            throw VocabularyError("appearance token out of vocabulary");
        auto wi = std::make_shared<std::vector<int32_t>>(std::vector<int32_t>{int32_t(w)});
        auto ti = std::make_shared<std::vector<int32_t>>(std::vector<int32_t>{int32_t(t)});
        auto li = std::make_shared<std::vector<int32_t>>(std::vector<int32_t>{int32_t(l)});
        auto tok = ag::concat_rows<T>({ag::gather_rows(app_weather_, wi),
                                       ag::gather_rows(app_tod_, ti),
                                       ag::gather_rows(app_locale_, li)});
        return {CondModality::Appearance, tok, false};
    }

    ConditionTokens<T> null_tokens(CondModality m) {
        switch (m) {
            case CondModality::Dynamic: return {m, gather_null(dyn_null_), true};
            case CondModality::Static: return {m, gather_null(sta_null_), true};
            case CondModality::Appearance: return {m, gather_null(app_null_), true};
        }
        throw std::invalid_argument("bad modality");
    }

    // Independent per-modality dropout to the learned null token. Actions and
    // camera are never dropped.
    void apply_condition_dropout(std::vector<ConditionTokens<T>>& conds, Rng& rng) {
        for (auto& c : conds) {
            double rate = c.modality == CondModality::Dynamic     ? cfg_.dropout_dynamic
                          : c.modality == CondModality::Static    ? cfg_.dropout_static
                                                                  : cfg_.dropout_appearance;
            if (rng.bernoulli(rate)) c = null_tokens(c.modality);
        }
    }

    static std::vector<Vec2> canonical_polyline(const std::vector<Vec2>& world_pts,
                                                const EgoState& ref, int P) {
        if (world_pts.size() < 2) throw std::invalid_argument("polyline needs >= 2 points");
        // ego frame
        std::vector<Vec2> pts;
        pts.reserve(world_pts.size());
        double c = std::cos(-ref.heading), s = std::sin(-ref.heading);
        for (const auto& p : world_pts) {
            double dx = p.x - ref.x, dy = p.y - ref.y;
            pts.push_back({c * dx - s * dy, s * dx + c * dy});
        }
        // arc-length table
        std::vector<double> arc(pts.size(), 0.0);
        for (size_t i = 1; i < pts.size(); ++i) {
            double d = std::hypot(pts[i].x - pts[i - 1].x, pts[i].y - pts[i - 1].y);
            if (d <= 0) throw std::invalid_argument("degenerate polyline: repeated points");
            arc[i] = arc[i - 1] + d;
        }
        double total = arc.back();
        std::vector<Vec2> out(static_cast<size_t>(P));
        size_t seg = 0;
        for (int p = 0; p < P; ++p) {
            double target = total * double(p) / double(P - 1);
            while (seg + 1 < arc.size() - 1 && arc[seg + 1] < target) ++seg;
            double t = (target - arc[seg]) / (arc[seg + 1] - arc[seg]);
            t = std::clamp(t, 0.0, 1.0);
            out[size_t(p)] = {pts[seg].x + t * (pts[seg + 1].x - pts[seg].x),
                              pts[seg].y + t * (pts[seg + 1].y - pts[seg].y)};
        }
        double d_first = std::hypot(out.front().x, out.front().y);
        double d_last = std::hypot(out.back().x, out.back().y);
        if (d_last < d_first) std::reverse(out.begin(), out.end());
        return out;
    }

    static constexpr int kTimeDim = 32;
    static constexpr int kCatDim = 32;
    static constexpr int kFrameDim = 16;

    static void timestep_embedding(double t, T* out) {
        // sinusoidal embedding of the flow time in [0, 1]
        const int half = kTimeDim / 2;
        for (int i = 0; i < half; ++i) {
            double freq = std::pow(1000.0, -double(i) / double(half));
            out[2 * i] = static_cast<T>(std::sin(t * 1000.0 * freq));
            out[2 * i + 1] = static_cast<T>(std::cos(t * 1000.0 * freq));
        }
    }

private:
    static std::vector<ag::Var<T>> split_rows(ag::Var<T> x, int n) {
        std::vector<ag::Var<T>> out;
        for (int i = 0; i < n; ++i) out.push_back(ag::slice_rows(x, i, 1));
        return out;
    }

    ag::Var<T> gather_null(ag::Var<T>& table) {
        auto idx = std::make_shared<std::vector<int32_t>>(std::vector<int32_t>{0});
        return ag::gather_rows(table, idx);
    }

    // column-wise concat of [N, d_i] vars sharing N
    ag::Var<T> concat_cols(std::vector<ag::Var<T>> parts) {
        int64_t n = parts[0]->val.shape[0];
        int64_t total = 0;
        for (auto& p : parts) total += p->val.shape[1];
        Tensor<T> out({n, total});
        int64_t off = 0;
        for (auto& p : parts) {
            int64_t d = p->val.shape[1];
            for (int64_t r = 0; r < n; ++r)
                std::memcpy(out.ptr() + r * total + off, p->val.ptr() + r * d, sizeof(T) * d);
            off += d;
        }
        return ag::make_op<T>(std::move(out), parts, [parts, n, total](ag::Node<T>& nd) mutable {
            int64_t off = 0;
            for (auto& p : parts) {
                int64_t d = p->val.shape[1];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (int64_t r = 0; r < n; ++r) {
                        const T* g = nd.grad.ptr() + r * total + off;
                        T* pg = p->grad.ptr() + r * d;
                        for (int64_t c = 0; c < d; ++c) pg[c] += g[c];
                    }
                }
                off += d;
            }
        });
    }

    CondConfig cfg_;
    ag::Var<T> act_w1_, act_b1_, act_w2_, act_b2_;
    ag::Var<T> t_w1_, t_b1_, t_w2_, t_b2_;
    ag::Var<T> cam_w1_, cam_b1_, cam_w2_, cam_b2_;
    ag::Var<T> dyn_cat_, dyn_frame_, dyn_w1_, dyn_b1_, dyn_w2_, dyn_b2_, dyn_null_;
    ag::Var<T> sta_cat_, sta_w1_, sta_b1_, sta_w2_, sta_b2_, sta_null_;
    ag::Var<T> app_weather_, app_tod_, app_locale_, app_null_;
};

}  // namespace xworld
