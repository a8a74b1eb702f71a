#include "xworld/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace xworld {

const char* family_name(ScenarioFamily f) {
    switch (f) {
        case ScenarioFamily::Straight: return "straight";
        case ScenarioFamily::TurnLeft: return "turn_left";
        case ScenarioFamily::TurnRight: return "turn_right";
        case ScenarioFamily::LaneChange: return "lane_change";
        case ScenarioFamily::StopAndGo: return "stop_and_go";
        case ScenarioFamily::Stationary: return "stationary";
    }
    return "?";
}

bool WorldConfig::valid(std::string* why) const {
    auto fail = [&](const char* m) {
        if (why) *why = m;
        return false;
    };
    if (views < 1) return fail("views must be >= 1");
    if (frames < 1 || frames % 2 != 1) return fail("frames must be 1 + 2k");
    if (image_h < 8 || image_w < 8) return fail("image too small");
    if (fps <= 0) return fail("fps must be > 0");
    double wsum = 0;
    for (double w : family_weights) {
        if (w < 0) return fail("negative family weight");
        wsum += w;
    }
    if (wsum <= 0) return fail("family weights sum to zero");
    return true;
}

std::vector<CameraSpec> default_rig(int image_h, int image_w) {
    auto mk = [&](double yaw) {
        CameraSpec c;
        c.image_h = image_h;
        c.image_w = image_w;
        c.fx = 0.55 * image_w;
        c.fy = 0.55 * image_w;
        c.cx = image_w / 2.0;
        c.cy = image_h / 2.0;
        c.yaw = yaw;
        c.tx = 1.5;
        c.ty = 0.0;
        c.height = 1.4;
        return c;
    };
    return {mk(0.0), mk(55.0 * M_PI / 180.0), mk(-55.0 * M_PI / 180.0)};
}

double terrain_roll(const WorldConfig& cfg, double x, double y) {
    return cfg.terrain_roll_amp * std::sin(0.11 * x + 0.13 * y);
}
double terrain_pitch(const WorldConfig& cfg, double x, double y) {
    return cfg.terrain_pitch_amp * std::sin(0.09 * x - 0.12 * y + 1.0);
}

std::array<float, 3> agent_color(AgentCategory c) {
    switch (c) {
        case AgentCategory::Car: return {0.85f, 0.10f, 0.75f};
        case AgentCategory::Pedestrian: return {0.95f, 0.85f, 0.10f};
        case AgentCategory::Cyclist: return {0.15f, 0.85f, 0.25f};
    }
    return {0, 0, 0};
}

std::array<float, 3> static_color(StaticCategory c) {
    switch (c) {
        case StaticCategory::LaneMarking: return {0.10f, 0.90f, 0.90f};
        case StaticCategory::SolidBoundary: return {0.90f, 0.15f, 0.10f};
    }
    return {0, 0, 0};
}

std::array<float, 3> sky_color(const AppearanceSpec& app) {
    std::array<float, 3> base;
    switch (app.time_of_day) {
        case TimeOfDay::Day: base = {0.55f, 0.75f, 0.95f}; break;
        case TimeOfDay::Dusk: base = {0.90f, 0.50f, 0.30f}; break;
        case TimeOfDay::Night: base = {0.05f, 0.06f, 0.15f}; break;
    }
    auto mix = [&](std::array<float, 3> to, float a) {
        for (int i = 0; i < 3; ++i) base[i] = (1 - a) * base[i] + a * to[i];
    };
    switch (app.weather) {
        case Weather::Sunny: break;
        case Weather::Rainy: mix({0.45f, 0.45f, 0.50f}, 0.5f); break;
        case Weather::Foggy: mix({0.75f, 0.75f, 0.75f}, 0.55f); break;
    }
    return base;
}

namespace {

struct Segment {
    Vec2 a, b;
    double arc0 = 0;  // arc length at point a within its polyline
    int element = 0;
};

// Coarse spatial hash over polyline segments so per-pixel lookups stay cheap.
class PolylineIndex {
public:
    PolylineIndex(const std::vector<StaticElement>& elements, double cell) : cell_(cell) {
        for (size_t e = 0; e < elements.size(); ++e) {
            const auto& pl = elements[e].polyline;
            double arc = 0;
            for (size_t i = 0; i + 1 < pl.size(); ++i) {
                Segment s{pl[i], pl[i + 1], arc, int(e)};
                double len = std::hypot(pl[i + 1].x - pl[i].x, pl[i + 1].y - pl[i].y);
                arc += len;
                int idx = int(segments_.size());
                segments_.push_back(s);
                int x0 = cell_of(std::min(s.a.x, s.b.x)), x1 = cell_of(std::max(s.a.x, s.b.x));
                int y0 = cell_of(std::min(s.a.y, s.b.y)), y1 = cell_of(std::max(s.a.y, s.b.y));
                for (int cx = x0; cx <= x1; ++cx)
                    for (int cy = y0; cy <= y1; ++cy) grid_[key(cx, cy)].push_back(idx);
            }
        }
    }

    // Nearest segment of a given element category within `radius`; returns
    // squared distance and arc length at the closest point.
    bool query(const std::vector<StaticElement>& elements, StaticCategory cat, double x, double y,
               double radius, double& best_d2, double& arc_at) const {
        int c0x = cell_of(x - radius), c1x = cell_of(x + radius);
        int c0y = cell_of(y - radius), c1y = cell_of(y + radius);
        best_d2 = radius * radius;
        bool found = false;
        for (int cx = c0x; cx <= c1x; ++cx) {
            for (int cy = c0y; cy <= c1y; ++cy) {
                auto it = grid_.find(key(cx, cy));
                if (it == grid_.end()) continue;
                for (int idx : it->second) {
                    const Segment& s = segments_[idx];
                    if (elements[s.element].category != cat) continue;
                    double dx = s.b.x - s.a.x, dy = s.b.y - s.a.y;
                    double len2 = dx * dx + dy * dy;
                    double t = len2 > 0 ? ((x - s.a.x) * dx + (y - s.a.y) * dy) / len2 : 0;
                    t = std::clamp(t, 0.0, 1.0);
                    double px = s.a.x + t * dx - x, py = s.a.y + t * dy - y;
                    double d2 = px * px + py * py;
                    if (d2 < best_d2) {
                        best_d2 = d2;
                        arc_at = s.arc0 + t * std::sqrt(len2);
                        found = true;
                    }
                }
            }
        }
        return found;
    }

private:
    int cell_of(double v) const { return int(std::floor(v / cell_)); }
    static int64_t key(int x, int y) { return (int64_t(x) << 32) ^ uint32_t(y); }

    double cell_;
    std::vector<Segment> segments_;
    std::unordered_map<int64_t, std::vector<int>> grid_;
};

// Convex hull (monotone chain) of projected points.
std::vector<Vec2> convex_hull(std::vector<Vec2> pts) {
    std::sort(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) {
        return a.x < b.x || (a.x == b.x && a.y < b.y);
    });
    auto cross = [](const Vec2& o, const Vec2& a, const Vec2& b) {
        return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    };
    std::vector<Vec2> h(2 * pts.size());
    size_t k = 0;
    for (size_t i = 0; i < pts.size(); ++i) {
        while (k >= 2 && cross(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
        h[k++] = pts[i];
    }
    size_t lower = k + 1;
    for (size_t i = pts.size(); i-- > 1;) {
        while (k >= lower && cross(h[k - 2], h[k - 1], pts[i - 1]) <= 0) --k;
        h[k++] = pts[i - 1];
    }
    h.resize(k > 1 ? k - 1 : k);
    return h;
}

bool inside_hull(const std::vector<Vec2>& h, double x, double y, double inflate) {
    if (h.size() < 3) return false;
    for (size_t i = 0; i < h.size(); ++i) {
        const Vec2& a = h[i];
        const Vec2& b = h[(i + 1) % h.size()];
        double nx = b.y - a.y, ny = -(b.x - a.x);
        double nl = std::hypot(nx, ny);
        if (nl < 1e-12) continue;
        // hull is counter-clockwise; interior points have positive cross
        double s = ((b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x)) / nl;
        if (s < -inflate) return false;
    }
    return true;
}

}  // namespace

double agent_height(AgentCategory c) {
    switch (c) {
        case AgentCategory::Car: return 1.5;
        case AgentCategory::Pedestrian: return 1.8;
        case AgentCategory::Cyclist: return 1.7;
    }
    return 1.5;
}

void render_view(const std::vector<StaticElement>& statics, const std::vector<AgentSpec>& agents,
                 const EgoState& ego, const CameraSpec& cam, const AppearanceSpec& appearance,
                 float* out) {
    if (!cam.valid()) throw std::invalid_argument("render_view: invalid camera");
    const int H = cam.image_h, W = cam.image_w;
    const auto sky = sky_color(appearance);

    float tod_gain = appearance.time_of_day == TimeOfDay::Day    ? 1.0f
                     : appearance.time_of_day == TimeOfDay::Dusk ? 0.72f
                                                                 : 0.45f;
    std::array<float, 3> ground_base;
    switch (appearance.locale) {
        case Locale::Urban: ground_base = {0.33f, 0.33f, 0.35f}; break;
        case Locale::Rural: ground_base = {0.38f, 0.34f, 0.27f}; break;
        case Locale::Highway: ground_base = {0.29f, 0.31f, 0.33f}; break;
    }
    double fog_scale = appearance.weather == Weather::Sunny   ? 300.0
                       : appearance.weather == Weather::Rainy ? 150.0
                                                              : 50.0;

    PolylineIndex index(statics, 2.0);

    for (int r = 0; r < H; ++r) {
        for (int c = 0; c < W; ++c) {
            double u = c + 0.5, v = r + 0.5;
            float* px = out + (r * W + c) * 3;
            Vec2 g;
            if (!unproject_ground(ego, cam, u, v, g)) {
                // Sky: exact palette color in the top quarter, mild glow below.
                double t = std::max(0.0, (v - H / 4.0) / (H - H / 4.0));
                for (int i = 0; i < 3; ++i)
                    px[i] = std::min(1.0f, sky[i] + float(0.18 * t));
                continue;
            }
            double dist = std::hypot(g.x - ego.x, g.y - ego.y);
            float col[3];
            double d2, arc;
            if (index.query(statics, StaticCategory::SolidBoundary, g.x, g.y, 0.25, d2, arc)) {
                auto sc = static_color(StaticCategory::SolidBoundary);
                col[0] = sc[0];
                col[1] = sc[1];
                col[2] = sc[2];
            } else if (index.query(statics, StaticCategory::LaneMarking, g.x, g.y, 0.20, d2,
                                   arc) &&
                       std::fmod(arc, 2.0) < 1.2) {
                auto sc = static_color(StaticCategory::LaneMarking);
                col[0] = sc[0];
                col[1] = sc[1];
                col[2] = sc[2];
            } else {
                // textured ground: 2 m grid gives the motion probe its signal
                double fx = g.x - 2.0 * std::floor(g.x / 2.0);
                double fy = g.y - 2.0 * std::floor(g.y / 2.0);
                float gain = (fx < 0.25 || fy < 0.25) ? 1.35f : 1.0f;
                for (int i = 0; i < 3; ++i) col[i] = ground_base[i] * gain * tod_gain;
            }
            // distance haze toward the sky color; strength set by weather
            float f = float(std::min(1.0, dist / fog_scale));
            for (int i = 0; i < 3; ++i)
                px[i] = std::clamp((1 - f) * col[i] + f * sky[i], 0.0f, 1.0f);
        }
    }

    // Agents: painter's order, far to near.
    std::vector<int> order(agents.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        double da = std::hypot(agents[a].cx - ego.x, agents[a].cy - ego.y);
        double db = std::hypot(agents[b].cx - ego.x, agents[b].cy - ego.y);
        return da > db;
    });
    for (int ai : order) {
        const AgentSpec& ag = agents[ai];
        if (std::hypot(ag.cx - ego.x, ag.cy - ego.y) > 80.0) continue;
        double ch = std::cos(ag.heading), sh = std::sin(ag.heading);
        double hgt = agent_height(ag.category);
        std::vector<Vec2> proj;
        proj.reserve(8);
        bool clipped = false;
        for (int corner = 0; corner < 8 && !clipped; ++corner) {
            double sx = (corner & 1) ? ag.ext_x : -ag.ext_x;
            double sy = (corner & 2) ? ag.ext_y : -ag.ext_y;
            double z = (corner & 4) ? hgt : 0.0;
            Vec3 p{ag.cx + ch * sx - sh * sy, ag.cy + sh * sx + ch * sy, z};
            auto pp = project_to_camera(p, ego, cam);
            if (pp.behind)
                clipped = true;
            else
                proj.push_back({pp.u, pp.v});
        }
        if (clipped) continue;
        auto hull = convex_hull(proj);
        if (hull.size() < 3) continue;
        double minx = 1e9, maxx = -1e9, miny = 1e9, maxy = -1e9;
        for (auto& p : hull) {
            minx = std::min(minx, p.x);
            maxx = std::max(maxx, p.x);
            miny = std::min(miny, p.y);
            maxy = std::max(maxy, p.y);
        }
        int c0 = std::max(0, int(std::floor(minx - 1)));
        int c1 = std::min(W - 1, int(std::ceil(maxx + 1)));
        int r0 = std::max(0, int(std::floor(miny - 1)));
        int r1 = std::min(H - 1, int(std::ceil(maxy + 1)));
        auto color = agent_color(ag.category);
        for (int r = r0; r <= r1; ++r)
            for (int c = c0; c <= c1; ++c)
                if (inside_hull(hull, c + 0.5, r + 0.5, 0.75)) {
                    float* px = out + (r * W + c) * 3;
                    px[0] = color[0];
                    px[1] = color[1];
                    px[2] = color[2];
                }
    }
}

std::vector<ActionFrame> scripted_actions(const WorldConfig& cfg, ScenarioFamily family,
                                          Rng& rng) {
    const int n = cfg.frames;
    const double dt = 1.0 / cfg.fps;
    std::vector<ActionFrame> actions(n);
    switch (family) {
        case ScenarioFamily::Straight: {
            double v = rng.uniform(4.0, 8.0);
            for (int i = 0; i < n; ++i) actions[i] = {v, 0.0, 0, 0};
            break;
        }
        case ScenarioFamily::TurnLeft:
        case ScenarioFamily::TurnRight: {
            double v = rng.uniform(3.0, 6.0);
            double k0 = rng.uniform(0.06, std::min(0.15, cfg.kappa_max));
            if (family == ScenarioFamily::TurnRight) k0 = -k0;
            for (int i = 0; i < n; ++i) {
                double ramp = std::min(1.0, 3.0 * double(i) / std::max(1, n - 1));
                actions[i] = {v, k0 * ramp, 0, 0};
            }
            break;
        }
        case ScenarioFamily::LaneChange: {
            double v = rng.uniform(4.0, 7.0);
            double k0 = rng.uniform(0.08, std::min(0.16, cfg.kappa_max));
            if (rng.bernoulli(0.5)) k0 = -k0;
            for (int i = 0; i < n; ++i) {
                double phase = 2.0 * M_PI * double(i) / std::max(1, n - 1);
                actions[i] = {v, k0 * std::sin(phase), 0, 0};
            }
            break;
        }
        case ScenarioFamily::StopAndGo: {
            double v0 = rng.uniform(4.0, 7.0);
            for (int i = 0; i < n; ++i) {
                double t = double(i) / std::max(1, n - 1);
                double v = t < 0.5 ? v0 * (1.0 - 2.0 * t) : v0 * (2.0 * t - 1.0);
                actions[i] = {std::max(0.0, v), 0.0, 0, 0};
            }
            break;
        }
        case ScenarioFamily::Stationary: {
            for (int i = 0; i < n; ++i) actions[i] = {0.0, 0.0, 0, 0};
            break;
        }
    }
    // Attitude channels follow the terrain along the commanded path.
    EgoState pose;
    for (int i = 0; i < n; ++i) {
        actions[i].roll = terrain_roll(cfg, pose.x, pose.y);
        actions[i].pitch = terrain_pitch(cfg, pose.x, pose.y);
        pose = step_ego(pose, actions[i], dt, cfg.attitude_limit);
    }
    return actions;
}

namespace {

ScenarioFamily pick_family(const WorldConfig& cfg, Rng& rng) {
    double wsum = 0;
    for (double w : cfg.family_weights) wsum += w;
    double u = rng.uniform() * wsum;
    double acc = 0;
    for (int i = 0; i < kNumFamilies; ++i) {
        acc += cfg.family_weights[i];
        if (u < acc) return ScenarioFamily(i);
    }
    return ScenarioFamily(kNumFamilies - 1);
}

// Road geometry derived from the commanded path: centerline resampled at 1 m,
// extended 12 m behind the start and 60 m past the end.
std::vector<Vec2> road_centerline(const WorldConfig& cfg, const std::vector<ActionFrame>& actions,
                                  std::vector<double>* headings) {
    const double dt = 1.0 / cfg.fps;
    std::vector<Vec2> pts;
    std::vector<double> hds;
    double x = -12.0, y = 0.0, h = 0.0;
    for (double s = 0; s < 12.0; s += 1.0) {
        pts.push_back({x, y});
        hds.push_back(h);
        x += std::cos(h);
        y += std::sin(h);
    }
    // along the commanded path
    EgoState pose;
    double carry = 0;
    double last_k = 0;
    for (const auto& a : actions) {
        double seg = a.velocity * dt;
        if (a.velocity > 1e-6) last_k = a.curvature;
        double remaining = seg;
        while (carry + remaining >= 1.0) {
            double need = 1.0 - carry;
            double frac = need / seg;
            (void)frac;
            // advance pose by `need` meters along this frame's arc
            ActionFrame sub = a;
            sub.velocity = 1.0;
            EgoState p2 = step_ego(pose, sub, need, cfg.attitude_limit);
            pose = p2;
            pts.push_back({pose.x, pose.y});
            hds.push_back(pose.heading);
            remaining -= need;
            carry = 0;
        }
        if (remaining > 0) {
            ActionFrame sub = a;
            sub.velocity = 1.0;
            pose = step_ego(pose, sub, remaining, cfg.attitude_limit);
            carry += remaining;
        }
    }
    // continuation past the clip
    ActionFrame cont{1.0, last_k, 0, 0};
    for (int i = 0; i < 60; ++i) {
        pose = step_ego(pose, cont, 1.0, cfg.attitude_limit);
        pts.push_back({pose.x, pose.y});
        hds.push_back(pose.heading);
    }
    if (headings) *headings = hds;
    return pts;
}

std::vector<Vec2> offset_polyline(const std::vector<Vec2>& center,
                                  const std::vector<double>& headings, double lateral) {
    std::vector<Vec2> out;
    out.reserve(center.size());
    for (size_t i = 0; i < center.size(); ++i) {
        double nx = -std::sin(headings[i]), ny = std::cos(headings[i]);
        out.push_back({center[i].x + lateral * nx, center[i].y + lateral * ny});
    }
    return out;
}

}  // namespace

ScenarioFamily sample_family(const WorldConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    return pick_family(cfg, rng);
}

Episode generate_episode(const WorldConfig& cfg, uint64_t seed) {
    std::string why;
    if (!cfg.valid(&why)) throw std::invalid_argument("invalid world config: " + why);

    Rng rng(seed);
    Episode ep;
    ep.seed = seed;
    ep.family = pick_family(cfg, rng);
    ep.rig = default_rig(cfg.image_h, cfg.image_w);
    if (cfg.views < int(ep.rig.size())) ep.rig.resize(cfg.views);
    ep.appearance.weather = Weather(rng.uniform_index(kNumWeather));
    ep.appearance.time_of_day = TimeOfDay(rng.uniform_index(kNumTimeOfDay));
    ep.appearance.locale = Locale(rng.uniform_index(kNumLocale));

    ep.actions = scripted_actions(cfg, ep.family, rng);

    // Road layout from the commanded path.
    std::vector<double> headings;
    auto center = road_centerline(cfg, ep.actions, &headings);
    auto add_static = [&](StaticCategory cat, double lateral) {
        StaticElement e;
        e.category = cat;
        e.polyline = offset_polyline(center, headings, lateral);
        ep.statics.push_back(std::move(e));
    };
    add_static(StaticCategory::LaneMarking, 2.0);
    add_static(StaticCategory::LaneMarking, -2.0);
    add_static(StaticCategory::SolidBoundary, 6.0);
    add_static(StaticCategory::SolidBoundary, -6.0);

    // Scripted agents with constant world velocity.
    int n_agents = int(rng.uniform_index(uint64_t(cfg.max_agents) + 1));
    std::vector<AgentSpec> initial;
    for (int i = 0; i < n_agents; ++i) {
        AgentSpec a;
        a.category = AgentCategory(rng.uniform_index(kNumAgentCategories));
        size_t pi = 12 + rng.uniform_index(30);  // ahead of the start
        pi = std::min(pi, center.size() - 1);
        double lat = rng.uniform(-5.0, 5.0);
        double nx = -std::sin(headings[pi]), ny = std::cos(headings[pi]);
        a.cx = center[pi].x + lat * nx;
        a.cy = center[pi].y + lat * ny;
        a.heading = wrap_angle(headings[pi] + rng.uniform(-0.3, 0.3));
        double speed;
        switch (a.category) {
            case AgentCategory::Car:
                a.ext_x = 2.2;
                a.ext_y = 0.9;
                speed = rng.uniform(2.0, 6.0);
                break;
            case AgentCategory::Pedestrian:
                a.ext_x = 0.35;
                a.ext_y = 0.35;
                speed = rng.uniform(0.4, 1.5);
                break;
            case AgentCategory::Cyclist:
                a.ext_x = 0.9;
                a.ext_y = 0.4;
                speed = rng.uniform(1.5, 4.0);
                break;
        }
        a.vx = speed * std::cos(a.heading);
        a.vy = speed * std::sin(a.heading);
        a.color = agent_color(a.category);
        initial.push_back(a);
    }

    const double dt = 1.0 / cfg.fps;
    ep.ego.resize(cfg.frames);
    ep.agents.resize(cfg.frames);
    EgoState pose;
    pose.roll = ep.actions[0].roll;
    pose.pitch = ep.actions[0].pitch;
    for (int f = 0; f < cfg.frames; ++f) {
        ep.ego[f] = pose;
        ep.agents[f] = initial;
        for (auto& a : ep.agents[f]) {
            a.cx += a.vx * dt * f;
            a.cy += a.vy * dt * f;
        }
        if (f + 1 < cfg.frames) pose = step_ego(pose, ep.actions[f], dt, cfg.attitude_limit);
    }

    ep.frames = Tensor<float>({cfg.views, cfg.frames, cfg.image_h, cfg.image_w, 3});
    int64_t stride = int64_t(cfg.image_h) * cfg.image_w * 3;
    for (int v = 0; v < cfg.views; ++v)
        for (int f = 0; f < cfg.frames; ++f)
            render_view(ep.statics, ep.agents[f], ep.ego[f], ep.rig[v], ep.appearance,
                        ep.frames.ptr() + (int64_t(v) * cfg.frames + f) * stride);
    return ep;
}

}  // namespace xworld
