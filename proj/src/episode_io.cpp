#include "xworld/episode_io.hpp"

#include <filesystem>
#include <fstream>

#include "xworld/checkpoint.hpp"

namespace xworld {

namespace {
constexpr char kMagic[4] = {'X', 'W', 'E', 'P'};
constexpr uint32_t kVersion = 1;

nlohmann::json camera_json(const CameraSpec& c) {
    return {{"fx", c.fx}, {"fy", c.fy},         {"cx", c.cx},
            {"cy", c.cy}, {"yaw", c.yaw},       {"tx", c.tx},
            {"ty", c.ty}, {"height", c.height}, {"image_h", c.image_h},
            {"image_w", c.image_w}};
}

CameraSpec camera_from_json(const nlohmann::json& j) {
    CameraSpec c;
    c.fx = j["fx"];
    c.fy = j["fy"];
    c.cx = j["cx"];
    c.cy = j["cy"];
    c.yaw = j["yaw"];
    c.tx = j["tx"];
    c.ty = j["ty"];
    c.height = j["height"];
    c.image_h = j["image_h"];
    c.image_w = j["image_w"];
    return c;
}
}  // namespace

nlohmann::json episode_header_json(const Episode& ep) {
    nlohmann::json h;
    h["seed"] = ep.seed;
    h["family"] = int(ep.family);
    h["shape"] = ep.frames.shape;
    h["appearance"] = {{"weather", int(ep.appearance.weather)},
                       {"time_of_day", int(ep.appearance.time_of_day)},
                       {"locale", int(ep.appearance.locale)}};
    nlohmann::json rig = nlohmann::json::array();
    for (const auto& c : ep.rig) rig.push_back(camera_json(c));
    h["rig"] = rig;
    nlohmann::json actions = nlohmann::json::array();
    for (const auto& a : ep.actions)
        actions.push_back({a.velocity, a.curvature, a.roll, a.pitch});
    h["actions"] = actions;
    nlohmann::json ego = nlohmann::json::array();
    for (const auto& e : ep.ego) ego.push_back({e.x, e.y, e.heading, e.roll, e.pitch});
    h["ego"] = ego;
    nlohmann::json agents = nlohmann::json::array();
    for (const auto& frame : ep.agents) {
        nlohmann::json fa = nlohmann::json::array();
        for (const auto& a : frame)
            fa.push_back({{"category", int(a.category)},
                          {"cx", a.cx},
                          {"cy", a.cy},
                          {"heading", a.heading},
                          {"ext_x", a.ext_x},
                          {"ext_y", a.ext_y},
                          {"vx", a.vx},
                          {"vy", a.vy},
                          {"color", {a.color[0], a.color[1], a.color[2]}}});
        agents.push_back(fa);
    }
    h["agents"] = agents;
    nlohmann::json statics = nlohmann::json::array();
    for (const auto& s : ep.statics) {
        nlohmann::json pts = nlohmann::json::array();
        for (const auto& p : s.polyline) pts.push_back({p.x, p.y});
        statics.push_back({{"category", int(s.category)}, {"polyline", pts}});
    }
    h["statics"] = statics;
    return h;
}

void save_episode(const Episode& ep, const std::string& path) {
    std::string hs = episode_header_json(ep).dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write episode: " + path);
    f.write(kMagic, 4);
    uint32_t ver = kVersion;
    f.write(reinterpret_cast<const char*>(&ver), 4);
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hs.data(), std::streamsize(hs.size()));
    f.write(reinterpret_cast<const char*>(ep.frames.ptr()),
            std::streamsize(ep.frames.numel() * 4));
    if (!f) throw std::runtime_error("episode write failed: " + path);
}

Episode load_episode(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open episode: " + path);
    char magic[4];
    f.read(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("bad episode magic: " + path);
    uint32_t ver = 0;
    f.read(reinterpret_cast<char*>(&ver), 4);
    if (ver != kVersion) throw std::runtime_error("unsupported episode version: " + path);
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string hs(hlen, '\0');
    f.read(hs.data(), std::streamsize(hlen));
    nlohmann::json h = nlohmann::json::parse(hs);

    Episode ep;
    ep.seed = h["seed"];
    ep.family = ScenarioFamily(h["family"].get<int>());
    ep.appearance.weather = Weather(h["appearance"]["weather"].get<int>());
    ep.appearance.time_of_day = TimeOfDay(h["appearance"]["time_of_day"].get<int>());
    ep.appearance.locale = Locale(h["appearance"]["locale"].get<int>());
    for (const auto& c : h["rig"]) ep.rig.push_back(camera_from_json(c));
    for (const auto& a : h["actions"])
        ep.actions.push_back({a[0], a[1], a[2], a[3]});
    for (const auto& e : h["ego"]) {
        EgoState s;
        s.x = e[0];
        s.y = e[1];
        s.heading = e[2];
        s.roll = e[3];
        s.pitch = e[4];
        ep.ego.push_back(s);
    }
    for (const auto& fa : h["agents"]) {
        std::vector<AgentSpec> frame;
        for (const auto& a : fa) {
            AgentSpec sp;
            sp.category = AgentCategory(a["category"].get<int>());
            sp.cx = a["cx"];
            sp.cy = a["cy"];
            sp.heading = a["heading"];
            sp.ext_x = a["ext_x"];
            sp.ext_y = a["ext_y"];
            sp.vx = a["vx"];
            sp.vy = a["vy"];
            sp.color = {a["color"][0].get<float>(), a["color"][1].get<float>(),
                        a["color"][2].get<float>()};
            frame.push_back(sp);
        }
        ep.agents.push_back(std::move(frame));
    }
    for (const auto& s : h["statics"]) {
        StaticElement e;
        e.category = StaticCategory(s["category"].get<int>());
        for (const auto& p : s["polyline"]) e.polyline.push_back({p[0], p[1]});
        ep.statics.push_back(std::move(e));
    }
    std::vector<int64_t> shape = h["shape"].get<std::vector<int64_t>>();
    ep.frames = Tensor<float>(shape);
    f.read(reinterpret_cast<char*>(ep.frames.ptr()), std::streamsize(ep.frames.numel() * 4));
    if (!f) throw std::runtime_error("truncated episode: " + path);
    return ep;
}

nlohmann::json DatasetManifest::to_json() const {
    nlohmann::json j;
    j["config_hash"] = config_hash;
    j["n"] = n;
    j["seeds"] = seeds;
    j["files"] = files;
    j["families"] = families;
    nlohmann::json tally = nlohmann::json::object();
    for (const auto& f : families) tally[f] = tally.value(f, 0) + 1;
    j["family_tally"] = tally;
    return j;
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.config_hash = j["config_hash"];
    m.n = j["n"];
    m.seeds = j["seeds"].get<std::vector<uint64_t>>();
    m.files = j["files"].get<std::vector<std::string>>();
    m.families = j["families"].get<std::vector<std::string>>();
    return m;
}

DatasetManifest export_dataset(const WorldConfig& cfg, int n, uint64_t seed0,
                               const std::string& out_dir) {
    std::string why;
    if (!cfg.valid(&why)) throw std::invalid_argument("invalid world config: " + why);
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("cannot create output dir " + out_dir + ": " + ec.message());

    DatasetManifest m;
    m.n = n;
    {
        nlohmann::json cj = {{"views", cfg.views},     {"frames", cfg.frames},
                             {"image_h", cfg.image_h}, {"image_w", cfg.image_w},
                             {"fps", cfg.fps},         {"scene_extent", cfg.scene_extent}};
        m.config_hash = hash_hex(cj.dump());
    }
    for (int i = 0; i < n; ++i) {
        uint64_t seed = seed0 + uint64_t(i);
        Episode ep = generate_episode(cfg, seed);
        char name[64];
        std::snprintf(name, sizeof(name), "episode_%06d.xwep", i);
        std::string path = out_dir + "/" + name;
        save_episode(ep, path);
        m.seeds.push_back(seed);
        m.files.push_back(name);
        m.families.push_back(family_name(ep.family));
    }
    std::ofstream f(out_dir + "/manifest.json");
    if (!f) throw std::runtime_error("cannot write manifest in " + out_dir);
    f << m.to_json().dump(2) << "\n";
    return m;
}

DatasetManifest load_manifest(const std::string& dir) {
    std::ifstream f(dir + "/manifest.json");
    if (!f) throw std::runtime_error("cannot open manifest in " + dir);
    nlohmann::json j;
    f >> j;
    return DatasetManifest::from_json(j);
}

}  // namespace xworld
