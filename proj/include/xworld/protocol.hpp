#pragma once

#include <filesystem>
#include <istream>
#include <map>
#include <ostream>

#include "xworld/episode_io.hpp"
#include "xworld/rollout.hpp"

namespace xworld {

// Newline-delimited JSON control channel for streaming sessions. One request
// object per line, one response object per line; generated frames go to
// episode-format files referenced by "frames_ref" so the channel stays small.
//
//   {"op":"open","episode_ref":p,"history_frames":n,"seed":s}   -> {"session":id,...}
//   {"op":"open","history_ref":p, ...}                           (frames only, no scene pin)
//   {"op":"step","session":id,"actions":[[v,kappa,roll,pitch],..],
//    "agents":[{...}],"statics":[{...}]}                        -> {"chunk_index",...}
//   {"op":"step","session":id,"actions":"episode"}    replay the pinned
//                                     episode's action track at the cursor
//   {"op":"fork","session":id}                                  -> {"session":new_id}
//   {"op":"close","session":id}                                 -> {"closed":true}
//
// Any failure maps to {"error":{"type":t,"message":m}}.
template <typename T>
class RolloutService {
public:
    RolloutService(WorldModel<T>& model, std::string out_dir, RolloutConfig rcfg = {})
        : model_(&model), out_dir_(std::move(out_dir)), rcfg_(rcfg) {
        std::filesystem::create_directories(out_dir_);
    }

    size_t open_sessions() const { return sessions_.size(); }

    std::string handle_line(const std::string& line) {
        nlohmann::json res;
        try {
            nlohmann::json req = nlohmann::json::parse(line);
            const std::string op = req.value("op", "");
            if (op == "open")
                res = do_open(req);
            else if (op == "step")
                res = do_step(req);
            else if (op == "fork")
                res = do_fork(req);
            else if (op == "close")
                res = do_close(req);
            else
                throw RequestError("unknown op: '" + op + "'");
        } catch (const std::exception& e) {
            res = {{"error", {{"type", error_type(e)}, {"message", e.what()}}}};
        }
        return res.dump();
    }

    // Serve until EOF on the input stream.
    void run(std::istream& in, std::ostream& out) {
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            out << handle_line(line) << "\n" << std::flush;
        }
    }

private:
    static std::string error_type(const std::exception& e) {
        if (dynamic_cast<const RequestError*>(&e)) return "request-error";
        if (dynamic_cast<const StateError*>(&e)) return "state-error";
        if (dynamic_cast<const ShapeError*>(&e)) return "shape-error";
        if (dynamic_cast<const ConfigError*>(&e)) return "config-error";
        if (dynamic_cast<const CacheError*>(&e)) return "cache-error";
        if (dynamic_cast<const InvariantError*>(&e)) return "invariant-error";
        if (dynamic_cast<const nlohmann::json::exception*>(&e)) return "request-error";
        return "internal-error";
    }

    RolloutSession<T>& find(const nlohmann::json& req) {
        const std::string id = req.value("session", "");
        auto it = sessions_.find(id);
        if (it == sessions_.end()) throw StateError("unknown session: '" + id + "'");
        return it->second;
    }

    nlohmann::json session_info(const RolloutSession<T>& s) {
        return {{"session", s.id()},
                {"clock", s.clock()},
                {"next_latent_frame", s.next_latent_frame()},
                {"capacity", rcfg_.capacity}};
    }

    nlohmann::json do_open(const nlohmann::json& req) {
        const uint64_t seed = req.value("seed", uint64_t(0));
        const bool pin_scene = req.contains("episode_ref");
        const std::string ref =
            pin_scene ? req.at("episode_ref").get<std::string>()
                      : req.at("history_ref").get<std::string>();
        Episode ep = load_episode(ref);
        if (req.contains("appearance")) {
            const auto& a = req.at("appearance");
            ep.appearance.weather = Weather(a.value("weather", int(ep.appearance.weather)));
            ep.appearance.time_of_day =
                TimeOfDay(a.value("time_of_day", int(ep.appearance.time_of_day)));
            ep.appearance.locale = Locale(a.value("locale", int(ep.appearance.locale)));
        }
        const int hist = req.value("history_frames", 1);
        RolloutSession<T> s =
            pin_scene
                ? RolloutSession<T>(*model_, ep, hist, seed, rcfg_)
                : open_history_only(ep, hist, seed);
        std::string id = s.id();
        // distinct ids even if a client reuses a seed
        while (sessions_.count(id)) id += "x";
        auto [it, ok] = sessions_.emplace(id, std::move(s));
        (void)ok;
        if (pin_scene) tracks_[id] = ep.actions;  // enables "actions":"episode" replay
        nlohmann::json res = session_info(it->second);
        res["session"] = id;
        return res;
    }

    RolloutSession<T> open_history_only(const Episode& ep, int hist, uint64_t seed) {
        if (hist < 0 || hist > int(ep.frames.dim(1)))
            throw ShapeError("open: history frame count outside the referenced file");
        const Tensor<float>* hp = nullptr;
        Tensor<float> slice;
        std::vector<ActionFrame> ha;
        if (hist > 0) {
            const int64_t V = ep.frames.dim(0), px = ep.frames.dim(2) * ep.frames.dim(3) * 3;
            slice = Tensor<float>({V, int64_t(hist), ep.frames.dim(2), ep.frames.dim(3), 3});
            for (int64_t v = 0; v < V; ++v)
                std::memcpy(slice.ptr() + v * hist * px,
                            ep.frames.ptr() + v * ep.frames.dim(1) * px,
                            sizeof(float) * size_t(hist * px));
            ha.assign(ep.actions.begin(), ep.actions.begin() + hist);
            hp = &slice;
        }
        return RolloutSession<T>(*model_, hp, ha, ep.rig, ep.appearance, seed, rcfg_);
    }

    nlohmann::json do_step(const nlohmann::json& req) {
        const std::string id = req.value("session", "");
        RolloutSession<T>& s = find(req);
        ChunkRequest cr;
        if (req.contains("actions") && req.at("actions").is_string()) {
            if (req.at("actions") != "episode")
                throw RequestError("step: the only action shorthand is \"episode\"");
            auto tr = tracks_.find(id);
            if (tr == tracks_.end())
                throw StateError("step: session was not opened on an episode reference");
            const std::vector<ActionFrame>& track = tr->second;
            const int base = s.next_latent_frame() == 0 ? 0 : 2 * s.next_latent_frame() - 1;
            const int need = s.expected_action_frames();
            if (base + need > int(track.size()))
                throw RequestError("step: episode action track exhausted");
            cr.actions.assign(track.begin() + base, track.begin() + base + need);
            ChunkResponse out = s.step(cr);
            return step_response(id, cr, out);
        }
        if (!req.contains("actions") || !req.at("actions").is_array())
            throw RequestError("step: missing actions array");
        for (const auto& a : req.at("actions")) {
            if (!a.is_array() || a.size() != 4)
                throw RequestError("step: each action is [velocity,curvature,roll,pitch]");
            cr.actions.push_back({a[0].get<double>(), a[1].get<double>(), a[2].get<double>(),
                                  a[3].get<double>()});
        }
        if (req.contains("agents"))
            for (const auto& a : req.at("agents")) {
                ChunkAgent ca;
                ca.latent_frame = a.at("latent_frame");
                ca.spec.category = AgentCategory(a.value("category", 0));
                ca.spec.cx = a.at("cx");
                ca.spec.cy = a.at("cy");
                ca.spec.heading = a.value("heading", 0.0);
                ca.spec.ext_x = a.value("ext_x", 1.0);
                ca.spec.ext_y = a.value("ext_y", 1.0);
                cr.agents.push_back(ca);
            }
        if (req.contains("statics"))
            for (const auto& e : req.at("statics")) {
                StaticElement se;
                se.category = StaticCategory(e.value("category", 0));
                for (const auto& p : e.at("polyline"))
                    se.polyline.push_back({p[0].get<double>(), p[1].get<double>()});
                cr.statics.push_back(se);
            }

        ChunkResponse out = s.step(cr);
        return step_response(id, cr, out);
    }

    nlohmann::json step_response(const std::string& id, const ChunkRequest& cr,
                                 const ChunkResponse& out) {
        std::string fname = id + "_chunk_" + std::to_string(out.chunk_index) + ".xwep";
        std::string fpath = out_dir_ + "/" + fname;
        Episode chunk_ep;
        chunk_ep.frames = out.frames;
        chunk_ep.actions = cr.actions;
        chunk_ep.seed = 0;
        save_episode(chunk_ep, fpath);
        return {{"session", id},
                {"chunk_index", out.chunk_index},
                {"frames_ref", fpath},
                {"latency_ms", out.latency_ms},
                {"evals", out.evals}};
    }

    nlohmann::json do_fork(const nlohmann::json& req) {
        RolloutSession<T>& s = find(req);
        RolloutSession<T> child = s.fork();
        std::string id = child.id();
        while (sessions_.count(id)) id += "x";
        auto parent_track = tracks_.find(req.value("session", ""));
        if (parent_track != tracks_.end()) tracks_[id] = parent_track->second;
        auto [it, ok] = sessions_.emplace(id, std::move(child));
        (void)ok;
        nlohmann::json res = session_info(it->second);
        res["session"] = id;
        return res;
    }

    nlohmann::json do_close(const nlohmann::json& req) {
        const std::string id = req.value("session", "");
        RolloutSession<T>& s = find(req);
        s.close();
        sessions_.erase(id);
        tracks_.erase(id);
        return {{"session", id}, {"closed", true}};
    }

    WorldModel<T>* model_;
    std::string out_dir_;
    RolloutConfig rcfg_;
    std::map<std::string, RolloutSession<T>> sessions_;
    std::map<std::string, std::vector<ActionFrame>> tracks_;  // episode-opened sessions
};

}  // namespace xworld
