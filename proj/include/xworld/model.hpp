#pragma once

#include "xworld/backbone.hpp"
#include "xworld/checkpoint.hpp"
#include "xworld/codec.hpp"
#include "xworld/conditioning.hpp"
#include "xworld/episode_io.hpp"
#include "xworld/synthworld.hpp"

#include "json.hpp"

namespace xworld {

// Everything that defines a trainable model instance. The backbone latent
// grid is derived from the world/codec configs, so the only free knobs are
// capacity and chunking.
struct ModelConfig {
    WorldConfig world;
    CodecConfig codec;
    BackboneConfig backbone;
    CondConfig cond;

    // Fill the derived fields (latent grid, channel counts, normalizers) and
    // check consistency.
    void finalize() {
        backbone.views = world.views;
        backbone.lat_h = world.image_h / codec.spatial_factor;
        backbone.lat_w = world.image_w / codec.spatial_factor;
        backbone.lat_channels = codec.kind == CodecConfig::Kind::PatchifyBaseline
                                    ? codec.packed_channels()
                                    : codec.lat_channels;
        cond.d_model = backbone.d_model;
        cond.d_cond = backbone.d_cond;
        cond.scene_extent = world.scene_extent;
        std::string why;
        if (!world.valid(&why)) throw ConfigError("world config: " + why);
        if (world.image_h % codec.spatial_factor != 0 || world.image_w % codec.spatial_factor != 0)
            throw ConfigError("image dims must divide by the codec spatial factor");
        if (!backbone.valid(&why)) throw ConfigError("backbone config: " + why);
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["world"] = {{"views", world.views},
                      {"frames", world.frames},
                      {"image_h", world.image_h},
                      {"image_w", world.image_w},
                      {"fps", world.fps},
                      {"scene_extent", world.scene_extent},
                      {"kappa_max", world.kappa_max},
                      {"attitude_limit", world.attitude_limit},
                      {"max_agents", world.max_agents},
                      {"family_weights", world.family_weights}};
        j["codec"] = {{"kind", codec.kind == CodecConfig::Kind::PatchifyBaseline ? "patchify"
                                                                                 : "learned"},
                      {"spatial_factor", codec.spatial_factor},
                      {"lat_channels", codec.lat_channels},
                      {"learned_hidden", codec.learned_hidden},
                      {"variational", codec.variational}};
        j["backbone"] = {{"d_model", backbone.d_model}, {"heads", backbone.heads},
                         {"blocks", backbone.blocks},   {"d_ff", backbone.d_ff},
                         {"chunk_size", backbone.chunk_size}, {"d_cond", backbone.d_cond},
                         {"rope_base", backbone.rope_base}};
        j["cond"] = {{"fourier_k", cond.fourier_k},
                     {"polyline_points", cond.polyline_points},
                     {"extent_norm", cond.extent_norm},
                     {"dropout_dynamic", cond.dropout_dynamic},
                     {"dropout_static", cond.dropout_static},
                     {"dropout_appearance", cond.dropout_appearance}};
        return j;
    }

    // Missing sections or fields keep their defaults.
    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        if (j.contains("world")) {
            const auto& w = j.at("world");
            c.world.views = w.value("views", c.world.views);
            c.world.frames = w.value("frames", c.world.frames);
            c.world.image_h = w.value("image_h", c.world.image_h);
            c.world.image_w = w.value("image_w", c.world.image_w);
            c.world.fps = w.value("fps", c.world.fps);
            c.world.scene_extent = w.value("scene_extent", c.world.scene_extent);
            c.world.kappa_max = w.value("kappa_max", c.world.kappa_max);
            c.world.attitude_limit = w.value("attitude_limit", c.world.attitude_limit);
            c.world.max_agents = w.value("max_agents", c.world.max_agents);
            c.world.family_weights = w.value("family_weights", c.world.family_weights);
        }
        if (j.contains("codec")) {
            const auto& co = j.at("codec");
            const std::string kind = co.value(
                "kind", c.codec.kind == CodecConfig::Kind::PatchifyBaseline ? "patchify"
                                                                            : "learned");
            c.codec.kind = kind == "patchify" ? CodecConfig::Kind::PatchifyBaseline
                                              : CodecConfig::Kind::Learned;
            c.codec.spatial_factor = co.value("spatial_factor", c.codec.spatial_factor);
            c.codec.lat_channels = co.value("lat_channels", c.codec.lat_channels);
            c.codec.learned_hidden = co.value("learned_hidden", c.codec.learned_hidden);
            c.codec.variational = co.value("variational", c.codec.variational);
        }
        if (j.contains("backbone")) {
            const auto& b = j.at("backbone");
            c.backbone.d_model = b.value("d_model", c.backbone.d_model);
            c.backbone.heads = b.value("heads", c.backbone.heads);
            c.backbone.blocks = b.value("blocks", c.backbone.blocks);
            c.backbone.d_ff = b.value("d_ff", c.backbone.d_ff);
            c.backbone.chunk_size = b.value("chunk_size", c.backbone.chunk_size);
            c.backbone.d_cond = b.value("d_cond", c.backbone.d_cond);
            c.backbone.rope_base = b.value("rope_base", c.backbone.rope_base);
        }
        if (j.contains("cond")) {
            const auto& cd = j.at("cond");
            c.cond.fourier_k = cd.value("fourier_k", c.cond.fourier_k);
            c.cond.polyline_points = cd.value("polyline_points", c.cond.polyline_points);
            c.cond.extent_norm = cd.value("extent_norm", c.cond.extent_norm);
            c.cond.dropout_dynamic = cd.value("dropout_dynamic", c.cond.dropout_dynamic);
            c.cond.dropout_static = cd.value("dropout_static", c.cond.dropout_static);
            c.cond.dropout_appearance =
                cd.value("dropout_appearance", c.cond.dropout_appearance);
        }
        c.finalize();
        return c;
    }

    std::string hash() const { return hash_hex(to_json().dump()); }
};

// Latents live in [0,1] (pixel-packed); the denoiser works on a centered
// scale.
template <typename T>
void normalize_latents(Tensor<T>& z) {
    for (int64_t i = 0; i < z.numel(); ++i) z[i] = (z[i] - T(0.5)) * T(2);
}
template <typename T>
void denormalize_latents(Tensor<T>& z) {
    for (int64_t i = 0; i < z.numel(); ++i) z[i] = z[i] * T(0.5) + T(0.5);
}

// Codec layout [V, F, LH, LW, C] <-> canonical token rows [F*V*S, C] with
// row = f*(V*S) + v*S + s.
template <typename T>
Tensor<T> to_canonical(const Tensor<T>& lat) {
    const int64_t V = lat.dim(0), F = lat.dim(1), S = lat.dim(2) * lat.dim(3), C = lat.dim(4);
    Tensor<T> rows({F * V * S, C});
    for (int64_t v = 0; v < V; ++v)
        for (int64_t f = 0; f < F; ++f)
            std::memcpy(rows.ptr() + ((f * V + v) * S) * C, lat.ptr() + ((v * F + f) * S) * C,
                        sizeof(T) * S * C);
    return rows;
}

template <typename T>
Tensor<T> from_canonical(const Tensor<T>& rows, int64_t V, int64_t F, int64_t LH, int64_t LW) {
    const int64_t S = LH * LW, C = rows.dim(1);
    Tensor<T> lat({V, F, LH, LW, C});
    for (int64_t v = 0; v < V; ++v)
        for (int64_t f = 0; f < F; ++f)
            std::memcpy(lat.ptr() + ((v * F + f) * S) * C, rows.ptr() + ((f * V + v) * S) * C,
                        sizeof(T) * S * C);
    return lat;
}

// Condition inputs for one scene, ready for the backbone.
template <typename T>
struct CondInputs {
    ag::Var<T> camera;
    ConditionTokens<T> dyn, sta, app;
};

template <typename T>
class WorldModel {
public:
    WorldModel(ModelConfig cfg, uint64_t seed)
        : cfg_(std::move(cfg)), seed_(seed), reg_(seed), cond_(cfg_.cond, reg_),
          bb_(cfg_.backbone, reg_) {
        if (cfg_.codec.kind == CodecConfig::Kind::Learned)
            learned_codec_ = std::make_unique<LearnedCodec<T>>(cfg_.codec, seed ^ 0x10dec);
    }

    const ModelConfig& config() const { return cfg_; }
    uint64_t seed() const { return seed_; }
    ParamRegistry<T>& params() { return reg_; }
    Conditioning<T>& conditioning() { return cond_; }
    Backbone<T>& backbone() { return bb_; }
    LearnedCodec<T>* learned_codec() { return learned_codec_.get(); }

    int latent_frames() const { return latent_time_of(cfg_.world.frames); }
    int64_t tokens_per_frame() const {
        return int64_t(cfg_.backbone.views) * cfg_.backbone.spatial_tokens();
    }

    // video [V, F, H, W, 3] -> normalized canonical latent rows [LT*V*S, C]
    Tensor<T> encode_video(const Tensor<float>& video) {
        Tensor<T> v = video.template cast<T>();
        Tensor<T> z = codec_encode(v, cfg_.codec, learned_codec_.get());
        normalize_latents(z);
        return to_canonical(z);
    }

    // normalized canonical latent rows -> video [V, F, H, W, 3] in [0,1]
    Tensor<float> decode_video(const Tensor<T>& rows, int latent_frames_n) {
        Tensor<T> z = from_canonical(rows, cfg_.backbone.views, latent_frames_n,
                                     cfg_.backbone.lat_h, cfg_.backbone.lat_w);
        denormalize_latents(z);
        Tensor<T> v = codec_decode(z, cfg_.codec, learned_codec_.get());
        if (cfg_.codec.kind == CodecConfig::Kind::PatchifyBaseline)
            for (int64_t i = 0; i < v.numel(); ++i) v[i] = std::clamp(v[i], T(0), T(1));
        return v.template cast<float>();
    }

    // Decode a chunk of latent frames that starts mid-sequence. Such a chunk
    // has no anchor frame, so a zero anchor is prepended before decoding and
    // its lone output frame dropped; every kept latent decodes to a frame
    // pair.
    Tensor<float> decode_video_chunk(const Tensor<T>& rows, int latent_frames_n,
                                     int first_latent_index) {
        if (first_latent_index == 0) return decode_video(rows, latent_frames_n);
        const int64_t VS = tokens_per_frame();
        const int64_t C = cfg_.backbone.lat_channels;
        if (rows.dim(0) != int64_t(latent_frames_n) * VS)
            throw ShapeError("decode chunk: latent row count mismatch");
        Tensor<T> padded({(int64_t(latent_frames_n) + 1) * VS, C});
        std::memcpy(padded.ptr() + VS * C, rows.ptr(), sizeof(T) * size_t(rows.numel()));
        Tensor<float> full = decode_video(padded, latent_frames_n + 1);
        const int64_t V = full.dim(0), F = full.dim(1), px = full.dim(2) * full.dim(3) * 3;
        Tensor<float> out({V, F - 1, full.dim(2), full.dim(3), 3});
        for (int64_t v = 0; v < V; ++v)
            std::memcpy(out.ptr() + v * (F - 1) * px, full.ptr() + (v * F + 1) * px,
                        sizeof(float) * size_t((F - 1) * px));
        return out;
    }

    // Normalized dynamic-token features for one agent, expressed in the ego
    // frame at the reference pose.
    DynamicTokenInput make_dynamic_input(const AgentSpec& a, const EgoState& ref,
                                         int latent_frame) const {
        AgentSpec e = to_ego_frame(a, ref);
        DynamicTokenInput t;
        t.category = int(e.category);
        t.x = e.cx / cfg_.world.scene_extent;
        t.y = e.cy / cfg_.world.scene_extent;
        t.heading = e.heading / M_PI;
        t.ext_x = e.ext_x / cfg_.cond.extent_norm;
        t.ext_y = e.ext_y / cfg_.cond.extent_norm;
        t.latent_frame = latent_frame;
        return t;
    }

    // Scene conditions from episode metadata; agent/static coordinates are
    // expressed in the ego frame at the reference video frame (the last
    // history frame, or 0 when generating from scratch).
    CondInputs<T> build_conditions(const Episode& ep, int ref_frame) {
        CondInputs<T> out;
        out.camera = cond_.encode_camera(ep.rig);
        const EgoState& ref = ep.ego.at(size_t(ref_frame));
        std::vector<DynamicTokenInput> dyn;
        const int LT = latent_time_of(int(ep.agents.size()));
        for (int k = 0; k < LT; ++k) {
            int vf = k == 0 ? 0 : 2 * k;
            for (const AgentSpec& a : ep.agents[size_t(vf)])
                dyn.push_back(make_dynamic_input(a, ref, k));
        }
        out.dyn = cond_.encode_dynamic(dyn);
        out.sta = cond_.encode_static(ep.statics, ref);
        out.app = cond_.encode_appearance(ep.appearance);
        return out;
    }

    // Checkpoint round trip: parameters plus enough metadata to refuse
    // incompatible loads.
    void save(const std::string& path, nlohmann::json extra_meta = {}) const {
        Checkpoint ck;
        ck.meta["config"] = cfg_.to_json();
        ck.meta["config_hash"] = cfg_.hash();
        ck.meta["seed"] = seed_;
        if (!extra_meta.is_null())
            for (auto& [k, v] : extra_meta.items()) ck.meta[k] = v;
        ck.tensors = reg_.state_dict();
        if (learned_codec_)
            for (auto& [k, v] : learned_codec_->reg.state_dict()) ck.tensors["codec." + k] = v;
        ck.save(path);
    }

    void load(const std::string& path) {
        Checkpoint ck = Checkpoint::load(path);
        if (ck.meta.value("config_hash", "") != cfg_.hash())
            throw ConfigError("checkpoint was trained with a different config");
        reg_.load_state(ck.tensors);
        if (learned_codec_) {
            std::map<std::string, Tensor<float>> sub;
            for (auto& [k, v] : ck.tensors)
                if (k.rfind("codec.", 0) == 0) sub[k.substr(6)] = v;
            learned_codec_->reg.load_state(sub);
        }
    }

    // Copy all weights from another model with the same architecture.
    void copy_weights_from(const WorldModel<T>& other) {
        for (size_t i = 0; i < reg_.size(); ++i) reg_.at(i)->val = other.reg_.all()[i]->val;
        if (learned_codec_ && other.learned_codec_)
            for (size_t i = 0; i < learned_codec_->reg.size(); ++i)
                learned_codec_->reg.at(i)->val = other.learned_codec_->reg.all()[i]->val;
    }

private:
    ModelConfig cfg_;
    uint64_t seed_;
    ParamRegistry<T> reg_;
    Conditioning<T> cond_;
    Backbone<T> bb_;
    std::unique_ptr<LearnedCodec<T>> learned_codec_;
};

}  // namespace xworld
