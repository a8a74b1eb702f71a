#pragma once

#include "xworld/attention.hpp"
#include "xworld/conditioning.hpp"
#include "xworld/errors.hpp"
#include "xworld/ops.hpp"
#include "xworld/params.hpp"

namespace xworld {

// Multi-view latent denoiser. Canonical token layout is [F, V*S, D] flattened
// row-major: row = f * (V*S) + v * S + s, with F latent frames, V views and
// S = lat_h * lat_w spatial cells per view. Each transformer block runs
//   1. spatial-view self-attention (all views of one latent frame attend
//      jointly; batch = F)
//   2. temporal self-attention per cell (batch = V*S) with rotary positions
//      on absolute latent-frame indices and an optional chunk-causal mask
//   3. decoupled cross-attention into dynamic/static/appearance token sets,
//      one K/V projection per branch with a zero-initialized per-branch gate
//   4. MLP
// every sub-layer wrapped in adaLN-Zero modulation driven by the per-frame
// action/flow-time embedding.
struct BackboneConfig {
    int d_model = 128;
    int heads = 4;
    int blocks = 6;
    int d_ff = 256;
    int views = 3;
    int lat_h = 12;
    int lat_w = 20;
    int lat_channels = 96;
    int chunk_size = 3;  // latent frames per generation chunk
    int d_cond = 128;
    double rope_base = 10000.0;

    int spatial_tokens() const { return lat_h * lat_w; }

    bool valid(std::string* why = nullptr) const {
        auto fail = [&](const char* m) {
            if (why) *why = m;
            return false;
        };
        if (d_model <= 0 || d_model % heads != 0) return fail("d_model must divide by heads");
        if ((d_model / heads) % 2 != 0) return fail("head dim must be even for rotary positions");
        if (blocks <= 0 || d_ff <= 0) return fail("blocks and d_ff must be positive");
        if (views <= 0 || lat_h <= 0 || lat_w <= 0) return fail("grid dims must be positive");
        if (lat_channels <= 0) return fail("lat_channels must be positive");
        if (chunk_size <= 0) return fail("chunk_size must be positive");
        return true;
    }
};

enum class AttnMode { Bidirectional, ChunkCausal };

inline int chunk_of(int latent_frame, int chunk_size) { return latent_frame / chunk_size; }

// Chunk-causal mask over absolute latent-frame positions: a query at absolute
// frame q may attend a key at absolute frame p iff chunk(p) <= chunk(q).
inline std::shared_ptr<Tensor<uint8_t>> build_chunk_mask(int frames_q, int q0,
                                                         const std::vector<int32_t>& key_pos,
                                                         int chunk_size) {
    if (chunk_size <= 0) throw ConfigError("chunk mask: chunk_size must be positive");
    auto m = std::make_shared<Tensor<uint8_t>>(
        std::vector<int64_t>{frames_q, int64_t(key_pos.size())});
    for (int i = 0; i < frames_q; ++i) {
        int qc = chunk_of(q0 + i, chunk_size);
        for (size_t j = 0; j < key_pos.size(); ++j)
            (*m)[int64_t(i) * int64_t(key_pos.size()) + int64_t(j)] =
                uint8_t(chunk_of(key_pos[j], chunk_size) <= qc);
    }
    return m;
}

// Temporal-attention K/V retained between chunk generations. Tensors are in
// temporal layout [V*S, frames, D] flattened batch-major, un-rotated; absolute
// positions live alongside so rotary rotation stays correct after eviction.
template <typename T>
struct KVCacheBlock {
    Tensor<T> k, v;
};

template <typename T>
struct KVCache {
    std::vector<KVCacheBlock<T>> blocks;  // one per transformer block
    std::vector<int32_t> positions;       // absolute latent-frame index per cached frame

    int64_t frames() const { return int64_t(positions.size()); }
    bool empty() const { return positions.empty(); }
};

template <typename T>
struct BackboneInput {
    ag::Var<T> latents;                    // [F*V*S, lat_channels], canonical layout
    std::vector<uint8_t> history_flag;     // per latent frame: 1 = clean context
    ag::Var<T> adaln;                      // [F, d_cond]
    ag::Var<T> camera;                     // [V, d_model]
    ag::Var<T> dynamic_tokens;             // [Nd, d_model]
    ag::Var<T> static_tokens;              // [Ns, d_model]
    ag::Var<T> appearance_tokens;          // [Na, d_model]
    AttnMode mode = AttnMode::Bidirectional;
    const KVCache<T>* cache_in = nullptr;  // read-only temporal context
    KVCache<T>* cache_out = nullptr;       // if set, append this pass's K/V
    int first_frame_pos = 0;               // absolute latent-frame index of frame 0
};

template <typename T>
class Backbone {
public:
    Backbone(const BackboneConfig& cfg, ParamRegistry<T>& reg) : cfg_(cfg) {
        std::string why;
        if (!cfg.valid(&why)) throw ConfigError("backbone config: " + why);
        const int64_t d = cfg.d_model;
        in_w_ = reg.add_linear_weight("bb.in.w", cfg.lat_channels, d);
        in_b_ = reg.add_zeros("bb.in.b", {d});
        indicator_ = reg.add_normal("bb.indicator", {2, d}, 0.02);
        pos_spatial_ = reg.add_normal("bb.pos_spatial", {cfg.spatial_tokens(), d}, 0.02);
        blocks_.reserve(size_t(cfg.blocks));
        for (int b = 0; b < cfg.blocks; ++b) blocks_.push_back(Block(cfg, reg, b));
        head_w_ = reg.add_linear_weight("bb.head.w", d, cfg.lat_channels);
        head_b_ = reg.add_zeros("bb.head.b", {cfg.lat_channels});
    }

    const BackboneConfig& config() const { return cfg_; }

    // Returns the predicted velocity field, [F*V*S, lat_channels].
    ag::Var<T> forward(const BackboneInput<T>& in) {
        const int64_t V = cfg_.views, S = cfg_.spatial_tokens(), d = cfg_.d_model;
        const int64_t VS = V * S;
        if (in.latents->val.rank() != 2 || in.latents->val.shape[1] != cfg_.lat_channels ||
            in.latents->val.shape[0] % VS != 0)
            throw ShapeError("backbone: latents must be [F*V*S, lat_channels]");
        const int64_t F = in.latents->val.shape[0] / VS;
        if (int64_t(in.history_flag.size()) != F)
            throw ShapeError("backbone: history_flag length != latent frames");
        if (in.adaln->val.shape[0] != F || in.adaln->val.shape[1] != cfg_.d_cond)
            throw ShapeError("backbone: adaln must be [F, d_cond]");
        if (in.camera->val.shape[0] != V || in.camera->val.shape[1] != d)
            throw ShapeError("backbone: camera must be [V, d_model]");
        if (in.cache_in && in.mode != AttnMode::ChunkCausal)
            throw CacheError("backbone: cache requires chunk-causal mode");
        if (in.cache_in && int(in.cache_in->blocks.size()) != cfg_.blocks)
            throw CacheError("backbone: cache block count mismatch");

        auto maps = token_maps(F, in.history_flag);

        // token embedding: latent projection + history indicator + spatial
        // position + camera, all additive
        auto x = ag::linear(in.latents, in_w_, in_b_);
        x = ag::add(x, ag::gather_rows(indicator_, maps.flag));
        x = ag::add(x, ag::gather_rows(pos_spatial_, maps.spatial));
        x = ag::add_rows(x, in.camera, maps.view);

        // adaLN driver shared by all blocks
        auto a = ag::silu(in.adaln);

        // absolute temporal positions for this pass
        auto pos_q = std::make_shared<std::vector<int32_t>>();
        for (int64_t f = 0; f < F; ++f) pos_q->push_back(int32_t(in.first_frame_pos + f));
        std::vector<int32_t> key_pos;
        if (in.cache_in) key_pos = in.cache_in->positions;
        for (int32_t p : *pos_q) key_pos.push_back(p);
        auto pos_k = std::make_shared<std::vector<int32_t>>(key_pos);

        std::shared_ptr<Tensor<uint8_t>> tmask;
        if (in.mode == AttnMode::ChunkCausal)
            tmask = build_chunk_mask(int(F), in.first_frame_pos, key_pos, cfg_.chunk_size);

        if (in.cache_out && in.cache_out->blocks.empty())
            in.cache_out->blocks.resize(size_t(cfg_.blocks));

        for (int bi = 0; bi < cfg_.blocks; ++bi) {
            auto& blk = blocks_[size_t(bi)];
            x = blk.spatial(x, a, maps, F, VS);
            const KVCacheBlock<T>* cache_blk =
                in.cache_in ? &in.cache_in->blocks[size_t(bi)] : nullptr;
            KVCacheBlock<T>* capture =
                in.cache_out ? &in.cache_out->blocks[size_t(bi)] : nullptr;
            x = blk.temporal(x, a, maps, F, VS, pos_q, pos_k, tmask, cache_blk, capture,
                             in.cache_in ? in.cache_in->frames() : 0);
            x = blk.cross(x, a, maps, in.dynamic_tokens, in.static_tokens, in.appearance_tokens);
            x = blk.mlp(x, a, maps);
        }
        if (in.cache_out) {
            for (int32_t p : *pos_q) in.cache_out->positions.push_back(p);
        }
        return ag::linear(ag::layernorm(x), head_w_, head_b_);
    }

private:
    struct Maps {
        std::shared_ptr<std::vector<int32_t>> frame, view, spatial, flag;
    };

    Maps token_maps(int64_t F, const std::vector<uint8_t>& history_flag) const {
        const int64_t V = cfg_.views, S = cfg_.spatial_tokens();
        Maps m;
        m.frame = std::make_shared<std::vector<int32_t>>();
        m.view = std::make_shared<std::vector<int32_t>>();
        m.spatial = std::make_shared<std::vector<int32_t>>();
        m.flag = std::make_shared<std::vector<int32_t>>();
        m.frame->reserve(size_t(F * V * S));
        for (int64_t f = 0; f < F; ++f)
            for (int64_t v = 0; v < V; ++v)
                for (int64_t s = 0; s < S; ++s) {
                    m.frame->push_back(int32_t(f));
                    m.view->push_back(int32_t(v));
                    m.spatial->push_back(int32_t(s));
                    m.flag->push_back(int32_t(history_flag[size_t(f)]));
                }
        return m;
    }

    struct ModSet {
        ag::Var<T> shift, scale, gate;
    };

    struct Block {
        BackboneConfig cfg;
        // spatial attention
        ag::Var<T> sp_wq, sp_wk, sp_wv, sp_wo;
        // temporal attention
        ag::Var<T> tm_wq, tm_wk, tm_wv, tm_wo;
        // cross attention (shared q/out, per-branch k/v and gate)
        ag::Var<T> cr_wq, cr_wo;
        std::array<ag::Var<T>, 3> cr_wk, cr_wv, cr_gate;
        // mlp
        ag::Var<T> ff_w1, ff_b1, ff_w2, ff_b2;
        // adaLN-Zero: 4 sub-layers x (shift, scale, gate), all zero-init
        std::array<ag::Var<T>, 12> mod_w, mod_b;

        Block(const BackboneConfig& c, ParamRegistry<T>& reg, int idx) : cfg(c) {
            const int64_t d = c.d_model;
            std::string p = "bb.blk" + std::to_string(idx) + ".";
            sp_wq = reg.add_linear_weight(p + "sp.wq", d, d);
            sp_wk = reg.add_linear_weight(p + "sp.wk", d, d);
            sp_wv = reg.add_linear_weight(p + "sp.wv", d, d);
            sp_wo = reg.add_linear_weight(p + "sp.wo", d, d);
            tm_wq = reg.add_linear_weight(p + "tm.wq", d, d);
            tm_wk = reg.add_linear_weight(p + "tm.wk", d, d);
            tm_wv = reg.add_linear_weight(p + "tm.wv", d, d);
            tm_wo = reg.add_linear_weight(p + "tm.wo", d, d);
            cr_wq = reg.add_linear_weight(p + "cr.wq", d, d);
            cr_wo = reg.add_linear_weight(p + "cr.wo", d, d);
            const char* br[3] = {"dyn", "sta", "app"};
            for (int i = 0; i < 3; ++i) {
                cr_wk[size_t(i)] = reg.add_linear_weight(p + "cr." + br[i] + ".wk", d, d);
                cr_wv[size_t(i)] = reg.add_linear_weight(p + "cr." + br[i] + ".wv", d, d);
                cr_gate[size_t(i)] = reg.add_zeros(p + "cr." + br[i] + ".gate", {1, d});
            }
            ff_w1 = reg.add_linear_weight(p + "ff.w1", d, c.d_ff);
            ff_b1 = reg.add_zeros(p + "ff.b1", {c.d_ff});
            ff_w2 = reg.add_linear_weight(p + "ff.w2", c.d_ff, d);
            ff_b2 = reg.add_zeros(p + "ff.b2", {d});
            const char* sub[4] = {"sp", "tm", "cr", "ff"};
            const char* kind[3] = {"shift", "scale", "gate"};
            for (int s = 0; s < 4; ++s)
                for (int k = 0; k < 3; ++k) {
                    size_t i = size_t(s * 3 + k);
                    mod_w[i] = reg.add_zeros(
                        p + "mod." + sub[s] + "." + kind[k] + ".w", {c.d_cond, d});
                    mod_b[i] = reg.add_zeros(p + "mod." + sub[s] + "." + kind[k] + ".b", {d});
                }
        }

        ModSet mods(ag::Var<T> a, int sub) const {
            ModSet m;
            m.shift = ag::linear(a, mod_w[size_t(sub * 3 + 0)], mod_b[size_t(sub * 3 + 0)]);
            m.scale = ag::linear(a, mod_w[size_t(sub * 3 + 1)], mod_b[size_t(sub * 3 + 1)]);
            m.gate = ag::linear(a, mod_w[size_t(sub * 3 + 2)], mod_b[size_t(sub * 3 + 2)]);
            return m;
        }

        ag::Var<T> modulate(ag::Var<T> x, const ModSet& m, const Maps& maps) const {
            auto h = ag::layernorm(x);
            h = ag::mul_rows(h, ag::add_scalar(m.scale, 1.0), maps.frame);
            return ag::add_rows(h, m.shift, maps.frame);
        }

        ag::Var<T> gated_residual(ag::Var<T> x, ag::Var<T> y, const ModSet& m,
                                  const Maps& maps) const {
            return ag::add(x, ag::mul_rows(y, m.gate, maps.frame));
        }

        ag::Var<T> spatial(ag::Var<T> x, ag::Var<T> a, const Maps& maps, int64_t F,
                           int64_t VS) const {
            auto m = mods(a, 0);
            auto h = modulate(x, m, maps);
            ag::AttnSpec spec;
            spec.batch = F;
            spec.seq_q = VS;
            spec.seq_k = VS;
            spec.heads = cfg.heads;
            auto o = ag::attention(ag::linear(h, sp_wq, ag::Var<T>()),
                                   ag::linear(h, sp_wk, ag::Var<T>()),
                                   ag::linear(h, sp_wv, ag::Var<T>()), spec);
            return gated_residual(x, ag::linear(o, sp_wo, ag::Var<T>()), m, maps);
        }

        ag::Var<T> temporal(ag::Var<T> x, ag::Var<T> a, const Maps& maps, int64_t F, int64_t VS,
                            std::shared_ptr<std::vector<int32_t>> pos_q,
                            std::shared_ptr<std::vector<int32_t>> pos_k,
                            std::shared_ptr<Tensor<uint8_t>> mask,
                            const KVCacheBlock<T>* cache, KVCacheBlock<T>* capture,
                            int64_t cached_frames) const {
            const int64_t d = cfg.d_model;
            auto m = mods(a, 1);
            auto h = modulate(x, m, maps);
            // to temporal layout [V*S, F, D]
            auto ht = ag::transpose_batch(h, F, VS, d);
            auto q = ag::linear(ht, tm_wq, ag::Var<T>());
            auto k = ag::linear(ht, tm_wk, ag::Var<T>());
            auto v = ag::linear(ht, tm_wv, ag::Var<T>());
            // capture the raw (pre-concat) K/V; when cache_in and cache_out
            // alias the same rolling cache, concat must read the old content
            // first
            auto k_new = k, v_new = v;
            if (cache) {
                k = ag::concat_seq_const(cache->k, k, VS, cached_frames, F, d);
                v = ag::concat_seq_const(cache->v, v, VS, cached_frames, F, d);
            }
            if (capture) {
                append_frames(capture->k, k_new->val, VS, F, d);
                append_frames(capture->v, v_new->val, VS, F, d);
            }
            ag::AttnSpec spec;
            spec.batch = VS;
            spec.seq_q = F;
            spec.seq_k = cached_frames + F;
            spec.heads = cfg.heads;
            spec.mask = mask;
            spec.pos_q = pos_q;
            spec.pos_k = pos_k;
            spec.rope_base = cfg.rope_base;
            auto o = ag::attention(q, k, v, spec);
            // back to canonical layout
            auto oc = ag::transpose_batch(o, VS, F, d);
            return gated_residual(x, ag::linear(oc, tm_wo, ag::Var<T>()), m, maps);
        }

        ag::Var<T> cross(ag::Var<T> x, ag::Var<T> a, const Maps& maps, ag::Var<T> dyn,
                         ag::Var<T> sta, ag::Var<T> app) const {
            auto m = mods(a, 2);
            auto h = modulate(x, m, maps);
            auto q = ag::linear(h, cr_wq, ag::Var<T>());
            std::array<ag::Var<T>, 3> toks = {dyn, sta, app};
            auto zero_map = std::make_shared<std::vector<int32_t>>(
                std::vector<int32_t>(size_t(x->val.shape[0]), 0));
            ag::Var<T> summed;
            for (int i = 0; i < 3; ++i) {
                if (!toks[size_t(i)]) throw ShapeError("backbone: missing condition tokens");
                ag::AttnSpec spec;
                spec.batch = 1;
                spec.seq_q = x->val.shape[0];
                spec.seq_k = toks[size_t(i)]->val.shape[0];
                spec.heads = cfg.heads;
                auto o = ag::attention(q, ag::linear(toks[size_t(i)], cr_wk[size_t(i)], ag::Var<T>()),
                                       ag::linear(toks[size_t(i)], cr_wv[size_t(i)], ag::Var<T>()),
                                       spec);
                o = ag::mul_rows(o, cr_gate[size_t(i)], zero_map);
                summed = summed ? ag::add(summed, o) : o;
            }
            return gated_residual(x, ag::linear(summed, cr_wo, ag::Var<T>()), m, maps);
        }

        ag::Var<T> mlp(ag::Var<T> x, ag::Var<T> a, const Maps& maps) const {
            auto m = mods(a, 3);
            auto h = modulate(x, m, maps);
            auto y = ag::linear(ag::silu(ag::linear(h, ff_w1, ff_b1)), ff_w2, ff_b2);
            return gated_residual(x, y, m, maps);
        }

        // Append F new frames to a cache tensor in temporal layout
        // [V*S, frames, D]. Values are copied (detached).
        static void append_frames(Tensor<T>& dst, const Tensor<T>& src, int64_t VS, int64_t F,
                                  int64_t d) {
            int64_t Fp = dst.numel() / (VS * d);
            if (dst.numel() != VS * Fp * d)
                throw CacheError("kv cache: stored frame count out of sync");
            Tensor<T> merged({VS * (Fp + F), d});
            for (int64_t b = 0; b < VS; ++b) {
                if (Fp)
                    std::memcpy(merged.ptr() + b * (Fp + F) * d, dst.ptr() + b * Fp * d,
                                sizeof(T) * Fp * d);
                std::memcpy(merged.ptr() + (b * (Fp + F) + Fp) * d, src.ptr() + b * F * d,
                            sizeof(T) * F * d);
            }
            dst = std::move(merged);
        }
    };

    BackboneConfig cfg_;
    ag::Var<T> in_w_, in_b_, indicator_, pos_spatial_;
    std::vector<Block> blocks_;
    ag::Var<T> head_w_, head_b_;
};

}  // namespace xworld
