#pragma once

#include <chrono>
#include <deque>

#include "xworld/training.hpp"

namespace xworld {

// ---------------------------------------------------------------------------
// Rolling KV cache
// ---------------------------------------------------------------------------

// Fixed-capacity FIFO window over the temporal-attention cache. Entries are
// appended by the backbone in generation order; eviction drops whole
// generation blocks (one block = the latent frames of one forward) from the
// front until the frame count fits the capacity again. Positions stay
// absolute, so rotary offsets remain correct after eviction.
template <typename T>
struct RollingKVCache {
    KVCache<T> kv;
    int capacity = 9;             // max cached latent frames
    int64_t vs = 0;               // tokens per latent frame (batch rows)
    std::deque<int> block_sizes;  // latent frames per appended block, oldest first

    int64_t frames() const { return kv.frames(); }
    bool empty() const { return kv.empty(); }

    // Record that the backbone just appended a block of n latent frames.
    void note_block(int n) { block_sizes.push_back(n); }

    void enforce() {
        while (frames() > capacity) {
            if (block_sizes.size() < 2)
                throw CacheError("rolling cache: single block exceeds capacity");
            evict_front_block();
        }
    }

    void evict_front_block() {
        if (block_sizes.empty()) throw CacheError("rolling cache: nothing to evict");
        const int64_t n = block_sizes.front();
        const int64_t F = frames();
        if (n > F) throw CacheError("rolling cache: block ledger out of sync");
        for (KVCacheBlock<T>& blk : kv.blocks) {
            for (Tensor<T>* t : {&blk.k, &blk.v}) {
                const int64_t d = t->numel() / (vs * F);
                if (t->numel() != vs * F * d)
                    throw CacheError("rolling cache: tensor size out of sync");
                Tensor<T> kept({vs * (F - n), d});
                for (int64_t b = 0; b < vs; ++b)
                    std::memcpy(kept.ptr() + b * (F - n) * d, t->ptr() + (b * F + n) * d,
                                sizeof(T) * size_t((F - n) * d));
                *t = std::move(kept);
            }
        }
        kv.positions.erase(kv.positions.begin(), kv.positions.begin() + n);
        block_sizes.pop_front();
    }
};

// Structural audit of a rolling cache: occupancy bound, ledger/tensor
// consistency, and that the retained window is a contiguous run ending at the
// newest position. Throws InvariantError with a dump on violation; returns a
// one-line summary otherwise.
template <typename T>
std::string evict_policy_check(const RollingKVCache<T>& cache) {
    auto dump = [&](const std::string& what) -> std::string {
        std::string s = "rolling cache invariant violated: " + what + " [capacity=" +
                        std::to_string(cache.capacity) + " frames=" +
                        std::to_string(cache.frames()) + " blocks=";
        for (int b : cache.block_sizes) s += std::to_string(b) + ",";
        s += " positions=";
        for (int32_t p : cache.kv.positions) s += std::to_string(p) + ",";
        s += "]";
        return s;
    };
    if (cache.frames() > cache.capacity) throw InvariantError(dump("occupancy above capacity"));
    int64_t ledger = 0;
    for (int b : cache.block_sizes) {
        if (b <= 0) throw InvariantError(dump("non-positive block size"));
        ledger += b;
    }
    if (ledger != cache.frames()) throw InvariantError(dump("block ledger != cached frames"));
    for (size_t i = 1; i < cache.kv.positions.size(); ++i)
        if (cache.kv.positions[i] != cache.kv.positions[i - 1] + 1)
            throw InvariantError(dump("positions not a contiguous ascending run"));
    if (!cache.kv.positions.empty() && cache.vs > 0) {
        const int64_t F = cache.frames();
        int64_t d0 = -1;
        for (const KVCacheBlock<T>& blk : cache.kv.blocks) {
            if (blk.k.numel() != blk.v.numel())
                throw InvariantError(dump("k/v size mismatch"));
            if (blk.k.numel() % (cache.vs * F) != 0)
                throw InvariantError(dump("tensor size not a multiple of frames"));
            int64_t d = blk.k.numel() / (cache.vs * F);
            if (d0 < 0) d0 = d;
            if (d != d0) throw InvariantError(dump("inconsistent head width across blocks"));
        }
    }
    return "ok: " + std::to_string(cache.frames()) + "/" + std::to_string(cache.capacity) +
           " frames in " + std::to_string(cache.block_sizes.size()) + " blocks";
}

// ---------------------------------------------------------------------------
// Streaming session
// ---------------------------------------------------------------------------

// One chunk worth of controls. Actions cover the video frames the chunk
// spans: 1 + 2*(chunk_size-1) frames when the chunk contains the anchor
// frame, 2*chunk_size otherwise. Agents and statics are optional mid-stream
// scene edits, expressed in world coordinates; agents carry the absolute
// latent frame they appear at.
struct ChunkAgent {
    int latent_frame = 0;
    AgentSpec spec;
};

struct ChunkRequest {
    std::vector<ActionFrame> actions;
    std::vector<ChunkAgent> agents;
    std::vector<StaticElement> statics;
};

struct ChunkResponse {
    Tensor<float> frames;  // [views, chunk video frames, H, W, 3]
    int chunk_index = 0;
    double latency_ms = 0;
    int evals = 0;
};

struct RolloutConfig {
    int capacity = 9;       // rolling window, latent frames
    int denoise_steps = 4;  // Euler steps per chunk
    SamplerConfig sampler;  // guidance settings; steps/noise_seed unused here

    RolloutConfig() { sampler.cfg_branch = -1; }
};

// A single-owner streaming generation session: consumes per-chunk action
// requests, denoises the next chunk against the rolling cache, and returns
// decoded frames. Every byte of output is determined by (seed, open
// arguments, request transcript).
template <typename T>
class RolloutSession {
public:
    // Open on raw history frames (may be null/empty for generation from
    // conditions only). history is [views, n, H, W, 3] with n in {1, 1+2k};
    // history_actions, when given, must carry one entry per history frame.
    RolloutSession(WorldModel<T>& model, const Tensor<float>* history,
                   const std::vector<ActionFrame>& history_actions,
                   const std::vector<CameraSpec>& rig, const AppearanceSpec& appearance,
                   uint64_t seed, const RolloutConfig& rcfg)
        : model_(&model), rcfg_(rcfg), noise_rng_(seed), seed_(seed) {
        init_common(rig, appearance);
        if (history && history->numel() > 0) prime_history(*history, history_actions);
    }

    // Open on an episode: the first history_frames frames become visual
    // context and the episode's full scene layout (agents per latent frame,
    // statics) is pinned as conditioning. history_frames may be 0.
    RolloutSession(WorldModel<T>& model, const Episode& ep, int history_frames, uint64_t seed,
                   const RolloutConfig& rcfg)
        : model_(&model), rcfg_(rcfg), noise_rng_(seed), seed_(seed) {
        if (history_frames < 0 || history_frames > int(ep.frames.dim(1)))
            throw ShapeError("session: history frame count outside the episode");
        init_common(ep.rig, ep.appearance);
        ref_ = ep.ego.at(history_frames == 0 ? 0 : size_t(history_frames - 1));
        const int LT = latent_time_of(int(ep.agents.size()));
        for (int k = 0; k < LT; ++k) {
            int vf = k == 0 ? 0 : 2 * k;
            for (const AgentSpec& a : ep.agents[size_t(vf)])
                dyn_inputs_.push_back(model_->make_dynamic_input(a, ref_, k));
        }
        statics_ = ep.statics;
        reencode_scene();
        if (history_frames > 0) {
            const int64_t V = ep.frames.dim(0), px = ep.frames.dim(2) * ep.frames.dim(3) * 3;
            Tensor<float> hist({V, int64_t(history_frames), ep.frames.dim(2), ep.frames.dim(3), 3});
            for (int64_t v = 0; v < V; ++v)
                std::memcpy(hist.ptr() + v * history_frames * px,
                            ep.frames.ptr() + v * ep.frames.dim(1) * px,
                            sizeof(float) * size_t(history_frames * px));
            std::vector<ActionFrame> ha(ep.actions.begin(), ep.actions.begin() + history_frames);
            prime_history(hist, ha);
        }
    }

    const std::string& id() const { return id_; }
    int clock() const { return clock_; }
    int next_latent_frame() const { return next_pos_; }
    bool closed() const { return closed_; }
    const RollingKVCache<T>& cache() const { return cache_; }
    Rng::State rng_state() const { return noise_rng_.state(); }
    const Tensor<T>& last_chunk_latents() const { return last_latents_; }
    const Tensor<float>& recent_frames() const { return history_buf_; }

    // Video frames this chunk's actions must cover.
    int expected_action_frames() const {
        const int cs = model_->config().backbone.chunk_size;
        return next_pos_ == 0 ? frames_of_latent_time(cs) : 2 * cs;
    }

    ChunkResponse step(const ChunkRequest& req) {
        if (closed_) throw StateError("session: step after close");
        auto t_start = std::chrono::steady_clock::now();
        const int cs = model_->config().backbone.chunk_size;
        if (int(req.actions.size()) != expected_action_frames())
            throw RequestError("request: expected " + std::to_string(expected_action_frames()) +
                               " action frames, got " + std::to_string(req.actions.size()));

        // mid-stream scene edits extend the pinned conditioning
        if (!req.agents.empty() || !req.statics.empty()) {
            for (const ChunkAgent& a : req.agents)
                dyn_inputs_.push_back(model_->make_dynamic_input(a.spec, ref_, a.latent_frame));
            for (const StaticElement& s : req.statics) statics_.push_back(s);
            reencode_scene();
        }

        // per-latent-frame action spans; the request indexes video frames
        // starting at this chunk's first frame
        const int base = next_pos_ == 0 ? 0 : 2 * next_pos_ - 1;
        std::vector<std::vector<ActionFrame>> spans;
        for (int k = next_pos_; k < next_pos_ + cs; ++k) {
            if (k == 0)
                spans.push_back({req.actions[0]});
            else
                spans.push_back(
                    {req.actions[size_t(2 * k - 1 - base)], req.actions[size_t(2 * k - base)]});
        }

        ChunkResponse res;
        res.chunk_index = clock_;
        auto y = denoise_chunk(*model_, spans, conds_, &cache_.kv, next_pos_, noise_rng_,
                               rcfg_.sampler, rcfg_.denoise_steps, /*track_grad=*/false,
                               &res.evals);
        cache_.note_block(cs);
        cache_.enforce();
        last_latents_ = y->val;
        res.frames = model_->decode_video_chunk(y->val, cs, next_pos_);
        retain_recent(res.frames);
        next_pos_ += cs;
        ++clock_;
        res.latency_ms = std::chrono::duration<double, std::milli>(
                             std::chrono::steady_clock::now() - t_start)
                             .count();
        return res;
    }

    // Deep, independent copy; ids stay deterministic (parent id + fork
    // ordinal).
    RolloutSession fork() {
        if (closed_) throw StateError("session: fork after close");
        RolloutSession out = *this;
        out.id_ = id_ + "-f" + std::to_string(fork_count_);
        out.fork_count_ = 0;
        ++fork_count_;
        return out;
    }

    void close() {
        closed_ = true;
        cache_ = RollingKVCache<T>{};
    }

private:
    void init_common(const std::vector<CameraSpec>& rig, const AppearanceSpec& appearance) {
        const int cs = model_->config().backbone.chunk_size;
        if (rcfg_.capacity < cs)
            throw ConfigError("session: cache capacity below one chunk");
        cache_.capacity = rcfg_.capacity;
        cache_.vs = model_->tokens_per_frame();
        conds_.camera = model_->conditioning().encode_camera(rig);
        conds_.app = model_->conditioning().encode_appearance(appearance);
        reencode_scene();
        uint64_t x = seed_;
        uint64_t h = Rng::splitmix64(x);
        char buf[24];
        std::snprintf(buf, sizeof buf, "s%016llx", static_cast<unsigned long long>(h));
        id_ = buf;
    }

    void reencode_scene() {
        conds_.dyn = model_->conditioning().encode_dynamic(dyn_inputs_);
        conds_.sta = model_->conditioning().encode_static(statics_, ref_);
    }

    void prime_history(const Tensor<float>& history, const std::vector<ActionFrame>& actions) {
        const int Fh = int(history.dim(1));
        if (Fh != 1 && Fh % 2 == 0)
            throw ShapeError("session: history frame count must be 1 or 1+2k");
        if (!actions.empty() && int(actions.size()) != Fh)
            throw ShapeError("session: history actions must match history frames");
        const int hist_lat = latent_time_of(Fh);
        if (hist_lat > rcfg_.capacity)
            throw ConfigError("session: history exceeds cache capacity");
        Tensor<T> rows = model_->encode_video(history);
        std::vector<ActionFrame> acts = actions;
        if (acts.empty()) acts.assign(size_t(Fh), ActionFrame{});
        std::vector<std::vector<ActionFrame>> spans;
        for (int k = 0; k < hist_lat; ++k) {
            if (k == 0)
                spans.push_back({acts[0]});
            else
                spans.push_back({acts[size_t(2 * k - 1)], acts[size_t(2 * k)]});
        }
        prime_cache(*model_, rows, spans, conds_, cache_.kv, 0);
        cache_.note_block(hist_lat);
        cache_.enforce();
        next_pos_ = hist_lat;
        retain_recent(history);
    }

    // keep the last two decoded video frames per view for observers
    void retain_recent(const Tensor<float>& frames) {
        const int64_t V = frames.dim(0), F = frames.dim(1);
        const int64_t keep = std::min<int64_t>(2, F);
        const int64_t px = frames.dim(2) * frames.dim(3) * 3;
        history_buf_ = Tensor<float>({V, keep, frames.dim(2), frames.dim(3), 3});
        for (int64_t v = 0; v < V; ++v)
            std::memcpy(history_buf_.ptr() + v * keep * px,
                        frames.ptr() + (v * F + (F - keep)) * px,
                        sizeof(float) * size_t(keep * px));
    }

    WorldModel<T>* model_;
    RolloutConfig rcfg_;
    RollingKVCache<T> cache_;
    CondInputs<T> conds_;
    std::vector<DynamicTokenInput> dyn_inputs_;
    std::vector<StaticElement> statics_;
    EgoState ref_;
    Rng noise_rng_;
    uint64_t seed_ = 0;
    std::string id_;
    int clock_ = 0;
    int next_pos_ = 0;
    int fork_count_ = 0;
    bool closed_ = false;
    Tensor<T> last_latents_;
    Tensor<float> history_buf_;
};

}  // namespace xworld
