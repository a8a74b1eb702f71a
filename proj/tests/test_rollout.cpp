#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "xworld/protocol.hpp"

using namespace xworld;

namespace {

ModelConfig tiny_model_cfg(int chunk_size = 1, int frames = 5) {
    ModelConfig mc;
    mc.world.views = 2;
    mc.world.frames = frames;
    mc.world.image_h = 16;
    mc.world.image_w = 16;
    mc.backbone.d_model = 16;
    mc.backbone.heads = 2;
    mc.backbone.blocks = 2;
    mc.backbone.d_ff = 32;
    mc.backbone.chunk_size = chunk_size;
    mc.backbone.d_cond = 16;
    mc.finalize();
    return mc;
}

// Give the zero-initialized gates some signal so conditions and cache content
// actually matter.
template <typename T>
void randomize(ParamRegistry<T>& reg, uint64_t seed, double scale = 0.05) {
    Rng r(seed);
    for (auto& p : reg.all())
        for (int64_t i = 0; i < p->val.numel(); ++i) p->val[i] += T(r.normal() * scale);
}

// Actions covering the video frames spanned by latent chunk [k0, k0+cs).
std::vector<ActionFrame> chunk_actions(const std::vector<ActionFrame>& all, int k0, int cs) {
    int base = k0 == 0 ? 0 : 2 * k0 - 1;
    int last = 2 * (k0 + cs - 1);
    std::vector<ActionFrame> out;
    for (int i = base; i <= last; ++i)
        out.push_back(i < int(all.size()) ? all[size_t(i)] : all.back());
    return out;
}

// Synthetic cache block append: frame values equal their absolute position so
// eviction slicing is checkable by value.
void append_synthetic(RollingKVCache<double>& c, int n, int& next_pos, int64_t d) {
    const int64_t F_old = c.frames();
    for (KVCacheBlock<double>& blk : c.kv.blocks) {
        for (Tensor<double>* t : {&blk.k, &blk.v}) {
            Tensor<double> merged({c.vs * (F_old + n), d});
            for (int64_t b = 0; b < c.vs; ++b) {
                if (F_old)
                    std::memcpy(merged.ptr() + b * (F_old + n) * d, t->ptr() + b * F_old * d,
                                sizeof(double) * size_t(F_old * d));
                for (int64_t f = 0; f < n; ++f)
                    for (int64_t j = 0; j < d; ++j)
                        merged[(b * (F_old + n) + F_old + f) * d + j] = double(next_pos + f);
            }
            *t = std::move(merged);
        }
    }
    for (int f = 0; f < n; ++f) c.kv.positions.push_back(int32_t(next_pos + f));
    next_pos += n;
    c.note_block(n);
}

std::string tmp_dir(const std::string& tag) {
    auto d = std::filesystem::temp_directory_path() / ("xw_rollout_" + tag);
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d.string();
}

}  // namespace

TEST_CASE("fifo eviction matches a reference bounded queue under fuzz") {
    Rng rng(404);
    for (int trial = 0; trial < 20; ++trial) {
        RollingKVCache<double> c;
        c.vs = 2;
        c.capacity = 3 + int(rng.uniform_index(6));  // 3..8
        c.kv.blocks.resize(2);
        const int64_t d = 3;
        int next_pos = 0;
        std::deque<std::vector<int32_t>> ref;  // reference FIFO of position blocks
        for (int op = 0; op < 500; ++op) {
            int n = 1 + int(rng.uniform_index(uint64_t(c.capacity)));
            append_synthetic(c, n, next_pos, d);
            std::vector<int32_t> blk;
            for (int f = next_pos - n; f < next_pos; ++f) blk.push_back(int32_t(f));
            ref.push_back(blk);
            c.enforce();
            size_t total = 0;
            for (auto& b : ref) total += b.size();
            while (int64_t(total) > c.capacity) {
                total -= ref.front().size();
                ref.pop_front();
            }
            // retained positions match the reference queue exactly
            std::vector<int32_t> want;
            for (auto& b : ref) want.insert(want.end(), b.begin(), b.end());
            REQUIRE(c.kv.positions == want);
            evict_policy_check(c);
            // tensor content survived the slicing: value == absolute position
            const int64_t F = c.frames();
            for (const KVCacheBlock<double>& blk2 : c.kv.blocks)
                for (int64_t b = 0; b < c.vs; ++b)
                    for (int64_t f = 0; f < F; ++f)
                        REQUIRE(blk2.k[(b * F + f) * d] == double(want[size_t(f)]));
        }
    }
}

TEST_CASE("over-capacity append evicts exactly the oldest block") {
    RollingKVCache<double> c;
    c.vs = 1;
    c.capacity = 4;
    c.kv.blocks.resize(1);
    int pos = 0;
    append_synthetic(c, 3, pos, 2);
    append_synthetic(c, 3, pos, 2);
    CHECK(c.frames() == 6);
    c.enforce();
    CHECK(c.frames() == 3);
    CHECK(c.kv.positions == std::vector<int32_t>({3, 4, 5}));
    CHECK(evict_policy_check(c).substr(0, 2) == "ok");
}

TEST_CASE("policy check flags corrupted caches") {
    RollingKVCache<double> c;
    c.vs = 1;
    c.capacity = 4;
    c.kv.blocks.resize(1);
    int pos = 0;
    append_synthetic(c, 3, pos, 2);
    CHECK(evict_policy_check(c).substr(0, 2) == "ok");

    auto broken_positions = c;
    broken_positions.kv.positions[1] = 7;
    CHECK_THROWS_AS(evict_policy_check(broken_positions), InvariantError);

    auto broken_ledger = c;
    broken_ledger.block_sizes.front() = 2;
    CHECK_THROWS_AS(evict_policy_check(broken_ledger), InvariantError);

    auto over = c;
    over.capacity = 2;
    CHECK_THROWS_AS(evict_policy_check(over), InvariantError);

    // a single block larger than the capacity cannot be evicted away
    CHECK_THROWS_AS(over.enforce(), CacheError);
}

TEST_CASE("sessions with identical arguments are byte-identical") {
    ModelConfig mc = tiny_model_cfg(1);
    WorldModel<double> model(mc, 3);
    randomize(model.params(), 21);
    Episode ep = generate_episode(mc.world, 11);
    RolloutConfig rc;
    rc.capacity = 6;

    RolloutSession<double> a(model, ep, 3, 77, rc);
    RolloutSession<double> b(model, ep, 3, 77, rc);
    CHECK(a.id() == b.id());
    REQUIRE(a.cache().frames() == b.cache().frames());
    for (size_t blk = 0; blk < a.cache().kv.blocks.size(); ++blk)
        for (int64_t i = 0; i < a.cache().kv.blocks[blk].k.numel(); ++i)
            REQUIRE(a.cache().kv.blocks[blk].k[i] == b.cache().kv.blocks[blk].k[i]);

    ChunkRequest req;
    req.actions = chunk_actions(ep.actions, a.next_latent_frame(), 1);
    ChunkResponse ra = a.step(req);
    ChunkResponse rb = b.step(req);
    CHECK(ra.chunk_index == rb.chunk_index);
    REQUIRE(ra.frames.numel() == rb.frames.numel());
    for (int64_t i = 0; i < ra.frames.numel(); ++i) REQUIRE(ra.frames[i] == rb.frames[i]);
}

TEST_CASE("cache occupancy after open equals the history latent frames") {
    ModelConfig mc = tiny_model_cfg(1);
    WorldModel<double> model(mc, 3);
    Episode ep = generate_episode(mc.world, 5);
    RolloutConfig rc;
    rc.capacity = 6;
    for (int hist_frames : {0, 1, 3, 5}) {
        RolloutSession<double> s(model, ep, hist_frames, 1, rc);
        int want = hist_frames == 0 ? 0 : latent_time_of(hist_frames);
        CHECK(s.cache().frames() == want);
        CHECK(s.next_latent_frame() == want);
        CHECK(s.clock() == 0);
    }
    // invalid history frame counts are rejected
    Tensor<float> even({2, 2, 16, 16, 3});
    CHECK_THROWS_AS(RolloutSession<double>(model, &even, {}, ep.rig, ep.appearance, 1, rc),
                    ShapeError);
}

TEST_CASE("streaming output equals the whole-horizon self-forcing rollout") {
    ModelConfig mc = tiny_model_cfg(1);
    WorldModel<double> model(mc, 9);
    randomize(model.params(), 33);
    Episode ep = generate_episode(mc.world, 17);
    const int LT = latent_time_of(mc.world.frames);

    Rng noise(555);
    CondInputs<double> conds = model.build_conditions(ep, 0);
    int ref_evals = 0;
    ag::Var<double> ref;
    {
        ag::NoGradGuard ng;
        ref = self_forcing_rollout(model, ep, conds, noise, 4, &ref_evals);
    }

    RolloutConfig rc;
    rc.capacity = LT;  // covers the whole horizon: no eviction
    rc.denoise_steps = 4;
    RolloutSession<double> s(model, ep, 0, 555, rc);
    Tensor<double> got({ref->val.dim(0), ref->val.dim(1)});
    int64_t row = 0;
    int evals = 0;
    for (int k = 0; k < LT; ++k) {
        ChunkRequest req;
        req.actions = chunk_actions(ep.actions, k, 1);
        ChunkResponse res = s.step(req);
        evals += res.evals;
        const Tensor<double>& lat = s.last_chunk_latents();
        std::memcpy(got.ptr() + row * got.dim(1), lat.ptr(), sizeof(double) * size_t(lat.numel()));
        row += lat.dim(0);
    }
    CHECK(evals == ref_evals);
    double max_abs = 0;
    for (int64_t i = 0; i < got.numel(); ++i)
        max_abs = std::max(max_abs, std::abs(got[i] - ref->val[i]));
    CHECK(max_abs <= 1e-5);
}

TEST_CASE("rolling window equals truncating an unbounded cache") {
    // Independent oracle: run the same chunked generation against a cache that
    // is trimmed by test-local slicing code following the same whole-block
    // FIFO rule, and require identical latents at every chunk.
    ModelConfig mc = tiny_model_cfg(1, 11);  // 6 latent frames
    WorldModel<double> model(mc, 4);
    randomize(model.params(), 8);
    Episode ep = generate_episode(mc.world, 23);
    const int LT = latent_time_of(mc.world.frames);
    const int W = 2;

    RolloutConfig rc;
    rc.capacity = W;
    rc.denoise_steps = 3;
    RolloutSession<double> s(model, ep, 0, 99, rc);

    CondInputs<double> conds = model.build_conditions(ep, 0);
    KVCache<double> cache;
    std::deque<int> blocks;
    Rng noise(99);
    const int64_t VS = model.tokens_per_frame();
    ag::NoGradGuard ng;
    for (int k = 0; k < LT; ++k) {
        ChunkRequest req;
        req.actions = chunk_actions(ep.actions, k, 1);
        s.step(req);

        std::vector<std::vector<ActionFrame>> spans;
        if (k == 0)
            spans.push_back({ep.actions[0]});
        else
            spans.push_back({ep.actions[size_t(2 * k - 1)], ep.actions[size_t(2 * k)]});
        auto y = denoise_chunk(model, spans, conds, &cache, k, noise, rc.sampler,
                               rc.denoise_steps, false);
        blocks.push_back(1);

        // test-local FIFO trim (the oracle implementation)
        int64_t total = 0;
        for (int b : blocks) total += b;
        while (total > W) {
            int drop = blocks.front();
            blocks.pop_front();
            const int64_t F = int64_t(cache.positions.size());
            for (KVCacheBlock<double>& blk : cache.blocks) {
                for (Tensor<double>* t : {&blk.k, &blk.v}) {
                    const int64_t d = t->numel() / (VS * F);
                    Tensor<double> kept({VS * (F - drop), d});
                    for (int64_t b = 0; b < VS; ++b)
                        std::memcpy(kept.ptr() + b * (F - drop) * d,
                                    t->ptr() + (b * F + drop) * d,
                                    sizeof(double) * size_t((F - drop) * d));
                    *t = std::move(kept);
                }
            }
            cache.positions.erase(cache.positions.begin(), cache.positions.begin() + drop);
            total -= drop;
        }

        REQUIRE(s.cache().kv.positions == cache.positions);
        const Tensor<double>& lat = s.last_chunk_latents();
        REQUIRE(lat.numel() == y->val.numel());
        for (int64_t i = 0; i < lat.numel(); ++i) REQUIRE(lat[i] == y->val[i]);
        CHECK(s.cache().frames() <= W);
    }
    CHECK(s.cache().frames() == W);  // saturated
}

TEST_CASE("fork: identical until requests diverge, bounded cost") {
    ModelConfig mc = tiny_model_cfg(1, 11);
    WorldModel<double> model(mc, 6);
    randomize(model.params(), 14);
    Episode ep = generate_episode(mc.world, 31);
    RolloutConfig rc;
    rc.capacity = 3;
    rc.denoise_steps = 2;
    RolloutSession<double> a(model, ep, 1, 42, rc);

    ChunkRequest req;
    req.actions = chunk_actions(ep.actions, a.next_latent_frame(), 1);
    a.step(req);

    RolloutSession<double> b = a.fork();
    CHECK(b.id() != a.id());
    CHECK(b.clock() == a.clock());

    // identical requests -> identical outputs
    ChunkRequest req2;
    req2.actions = chunk_actions(ep.actions, a.next_latent_frame(), 1);
    ChunkResponse ra = a.step(req2);
    ChunkResponse rb = b.step(req2);
    for (int64_t i = 0; i < ra.frames.numel(); ++i) REQUIRE(ra.frames[i] == rb.frames[i]);

    // diverging actions -> diverging outputs from that chunk on
    ChunkRequest left = req2, right = req2;
    for (auto& act : right.actions) act.curvature += 0.2;
    ChunkResponse rl = a.step(left);
    ChunkResponse rr = b.step(right);
    double diff = 0;
    for (int64_t i = 0; i < rl.frames.numel(); ++i)
        diff = std::max(diff, std::abs(double(rl.frames[i] - rr.frames[i])));
    CHECK(diff > 0);

    // cache stays bounded however long either session runs
    for (int k = 0; k < 6; ++k) {
        a.step(req2);
        CHECK(a.cache().frames() <= rc.capacity);
    }
    CHECK(a.cache().frames() == rc.capacity);
}

TEST_CASE("mid-stream agent insertion changes the output") {
    ModelConfig mc = tiny_model_cfg(1);
    WorldModel<double> model(mc, 2);
    randomize(model.params(), 9);
    Episode ep = generate_episode(mc.world, 13);
    RolloutConfig rc;
    rc.capacity = 4;
    rc.denoise_steps = 2;
    RolloutSession<double> a(model, ep, 1, 5, rc);
    RolloutSession<double> b = a.fork();

    ChunkRequest plain;
    plain.actions = chunk_actions(ep.actions, a.next_latent_frame(), 1);
    ChunkRequest with_agent = plain;
    ChunkAgent ag;
    ag.latent_frame = a.next_latent_frame();
    ag.spec.category = AgentCategory::Cyclist;
    ag.spec.cx = 6.0;
    ag.spec.cy = 1.0;
    ag.spec.ext_x = 0.8;
    ag.spec.ext_y = 0.4;
    with_agent.agents.push_back(ag);

    ChunkResponse ra = a.step(plain);
    ChunkResponse rb = b.step(with_agent);
    double diff = 0;
    for (int64_t i = 0; i < ra.frames.numel(); ++i)
        diff = std::max(diff, std::abs(double(ra.frames[i] - rb.frames[i])));
    CHECK(diff > 0);
}

TEST_CASE("request and state errors") {
    ModelConfig mc = tiny_model_cfg(1);
    WorldModel<double> model(mc, 2);
    Episode ep = generate_episode(mc.world, 3);
    RolloutConfig rc;
    rc.capacity = 4;
    rc.denoise_steps = 1;
    RolloutSession<double> s(model, ep, 1, 5, rc);

    ChunkRequest bad;
    bad.actions = {ep.actions[0]};  // mid-stream chunk needs 2 video frames
    CHECK_THROWS_AS(s.step(bad), RequestError);

    ChunkRequest ok;
    ok.actions = chunk_actions(ep.actions, s.next_latent_frame(), 1);
    s.step(ok);
    s.close();
    CHECK_THROWS_AS(s.step(ok), StateError);
    CHECK_THROWS_AS(s.fork(), StateError);

    RolloutConfig too_small;
    too_small.capacity = 0;
    CHECK_THROWS_AS(RolloutSession<double>(model, ep, 1, 5, too_small), ConfigError);
}

TEST_CASE("evaluation count per chunk is constant and tracks guidance") {
    ModelConfig mc = tiny_model_cfg(1, 11);
    WorldModel<double> model(mc, 2);
    Episode ep = generate_episode(mc.world, 3);

    RolloutConfig rc;
    rc.capacity = 3;
    rc.denoise_steps = 4;
    RolloutSession<double> s(model, ep, 1, 5, rc);
    std::vector<int> evals;
    for (int k = 0; k < 4; ++k) {
        ChunkRequest req;
        req.actions = chunk_actions(ep.actions, s.next_latent_frame(), 1);
        evals.push_back(s.step(req).evals);
    }
    for (int e : evals) CHECK(e == 4);

    RolloutConfig guided = rc;
    guided.sampler.cfg_branch = 1;
    guided.sampler.cfg_w = 3.0;
    RolloutSession<double> g(model, ep, 1, 5, guided);
    ChunkRequest req;
    req.actions = chunk_actions(ep.actions, g.next_latent_frame(), 1);
    CHECK(g.step(req).evals == 8);
}

TEST_CASE("mid-sequence chunk decode matches the full decode") {
    ModelConfig mc = tiny_model_cfg(1);
    WorldModel<double> model(mc, 2);
    Episode ep = generate_episode(mc.world, 19);
    Tensor<double> rows = model.encode_video(ep.frames);
    const int64_t VS = model.tokens_per_frame(), C = rows.dim(1);

    // latents 1..2 decode to video frames 1..4 (two pairs, no anchor)
    Tensor<double> slice({2 * VS, C});
    std::memcpy(slice.ptr(), rows.ptr() + VS * C, sizeof(double) * size_t(slice.numel()));
    Tensor<float> chunk = model.decode_video_chunk(slice, 2, 1);
    REQUIRE(chunk.dim(1) == 4);
    const int64_t V = ep.frames.dim(0), F = ep.frames.dim(1);
    const int64_t px = ep.frames.dim(2) * ep.frames.dim(3) * 3;
    for (int64_t v = 0; v < V; ++v)
        for (int64_t f = 0; f < 4; ++f)
            for (int64_t i = 0; i < px; ++i) {
                float want = ep.frames[(v * F + 1 + f) * px + i];
                float got = chunk[(v * 4 + f) * px + i];
                REQUIRE(std::abs(got - want) <= 1e-6f);
            }
}

TEST_CASE("ndjson protocol: open/step/fork/close round trip") {
    ModelConfig mc = tiny_model_cfg(1);
    WorldModel<double> model(mc, 2);
    randomize(model.params(), 12);
    std::string dir = tmp_dir("proto");
    Episode ep = generate_episode(mc.world, 29);
    std::string ep_path = dir + "/scene.xwep";
    save_episode(ep, ep_path);

    RolloutConfig rc;
    rc.capacity = 4;
    rc.denoise_steps = 2;
    RolloutService<double> svc(model, dir, rc);

    auto open_res = nlohmann::json::parse(svc.handle_line(
        nlohmann::json({{"op", "open"}, {"episode_ref", ep_path}, {"history_frames", 1},
                        {"seed", 7}})
            .dump()));
    REQUIRE(!open_res.contains("error"));
    std::string sid = open_res["session"];
    CHECK(open_res["next_latent_frame"] == 1);

    nlohmann::json step = {{"op", "step"}, {"session", sid}};
    step["actions"] = nlohmann::json::array();
    for (const ActionFrame& a : chunk_actions(ep.actions, 1, 1))
        step["actions"].push_back({a.velocity, a.curvature, a.roll, a.pitch});
    auto step_res = nlohmann::json::parse(svc.handle_line(step.dump()));
    REQUIRE(!step_res.contains("error"));
    CHECK(step_res["chunk_index"] == 0);
    CHECK(step_res["evals"] == 2);
    std::string fref = step_res["frames_ref"];
    Episode chunk = load_episode(fref);
    CHECK(chunk.frames.dim(0) == 2);
    CHECK(chunk.frames.dim(1) == 2);  // one mid-stream latent = a frame pair
    CHECK(chunk.frames.dim(2) == 16);

    auto fork_res = nlohmann::json::parse(
        svc.handle_line(nlohmann::json({{"op", "fork"}, {"session", sid}}).dump()));
    REQUIRE(!fork_res.contains("error"));
    std::string fid = fork_res["session"];
    CHECK(fid != sid);
    CHECK(svc.open_sessions() == 2);

    // identical next request on parent and fork -> byte-identical frames
    nlohmann::json step2 = step;
    step2["actions"] = nlohmann::json::array();
    for (const ActionFrame& a : chunk_actions(ep.actions, 2, 1))
        step2["actions"].push_back({a.velocity, a.curvature, a.roll, a.pitch});
    auto r1 = nlohmann::json::parse(svc.handle_line(step2.dump()));
    nlohmann::json step2f = step2;
    step2f["session"] = fid;
    auto r2 = nlohmann::json::parse(svc.handle_line(step2f.dump()));
    Episode c1 = load_episode(r1["frames_ref"]);
    Episode c2 = load_episode(r2["frames_ref"]);
    REQUIRE(c1.frames.numel() == c2.frames.numel());
    for (int64_t i = 0; i < c1.frames.numel(); ++i) REQUIRE(c1.frames[i] == c2.frames[i]);

    auto close_res = nlohmann::json::parse(
        svc.handle_line(nlohmann::json({{"op", "close"}, {"session", sid}}).dump()));
    CHECK(close_res["closed"] == true);
    CHECK(svc.open_sessions() == 1);

    // errors surface as typed error objects, never exceptions
    auto gone = nlohmann::json::parse(
        svc.handle_line(nlohmann::json({{"op", "step"}, {"session", sid}}).dump()));
    CHECK(gone["error"]["type"] == "state-error");
    auto bad_op = nlohmann::json::parse(svc.handle_line(R"({"op":"warp"})"));
    CHECK(bad_op["error"]["type"] == "request-error");
    auto bad_json = nlohmann::json::parse(svc.handle_line("not json"));
    CHECK(bad_json["error"]["type"] == "request-error");
    auto short_actions = nlohmann::json::parse(svc.handle_line(
        nlohmann::json({{"op", "step"}, {"session", fid}, {"actions", {{1.0, 0.0, 0.0, 0.0}}}})
            .dump()));
    CHECK(short_actions["error"]["type"] == "request-error");
}

TEST_CASE("ndjson stream loop answers one line per request") {
    ModelConfig mc = tiny_model_cfg(1);
    WorldModel<double> model(mc, 2);
    std::string dir = tmp_dir("stream");
    Episode ep = generate_episode(mc.world, 2);
    std::string ep_path = dir + "/scene.xwep";
    save_episode(ep, ep_path);

    RolloutConfig rc;
    rc.capacity = 4;
    rc.denoise_steps = 1;
    RolloutService<double> svc(model, dir, rc);
    std::istringstream in(
        nlohmann::json({{"op", "open"}, {"episode_ref", ep_path}, {"seed", 1}}).dump() + "\n" +
        R"({"op":"nope"})" + "\n");
    std::ostringstream out;
    svc.run(in, out);
    std::istringstream lines(out.str());
    std::string l1, l2, l3;
    CHECK(bool(std::getline(lines, l1)));
    CHECK(bool(std::getline(lines, l2)));
    CHECK(!std::getline(lines, l3));
    CHECK(nlohmann::json::parse(l1).contains("session"));
    CHECK(nlohmann::json::parse(l2).contains("error"));
}
