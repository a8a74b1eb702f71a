#include "doctest.h"

#include <cmath>

#include "gradcheck.hpp"
#include "xworld/backbone.hpp"

using namespace xworld;
using ag::Var;

namespace {

BackboneConfig tiny_cfg() {
    BackboneConfig cfg;
    cfg.d_model = 16;
    cfg.heads = 2;
    cfg.blocks = 2;
    cfg.d_ff = 32;
    cfg.views = 2;
    cfg.lat_h = 2;
    cfg.lat_w = 2;
    cfg.lat_channels = 8;
    cfg.chunk_size = 2;
    cfg.d_cond = 12;
    return cfg;
}

// Zero-init gates make an untouched backbone an identity map; most tests need
// weights that actually mix, so perturb everything.
void randomize(ParamRegistry<double>& reg, uint64_t seed, double scale = 0.05) {
    Rng rng(seed);
    for (auto& p : reg.all())
        for (int64_t i = 0; i < p->val.numel(); ++i) p->val[i] += rng.normal() * scale;
}

struct Inputs {
    Tensor<double> latents, adaln, camera, dyn, sta, app;
};

Inputs random_inputs(const BackboneConfig& cfg, int F, uint64_t seed) {
    Rng rng(seed);
    int64_t VS = int64_t(cfg.views) * cfg.spatial_tokens();
    Inputs in;
    in.latents = random_tensor({F * VS, cfg.lat_channels}, rng, 0.5);
    in.adaln = random_tensor({F, cfg.d_cond}, rng, 0.5);
    in.camera = random_tensor({cfg.views, cfg.d_model}, rng, 0.5);
    in.dyn = random_tensor({2, cfg.d_model}, rng, 0.5);
    in.sta = random_tensor({3, cfg.d_model}, rng, 0.5);
    in.app = random_tensor({3, cfg.d_model}, rng, 0.5);
    return in;
}

BackboneInput<double> wrap(const Inputs& in, const std::vector<uint8_t>& flags, AttnMode mode) {
    BackboneInput<double> b;
    b.latents = ag::constant(in.latents);
    b.adaln = ag::constant(in.adaln);
    b.camera = ag::constant(in.camera);
    b.dynamic_tokens = ag::constant(in.dyn);
    b.static_tokens = ag::constant(in.sta);
    b.appearance_tokens = ag::constant(in.app);
    b.history_flag = flags;
    b.mode = mode;
    return b;
}

}  // namespace

TEST_CASE("chunk mask oracle") {
    std::vector<int32_t> key_pos = {0, 1, 2, 3, 4, 5};
    auto m = build_chunk_mask(3, 3, key_pos, 2);  // queries at abs frames 3,4,5
    // frame 3 is in chunk 1: sees chunks 0 and 1 -> keys 0..3
    for (int j = 0; j < 6; ++j) CHECK(int((*m)[0 * 6 + j]) == (j <= 3 ? 1 : 0));
    // frame 4 and 5 are chunk 2: see everything
    for (int j = 0; j < 6; ++j) CHECK(int((*m)[1 * 6 + j]) == 1);
    for (int j = 0; j < 6; ++j) CHECK(int((*m)[2 * 6 + j]) == 1);
    CHECK_THROWS_AS(build_chunk_mask(1, 0, key_pos, 0), ConfigError);
}

TEST_CASE("config validation") {
    BackboneConfig cfg = tiny_cfg();
    CHECK(cfg.valid());
    cfg.d_model = 15;  // not divisible by heads
    CHECK(!cfg.valid());
    cfg = tiny_cfg();
    cfg.heads = 8;  // head dim 2 ok; heads 16 -> head dim 1, odd
    cfg.d_model = 16;
    CHECK(cfg.valid());
    cfg.heads = 16;
    std::string why;
    CHECK(!cfg.valid(&why));
    CHECK(!why.empty());
}

TEST_CASE("backbone: shape, determinism, and zero-init identity") {
    BackboneConfig cfg = tiny_cfg();
    ParamRegistry<double> reg(99);
    Backbone<double> bb(cfg, reg);
    const int F = 4;
    Inputs in = random_inputs(cfg, F, 1);
    std::vector<uint8_t> flags(F, 0);
    auto out1 = bb.forward(wrap(in, flags, AttnMode::Bidirectional));
    int64_t VS = int64_t(cfg.views) * cfg.spatial_tokens();
    REQUIRE(out1->val.shape == std::vector<int64_t>({F * VS, cfg.lat_channels}));
    auto out2 = bb.forward(wrap(in, flags, AttnMode::Bidirectional));
    for (int64_t i = 0; i < out1->val.numel(); ++i) CHECK(out1->val[i] == out2->val[i]);
    // with zero-init adaLN gates every block is the identity, so conditions
    // cannot influence the output yet
    Inputs other = in;
    Rng rng(7);
    other.adaln = random_tensor({F, cfg.d_cond}, rng);
    other.dyn = random_tensor({5, cfg.d_model}, rng);
    auto out3 = bb.forward(wrap(other, flags, AttnMode::Bidirectional));
    for (int64_t i = 0; i < out1->val.numel(); ++i)
        CHECK(out1->val[i] == doctest::Approx(out3->val[i]).epsilon(1e-12));
}

TEST_CASE("backbone: conditions and indicator matter once weights are non-trivial") {
    BackboneConfig cfg = tiny_cfg();
    ParamRegistry<double> reg(99);
    Backbone<double> bb(cfg, reg);
    randomize(reg, 5);
    const int F = 4;
    Inputs in = random_inputs(cfg, F, 2);
    std::vector<uint8_t> flags(F, 0);
    auto base = bb.forward(wrap(in, flags, AttnMode::Bidirectional));
    Inputs mod = in;
    Rng drng(3);
    mod.dyn = random_tensor({2, cfg.d_model}, drng);
    auto out_dyn = bb.forward(wrap(mod, flags, AttnMode::Bidirectional));
    double diff = 0;
    for (int64_t i = 0; i < base->val.numel(); ++i)
        diff += std::abs(base->val[i] - out_dyn->val[i]);
    CHECK(diff > 1e-6);
    std::vector<uint8_t> flags2 = flags;
    flags2[1] = 1;
    auto out_flag = bb.forward(wrap(in, flags2, AttnMode::Bidirectional));
    diff = 0;
    for (int64_t i = 0; i < base->val.numel(); ++i)
        diff += std::abs(base->val[i] - out_flag->val[i]);
    CHECK(diff > 1e-6);
}

TEST_CASE("backbone: chunk-causal mask blocks future influence") {
    BackboneConfig cfg = tiny_cfg();  // chunk_size 2
    ParamRegistry<double> reg(42);
    Backbone<double> bb(cfg, reg);
    randomize(reg, 11);
    const int F = 6;  // chunks {0,1} {2,3} {4,5}
    int64_t VS = int64_t(cfg.views) * cfg.spatial_tokens();
    Inputs in = random_inputs(cfg, F, 3);
    std::vector<uint8_t> flags(F, 0);
    auto base = bb.forward(wrap(in, flags, AttnMode::ChunkCausal));
    // perturb the last chunk's latents
    Inputs pert = in;
    for (int64_t r = 4 * VS; r < 6 * VS; ++r)
        for (int64_t c = 0; c < cfg.lat_channels; ++c) pert.latents.at2(r, c) += 1.0;
    auto out = bb.forward(wrap(pert, flags, AttnMode::ChunkCausal));
    double early = 0, late = 0;
    for (int64_t r = 0; r < 4 * VS; ++r)
        for (int64_t c = 0; c < cfg.lat_channels; ++c)
            early += std::abs(out->val.at2(r, c) - base->val.at2(r, c));
    for (int64_t r = 4 * VS; r < 6 * VS; ++r)
        for (int64_t c = 0; c < cfg.lat_channels; ++c)
            late += std::abs(out->val.at2(r, c) - base->val.at2(r, c));
    CHECK(early == 0.0);  // exact: masked attention plus per-token ops
    CHECK(late > 1e-3);
    // bidirectional mode lets the perturbation reach earlier frames
    auto base_bi = bb.forward(wrap(in, flags, AttnMode::Bidirectional));
    auto out_bi = bb.forward(wrap(pert, flags, AttnMode::Bidirectional));
    early = 0;
    for (int64_t r = 0; r < 4 * VS; ++r)
        for (int64_t c = 0; c < cfg.lat_channels; ++c)
            early += std::abs(out_bi->val.at2(r, c) - base_bi->val.at2(r, c));
    CHECK(early > 1e-3);
    // perturbing an earlier chunk does influence later chunks in causal mode
    Inputs pert2 = in;
    for (int64_t r = 0; r < 2 * VS; ++r)
        for (int64_t c = 0; c < cfg.lat_channels; ++c) pert2.latents.at2(r, c) += 1.0;
    auto out2 = bb.forward(wrap(pert2, flags, AttnMode::ChunkCausal));
    late = 0;
    for (int64_t r = 4 * VS; r < 6 * VS; ++r)
        for (int64_t c = 0; c < cfg.lat_channels; ++c)
            late += std::abs(out2->val.at2(r, c) - base->val.at2(r, c));
    CHECK(late > 1e-3);
}

TEST_CASE("backbone: incremental generation with kv cache matches the full pass") {
    BackboneConfig cfg = tiny_cfg();  // chunk_size 2
    ParamRegistry<double> reg(17);
    Backbone<double> bb(cfg, reg);
    randomize(reg, 23);
    const int F = 6;
    int64_t VS = int64_t(cfg.views) * cfg.spatial_tokens();
    Inputs in = random_inputs(cfg, F, 4);
    std::vector<uint8_t> flags(F, 0);
    auto full = bb.forward(wrap(in, flags, AttnMode::ChunkCausal));

    KVCache<double> cache;
    for (int chunk = 0; chunk < 3; ++chunk) {
        int f0 = chunk * cfg.chunk_size;
        BackboneInput<double> bi;
        Tensor<double> lat_chunk({int64_t(cfg.chunk_size) * VS, cfg.lat_channels});
        std::memcpy(lat_chunk.ptr(), in.latents.ptr() + int64_t(f0) * VS * cfg.lat_channels,
                    sizeof(double) * size_t(lat_chunk.numel()));
        Tensor<double> ada_chunk({cfg.chunk_size, cfg.d_cond});
        std::memcpy(ada_chunk.ptr(), in.adaln.ptr() + int64_t(f0) * cfg.d_cond,
                    sizeof(double) * size_t(ada_chunk.numel()));
        bi.latents = ag::constant(lat_chunk);
        bi.adaln = ag::constant(ada_chunk);
        bi.camera = ag::constant(in.camera);
        bi.dynamic_tokens = ag::constant(in.dyn);
        bi.static_tokens = ag::constant(in.sta);
        bi.appearance_tokens = ag::constant(in.app);
        bi.history_flag = std::vector<uint8_t>(size_t(cfg.chunk_size), 0);
        bi.mode = AttnMode::ChunkCausal;
        bi.first_frame_pos = f0;
        bi.cache_in = cache.empty() ? nullptr : &cache;
        bi.cache_out = &cache;
        auto out = bb.forward(bi);
        for (int64_t r = 0; r < int64_t(cfg.chunk_size) * VS; ++r)
            for (int64_t c = 0; c < cfg.lat_channels; ++c) {
                double want = full->val.at2(int64_t(f0) * VS + r, c);
                CHECK(out->val.at2(r, c) == doctest::Approx(want).epsilon(1e-10));
            }
    }
    CHECK(cache.frames() == F);
    CHECK(cache.positions.back() == F - 1);
}

TEST_CASE("backbone: cache misuse raises cache errors") {
    BackboneConfig cfg = tiny_cfg();
    ParamRegistry<double> reg(1);
    Backbone<double> bb(cfg, reg);
    Inputs in = random_inputs(cfg, 2, 5);
    std::vector<uint8_t> flags(2, 0);
    KVCache<double> cache;
    cache.blocks.resize(1);  // wrong block count
    cache.positions = {0};
    auto bi = wrap(in, flags, AttnMode::ChunkCausal);
    bi.cache_in = &cache;
    CHECK_THROWS_AS(bb.forward(bi), CacheError);
    auto bi2 = wrap(in, flags, AttnMode::Bidirectional);
    bi2.cache_in = &cache;
    CHECK_THROWS_AS(bb.forward(bi2), CacheError);
}

TEST_CASE("backbone: shape errors") {
    BackboneConfig cfg = tiny_cfg();
    ParamRegistry<double> reg(1);
    Backbone<double> bb(cfg, reg);
    Inputs in = random_inputs(cfg, 2, 6);
    std::vector<uint8_t> flags(2, 0);
    auto bad = wrap(in, flags, AttnMode::Bidirectional);
    bad.history_flag = std::vector<uint8_t>(3, 0);
    CHECK_THROWS_AS(bb.forward(bad), ShapeError);
    auto bad2 = wrap(in, flags, AttnMode::Bidirectional);
    Rng rng(1);
    bad2.adaln = ag::constant(random_tensor({2, cfg.d_cond + 1}, rng));
    CHECK_THROWS_AS(bb.forward(bad2), ShapeError);
    auto bad3 = wrap(in, flags, AttnMode::Bidirectional);
    bad3.dynamic_tokens = ag::Var<double>();
    CHECK_THROWS_AS(bb.forward(bad3), ShapeError);
}

TEST_CASE("backbone: end-to-end gradient check (float64)") {
    BackboneConfig cfg;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.blocks = 1;
    cfg.d_ff = 12;
    cfg.views = 2;
    cfg.lat_h = 2;
    cfg.lat_w = 1;
    cfg.lat_channels = 4;
    cfg.chunk_size = 1;
    cfg.d_cond = 6;
    ParamRegistry<double> reg(3);
    Backbone<double> bb(cfg, reg);
    randomize(reg, 31, 0.08);
    const int F = 2;
    int64_t VS = int64_t(cfg.views) * cfg.spatial_tokens();
    Rng rng(8);
    auto latents = ag::param(random_tensor({F * VS, cfg.lat_channels}, rng, 0.5));
    auto adaln = ag::param(random_tensor({F, cfg.d_cond}, rng, 0.5));
    auto camera = ag::param(random_tensor({cfg.views, cfg.d_model}, rng, 0.5));
    auto dyn = ag::param(random_tensor({2, cfg.d_model}, rng, 0.5));
    auto sta = ag::param(random_tensor({2, cfg.d_model}, rng, 0.5));
    auto app = ag::param(random_tensor({3, cfg.d_model}, rng, 0.5));
    Tensor<double> target = random_tensor({F * VS, cfg.lat_channels}, rng, 0.5);
    std::vector<double> row_w(size_t(F * VS), 1.0);

    auto make_loss = [&]() {
        BackboneInput<double> bi;
        bi.latents = latents;
        bi.adaln = adaln;
        bi.camera = camera;
        bi.dynamic_tokens = dyn;
        bi.static_tokens = sta;
        bi.appearance_tokens = app;
        bi.history_flag = {1, 0};
        bi.mode = AttnMode::ChunkCausal;
        auto out = bb.forward(bi);
        return ag::mse_weighted(out, target, row_w, double(F * VS));
    };

    // inputs and a representative subset of weights (checking every element of
    // every weight would dominate test time without adding coverage)
    std::vector<Var<double>> subject = {latents, adaln, camera, dyn, sta, app};
    for (auto& p : reg.all())
        if (p->val.numel() <= 16) subject.push_back(p);
    gradcheck(subject, make_loss, 1e-6, 2e-6);

    // the big weight matrices get a directional probe instead: analytic
    // gradient dotted with a random direction vs the numeric derivative
    Rng drng(9);
    for (auto& p : reg.all()) {
        if (p->val.numel() <= 16) continue;
        for (auto& q : reg.all()) q->grad = Tensor<double>();
        for (auto& q : subject) q->grad = Tensor<double>();
        auto loss = make_loss();
        ag::backward(loss);
        Tensor<double> dir = random_tensor(p->val.shape, drng);
        double analytic = 0;
        REQUIRE(p->grad.shape == p->val.shape);
        for (int64_t i = 0; i < p->val.numel(); ++i) analytic += p->grad[i] * dir[i];
        const double eps = 1e-6;
        Tensor<double> keep = p->val;
        for (int64_t i = 0; i < p->val.numel(); ++i) p->val[i] += eps * dir[i];
        double lp = make_loss()->val[0];
        p->val = keep;
        for (int64_t i = 0; i < p->val.numel(); ++i) p->val[i] -= eps * dir[i];
        double lm = make_loss()->val[0];
        p->val = keep;
        double numeric = (lp - lm) / (2 * eps);
        double denom = std::max(1.0, std::max(std::abs(numeric), std::abs(analytic)));
        CHECK(std::abs(analytic - numeric) / denom < 2e-6);
    }
}
