#pragma once

#include <filesystem>
#include <fstream>

#include "xworld/model.hpp"

namespace xworld {

// ---------------------------------------------------------------------------
// Flow-matching batches
// ---------------------------------------------------------------------------

// Conditioning regimes seen during pretraining: generate everything from
// conditions only, continue from a single context frame, or continue from a
// short clip.
enum class BatchMode { FromScratch = 0, FromImage = 1, FromClip = 2 };

template <typename T>
struct Stage1Batch {
    Tensor<T> y_t;                      // canonical rows: clean history + noised future
    Tensor<T> z0;                       // clean latents
    Tensor<T> target;                   // velocity target rows (noise - data)
    std::vector<T> row_w;               // 0 on history rows
    std::vector<uint8_t> history_flag;  // per latent frame
    std::vector<double> flow_t;         // per latent frame (0 on history)
    BatchMode mode = BatchMode::FromScratch;
    double t = 0;
    int history_latents = 0;
    int ref_frame = 0;  // video frame whose ego pose anchors the conditions
};

// Draw the conditioning mode: 20% from-scratch, 40% single-frame, 40% clip
// (clip history of 3 or 5 video frames -> 2 or 3 latent frames).
inline std::pair<BatchMode, int> sample_batch_mode(Rng& rng) {
    double u = rng.uniform();
    if (u < 0.2) return {BatchMode::FromScratch, 0};
    if (u < 0.6) return {BatchMode::FromImage, 1};
    int video_frames = rng.bernoulli(0.5) ? 3 : 5;
    return {BatchMode::FromClip, latent_time_of(video_frames)};
}

template <typename T>
Stage1Batch<T> make_stage1_batch(WorldModel<T>& model, const Tensor<T>& z0_rows, Rng& rng) {
    const int LT = model.latent_frames();
    const int64_t VS = model.tokens_per_frame();
    const int64_t C = z0_rows.dim(1);
    if (z0_rows.dim(0) != LT * VS) throw ShapeError("stage1 batch: latent row count mismatch");

    Stage1Batch<T> b;
    b.z0 = z0_rows;
    auto [mode, hist] = sample_batch_mode(rng);
    // keep at least one supervised latent frame on short sequences
    hist = std::min(hist, LT - 1);
    b.mode = mode;
    b.history_latents = hist;
    b.ref_frame = hist == 0 ? 0 : frame_span(hist - 1);
    b.t = rng.uniform();
    b.y_t = Tensor<T>({LT * VS, C});
    b.target = Tensor<T>({LT * VS, C});
    b.row_w.assign(size_t(LT * VS), T(0));
    b.history_flag.assign(size_t(LT), 0);
    b.flow_t.assign(size_t(LT), b.t);
    for (int f = 0; f < LT; ++f) {
        bool is_hist = f < hist;
        if (is_hist) {
            b.history_flag[size_t(f)] = 1;
            b.flow_t[size_t(f)] = 0.0;
        }
        for (int64_t r = int64_t(f) * VS; r < int64_t(f + 1) * VS; ++r) {
            for (int64_t c = 0; c < C; ++c) {
                T z = z0_rows.at2(r, c);
                if (is_hist) {
                    b.y_t.at2(r, c) = z;
                    b.target.at2(r, c) = T(0);
                } else {
                    T e = static_cast<T>(rng.normal());
                    b.y_t.at2(r, c) = static_cast<T>((1.0 - b.t) * z + b.t * e);
                    b.target.at2(r, c) = e - z;
                }
            }
            if (!is_hist) b.row_w[size_t(r)] = T(1);
        }
    }
    return b;
}

template <typename T>
ag::Var<T> denoiser_forward(WorldModel<T>& model, ag::Var<T> latents,
                            const std::vector<uint8_t>& flags, ag::Var<T> adaln,
                            const CondInputs<T>& conds, AttnMode mode,
                            const KVCache<T>* cache_in = nullptr, KVCache<T>* cache_out = nullptr,
                            int first_frame_pos = 0) {
    BackboneInput<T> in;
    in.latents = latents;
    in.history_flag = flags;
    in.adaln = adaln;
    in.camera = conds.camera;
    in.dynamic_tokens = conds.dyn.tokens;
    in.static_tokens = conds.sta.tokens;
    in.appearance_tokens = conds.app.tokens;
    in.mode = mode;
    in.cache_in = cache_in;
    in.cache_out = cache_out;
    in.first_frame_pos = first_frame_pos;
    return model.backbone().forward(in);
}

// Masked flow-matching loss for one episode batch. The norm counts only
// supervised entries so the loss is comparable across conditioning modes.
template <typename T>
ag::Var<T> stage1_loss(WorldModel<T>& model, const Episode& ep, Rng& rng,
                       bool condition_dropout = true) {
    Tensor<T> z0 = model.encode_video(ep.frames);
    Stage1Batch<T> b = make_stage1_batch(model, z0, rng);
    CondInputs<T> conds = model.build_conditions(ep, b.ref_frame);
    if (condition_dropout) {
        std::vector<ConditionTokens<T>> cs = {conds.dyn, conds.sta, conds.app};
        model.conditioning().apply_condition_dropout(cs, rng);
        conds.dyn = cs[0];
        conds.sta = cs[1];
        conds.app = cs[2];
    }
    auto adaln = model.conditioning().encode_actions(ep.actions, b.flow_t);
    auto out = denoiser_forward(model, ag::constant(b.y_t), b.history_flag, adaln, conds,
                                AttnMode::Bidirectional);
    double supervised = 0;
    for (T w : b.row_w) supervised += double(w);
    double norm = supervised * double(b.target.dim(1));
    return ag::mse_weighted(out, b.target, b.row_w, norm);
}

// ---------------------------------------------------------------------------
// Learned codec training
// ---------------------------------------------------------------------------

struct CodecTrainConfig {
    int steps = 400;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double clip_norm = 1.0;
    double kl_weight = 1e-4;  // used only when the codec is variational
    int log_every = 20;
    int ckpt_every = 200;
    uint64_t seed = 0;
    std::string out_dir;
};

namespace detail {

// Reparameterized sample from a [N, 2*lc] encoder output laid out [mean|logvar]:
// z = mean + exp(0.5*logvar) .* eps.
template <typename T>
ag::Var<T> vae_sample(ag::Var<T> enc, Tensor<T> eps) {
    const int64_t N = enc->val.dim(0), lc = eps.dim(1);
    Tensor<T> z({N, lc});
    for (int64_t r = 0; r < N; ++r)
        for (int64_t c = 0; c < lc; ++c) {
            const T lv = enc->val.at2(r, lc + c);
            z.at2(r, c) = static_cast<T>(enc->val.at2(r, c) +
                                         std::exp(0.5 * double(lv)) * eps.at2(r, c));
        }
    auto e = std::make_shared<Tensor<T>>(std::move(eps));
    return ag::make_op<T>(std::move(z), {enc}, [enc, e, N, lc](ag::Node<T>& n) mutable {
        if (!enc->requires_grad) return;
        enc->ensure_grad();
        for (int64_t r = 0; r < N; ++r)
            for (int64_t c = 0; c < lc; ++c) {
                const T g = n.grad.at2(r, c);
                const T lv = enc->val.at2(r, lc + c);
                enc->grad.at2(r, c) += g;
                enc->grad.at2(r, lc + c) += static_cast<T>(
                    double(g) * 0.5 * std::exp(0.5 * double(lv)) * double(e->at2(r, c)));
            }
    });
}

// Mean KL(q(z|x) || N(0, I)) per latent entry over the [mean|logvar] rows.
template <typename T>
ag::Var<T> vae_kl(ag::Var<T> enc, int64_t lc) {
    const int64_t N = enc->val.dim(0);
    const double inv = 1.0 / double(N * lc);
    double s = 0;
    for (int64_t r = 0; r < N; ++r)
        for (int64_t c = 0; c < lc; ++c) {
            const double m = double(enc->val.at2(r, c));
            const double lv = double(enc->val.at2(r, lc + c));
            s += 0.5 * (m * m + std::exp(lv) - 1.0 - lv);
        }
    Tensor<T> out({1});
    out[0] = static_cast<T>(s * inv);
    return ag::make_op<T>(std::move(out), {enc}, [enc, N, lc, inv](ag::Node<T>& n) mutable {
        if (!enc->requires_grad) return;
        enc->ensure_grad();
        const double g = double(n.grad[0]) * inv;
        for (int64_t r = 0; r < N; ++r)
            for (int64_t c = 0; c < lc; ++c) {
                const double m = double(enc->val.at2(r, c));
                const double lv = double(enc->val.at2(r, lc + c));
                enc->grad.at2(r, c) += static_cast<T>(g * m);
                enc->grad.at2(r, lc + c) += static_cast<T>(g * 0.5 * (std::exp(lv) - 1.0));
            }
    });
}

}  // namespace detail

// L2 reconstruction on packed patch rows of one episode; adds the standard
// KL-to-unit-normal term when the encoder is variational.
template <typename T>
ag::Var<T> codec_loss(LearnedCodec<T>& codec, const Tensor<T>& packed_rows, Rng& rng,
                      double kl_weight) {
    const int64_t N = packed_rows.dim(0);
    const int64_t pc = codec.cfg.packed_channels();
    const int64_t lc = codec.cfg.lat_channels;
    auto enc = codec.encode_rows(ag::constant(packed_rows));
    ag::Var<T> z = enc, kl;
    if (codec.cfg.variational) {
        Tensor<T> eps({N, lc});
        for (int64_t i = 0; i < eps.numel(); ++i) eps[i] = static_cast<T>(rng.normal());
        z = detail::vae_sample(enc, std::move(eps));
        kl = detail::vae_kl(enc, lc);
    }
    auto rec = codec.decode_rows(z);
    std::vector<T> w(size_t(N), T(1));
    auto loss = ag::mse_weighted(rec, packed_rows, w, double(N * pc));
    if (codec.cfg.variational) loss = ag::add(loss, ag::scale(kl, static_cast<T>(kl_weight)));
    return loss;
}

// Trains the learned codec on procedurally regenerated episodes and writes a
// standalone codec checkpoint. Returns the smoothed final loss.
template <typename T>
double train_codec(LearnedCodec<T>& codec, const WorldConfig& world,
                   const std::vector<uint64_t>& episode_seeds, const CodecTrainConfig& cfg) {
    if (episode_seeds.empty()) throw ConfigError("codec training: empty dataset");
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream log(cfg.out_dir + "/codec_loss.csv");
    log << "step,loss\n";

    typename AdamW<T>::Config ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    ocfg.clip_norm = cfg.clip_norm;
    AdamW<T> opt(codec.reg, ocfg);

    auto save_ckpt = [&](const std::string& name, int step, double loss) {
        Checkpoint ck;
        ck.meta["kind"] = "codec";
        ck.meta["step"] = step;
        ck.meta["final_loss"] = loss;
        ck.tensors = codec.reg.state_dict();
        ck.save(cfg.out_dir + "/" + name);
    };

    Rng rng(cfg.seed ^ 0xc0dec);
    double last = 0, ema = -1;
    for (int step = 0; step < cfg.steps; ++step) {
        uint64_t seed = episode_seeds[rng.uniform_index(episode_seeds.size())];
        Episode ep = generate_episode(world, seed);
        Tensor<T> packed = patchify_encode(ep.frames.template cast<T>(), codec.cfg);
        const int64_t cells = packed.numel() / codec.cfg.packed_channels();
        Tensor<T> rows = packed.reshaped({cells, int64_t(codec.cfg.packed_channels())});
        codec.reg.zero_grads();
        auto loss = codec_loss(codec, rows, rng, cfg.kl_weight);
        last = double(loss->val[0]);
        if (!std::isfinite(last))
            throw DivergenceError("codec training: non-finite loss at step " +
                                  std::to_string(step));
        ema = ema < 0 ? last : 0.95 * ema + 0.05 * last;
        ag::backward(loss);
        opt.step();
        if (step % cfg.log_every == 0 || step + 1 == cfg.steps)
            log << step << "," << last << "\n" << std::flush;
        if (cfg.ckpt_every > 0 && step > 0 && step % cfg.ckpt_every == 0)
            save_ckpt("codec_latest.xwck", step, last);
    }
    save_ckpt("codec_final.xwck", cfg.steps, last);
    return ema < 0 ? 0.0 : ema;
}

// Loads a standalone codec checkpoint produced by train_codec into a model's
// learned codec.
template <typename T>
void load_codec_checkpoint(WorldModel<T>& model, const std::string& path) {
    if (!model.learned_codec())
        throw ConfigError("codec checkpoint given but the model uses the baseline codec");
    Checkpoint ck = Checkpoint::load(path);
    if (ck.meta.value("kind", "") != "codec")
        throw ConfigError("not a codec checkpoint: " + path);
    model.learned_codec()->reg.load_state(ck.tensors);
}

// ---------------------------------------------------------------------------
// Stage 1: flow-matching pretraining
// ---------------------------------------------------------------------------

struct Stage1Config {
    int steps = 3000;
    double lr = 1e-4;
    double weight_decay = 0.0;
    double clip_norm = 1.0;
    double warmup_frac = 0.02;
    int log_every = 25;
    int ckpt_every = 1000;
    uint64_t seed = 0;
    std::string out_dir;
};

inline double cosine_lr_scale(int step, int total, double warmup_frac) {
    int warm = std::max(1, int(warmup_frac * total));
    if (step < warm) return double(step + 1) / double(warm);
    double p = double(step - warm) / std::max(1, total - warm);
    return 0.5 * (1.0 + std::cos(M_PI * p));
}

// Episodes are regenerated from their seeds each step (the world is
// procedural, so seeds are the dataset).
template <typename T>
double train_stage1(WorldModel<T>& model, const std::vector<uint64_t>& episode_seeds,
                    const Stage1Config& cfg) {
    if (episode_seeds.empty()) throw ConfigError("stage1: empty dataset");
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream log(cfg.out_dir + "/stage1_loss.csv");
    log << "step,loss,lr_scale\n";

    typename AdamW<T>::Config ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    ocfg.clip_norm = cfg.clip_norm;
    AdamW<T> opt(model.params(), ocfg);

    Rng rng(cfg.seed ^ 0x57a6e1);
    double last_loss = 0, ema = -1;
    for (int step = 0; step < cfg.steps; ++step) {
        uint64_t seed = episode_seeds[rng.uniform_index(episode_seeds.size())];
        Episode ep = generate_episode(model.config().world, seed);
        model.params().zero_grads();
        auto loss = stage1_loss(model, ep, rng);
        last_loss = double(loss->val[0]);
        if (!std::isfinite(last_loss))
            throw DivergenceError("stage1: non-finite loss at step " + std::to_string(step));
        ema = ema < 0 ? last_loss : 0.98 * ema + 0.02 * last_loss;
        if (step > 200 && ema > 50.0)
            throw DivergenceError("stage1: loss diverged at step " + std::to_string(step));
        ag::backward(loss);
        double s = cosine_lr_scale(step, cfg.steps, cfg.warmup_frac);
        opt.step(s);
        if (step % cfg.log_every == 0 || step + 1 == cfg.steps)
            log << step << "," << last_loss << "," << s << "\n" << std::flush;
        if (cfg.ckpt_every > 0 && step > 0 && step % cfg.ckpt_every == 0)
            model.save(cfg.out_dir + "/stage1_latest.xwck", {{"stage", 1}, {"step", step}});
    }
    model.save(cfg.out_dir + "/stage1_final.xwck",
               {{"stage", 1}, {"step", cfg.steps}, {"final_loss", last_loss}});
    return ema;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

struct SamplerConfig {
    int steps = 50;
    // decoupled classifier-free guidance on one branch (0 = dynamic,
    // 1 = static, 2 = appearance, -1 = off); w = 1 collapses to a single eval
    int cfg_branch = 1;
    double cfg_w = 1.0;
    uint64_t noise_seed = 0;

    int evals_per_step() const { return (cfg_branch >= 0 && cfg_w != 1.0) ? 2 : 1; }
};

template <typename T>
struct SampleResult {
    Tensor<T> latents;  // canonical rows, normalized scale
    int evals = 0;
};

namespace detail {

template <typename T>
CondInputs<T> null_branch(WorldModel<T>& model, const CondInputs<T>& conds, int branch) {
    CondInputs<T> out = conds;
    if (branch == 0) out.dyn = model.conditioning().null_tokens(CondModality::Dynamic);
    if (branch == 1) out.sta = model.conditioning().null_tokens(CondModality::Static);
    if (branch == 2) out.app = model.conditioning().null_tokens(CondModality::Appearance);
    return out;
}

// One guided velocity evaluation (1 or 2 denoiser forwards).
template <typename T>
Tensor<T> guided_velocity(WorldModel<T>& model, ag::Var<T> y, const std::vector<uint8_t>& flags,
                          ag::Var<T> adaln, const CondInputs<T>& conds, const SamplerConfig& scfg,
                          AttnMode mode, const KVCache<T>* cache_in, KVCache<T>* cache_out,
                          int first_pos, int& evals) {
    auto v_cond =
        denoiser_forward(model, y, flags, adaln, conds, mode, cache_in, cache_out, first_pos);
    ++evals;
    if (scfg.evals_per_step() == 1) return v_cond->val;
    CondInputs<T> unc = null_branch(model, conds, scfg.cfg_branch);
    // guidance never writes the cache twice
    auto v_unc = denoiser_forward(model, y, flags, adaln, unc, mode, cache_in,
                                  static_cast<KVCache<T>*>(nullptr), first_pos);
    ++evals;
    Tensor<T> v = v_unc->val;
    for (int64_t i = 0; i < v.numel(); ++i)
        v[i] = static_cast<T>(v[i] + scfg.cfg_w * (v_cond->val[i] - v[i]));
    return v;
}

}  // namespace detail

// Full-sequence Euler sampler (pretrained bidirectional model). The first
// history_latents frames stay clamped to the provided clean rows.
template <typename T>
SampleResult<T> sample_bidirectional(WorldModel<T>& model, const std::vector<ActionFrame>& actions,
                                     const CondInputs<T>& conds, const Tensor<T>* history_rows,
                                     int history_latents, const SamplerConfig& scfg) {
    ag::NoGradGuard ng;
    const int LT = latent_time_of(int(actions.size()));
    const int64_t VS = model.tokens_per_frame();
    const int64_t C = model.config().backbone.lat_channels;
    if (history_latents > 0 &&
        (!history_rows || history_rows->dim(0) != int64_t(history_latents) * VS))
        throw ShapeError("sampler: history rows do not match history_latents");

    Rng noise(scfg.noise_seed);
    Tensor<T> y({int64_t(LT) * VS, C});
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = static_cast<T>(noise.normal());
    if (history_latents > 0)
        std::memcpy(y.ptr(), history_rows->ptr(),
                    sizeof(T) * size_t(history_latents) * size_t(VS) * size_t(C));

    std::vector<uint8_t> flags(size_t(LT), 0);
    for (int f = 0; f < history_latents; ++f) flags[size_t(f)] = 1;

    SampleResult<T> res;
    const double dt = 1.0 / scfg.steps;
    for (int i = 0; i < scfg.steps; ++i) {
        double t = 1.0 - double(i) * dt;
        std::vector<double> flow_t(size_t(LT), t);
        for (int f = 0; f < history_latents; ++f) flow_t[size_t(f)] = 0.0;
        auto adaln = model.conditioning().encode_actions(actions, flow_t);
        Tensor<T> v = detail::guided_velocity(model, ag::constant(y), flags, adaln, conds, scfg,
                                              AttnMode::Bidirectional,
                                              static_cast<const KVCache<T>*>(nullptr),
                                              static_cast<KVCache<T>*>(nullptr), 0, res.evals);
        for (int64_t r = int64_t(history_latents) * VS; r < int64_t(LT) * VS; ++r)
            for (int64_t c = 0; c < C; ++c)
                y.at2(r, c) = static_cast<T>(y.at2(r, c) - dt * v.at2(r, c));
    }
    res.latents = std::move(y);
    return res;
}

// ---------------------------------------------------------------------------
// Chunked few-step generation (distilled student / streaming rollout)
// ---------------------------------------------------------------------------

// Push clean context frames through the denoiser once (flow time 0) so their
// temporal K/V enter the cache.
template <typename T>
void prime_cache(WorldModel<T>& model, const Tensor<T>& clean_rows,
                 const std::vector<std::vector<ActionFrame>>& spans, const CondInputs<T>& conds,
                 KVCache<T>& cache, int first_frame_pos) {
    ag::NoGradGuard ng;
    const int F = int(spans.size());
    std::vector<double> flow_t(size_t(F), 0.0);
    auto adaln = model.conditioning().encode_action_spans(spans, flow_t);
    std::vector<uint8_t> flags(size_t(F), 1);
    denoiser_forward(model, ag::constant(clean_rows), flags, adaln, conds, AttnMode::ChunkCausal,
                     cache.empty() ? nullptr : &cache, &cache, first_frame_pos);
}

// Denoise one chunk of latent frames with a few Euler steps against the
// rolling cache. K/V for the chunk are captured from the final denoising
// forward (input at the smallest flow time). Returns the chunk's clean rows;
// with track_grad the returned Var participates in the caller's graph.
template <typename T>
ag::Var<T> denoise_chunk(WorldModel<T>& model, const std::vector<std::vector<ActionFrame>>& spans,
                         const CondInputs<T>& conds, KVCache<T>* cache, int first_frame_pos,
                         Rng& noise_rng, const SamplerConfig& scfg, int n_steps, bool track_grad,
                         int* evals_out = nullptr) {
    const int F = int(spans.size());
    const int64_t VS = model.tokens_per_frame();
    const int64_t C = model.config().backbone.lat_channels;
    if (n_steps <= 0) throw ConfigError("denoise_chunk: n_steps must be positive");

    Tensor<T> y0({int64_t(F) * VS, C});
    for (int64_t i = 0; i < y0.numel(); ++i) y0[i] = static_cast<T>(noise_rng.normal());
    auto y = ag::constant(std::move(y0));
    std::vector<uint8_t> flags(size_t(F), 0);

    std::unique_ptr<ag::NoGradGuard> ng;
    if (!track_grad) ng = std::make_unique<ag::NoGradGuard>();

    int evals = 0;
    const double dt = 1.0 / n_steps;
    for (int i = 0; i < n_steps; ++i) {
        double t = 1.0 - double(i) * dt;
        std::vector<double> flow_t(size_t(F), t);
        auto adaln = model.conditioning().encode_action_spans(spans, flow_t);
        const bool last = (i == n_steps - 1);
        const KVCache<T>* cache_in = (cache && !cache->empty()) ? cache : nullptr;
        KVCache<T>* capture = last ? cache : nullptr;
        if (scfg.evals_per_step() == 1) {
            auto v = denoiser_forward(model, y, flags, adaln, conds, AttnMode::ChunkCausal,
                                      cache_in, capture, first_frame_pos);
            ++evals;
            y = ag::add(y, ag::scale(v, -dt));
        } else {
            Tensor<T> v = detail::guided_velocity(model, y, flags, adaln, conds, scfg,
                                                  AttnMode::ChunkCausal, cache_in, capture,
                                                  first_frame_pos, evals);
            for (int64_t j = 0; j < v.numel(); ++j) v[j] = static_cast<T>(-dt * v[j]);
            y = ag::add_const(y, v);
        }
    }
    if (evals_out) *evals_out = evals;
    return y;
}

// ---------------------------------------------------------------------------
// Stage 2: few-step distillation (distribution matching + self-forcing)
// ---------------------------------------------------------------------------

struct Stage2Config {
    int generator_steps = 150;
    int critic_per_gen = 5;  // critic:generator update ratio
    double lr_gen = 2e-6;
    double lr_critic = 1e-5;
    double clip_norm = 1.0;
    int student_steps = 4;  // Euler steps per chunk
    double critic_t_min = 0.02;
    double critic_t_max = 0.98;
    int log_every = 5;
    int ckpt_every = 50;
    uint64_t seed = 0;
    std::string out_dir;
};

// Student rollout over the whole horizon in chunk_size pieces, gradients
// flowing through each chunk's own denoising steps (the cache detaches
// context, matching how the model is used at inference).
template <typename T>
ag::Var<T> self_forcing_rollout(WorldModel<T>& student, const Episode& ep,
                                const CondInputs<T>& conds, Rng& noise_rng, int n_steps,
                                int* evals_out = nullptr) {
    const int LT = latent_time_of(int(ep.actions.size()));
    const int cs = student.config().backbone.chunk_size;
    if (LT % cs != 0)
        throw ConfigError("self-forcing rollout: latent frames must divide by chunk size");
    SamplerConfig scfg;
    scfg.cfg_branch = -1;
    KVCache<T> cache;
    std::vector<ag::Var<T>> chunks;
    int evals = 0;
    for (int k0 = 0; k0 < LT; k0 += cs) {
        std::vector<std::vector<ActionFrame>> spans;
        for (int k = k0; k < k0 + cs; ++k) {
            if (k == 0)
                spans.push_back({ep.actions[0]});
            else
                spans.push_back({ep.actions[size_t(2 * k - 1)], ep.actions[size_t(2 * k)]});
        }
        int ev = 0;
        chunks.push_back(denoise_chunk(student, spans, conds, &cache, k0, noise_rng, scfg,
                                       n_steps, /*track_grad=*/true, &ev));
        evals += ev;
    }
    if (evals_out) *evals_out = evals;
    return ag::concat_rows(chunks);
}

template <typename T>
struct DmdStats {
    double gen_pseudo_loss = 0;
    double critic_loss = 0;
    double grad_scale = 0;
};

// One generator update + critic_per_gen critic updates on a single episode.
template <typename T>
DmdStats<T> dmd_step(WorldModel<T>& teacher, WorldModel<T>& student, WorldModel<T>& critic,
                     AdamW<T>& opt_gen, AdamW<T>& opt_critic, const Episode& ep,
                     const Stage2Config& cfg, Rng& rng) {
    DmdStats<T> stats;
    CondInputs<T> conds = student.build_conditions(ep, 0);
    CondInputs<T> conds_t = teacher.build_conditions(ep, 0);
    CondInputs<T> conds_c = critic.build_conditions(ep, 0);
    const int LT = student.latent_frames();
    const int64_t VS = student.tokens_per_frame();
    const int64_t C = student.config().backbone.lat_channels;
    const int64_t N = int64_t(LT) * VS;
    std::vector<uint8_t> no_hist(size_t(LT), 0);

    // --- generator update -------------------------------------------------
    student.params().zero_grads();
    auto x0_var = self_forcing_rollout(student, ep, conds, rng, cfg.student_steps);
    Tensor<T> x0 = x0_var->val;  // detached copy for score evaluation

    Tensor<T> grad({N, C});
    {
        ag::NoGradGuard ng;
        double t = rng.uniform(cfg.critic_t_min, cfg.critic_t_max);
        Tensor<T> y_t({N, C});
        for (int64_t i = 0; i < y_t.numel(); ++i)
            y_t[i] = static_cast<T>((1.0 - t) * x0[i] + t * rng.normal());
        std::vector<double> flow_t(size_t(LT), t);
        auto adaln_t = teacher.conditioning().encode_actions(ep.actions, flow_t);
        auto adaln_c = critic.conditioning().encode_actions(ep.actions, flow_t);
        auto v_real = denoiser_forward(teacher, ag::constant(y_t), no_hist, adaln_t, conds_t,
                                       AttnMode::Bidirectional);
        auto v_fake = denoiser_forward(critic, ag::constant(y_t), no_hist, adaln_c, conds_c,
                                       AttnMode::Bidirectional);
        // x0 estimates under each score; the generator is pushed along
        // fake - real, normalized by how far the teacher thinks we are
        double z_norm = 0;
        for (int64_t i = 0; i < grad.numel(); ++i) {
            T x0_real = static_cast<T>(y_t[i] - t * v_real->val[i]);
            T x0_fake = static_cast<T>(y_t[i] - t * v_fake->val[i]);
            grad[i] = x0_fake - x0_real;
            z_norm += std::abs(double(x0[i] - x0_real));
        }
        z_norm = z_norm / double(grad.numel()) + 1e-4;
        stats.grad_scale = z_norm;
        for (int64_t i = 0; i < grad.numel(); ++i)
            grad[i] = static_cast<T>(double(grad[i]) / (z_norm * double(grad.numel())));
    }
    auto pseudo = ag::dot_const(x0_var, grad);
    stats.gen_pseudo_loss = double(pseudo->val[0]);
    if (!std::isfinite(stats.gen_pseudo_loss))
        throw DivergenceError("stage2: non-finite generator objective");
    ag::backward(pseudo);
    opt_gen.step();

    // --- critic updates ----------------------------------------------------
    for (int cu = 0; cu < cfg.critic_per_gen; ++cu) {
        critic.params().zero_grads();
        double t = rng.uniform(cfg.critic_t_min, cfg.critic_t_max);
        Tensor<T> y_t({N, C});
        Tensor<T> target({N, C});
        for (int64_t i = 0; i < y_t.numel(); ++i) {
            T e = static_cast<T>(rng.normal());
            y_t[i] = static_cast<T>((1.0 - t) * x0[i] + t * e);
            target[i] = e - x0[i];
        }
        std::vector<double> flow_t(size_t(LT), t);
        auto adaln_c = critic.conditioning().encode_actions(ep.actions, flow_t);
        auto out = denoiser_forward(critic, ag::constant(y_t), no_hist, adaln_c, conds_c,
                                    AttnMode::Bidirectional);
        std::vector<T> w(size_t(N), T(1));
        auto loss = ag::mse_weighted(out, target, w, double(N * C));
        stats.critic_loss = double(loss->val[0]);
        if (!std::isfinite(stats.critic_loss))
            throw DivergenceError("stage2: non-finite critic loss");
        ag::backward(loss);
        opt_critic.step();
    }
    return stats;
}

// Full distillation loop. The teacher stays frozen; student and critic start
// from the teacher's weights.
template <typename T>
void distill_stage2(WorldModel<T>& teacher, WorldModel<T>& student, WorldModel<T>& critic,
                    const std::vector<uint64_t>& episode_seeds, const Stage2Config& cfg) {
    if (episode_seeds.empty()) throw ConfigError("stage2: empty dataset");
    std::filesystem::create_directories(cfg.out_dir);
    student.copy_weights_from(teacher);
    critic.copy_weights_from(teacher);

    typename AdamW<T>::Config gcfg;
    gcfg.lr = cfg.lr_gen;
    gcfg.clip_norm = cfg.clip_norm;
    AdamW<T> opt_gen(student.params(), gcfg);
    typename AdamW<T>::Config ccfg;
    ccfg.lr = cfg.lr_critic;
    ccfg.clip_norm = cfg.clip_norm;
    AdamW<T> opt_critic(critic.params(), ccfg);

    std::ofstream log(cfg.out_dir + "/stage2_loss.csv");
    log << "step,gen_pseudo_loss,critic_loss,grad_scale\n";
    Rng rng(cfg.seed ^ 0xd157111);
    for (int step = 0; step < cfg.generator_steps; ++step) {
        uint64_t seed = episode_seeds[rng.uniform_index(episode_seeds.size())];
        Episode ep = generate_episode(student.config().world, seed);
        auto stats = dmd_step(teacher, student, critic, opt_gen, opt_critic, ep, cfg, rng);
        if (step % cfg.log_every == 0 || step + 1 == cfg.generator_steps)
            log << step << "," << stats.gen_pseudo_loss << "," << stats.critic_loss << ","
                << stats.grad_scale << "\n"
                << std::flush;
        if (cfg.ckpt_every > 0 && step > 0 && step % cfg.ckpt_every == 0)
            student.save(cfg.out_dir + "/stage2_latest.xwck", {{"stage", 2}, {"step", step}});
    }
    student.save(cfg.out_dir + "/stage2_final.xwck",
                 {{"stage", 2}, {"step", cfg.generator_steps}});
}

}  // namespace xworld
