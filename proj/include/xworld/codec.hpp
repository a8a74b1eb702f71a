#pragma once

#include "xworld/errors.hpp"
#include "xworld/ops.hpp"
#include "xworld/params.hpp"
#include "xworld/tensor.hpp"

namespace xworld {

// Pixel <-> latent codec. Temporal scheme is first-frame anchored: frame 0
// maps to latent 0, frames (2k-1, 2k) map to latent k, so latent_time =
// 1 + (time-1)/2 and every latent depends only on frames at or before its
// span (causal by construction).
struct CodecConfig {
    enum class Kind { PatchifyBaseline, Learned };
    Kind kind = Kind::PatchifyBaseline;
    int spatial_factor = 4;
    int lat_channels = 96;  // baseline requires 2 * 3 * sf^2; learned is free
    int learned_hidden = 64;
    bool variational = false;

    int packed_channels() const { return 2 * 3 * spatial_factor * spatial_factor; }
};

inline int latent_time_of(int frames) { return 1 + (frames - 1) / 2; }
inline int frames_of_latent_time(int lt) { return 1 + 2 * (lt - 1); }
// Highest frame index a latent may depend on.
inline int frame_span(int latent_index) { return latent_index == 0 ? 0 : 2 * latent_index; }

namespace detail {
template <typename T>
void check_video_shape(const Tensor<T>& video, const CodecConfig& cfg) {
    if (video.rank() != 5 || video.dim(4) != 3)
        throw ShapeError("video must be [views, time, H, W, 3]");
    if (video.dim(1) % 2 != 1) throw ShapeError("frame count must be 1 + 2k");
    if (video.dim(2) % cfg.spatial_factor != 0 || video.dim(3) % cfg.spatial_factor != 0)
        throw ShapeError("image dims must divide by spatial factor");
}
}  // namespace detail

// Exactly invertible space-to-channel + temporal-pair-to-channel packing.
// The anchor latent fills only its first pair slot; the second stays zero.
template <typename T>
Tensor<T> patchify_encode(const Tensor<T>& video, const CodecConfig& cfg) {
    detail::check_video_shape(video, cfg);
    const int64_t V = video.dim(0), F = video.dim(1), H = video.dim(2), W = video.dim(3);
    const int sf = cfg.spatial_factor;
    const int64_t LT = latent_time_of(int(F)), LH = H / sf, LW = W / sf;
    const int64_t LC = cfg.packed_channels();
    Tensor<T> lat({V, LT, LH, LW, LC});
    auto src = [&](int64_t v, int64_t f, int64_t r, int64_t c, int64_t ch) {
        return video[(((v * F + f) * H + r) * W + c) * 3 + ch];
    };
    for (int64_t v = 0; v < V; ++v)
        for (int64_t k = 0; k < LT; ++k)
            for (int64_t lr = 0; lr < LH; ++lr)
                for (int64_t lc = 0; lc < LW; ++lc) {
                    T* cell = lat.ptr() + ((((v * LT + k) * LH + lr) * LW) + lc) * LC;
                    for (int pair = 0; pair < 2; ++pair) {
                        int64_t f = (k == 0) ? 0 : 2 * k - 1 + pair;
                        for (int dr = 0; dr < sf; ++dr)
                            for (int dc = 0; dc < sf; ++dc)
                                for (int ch = 0; ch < 3; ++ch) {
                                    int64_t out_ch = ((pair * sf + dr) * sf + dc) * 3 + ch;
                                    cell[out_ch] = (k == 0 && pair == 1)
                                                       ? T(0)
                                                       : src(v, f, lr * sf + dr, lc * sf + dc, ch);
                                }
                    }
                }
    return lat;
}

template <typename T>
Tensor<T> patchify_decode(const Tensor<T>& lat, const CodecConfig& cfg) {
    if (lat.rank() != 5 || lat.dim(4) != cfg.packed_channels())
        throw ShapeError("latent channels do not match codec config");
    const int sf = cfg.spatial_factor;
    const int64_t V = lat.dim(0), LT = lat.dim(1), LH = lat.dim(2), LW = lat.dim(3);
    const int64_t LC = cfg.packed_channels();
    const int64_t F = frames_of_latent_time(int(LT)), H = LH * sf, W = LW * sf;
    Tensor<T> video({V, F, H, W, 3});
    for (int64_t v = 0; v < V; ++v)
        for (int64_t k = 0; k < LT; ++k)
            for (int64_t lr = 0; lr < LH; ++lr)
                for (int64_t lc = 0; lc < LW; ++lc) {
                    const T* cell = lat.ptr() + ((((v * LT + k) * LH + lr) * LW) + lc) * LC;
                    int pairs = (k == 0) ? 1 : 2;
                    for (int pair = 0; pair < pairs; ++pair) {
                        int64_t f = (k == 0) ? 0 : 2 * k - 1 + pair;
                        for (int dr = 0; dr < sf; ++dr)
                            for (int dc = 0; dc < sf; ++dc)
                                for (int ch = 0; ch < 3; ++ch) {
                                    int64_t in_ch = ((pair * sf + dr) * sf + dc) * 3 + ch;
                                    video[(((v * F + f) * H + (lr * sf + dr)) * W +
                                           (lc * sf + dc)) *
                                              3 +
                                          ch] = cell[in_ch];
                                }
                    }
                }
    return video;
}

// Learned codec: per-latent-cell MLP over the packed patch vector. Shares the
// baseline's causal packing, so temporal causality is architectural.
template <typename T>
struct LearnedCodec {
    CodecConfig cfg;
    ParamRegistry<T> reg;
    ag::Var<T> enc_w1, enc_b1, enc_w2, enc_b2;
    ag::Var<T> dec_w1, dec_b1, dec_w2, dec_b2;

    LearnedCodec(const CodecConfig& c, uint64_t seed) : cfg(c), reg(seed) {
        const int64_t pc = cfg.packed_channels();
        const int64_t hid = cfg.learned_hidden;
        const int64_t out = cfg.variational ? 2 * cfg.lat_channels : cfg.lat_channels;
        enc_w1 = reg.add_linear_weight("enc.w1", pc, hid);
        enc_b1 = reg.add_zeros("enc.b1", {hid});
        enc_w2 = reg.add_linear_weight("enc.w2", hid, out);
        enc_b2 = reg.add_zeros("enc.b2", {out});
        dec_w1 = reg.add_linear_weight("dec.w1", cfg.lat_channels, hid);
        dec_b1 = reg.add_zeros("dec.b1", {hid});
        dec_w2 = reg.add_linear_weight("dec.w2", hid, pc);
        dec_b2 = reg.add_zeros("dec.b2", {pc});
    }

    // rows: [N, packed_channels] -> encoder output (mean-only when not
    // variational; [mean|logvar] otherwise).
    ag::Var<T> encode_rows(ag::Var<T> rows) {
        auto h = ag::silu(ag::linear(rows, enc_w1, enc_b1));
        return ag::linear(h, enc_w2, enc_b2);
    }
    ag::Var<T> decode_rows(ag::Var<T> z) {
        auto h = ag::silu(ag::linear(z, dec_w1, dec_b1));
        return ag::linear(h, dec_w2, dec_b2);
    }
};

// Unified front door used by training/inference. For the learned kind the
// checkpointed parameters are applied without autograd tracking.
template <typename T>
Tensor<T> codec_encode(const Tensor<T>& video, const CodecConfig& cfg,
                       LearnedCodec<T>* learned = nullptr) {
    Tensor<T> packed = patchify_encode(video, cfg);
    if (cfg.kind == CodecConfig::Kind::PatchifyBaseline) return packed;
    if (!learned) throw ConfigError("learned codec requested but no parameters given");
    ag::NoGradGuard ng;
    const int64_t cells = packed.numel() / cfg.packed_channels();
    auto rows = ag::constant(packed.reshaped({cells, cfg.packed_channels()}));
    Tensor<T> z = learned->encode_rows(rows)->val;
    if (cfg.variational) {
        // deterministic encode: take the mean half
        Tensor<T> mean({cells, cfg.lat_channels});
        for (int64_t i = 0; i < cells; ++i)
            std::memcpy(mean.ptr() + i * cfg.lat_channels, z.ptr() + i * 2 * cfg.lat_channels,
                        sizeof(T) * cfg.lat_channels);
        z = std::move(mean);
    }
    return z.reshaped({video.dim(0), latent_time_of(int(video.dim(1))),
                       video.dim(2) / cfg.spatial_factor, video.dim(3) / cfg.spatial_factor,
                       cfg.lat_channels});
}

template <typename T>
Tensor<T> codec_decode(const Tensor<T>& lat, const CodecConfig& cfg,
                       LearnedCodec<T>* learned = nullptr) {
    if (cfg.kind == CodecConfig::Kind::PatchifyBaseline) return patchify_decode(lat, cfg);
    if (!learned) throw ConfigError("learned codec requested but no parameters given");
    if (lat.rank() != 5 || lat.dim(4) != cfg.lat_channels)
        throw ShapeError("latent channels do not match codec config");
    ag::NoGradGuard ng;
    const int64_t cells = lat.numel() / cfg.lat_channels;
    auto z = ag::constant(lat.reshaped({cells, int64_t(cfg.lat_channels)}));
    Tensor<T> packed = learned->decode_rows(z)->val;
    for (int64_t i = 0; i < packed.numel(); ++i)
        packed[i] = std::clamp(packed[i], T(0), T(1));
    CodecConfig base = cfg;
    base.lat_channels = cfg.packed_channels();
    Tensor<T> video = patchify_decode(
        packed.reshaped({lat.dim(0), lat.dim(1), lat.dim(2), lat.dim(3),
                         int64_t(cfg.packed_channels())}),
        base);
    return video;
}

}  // namespace xworld
