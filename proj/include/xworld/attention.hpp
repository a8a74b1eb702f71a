#pragma once

#include <limits>

#include "xworld/ops.hpp"

namespace xworld::ag {

// Multi-head attention over a batch of equal-length sequences.
//   q: [batch*seq_q, D], k/v: [batch*seq_k, D]
// mask (optional) is [seq_q, seq_k], shared across batch and heads, 1 = may
// attend. pos_q/pos_k (optional) give rotary positions per sequence index;
// rotation is applied to q/k inside the op so cached K tensors keep their
// absolute positions.
struct AttnSpec {
    int64_t batch = 1;
    int64_t seq_q = 0;
    int64_t seq_k = 0;
    int64_t heads = 1;
    std::shared_ptr<Tensor<uint8_t>> mask;
    std::shared_ptr<std::vector<int32_t>> pos_q;
    std::shared_ptr<std::vector<int32_t>> pos_k;
    double rope_base = 10000.0;
};

namespace detail {

// In-place rotary rotation of a [rows, D] tensor laid out as H heads of dh.
// sign=+1 rotates forward, sign=-1 applies the inverse (for gradients).
template <typename T>
void rope_apply(Tensor<T>& t, const std::vector<int32_t>& pos, int64_t batch, int64_t seq,
                int64_t heads, int64_t dh, double base, int sign) {
    int64_t half = dh / 2;
    std::vector<double> inv_freq(half);
    for (int64_t i = 0; i < half; ++i) inv_freq[i] = std::pow(base, -2.0 * double(i) / double(dh));
    int64_t d = heads * dh;
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t s = 0; s < seq; ++s) {
            double p = double(pos[s]);
            T* row = t.ptr() + (b * seq + s) * d;
            for (int64_t h = 0; h < heads; ++h) {
                T* hrow = row + h * dh;
                for (int64_t i = 0; i < half; ++i) {
                    double ang = p * inv_freq[i] * sign;
                    T c = static_cast<T>(std::cos(ang));
                    T sn = static_cast<T>(std::sin(ang));
                    T x0 = hrow[2 * i], x1 = hrow[2 * i + 1];
                    hrow[2 * i] = c * x0 - sn * x1;
                    hrow[2 * i + 1] = sn * x0 + c * x1;
                }
            }
        }
    }
}

}  // namespace detail

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const AttnSpec& spec) {
    const int64_t B = spec.batch, Sq = spec.seq_q, Sk = spec.seq_k, H = spec.heads;
    const int64_t d = q->val.shape[1];
    const int64_t dh = d / H;
    if (d % H != 0 || (spec.pos_q && dh % 2 != 0))
        throw std::invalid_argument("attention: head dim invalid");
    if (q->val.shape[0] != B * Sq || k->val.shape[0] != B * Sk || v->val.shape[0] != B * Sk)
        throw std::invalid_argument("attention: row count mismatch");

    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(double(dh)));
    const bool use_rope = spec.pos_q != nullptr;

    auto qr = std::make_shared<Tensor<T>>(q->val);
    auto kr = std::make_shared<Tensor<T>>(k->val);
    if (use_rope) {
        detail::rope_apply(*qr, *spec.pos_q, B, Sq, H, dh, spec.rope_base, +1);
        detail::rope_apply(*kr, *spec.pos_k, B, Sk, H, dh, spec.rope_base, +1);
    }

    auto probs = std::make_shared<Tensor<T>>(std::vector<int64_t>{B * H * Sq, Sk});
    Tensor<T> out({B * Sq, d});
    const T neg_inf = -std::numeric_limits<T>::infinity();

    EMat<T> scores(Sq, Sk);
    for (int64_t b = 0; b < B; ++b) {
        auto Qb = as_mat(*qr, B * Sq, d).block(b * Sq, 0, Sq, d);
        auto Kb = as_mat(*kr, B * Sk, d).block(b * Sk, 0, Sk, d);
        auto Vb = as_mat(v->val, B * Sk, d).block(b * Sk, 0, Sk, d);
        auto Ob = as_mat(out, B * Sq, d).block(b * Sq, 0, Sq, d);
        for (int64_t h = 0; h < H; ++h) {
            scores.noalias() = Qb.middleCols(h * dh, dh) * Kb.middleCols(h * dh, dh).transpose();
            scores *= inv_sqrt;
            if (spec.mask) {
                const uint8_t* m = spec.mask->ptr();
                for (int64_t i = 0; i < Sq; ++i)
                    for (int64_t j = 0; j < Sk; ++j)
                        if (!m[i * Sk + j]) scores(i, j) = neg_inf;
            }
            MatMap<T> P(probs->ptr() + (b * H + h) * Sq * Sk, Sq, Sk);
            for (int64_t i = 0; i < Sq; ++i) {
                T mx = scores.row(i).maxCoeff();
                if (mx == neg_inf) {
                    P.row(i).setZero();
                    continue;
                }
                T sum = 0;
                for (int64_t j = 0; j < Sk; ++j) {
                    T e = std::exp(scores(i, j) - mx);
                    P(i, j) = e;
                    sum += e;
                }
                P.row(i) /= sum;
            }
            Ob.middleCols(h * dh, dh).noalias() = P * Vb.middleCols(h * dh, dh);
        }
    }

    auto bw = [q, k, v, qr, kr, probs, B, Sq, Sk, H, dh, d, inv_sqrt, use_rope,
               spec](Node<T>& n) mutable {
        Tensor<T> dqr({B * Sq, d});
        Tensor<T> dkr({B * Sk, d});
        if (v->requires_grad) v->ensure_grad();
        EMat<T> dS(Sq, Sk);
        for (int64_t b = 0; b < B; ++b) {
            auto Qb = as_mat(*qr, B * Sq, d).block(b * Sq, 0, Sq, d);
            auto Kb = as_mat(*kr, B * Sk, d).block(b * Sk, 0, Sk, d);
            auto Vb = as_mat(v->val, B * Sk, d).block(b * Sk, 0, Sk, d);
            auto Gb = as_mat(n.grad, B * Sq, d).block(b * Sq, 0, Sq, d);
            auto dQb = as_mat(dqr, B * Sq, d).block(b * Sq, 0, Sq, d);
            auto dKb = as_mat(dkr, B * Sk, d).block(b * Sk, 0, Sk, d);
            for (int64_t h = 0; h < H; ++h) {
                CMatMap<T> P(probs->ptr() + (b * H + h) * Sq * Sk, Sq, Sk);
                if (v->requires_grad) {
                    auto dVb = as_mat(v->grad, B * Sk, d).block(b * Sk, 0, Sk, d);
                    dVb.middleCols(h * dh, dh).noalias() +=
                        P.transpose() * Gb.middleCols(h * dh, dh);
                }
                // dP = dO V^T ; dS = P .* (dP - rowsum(dP .* P))
                dS.noalias() = Gb.middleCols(h * dh, dh) * Vb.middleCols(h * dh, dh).transpose();
                for (int64_t i = 0; i < Sq; ++i) {
                    T rs = dS.row(i).cwiseProduct(P.row(i)).sum();
                    for (int64_t j = 0; j < Sk; ++j) dS(i, j) = P(i, j) * (dS(i, j) - rs);
                }
                dS *= inv_sqrt;
                dQb.middleCols(h * dh, dh).noalias() += dS * Kb.middleCols(h * dh, dh);
                dKb.middleCols(h * dh, dh).noalias() += dS.transpose() * Qb.middleCols(h * dh, dh);
            }
        }
        if (use_rope) {
            detail::rope_apply(dqr, *spec.pos_q, B, Sq, H, dh, spec.rope_base, -1);
            detail::rope_apply(dkr, *spec.pos_k, B, Sk, H, dh, spec.rope_base, -1);
        }
        accum(q, dqr);
        accum(k, dkr);
    };
    return make_op<T>(std::move(out), {q, k, v}, bw);
}

}  // namespace xworld::ag
