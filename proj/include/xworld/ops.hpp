#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <memory>

#include "xworld/autograd.hpp"

namespace xworld::ag {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<EMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const EMat<T>>;

template <typename T>
MatMap<T> as_mat(Tensor<T>& t, int64_t rows, int64_t cols) {
    return MatMap<T>(t.ptr(), rows, cols);
}
template <typename T>
CMatMap<T> as_mat(const Tensor<T>& t, int64_t rows, int64_t cols) {
    return CMatMap<T>(t.ptr(), rows, cols);
}

template <typename T>
Var<T> make_op(Tensor<T> val, std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> bw) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(val);
    if (track(parents)) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(bw);
    }
    return n;
}

template <typename T>
void accum(Var<T>& p, const Tensor<T>& g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) p->grad[i] += g[i];
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    if (!a->val.same_shape(b->val)) throw std::invalid_argument("add: shape mismatch");
    Tensor<T> out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->val[i];
    return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) mutable {
        accum(a, n.grad);
        accum(b, n.grad);
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    if (!a->val.same_shape(b->val)) throw std::invalid_argument("sub: shape mismatch");
    Tensor<T> out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->val[i];
    return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) mutable {
        accum(a, n.grad);
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] -= n.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    if (!a->val.same_shape(b->val)) throw std::invalid_argument("mul: shape mismatch");
    Tensor<T> out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->val[i];
    return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) mutable {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * b->val[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i] * a->val[i];
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, double s) {
    Tensor<T> out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(out[i] * s);
    return make_op<T>(std::move(out), {a}, [a, s](Node<T>& n) mutable {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i)
                a->grad[i] += static_cast<T>(n.grad[i] * s);
        }
    });
}

template <typename T>
Var<T> add_scalar(Var<T> a, double s) {
    Tensor<T> out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(out[i] + s);
    return make_op<T>(std::move(out), {a},
                      [a](Node<T>& n) mutable { accum(a, n.grad); });
}

template <typename T>
Var<T> add_const(Var<T> a, const Tensor<T>& c) {
    if (!a->val.same_shape(c)) throw std::invalid_argument("add_const: shape mismatch");
    Tensor<T> out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += c[i];
    return make_op<T>(std::move(out), {a},
                      [a](Node<T>& n) mutable { accum(a, n.grad); });
}

template <typename T>
Var<T> mul_const(Var<T> a, Tensor<T> c) {
    if (!a->val.same_shape(c)) throw std::invalid_argument("mul_const: shape mismatch");
    Tensor<T> out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= c[i];
    auto cp = std::make_shared<Tensor<T>>(std::move(c));
    return make_op<T>(std::move(out), {a}, [a, cp](Node<T>& n) mutable {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * (*cp)[i];
        }
    });
}

template <typename T>
Var<T> sum_list(std::vector<Var<T>> xs) {
    if (xs.empty()) throw std::invalid_argument("sum_list: empty");
    Tensor<T> out = xs[0]->val;
    for (size_t j = 1; j < xs.size(); ++j)
        for (int64_t i = 0; i < out.numel(); ++i) out[i] += xs[j]->val[i];
    return make_op<T>(std::move(out), xs, [xs](Node<T>& n) mutable {
        for (auto& x : xs) accum(x, n.grad);
    });
}

template <typename T>
Var<T> silu(Var<T> a) {
    Tensor<T> out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) {
        T x = out[i];
        out[i] = x / (T(1) + std::exp(-x));
    }
    return make_op<T>(std::move(out), {a}, [a](Node<T>& n) mutable {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) {
            T x = a->val[i];
            T s = T(1) / (T(1) + std::exp(-x));
            a->grad[i] += n.grad[i] * (s * (T(1) + x * (T(1) - s)));
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// x:[N,Din] w:[Din,Dout] b:[Dout] (b may be null)
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
    int64_t n_rows = x->val.shape[0], din = x->val.shape[1];
    int64_t dout = w->val.shape[1];
    if (w->val.shape[0] != din) throw std::invalid_argument("linear: dim mismatch");
    Tensor<T> out({n_rows, dout});
    as_mat(out, n_rows, dout).noalias() = as_mat(x->val, n_rows, din) * as_mat(w->val, din, dout);
    if (b) {
        auto m = as_mat(out, n_rows, dout);
        m.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->val.ptr(), dout);
    }
    std::vector<Var<T>> parents = {x, w};
    if (b) parents.push_back(b);
    return make_op<T>(std::move(out), parents, [x, w, b, n_rows, din, dout](Node<T>& n) mutable {
        auto g = as_mat(n.grad, n_rows, dout);
        if (x->requires_grad) {
            x->ensure_grad();
            as_mat(x->grad, n_rows, din).noalias() += g * as_mat(w->val, din, dout).transpose();
        }
        if (w->requires_grad) {
            w->ensure_grad();
            as_mat(w->grad, din, dout).noalias() +=
                as_mat(x->val, n_rows, din).transpose() * g;
        }
        if (b && b->requires_grad) {
            b->ensure_grad();
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->grad.ptr(), dout) +=
                g.colwise().sum();
        }
    });
}

// Per-row layer norm without affine parameters.
template <typename T>
Var<T> layernorm(Var<T> x, double eps = 1e-5) {
    int64_t n_rows = x->val.shape[0], d = x->val.shape[1];
    Tensor<T> out({n_rows, d});
    auto inv_std = std::make_shared<Tensor<T>>(std::vector<int64_t>{n_rows});
    for (int64_t r = 0; r < n_rows; ++r) {
        const T* xr = x->val.ptr() + r * d;
        T mean = 0;
        for (int64_t c = 0; c < d; ++c) mean += xr[c];
        mean /= T(d);
        T var = 0;
        for (int64_t c = 0; c < d; ++c) {
            T t = xr[c] - mean;
            var += t * t;
        }
        var /= T(d);
        T is = T(1) / std::sqrt(var + T(eps));
        (*inv_std)[r] = is;
        T* orow = out.ptr() + r * d;
        for (int64_t c = 0; c < d; ++c) orow[c] = (xr[c] - mean) * is;
    }
    auto xhat = std::make_shared<Tensor<T>>(out);
    return make_op<T>(std::move(out), {x}, [x, xhat, inv_std, n_rows, d](Node<T>& n) mutable {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t r = 0; r < n_rows; ++r) {
            const T* g = n.grad.ptr() + r * d;
            const T* h = xhat->ptr() + r * d;
            T gm = 0, ghm = 0;
            for (int64_t c = 0; c < d; ++c) {
                gm += g[c];
                ghm += g[c] * h[c];
            }
            gm /= T(d);
            ghm /= T(d);
            T is = (*inv_std)[r];
            T* xg = x->grad.ptr() + r * d;
            for (int64_t c = 0; c < d; ++c) xg[c] += is * (g[c] - gm - h[c] * ghm);
        }
    });
}

// ---------------------------------------------------------------------------
// Row indexing / reshaping
// ---------------------------------------------------------------------------

// out[n] = x[n] + r[map[n]]
template <typename T>
Var<T> add_rows(Var<T> x, Var<T> r, std::shared_ptr<std::vector<int32_t>> map) {
    int64_t n_rows = x->val.shape[0], d = x->val.shape[1];
    Tensor<T> out = x->val;
    for (int64_t i = 0; i < n_rows; ++i) {
        const T* rr = r->val.ptr() + (*map)[i] * d;
        T* o = out.ptr() + i * d;
        for (int64_t c = 0; c < d; ++c) o[c] += rr[c];
    }
    return make_op<T>(std::move(out), {x, r}, [x, r, map, n_rows, d](Node<T>& n) mutable {
        accum(x, n.grad);
        if (r->requires_grad) {
            r->ensure_grad();
            for (int64_t i = 0; i < n_rows; ++i) {
                T* rg = r->grad.ptr() + (*map)[i] * d;
                const T* g = n.grad.ptr() + i * d;
                for (int64_t c = 0; c < d; ++c) rg[c] += g[c];
            }
        }
    });
}

// out[n] = x[n] * r[map[n]]
template <typename T>
Var<T> mul_rows(Var<T> x, Var<T> r, std::shared_ptr<std::vector<int32_t>> map) {
    int64_t n_rows = x->val.shape[0], d = x->val.shape[1];
    Tensor<T> out = x->val;
    for (int64_t i = 0; i < n_rows; ++i) {
        const T* rr = r->val.ptr() + (*map)[i] * d;
        T* o = out.ptr() + i * d;
        for (int64_t c = 0; c < d; ++c) o[c] *= rr[c];
    }
    return make_op<T>(std::move(out), {x, r}, [x, r, map, n_rows, d](Node<T>& n) mutable {
        if (x->requires_grad) {
            x->ensure_grad();
            for (int64_t i = 0; i < n_rows; ++i) {
                const T* rr = r->val.ptr() + (*map)[i] * d;
                const T* g = n.grad.ptr() + i * d;
                T* xg = x->grad.ptr() + i * d;
                for (int64_t c = 0; c < d; ++c) xg[c] += g[c] * rr[c];
            }
        }
        if (r->requires_grad) {
            r->ensure_grad();
            for (int64_t i = 0; i < n_rows; ++i) {
                T* rg = r->grad.ptr() + (*map)[i] * d;
                const T* g = n.grad.ptr() + i * d;
                const T* xv = x->val.ptr() + i * d;
                for (int64_t c = 0; c < d; ++c) rg[c] += g[c] * xv[c];
            }
        }
    });
}

// Embedding lookup: table [V, D], idx -> [n, D]
template <typename T>
Var<T> gather_rows(Var<T> table, std::shared_ptr<std::vector<int32_t>> idx) {
    int64_t d = table->val.shape[1];
    int64_t n_rows = static_cast<int64_t>(idx->size());
    Tensor<T> out({n_rows, d});
    for (int64_t i = 0; i < n_rows; ++i)
        std::memcpy(out.ptr() + i * d, table->val.ptr() + (*idx)[i] * d, sizeof(T) * d);
    return make_op<T>(std::move(out), {table}, [table, idx, n_rows, d](Node<T>& n) mutable {
        if (!table->requires_grad) return;
        table->ensure_grad();
        for (int64_t i = 0; i < n_rows; ++i) {
            T* tg = table->grad.ptr() + (*idx)[i] * d;
            const T* g = n.grad.ptr() + i * d;
            for (int64_t c = 0; c < d; ++c) tg[c] += g[c];
        }
    });
}

template <typename T>
Var<T> concat_rows(std::vector<Var<T>> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    int64_t d = parts[0]->val.shape[1];
    int64_t total = 0;
    for (auto& p : parts) total += p->val.shape[0];
    Tensor<T> out({total, d});
    int64_t off = 0;
    for (auto& p : parts) {
        std::memcpy(out.ptr() + off * d, p->val.ptr(), sizeof(T) * p->val.numel());
        off += p->val.shape[0];
    }
    return make_op<T>(std::move(out), parts, [parts, d](Node<T>& n) mutable {
        int64_t off = 0;
        for (auto& p : parts) {
            int64_t rows = p->val.shape[0];
            if (p->requires_grad) {
                p->ensure_grad();
                const T* g = n.grad.ptr() + off * d;
                for (int64_t i = 0; i < rows * d; ++i) p->grad[i] += g[i];
            }
            off += rows;
        }
    });
}

template <typename T>
Var<T> slice_rows(Var<T> x, int64_t start, int64_t len) {
    int64_t d = x->val.shape[1];
    Tensor<T> out({len, d});
    std::memcpy(out.ptr(), x->val.ptr() + start * d, sizeof(T) * len * d);
    return make_op<T>(std::move(out), {x}, [x, start, len, d](Node<T>& n) mutable {
        if (!x->requires_grad) return;
        x->ensure_grad();
        T* xg = x->grad.ptr() + start * d;
        for (int64_t i = 0; i < len * d; ++i) xg[i] += n.grad[i];
    });
}

// View x as [a, b, D] and return [b, a, D].
template <typename T>
Var<T> transpose_batch(Var<T> x, int64_t a, int64_t b, int64_t d) {
    Tensor<T> out({b * a, d});
    for (int64_t i = 0; i < a; ++i)
        for (int64_t j = 0; j < b; ++j)
            std::memcpy(out.ptr() + (j * a + i) * d, x->val.ptr() + (i * b + j) * d,
                        sizeof(T) * d);
    return make_op<T>(std::move(out), {x}, [x, a, b, d](Node<T>& n) mutable {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t i = 0; i < a; ++i)
            for (int64_t j = 0; j < b; ++j) {
                const T* g = n.grad.ptr() + (j * a + i) * d;
                T* xg = x->grad.ptr() + (i * b + j) * d;
                for (int64_t c = 0; c < d; ++c) xg[c] += g[c];
            }
    });
}

// Per-batch sequence concat with a constant prefix. prefix is [B*Sp, D] and x
// is [B*Sx, D], both batch-major; the result is [B*(Sp+Sx), D]. Gradients only
// flow into x (the prefix is detached cache content).
template <typename T>
Var<T> concat_seq_const(Tensor<T> prefix, Var<T> x, int64_t B, int64_t Sp, int64_t Sx,
                        int64_t d) {
    if (prefix.numel() != B * Sp * d || x->val.numel() != B * Sx * d)
        throw std::invalid_argument("concat_seq_const: size mismatch");
    int64_t St = Sp + Sx;
    Tensor<T> out({B * St, d});
    for (int64_t b = 0; b < B; ++b) {
        std::memcpy(out.ptr() + b * St * d, prefix.ptr() + b * Sp * d, sizeof(T) * Sp * d);
        std::memcpy(out.ptr() + (b * St + Sp) * d, x->val.ptr() + b * Sx * d,
                    sizeof(T) * Sx * d);
    }
    return make_op<T>(std::move(out), {x}, [x, B, Sp, Sx, d](Node<T>& n) mutable {
        if (!x->requires_grad) return;
        x->ensure_grad();
        int64_t St = Sp + Sx;
        for (int64_t b = 0; b < B; ++b) {
            const T* g = n.grad.ptr() + (b * St + Sp) * d;
            T* xg = x->grad.ptr() + b * Sx * d;
            for (int64_t i = 0; i < Sx * d; ++i) xg[i] += g[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions / losses
// ---------------------------------------------------------------------------

template <typename T>
Var<T> mean_all(Var<T> x) {
    Tensor<T> out({1});
    T s = 0;
    for (int64_t i = 0; i < x->val.numel(); ++i) s += x->val[i];
    int64_t n_el = x->val.numel();
    out[0] = s / T(n_el);
    return make_op<T>(std::move(out), {x}, [x, n_el](Node<T>& n) mutable {
        if (!x->requires_grad) return;
        x->ensure_grad();
        T g = n.grad[0] / T(n_el);
        for (int64_t i = 0; i < x->grad.numel(); ++i) x->grad[i] += g;
    });
}

// Weighted MSE against a constant target. row_w has one weight per row of
// pred [N, D]; result = sum_n w[n] * |pred_n - tgt_n|^2 / norm.
template <typename T>
Var<T> mse_weighted(Var<T> pred, Tensor<T> target, std::vector<T> row_w, double norm) {
    int64_t n_rows = pred->val.shape[0], d = pred->val.shape[1];
    if (!pred->val.same_shape(target)) throw std::invalid_argument("mse: shape mismatch");
    Tensor<T> out({1});
    T s = 0;
    for (int64_t r = 0; r < n_rows; ++r) {
        if (row_w[r] == T(0)) continue;
        const T* p = pred->val.ptr() + r * d;
        const T* t = target.ptr() + r * d;
        T acc = 0;
        for (int64_t c = 0; c < d; ++c) {
            T e = p[c] - t[c];
            acc += e * e;
        }
        s += row_w[r] * acc;
    }
    out[0] = static_cast<T>(s / norm);
    auto tgt = std::make_shared<Tensor<T>>(std::move(target));
    auto w = std::make_shared<std::vector<T>>(std::move(row_w));
    return make_op<T>(std::move(out), {pred}, [pred, tgt, w, n_rows, d, norm](Node<T>& n) mutable {
        if (!pred->requires_grad) return;
        pred->ensure_grad();
        T g = n.grad[0];
        for (int64_t r = 0; r < n_rows; ++r) {
            if ((*w)[r] == T(0)) continue;
            const T* p = pred->val.ptr() + r * d;
            const T* t = tgt->ptr() + r * d;
            T* pg = pred->grad.ptr() + r * d;
            T coef = static_cast<T>(2.0 * (*w)[r] / norm) * g;
            for (int64_t c = 0; c < d; ++c) pg[c] += coef * (p[c] - t[c]);
        }
    });
}

// sum(x * c) for a constant c; used to inject externally computed gradients.
template <typename T>
Var<T> dot_const(Var<T> x, Tensor<T> c) {
    if (!x->val.same_shape(c)) throw std::invalid_argument("dot_const: shape mismatch");
    Tensor<T> out({1});
    T s = 0;
    for (int64_t i = 0; i < x->val.numel(); ++i) s += x->val[i] * c[i];
    out[0] = s;
    auto cp = std::make_shared<Tensor<T>>(std::move(c));
    return make_op<T>(std::move(out), {x}, [x, cp](Node<T>& n) mutable {
        if (!x->requires_grad) return;
        x->ensure_grad();
        T g = n.grad[0];
        for (int64_t i = 0; i < x->grad.numel(); ++i) x->grad[i] += g * (*cp)[i];
    });
}

}  // namespace xworld::ag
