#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

#include "cmtkd/graph.hpp"
#include "cmtkd/tensor.hpp"

namespace cmtkd {
namespace ops {

// All ops take an optional Graph*: nullptr runs a pure forward (eval),
// otherwise a backward closure is recorded when any input needs gradient.

// ---------------------------------------------------------------------------
// conv2d: x[N,C,H,W] * w[F,C,kh,kw] -> y[N,F,Ho,Wo], no bias (BN follows).
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> conv2d(Graph<T>* g, const Tensor<T>& x, const Tensor<T>& w, int stride, int padding) {
    if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d: expects 4-d input and weight");
    if (stride < 1) throw ValueError("conv2d: stride must be >= 1");
    if (padding < 0) throw ValueError("conv2d: padding must be >= 0");
    const i64 N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const i64 F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != C)
        throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    const i64 hn = H + 2 * padding - kh;
    const i64 wn = W + 2 * padding - kw;
    if (hn < 0 || wn < 0 || hn % stride != 0 || wn % stride != 0)
        throw ShapeError("conv2d: non-integral output extent");
    const i64 Ho = hn / stride + 1, Wo = wn / stride + 1;

    Tensor<T> y({N, F, Ho, Wo});
    const int s = stride, p = padding;

    // Valid output range for a kernel offset so input indices stay in bounds.
    auto lo_of = [s, p](i64 k) -> i64 {
        i64 d = p - k;
        return d <= 0 ? 0 : (d + s - 1) / s;
    };
    auto hi_of = [s, p](i64 k, i64 in_extent, i64 out_extent) -> i64 {
        i64 top = (in_extent - 1 + p - k) / s;
        return std::min(out_extent - 1, top);
    };

    {
        const T* xd = x.values().data();
        const T* wd = w.values().data();
        T* yd = y.values().data();
        for (i64 n = 0; n < N; ++n)
            for (i64 f = 0; f < F; ++f) {
                T* yo = yd + ((n * F + f) * Ho) * Wo;
                for (i64 c = 0; c < C; ++c) {
                    const T* xc = xd + ((n * C + c) * H) * W;
                    const T* wfc = wd + ((f * C + c) * kh) * kw;
                    for (i64 r = 0; r < kh; ++r) {
                        const i64 ho_lo = lo_of(r), ho_hi = hi_of(r, H, Ho);
                        for (i64 q = 0; q < kw; ++q) {
                            const T wv = wfc[r * kw + q];
                            const i64 wo_lo = lo_of(q), wo_hi = hi_of(q, W, Wo);
                            for (i64 ho = ho_lo; ho <= ho_hi; ++ho) {
                                const T* xrow = xc + (ho * s + r - p) * W + (q - p);
                                T* yrow = yo + ho * Wo;
                                for (i64 wo = wo_lo; wo <= wo_hi; ++wo)
                                    yrow[wo] += wv * xrow[wo * s];
                            }
                        }
                    }
                }
            }
    }
    check_finite(y, "conv2d");

    if (detail::track(g, {&x, &w})) {
        y.set_requires_grad(true);
        Tensor<T> xc_ = x, wc_ = w, yc_ = y;
        g->record([xc_, wc_, yc_, N, C, H, W, F, kh, kw, Ho, Wo, s, p, lo_of, hi_of]() mutable {
            const bool need_x = xc_.requires_grad();
            const bool need_w = wc_.requires_grad();
            const T* gy = yc_.grads().data();
            const T* xd = xc_.values().data();
            const T* wd = wc_.values().data();
            T* gx = need_x ? xc_.grads().data() : nullptr;
            T* gw = need_w ? wc_.grads().data() : nullptr;
            for (i64 n = 0; n < N; ++n)
                for (i64 f = 0; f < F; ++f) {
                    const T* gyo = gy + ((n * F + f) * Ho) * Wo;
                    for (i64 c = 0; c < C; ++c) {
                        const T* xc2 = xd + ((n * C + c) * H) * W;
                        T* gxc = need_x ? gx + ((n * C + c) * H) * W : nullptr;
                        const T* wfc = wd + ((f * C + c) * kh) * kw;
                        T* gwfc = need_w ? gw + ((f * C + c) * kh) * kw : nullptr;
                        for (i64 r = 0; r < kh; ++r) {
                            const i64 ho_lo = lo_of(r), ho_hi = hi_of(r, H, Ho);
                            for (i64 q = 0; q < kw; ++q) {
                                const T wv = wfc[r * kw + q];
                                const i64 wo_lo = lo_of(q), wo_hi = hi_of(q, W, Wo);
                                T wacc = T(0);
                                for (i64 ho = ho_lo; ho <= ho_hi; ++ho) {
                                    const i64 base = (ho * s + r - p) * W + (q - p);
                                    const T* gyrow = gyo + ho * Wo;
                                    if (need_x) {
                                        T* gxrow = gxc + base;
                                        for (i64 wo = wo_lo; wo <= wo_hi; ++wo)
                                            gxrow[wo * s] += wv * gyrow[wo];
                                    }
                                    if (need_w) {
                                        const T* xrow = xc2 + base;
                                        for (i64 wo = wo_lo; wo <= wo_hi; ++wo)
                                            wacc += gyrow[wo] * xrow[wo * s];
                                    }
                                }
                                if (need_w) gwfc[r * kw + q] += wacc;
                            }
                        }
                    }
                }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// batch_norm2d. Train mode normalizes with biased batch statistics and
// updates the running buffers in place; eval mode uses the running buffers.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> batch_norm2d(Graph<T>* g, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, bool train,
                       double momentum = 0.1, double eps = 1e-5) {
    if (x.rank() != 4) throw ShapeError("batch_norm2d: expects 4-d input");
    const i64 N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C || running_var.numel() != C)
        throw ShapeError("batch_norm2d: per-channel parameter length must equal channel count");
    if (train && N < 2) throw ValueError("batch_norm2d: train mode needs batch size >= 2");

    const i64 plane = H * W;
    const i64 cnt = N * plane;
    Tensor<T> y({N, C, H, W});
    std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
    std::vector<T> istd(static_cast<std::size_t>(C));

    const T* xd = x.values().data();
    T* yd = y.values().data();
    const T* gm = gamma.values().data();
    const T* bt = beta.values().data();

    for (i64 c = 0; c < C; ++c) {
        T mean, var;
        if (train) {
            T sum = T(0);
            for (i64 n = 0; n < N; ++n) {
                const T* xp = xd + ((n * C + c) * plane);
                for (i64 e = 0; e < plane; ++e) sum += xp[e];
            }
            mean = sum / T(cnt);
            T vsum = T(0);
            for (i64 n = 0; n < N; ++n) {
                const T* xp = xd + ((n * C + c) * plane);
                for (i64 e = 0; e < plane; ++e) {
                    T d = xp[e] - mean;
                    vsum += d * d;
                }
            }
            var = vsum / T(cnt);
            running_mean.values()[c] = T(1.0 - momentum) * running_mean.values()[c] + T(momentum) * mean;
            running_var.values()[c] = T(1.0 - momentum) * running_var.values()[c] + T(momentum) * var;
        } else {
            mean = running_mean.values()[c];
            var = running_var.values()[c];
        }
        const T is = T(1) / std::sqrt(var + T(eps));
        istd[c] = is;
        for (i64 n = 0; n < N; ++n) {
            const T* xp = xd + ((n * C + c) * plane);
            T* yp = yd + ((n * C + c) * plane);
            T* hp = xhat.data() + ((n * C + c) * plane);
            for (i64 e = 0; e < plane; ++e) {
                T h = (xp[e] - mean) * is;
                hp[e] = h;
                yp[e] = gm[c] * h + bt[c];
            }
        }
    }
    check_finite(y, "batch_norm2d");

    if (detail::track(g, {&x, &gamma, &beta})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, gc = gamma, bc = beta, yc = y;
        g->record([xc, gc, bc, yc, xhat = std::move(xhat), istd = std::move(istd), N, C, plane, cnt, train]() mutable {
            const T* gy = yc.grads().data();
            const T* gm = gc.values().data();
            const bool need_x = xc.requires_grad();
            T* gx = need_x ? xc.grads().data() : nullptr;
            T* gg = gc.requires_grad() ? gc.grads().data() : nullptr;
            T* gb = bc.requires_grad() ? bc.grads().data() : nullptr;
            for (i64 c = 0; c < C; ++c) {
                T sum_gy = T(0), sum_gyh = T(0);
                for (i64 n = 0; n < N; ++n) {
                    const T* gp = gy + ((n * C + c) * plane);
                    const T* hp = xhat.data() + ((n * C + c) * plane);
                    for (i64 e = 0; e < plane; ++e) {
                        sum_gy += gp[e];
                        sum_gyh += gp[e] * hp[e];
                    }
                }
                if (gg) gg[c] += sum_gyh;
                if (gb) gb[c] += sum_gy;
                if (need_x) {
                    const T k = gm[c] * istd[c];
                    if (train) {
                        const T mg = sum_gy / T(cnt), mgh = sum_gyh / T(cnt);
                        for (i64 n = 0; n < N; ++n) {
                            const T* gp = gy + ((n * C + c) * plane);
                            const T* hp = xhat.data() + ((n * C + c) * plane);
                            T* xp = gx + ((n * C + c) * plane);
                            for (i64 e = 0; e < plane; ++e)
                                xp[e] += k * (gp[e] - mg - hp[e] * mgh);
                        }
                    } else {
                        for (i64 n = 0; n < N; ++n) {
                            const T* gp = gy + ((n * C + c) * plane);
                            T* xp = gx + ((n * C + c) * plane);
                            for (i64 e = 0; e < plane; ++e) xp[e] += k * gp[e];
                        }
                    }
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// linear: y = x * w^T + b, x[N,D], w[M,D], b[M].
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> linear(Graph<T>* g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1) throw ShapeError("linear: bad ranks");
    const i64 N = x.dim(0), D = x.dim(1), M = w.dim(0);
    if (w.dim(1) != D || b.dim(0) != M)
        throw ShapeError("linear: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    Tensor<T> y({N, M});
    {
        const T* xd = x.values().data();
        const T* wd = w.values().data();
        const T* bd = b.values().data();
        T* yd = y.values().data();
        for (i64 n = 0; n < N; ++n)
            for (i64 m = 0; m < M; ++m) {
                T acc = bd[m];
                const T* xr = xd + n * D;
                const T* wr = wd + m * D;
                for (i64 d = 0; d < D; ++d) acc += xr[d] * wr[d];
                yd[n * M + m] = acc;
            }
    }
    check_finite(y, "linear");

    if (detail::track(g, {&x, &w, &b})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, wc = w, bc = b, yc = y;
        g->record([xc, wc, bc, yc, N, D, M]() mutable {
            const T* gy = yc.grads().data();
            const T* xd = xc.values().data();
            const T* wd = wc.values().data();
            T* gx = xc.requires_grad() ? xc.grads().data() : nullptr;
            T* gw = wc.requires_grad() ? wc.grads().data() : nullptr;
            T* gb = bc.requires_grad() ? bc.grads().data() : nullptr;
            for (i64 n = 0; n < N; ++n)
                for (i64 m = 0; m < M; ++m) {
                    const T gv = gy[n * M + m];
                    if (gb) gb[m] += gv;
                    if (gx) {
                        const T* wr = wd + m * D;
                        T* xr = gx + n * D;
                        for (i64 d = 0; d < D; ++d) xr[d] += gv * wr[d];
                    }
                    if (gw) {
                        const T* xr = xd + n * D;
                        T* wr = gw + m * D;
                        for (i64 d = 0; d < D; ++d) wr[d] += gv * xr[d];
                    }
                }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Elementwise and structural primitives.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> relu(Graph<T>* g, const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    const T* xd = x.values().data();
    T* yd = y.values().data();
    for (i64 i = 0; i < x.numel(); ++i) yd[i] = xd[i] > T(0) ? xd[i] : T(0);
    check_finite(y, "relu");
    if (detail::track(g, {&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        g->record([xc, yc]() mutable {
            const T* gy = yc.grads().data();
            const T* xd = xc.values().data();
            T* gx = xc.grads().data();
            for (i64 i = 0; i < xc.numel(); ++i)
                if (xd[i] > T(0)) gx[i] += gy[i];
        });
    }
    return y;
}

template <class T>
Tensor<T> add(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("add: shape mismatch");
    Tensor<T> y(a.shape());
    for (i64 i = 0; i < a.numel(); ++i) y.values()[i] = a.values()[i] + b.values()[i];
    check_finite(y, "add");
    if (detail::track(g, {&a, &b})) {
        y.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, yc = y;
        g->record([ac, bc, yc]() mutable {
            const T* gy = yc.grads().data();
            if (ac.requires_grad()) {
                T* ga = ac.grads().data();
                for (i64 i = 0; i < ac.numel(); ++i) ga[i] += gy[i];
            }
            if (bc.requires_grad()) {
                T* gb = bc.grads().data();
                for (i64 i = 0; i < bc.numel(); ++i) gb[i] += gy[i];
            }
        });
    }
    return y;
}

template <class T>
Tensor<T> mul(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("mul: shape mismatch");
    Tensor<T> y(a.shape());
    for (i64 i = 0; i < a.numel(); ++i) y.values()[i] = a.values()[i] * b.values()[i];
    check_finite(y, "mul");
    if (detail::track(g, {&a, &b})) {
        y.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, yc = y;
        g->record([ac, bc, yc]() mutable {
            const T* gy = yc.grads().data();
            if (ac.requires_grad()) {
                T* ga = ac.grads().data();
                const T* bd = bc.values().data();
                for (i64 i = 0; i < ac.numel(); ++i) ga[i] += gy[i] * bd[i];
            }
            if (bc.requires_grad()) {
                T* gb = bc.grads().data();
                const T* ad = ac.values().data();
                for (i64 i = 0; i < bc.numel(); ++i) gb[i] += gy[i] * ad[i];
            }
        });
    }
    return y;
}

template <class T>
Tensor<T> scalar_mul(Graph<T>* g, const Tensor<T>& x, T c) {
    Tensor<T> y(x.shape());
    for (i64 i = 0; i < x.numel(); ++i) y.values()[i] = c * x.values()[i];
    check_finite(y, "scalar_mul");
    if (detail::track(g, {&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        g->record([xc, yc, c]() mutable {
            const T* gy = yc.grads().data();
            T* gx = xc.grads().data();
            for (i64 i = 0; i < xc.numel(); ++i) gx[i] += c * gy[i];
        });
    }
    return y;
}

template <class T>
Tensor<T> sum(Graph<T>* g, const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.values()) acc += v;
    Tensor<T> y = Tensor<T>::scalar(acc);
    check_finite(y, "sum");
    if (detail::track(g, {&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        g->record([xc, yc]() mutable {
            const T gy = yc.grads()[0];
            T* gx = xc.grads().data();
            for (i64 i = 0; i < xc.numel(); ++i) gx[i] += gy;
        });
    }
    return y;
}

template <class T>
Tensor<T> flatten(Graph<T>* g, const Tensor<T>& x) {
    if (x.rank() < 1) throw ShapeError("flatten: rank must be >= 1");
    const i64 N = x.dim(0);
    Tensor<T> y = Tensor<T>::of({N, x.numel() / N}, x.values());
    if (detail::track(g, {&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        g->record([xc, yc]() mutable {
            const T* gy = yc.grads().data();
            T* gx = xc.grads().data();
            for (i64 i = 0; i < xc.numel(); ++i) gx[i] += gy[i];
        });
    }
    return y;
}

// Values-only copy that drops out of the gradient graph.
template <class T>
Tensor<T> detach(const Tensor<T>& x) {
    return Tensor<T>::of(x.shape(), x.values());
}

// ---------------------------------------------------------------------------
// Pooling. Max-pool routes gradient to the argmax; ties break toward the
// lowest linear index.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> max_pool2d(Graph<T>* g, const Tensor<T>& x, int k, int stride) {
    if (x.rank() != 4) throw ShapeError("max_pool2d: expects 4-d input");
    if (k < 1 || stride < 1) throw ValueError("max_pool2d: kernel and stride must be >= 1");
    const i64 N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if ((H - k) < 0 || (W - k) < 0 || (H - k) % stride != 0 || (W - k) % stride != 0)
        throw ShapeError("max_pool2d: non-integral output extent");
    const i64 Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
    Tensor<T> y({N, C, Ho, Wo});
    std::vector<i64> arg(static_cast<std::size_t>(y.numel()));
    const T* xd = x.values().data();
    T* yd = y.values().data();
    i64 oi = 0;
    for (i64 n = 0; n < N; ++n)
        for (i64 c = 0; c < C; ++c) {
            const T* xp = xd + ((n * C + c) * H) * W;
            for (i64 ho = 0; ho < Ho; ++ho)
                for (i64 wo = 0; wo < Wo; ++wo, ++oi) {
                    T best = xp[(ho * stride) * W + wo * stride];
                    i64 bi = (ho * stride) * W + wo * stride;
                    for (i64 r = 0; r < k; ++r)
                        for (i64 q = 0; q < k; ++q) {
                            const i64 idx = (ho * stride + r) * W + wo * stride + q;
                            if (xp[idx] > best) {
                                best = xp[idx];
                                bi = idx;
                            }
                        }
                    yd[oi] = best;
                    arg[static_cast<std::size_t>(oi)] = ((n * C + c) * H) * W + bi;
                }
        }
    check_finite(y, "max_pool2d");
    if (detail::track(g, {&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        g->record([xc, yc, arg = std::move(arg)]() mutable {
            const T* gy = yc.grads().data();
            T* gx = xc.grads().data();
            for (i64 i = 0; i < yc.numel(); ++i) gx[arg[static_cast<std::size_t>(i)]] += gy[i];
        });
    }
    return y;
}

template <class T>
Tensor<T> avg_pool2d(Graph<T>* g, const Tensor<T>& x, int k, int stride) {
    if (x.rank() != 4) throw ShapeError("avg_pool2d: expects 4-d input");
    if (k < 1 || stride < 1) throw ValueError("avg_pool2d: kernel and stride must be >= 1");
    const i64 N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if ((H - k) < 0 || (W - k) < 0 || (H - k) % stride != 0 || (W - k) % stride != 0)
        throw ShapeError("avg_pool2d: non-integral output extent");
    const i64 Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
    Tensor<T> y({N, C, Ho, Wo});
    const T inv = T(1) / T(k * k);
    const T* xd = x.values().data();
    T* yd = y.values().data();
    i64 oi = 0;
    for (i64 n = 0; n < N; ++n)
        for (i64 c = 0; c < C; ++c) {
            const T* xp = xd + ((n * C + c) * H) * W;
            for (i64 ho = 0; ho < Ho; ++ho)
                for (i64 wo = 0; wo < Wo; ++wo, ++oi) {
                    T acc = T(0);
                    for (i64 r = 0; r < k; ++r)
                        for (i64 q = 0; q < k; ++q) acc += xp[(ho * stride + r) * W + wo * stride + q];
                    yd[oi] = acc * inv;
                }
        }
    check_finite(y, "avg_pool2d");
    if (detail::track(g, {&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        g->record([xc, yc, N, C, H, W, Ho, Wo, k, stride, inv]() mutable {
            const T* gy = yc.grads().data();
            T* gx = xc.grads().data();
            i64 oi = 0;
            for (i64 n = 0; n < N; ++n)
                for (i64 c = 0; c < C; ++c) {
                    T* xp = gx + ((n * C + c) * H) * W;
                    for (i64 ho = 0; ho < Ho; ++ho)
                        for (i64 wo = 0; wo < Wo; ++wo, ++oi) {
                            const T gv = gy[oi] * inv;
                            for (i64 r = 0; r < k; ++r)
                                for (i64 q = 0; q < k; ++q)
                                    xp[(ho * stride + r) * W + wo * stride + q] += gv;
                        }
                }
        });
    }
    return y;
}

// Global average over spatial dims: [N,C,H,W] -> [N,C].
template <class T>
Tensor<T> global_avg_pool(Graph<T>* g, const Tensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("global_avg_pool: expects 4-d input");
    const i64 N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
    Tensor<T> y({N, C});
    const T inv = T(1) / T(plane);
    const T* xd = x.values().data();
    T* yd = y.values().data();
    for (i64 n = 0; n < N; ++n)
        for (i64 c = 0; c < C; ++c) {
            T acc = T(0);
            const T* xp = xd + ((n * C + c) * plane);
            for (i64 e = 0; e < plane; ++e) acc += xp[e];
            yd[n * C + c] = acc * inv;
        }
    check_finite(y, "global_avg_pool");
    if (detail::track(g, {&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        g->record([xc, yc, N, C, plane, inv]() mutable {
            const T* gy = yc.grads().data();
            T* gx = xc.grads().data();
            for (i64 n = 0; n < N; ++n)
                for (i64 c = 0; c < C; ++c) {
                    const T gv = gy[n * C + c] * inv;
                    T* xp = gx + ((n * C + c) * plane);
                    for (i64 e = 0; e < plane; ++e) xp[e] += gv;
                }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Classification losses and softmax utilities.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> softmax_cross_entropy(Graph<T>* g, const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be [N,m]");
    const i64 N = logits.dim(0), M = logits.dim(1);
    if (static_cast<i64>(labels.size()) != N) throw ShapeError("softmax_cross_entropy: label count mismatch");
    for (int c : labels)
        if (c < 0 || c >= M) throw ValueError("softmax_cross_entropy: label out of range");

    std::vector<T> probs(static_cast<std::size_t>(logits.numel()));
    const T* zd = logits.values().data();
    T loss = T(0);
    for (i64 n = 0; n < N; ++n) {
        const T* zr = zd + n * M;
        T mx = zr[0];
        for (i64 j = 1; j < M; ++j) mx = std::max(mx, zr[j]);
        T se = T(0);
        for (i64 j = 0; j < M; ++j) se += std::exp(zr[j] - mx);
        const T lse = mx + std::log(se);
        for (i64 j = 0; j < M; ++j) probs[static_cast<std::size_t>(n * M + j)] = std::exp(zr[j] - lse);
        loss += lse - zr[labels[static_cast<std::size_t>(n)]];
    }
    Tensor<T> y = Tensor<T>::scalar(loss / T(N));
    check_finite(y, "softmax_cross_entropy");
    if (detail::track(g, {&logits})) {
        y.set_requires_grad(true);
        Tensor<T> zc = logits, yc = y;
        g->record([zc, yc, probs = std::move(probs), labels, N, M]() mutable {
            const T gy = yc.grads()[0];
            T* gz = zc.grads().data();
            const T invn = T(1) / T(N);
            for (i64 n = 0; n < N; ++n)
                for (i64 j = 0; j < M; ++j) {
                    T p = probs[static_cast<std::size_t>(n * M + j)];
                    if (j == labels[static_cast<std::size_t>(n)]) p -= T(1);
                    gz[n * M + j] += gy * invn * p;
                }
        });
    }
    return y;
}

// Row-wise softmax(z / temperature).
template <class T>
Tensor<T> softmax_rows(Graph<T>* g, const Tensor<T>& z, double temperature) {
    if (z.rank() != 2) throw ShapeError("softmax_rows: expects [N,m]");
    if (!(temperature > 0)) throw ValueError("softmax_rows: temperature must be > 0");
    const i64 N = z.dim(0), M = z.dim(1);
    Tensor<T> p({N, M});
    const T* zd = z.values().data();
    T* pd = p.values().data();
    const T it = T(1.0 / temperature);
    for (i64 n = 0; n < N; ++n) {
        const T* zr = zd + n * M;
        T mx = zr[0];
        for (i64 j = 1; j < M; ++j) mx = std::max(mx, zr[j]);
        T se = T(0);
        for (i64 j = 0; j < M; ++j) {
            T e = std::exp((zr[j] - mx) * it);
            pd[n * M + j] = e;
            se += e;
        }
        for (i64 j = 0; j < M; ++j) pd[n * M + j] /= se;
    }
    check_finite(p, "softmax_rows");
    if (detail::track(g, {&z})) {
        p.set_requires_grad(true);
        Tensor<T> zc = z, pc = p;
        g->record([zc, pc, N, M, it]() mutable {
            const T* gp = pc.grads().data();
            const T* pd = pc.values().data();
            T* gz = zc.grads().data();
            for (i64 n = 0; n < N; ++n) {
                T dot = T(0);
                for (i64 j = 0; j < M; ++j) dot += gp[n * M + j] * pd[n * M + j];
                for (i64 j = 0; j < M; ++j)
                    gz[n * M + j] += it * pd[n * M + j] * (gp[n * M + j] - dot);
            }
        });
    }
    return p;
}

// temperature^2 * KL(p_fixed || softmax(z / temperature)), batch-mean.
// p_fixed is a constant target; gradient flows into z only.
template <class T>
Tensor<T> kl_vs_fixed(Graph<T>* g, const Tensor<T>& p_fixed, const Tensor<T>& z, double temperature) {
    if (p_fixed.shape() != z.shape() || z.rank() != 2) throw ShapeError("kl_vs_fixed: shape mismatch");
    if (!(temperature > 0)) throw ValueError("kl_vs_fixed: temperature must be > 0");
    const i64 N = z.dim(0), M = z.dim(1);
    const T it = T(1.0 / temperature);
    std::vector<T> q(static_cast<std::size_t>(z.numel()));  // softmax(z/T)
    const T* zd = z.values().data();
    const T* pb = p_fixed.values().data();
    T loss = T(0);
    for (i64 n = 0; n < N; ++n) {
        const T* zr = zd + n * M;
        T mx = zr[0];
        for (i64 j = 1; j < M; ++j) mx = std::max(mx, zr[j]);
        T se = T(0);
        for (i64 j = 0; j < M; ++j) se += std::exp((zr[j] - mx) * it);
        const T lse = mx * it + std::log(se);
        T row = T(0);
        for (i64 j = 0; j < M; ++j) {
            const T ls = zr[j] * it - lse;
            q[static_cast<std::size_t>(n * M + j)] = std::exp(ls);
            const T pv = pb[n * M + j];
            if (pv > T(0)) row += pv * (std::log(pv) - ls);
        }
        loss += row;
    }
    const T t2 = T(temperature * temperature);
    Tensor<T> y = Tensor<T>::scalar(t2 * loss / T(N));
    check_finite(y, "kl_vs_fixed");
    if (detail::track(g, {&z})) {
        y.set_requires_grad(true);
        Tensor<T> zc = z, pc = p_fixed, yc = y;
        g->record([zc, pc, yc, q = std::move(q), N, M, temperature]() mutable {
            const T gy = yc.grads()[0];
            const T* pb = pc.values().data();
            T* gz = zc.grads().data();
            const T k = T(temperature) / T(N);
            for (i64 n = 0; n < N; ++n) {
                T s = T(0);
                for (i64 j = 0; j < M; ++j) s += pb[n * M + j];
                for (i64 j = 0; j < M; ++j)
                    gz[n * M + j] += gy * k * (q[static_cast<std::size_t>(n * M + j)] * s - pb[n * M + j]);
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Feature-distillation building blocks.
// ---------------------------------------------------------------------------

// Channel-wise sum of squares: [N,C,H,W] -> [N, H*W].
template <class T>
Tensor<T> attention_map(Graph<T>* g, const Tensor<T>& f) {
    if (f.rank() != 4) throw ShapeError("attention_map: expects 4-d input");
    const i64 N = f.dim(0), C = f.dim(1), plane = f.dim(2) * f.dim(3);
    Tensor<T> q({N, plane});
    const T* fd = f.values().data();
    T* qd = q.values().data();
    for (i64 n = 0; n < N; ++n) {
        T* qp = qd + n * plane;
        for (i64 e = 0; e < plane; ++e) qp[e] = T(0);
        for (i64 c = 0; c < C; ++c) {
            const T* fp = fd + ((n * C + c) * plane);
            for (i64 e = 0; e < plane; ++e) qp[e] += fp[e] * fp[e];
        }
    }
    check_finite(q, "attention_map");
    if (detail::track(g, {&f})) {
        q.set_requires_grad(true);
        Tensor<T> fc = f, qc = q;
        g->record([fc, qc, N, C, plane]() mutable {
            const T* gq = qc.grads().data();
            const T* fd = fc.values().data();
            T* gf = fc.grads().data();
            for (i64 n = 0; n < N; ++n)
                for (i64 c = 0; c < C; ++c) {
                    const T* fp = fd + ((n * C + c) * plane);
                    T* gp = gf + ((n * C + c) * plane);
                    const T* qp = gq + n * plane;
                    for (i64 e = 0; e < plane; ++e) gp[e] += T(2) * fp[e] * qp[e];
                }
        });
    }
    return q;
}

// Per-row || a/||a|| - b/||b|| ||_2, averaged over rows. A zero-norm row
// contributes 0 (normalization undefined there) and logs a warning.
template <class T>
Tensor<T> normalized_l2_distance(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape() || a.rank() != 2) throw ShapeError("normalized_l2_distance: shape mismatch");
    const i64 N = a.dim(0), D = a.dim(1);
    const T* ad = a.values().data();
    const T* bd = b.values().data();
    T total = T(0);
    bool warned = false;
    for (i64 n = 0; n < N; ++n) {
        T na = T(0), nb = T(0);
        for (i64 j = 0; j < D; ++j) {
            na += ad[n * D + j] * ad[n * D + j];
            nb += bd[n * D + j] * bd[n * D + j];
        }
        na = std::sqrt(na);
        nb = std::sqrt(nb);
        if (na == T(0) || nb == T(0)) {
            if (!warned) {
                std::fprintf(stderr, "[cmtkd] warning: zero-norm attention map, sample skipped\n");
                warned = true;
            }
            continue;
        }
        T d2 = T(0);
        for (i64 j = 0; j < D; ++j) {
            const T u = ad[n * D + j] / na - bd[n * D + j] / nb;
            d2 += u * u;
        }
        total += std::sqrt(d2);
    }
    Tensor<T> y = Tensor<T>::scalar(total / T(N));
    check_finite(y, "normalized_l2_distance");
    if (detail::track(g, {&a, &b})) {
        y.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, yc = y;
        g->record([ac, bc, yc, N, D]() mutable {
            const T gy = yc.grads()[0];
            const T* ad = ac.values().data();
            const T* bd = bc.values().data();
            T* ga = ac.requires_grad() ? ac.grads().data() : nullptr;
            T* gb = bc.requires_grad() ? bc.grads().data() : nullptr;
            for (i64 n = 0; n < N; ++n) {
                T na = T(0), nb = T(0);
                for (i64 j = 0; j < D; ++j) {
                    na += ad[n * D + j] * ad[n * D + j];
                    nb += bd[n * D + j] * bd[n * D + j];
                }
                na = std::sqrt(na);
                nb = std::sqrt(nb);
                if (na == T(0) || nb == T(0)) continue;
                T dot = T(0), d2 = T(0);
                for (i64 j = 0; j < D; ++j) {
                    const T u = ad[n * D + j] / na, v = bd[n * D + j] / nb;
                    dot += u * v;
                    const T w = u - v;
                    d2 += w * w;
                }
                const T d = std::sqrt(d2);
                if (d == T(0)) continue;
                const T ka = gy / (T(N) * na * d), kb = gy / (T(N) * nb * d);
                for (i64 j = 0; j < D; ++j) {
                    const T u = ad[n * D + j] / na, v = bd[n * D + j] / nb;
                    if (ga) ga[n * D + j] += ka * (dot * u - v);
                    if (gb) gb[n * D + j] += kb * (dot * v - u);
                }
            }
        });
    }
    return y;
}

// Per-sample l2 norm of (a - b) over all non-batch dims, batch-mean.
template <class T>
Tensor<T> l2_distance_loss(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("l2_distance_loss: shape mismatch");
    const i64 N = a.dim(0), D = a.numel() / N;
    const T* ad = a.values().data();
    const T* bd = b.values().data();
    T total = T(0);
    for (i64 n = 0; n < N; ++n) {
        T d2 = T(0);
        for (i64 j = 0; j < D; ++j) {
            const T w = ad[n * D + j] - bd[n * D + j];
            d2 += w * w;
        }
        total += std::sqrt(d2);
    }
    Tensor<T> y = Tensor<T>::scalar(total / T(N));
    check_finite(y, "l2_distance_loss");
    if (detail::track(g, {&a, &b})) {
        y.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, yc = y;
        g->record([ac, bc, yc, N, D]() mutable {
            const T gy = yc.grads()[0];
            const T* ad = ac.values().data();
            const T* bd = bc.values().data();
            T* ga = ac.requires_grad() ? ac.grads().data() : nullptr;
            T* gb = bc.requires_grad() ? bc.grads().data() : nullptr;
            for (i64 n = 0; n < N; ++n) {
                T d2 = T(0);
                for (i64 j = 0; j < D; ++j) {
                    const T w = ad[n * D + j] - bd[n * D + j];
                    d2 += w * w;
                }
                const T d = std::sqrt(d2);
                if (d == T(0)) continue;
                const T k = gy / (T(N) * d);
                for (i64 j = 0; j < D; ++j) {
                    const T w = ad[n * D + j] - bd[n * D + j];
                    if (ga) ga[n * D + j] += k * w;
                    if (gb) gb[n * D + j] -= k * w;
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Fusion primitives: softmax over a small logit vector, then a weighted sum
// of same-shape activations.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> softmax_vec(Graph<T>* g, const Tensor<T>& rho) {
    if (rho.rank() != 1) throw ShapeError("softmax_vec: expects 1-d input");
    const i64 n = rho.numel();
    Tensor<T> pi({n});
    const T* rd = rho.values().data();
    T* pd = pi.values().data();
    T mx = rd[0];
    for (i64 i = 1; i < n; ++i) mx = std::max(mx, rd[i]);
    T se = T(0);
    for (i64 i = 0; i < n; ++i) {
        pd[i] = std::exp(rd[i] - mx);
        se += pd[i];
    }
    for (i64 i = 0; i < n; ++i) pd[i] /= se;
    check_finite(pi, "softmax_vec");
    if (detail::track(g, {&rho})) {
        pi.set_requires_grad(true);
        Tensor<T> rc = rho, pc = pi;
        g->record([rc, pc, n]() mutable {
            const T* gp = pc.grads().data();
            const T* pd = pc.values().data();
            T* gr = rc.grads().data();
            T dot = T(0);
            for (i64 i = 0; i < n; ++i) dot += gp[i] * pd[i];
            for (i64 i = 0; i < n; ++i) gr[i] += pd[i] * (gp[i] - dot);
        });
    }
    return pi;
}

// y = sum_i weights[i] * xs[i], differentiable in both the activations and
// the weight vector. Summation runs in ascending index order.
template <class T>
Tensor<T> weighted_sum(Graph<T>* g, const std::vector<Tensor<T>>& xs, const Tensor<T>& weights) {
    if (xs.empty()) throw ShapeError("weighted_sum: empty activation list");
    if (weights.numel() != static_cast<i64>(xs.size())) throw ShapeError("weighted_sum: weight count mismatch");
    for (const auto& x : xs)
        if (x.shape() != xs[0].shape()) throw ShapeError("weighted_sum: activation shape mismatch");
    const i64 n = xs[0].numel();
    Tensor<T> y(xs[0].shape());
    T* yd = y.values().data();
    const T* wd = weights.values().data();
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const T* xd = xs[i].values().data();
        const T w = wd[i];
        for (i64 e = 0; e < n; ++e) yd[e] += w * xd[e];
    }
    check_finite(y, "weighted_sum");

    bool need = weights.requires_grad();
    for (const auto& x : xs) need = need || x.requires_grad();
    if (g && need) {
        y.set_requires_grad(true);
        std::vector<Tensor<T>> xc = xs;
        Tensor<T> wc = weights, yc = y;
        g->record([xc, wc, yc, n]() mutable {
            const T* gy = yc.grads().data();
            const T* wd = wc.values().data();
            T* gw = wc.requires_grad() ? wc.grads().data() : nullptr;
            for (std::size_t i = 0; i < xc.size(); ++i) {
                if (xc[i].requires_grad()) {
                    T* gx = xc[i].grads().data();
                    const T w = wd[i];
                    for (i64 e = 0; e < n; ++e) gx[e] += w * gy[e];
                }
                if (gw) {
                    const T* xd = xc[i].values().data();
                    T acc = T(0);
                    for (i64 e = 0; e < n; ++e) acc += gy[e] * xd[e];
                    gw[i] += acc;
                }
            }
        });
    }
    return y;
}

}  // namespace ops
}  // namespace cmtkd
