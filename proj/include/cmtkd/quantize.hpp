#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <vector>

#include "cmtkd/graph.hpp"
#include "cmtkd/ops.hpp"
#include "cmtkd/tensor.hpp"

namespace cmtkd {

// Bypass mode keeps the network structure but removes the rounding:
// half-wave quantizers degenerate to ReLU, full-wave ones to the identity,
// and the learned-step quantizer to a plain differentiable clip. Used by
// gradient checks, where the rounded forward has no usable derivative.
enum class QuantMode { Active, Bypass };

inline double gauss_pdf(double x) { return std::exp(-0.5 * x * x) * 0.3989422804014327; }
inline double gauss_cdf(double x) { return 0.5 * std::erfc(-x * 0.7071067811865476); }

// MSE of a uniform quantizer with step `d` against a unit Gaussian,
// evaluated in closed form via Gaussian moment identities.
//
// Half-wave: levels {0, d, ..., (2^b - 1) d}. Zero catches all x <= 0
// (zero error against the rectified signal); every positive x maps to the
// nearest positive level, so the first positive cell starts at 0.
// Full-wave: symmetric mid-rise levels +-(k - 1/2) d, k = 1..2^(b-1).
inline double uniform_gaussian_mse(double d, int bits, bool half_wave) {
    const double inf = std::numeric_limits<double>::infinity();
    auto region = [](double l, double u, double q) {
        const double phl = gauss_pdf(l);
        const double phu = std::isinf(u) ? 0.0 : gauss_pdf(u);
        const double prob = (std::isinf(u) ? 1.0 : gauss_cdf(u)) - gauss_cdf(l);
        const double i1 = phl - phu;
        const double i2 = prob + l * phl - (std::isinf(u) ? 0.0 : u * phu);
        return i2 - 2.0 * q * i1 + q * q * prob;
    };
    double total = 0.0;
    if (half_wave) {
        const int n = (1 << bits) - 1;
        for (int j = 1; j <= n; ++j) {
            const double l = (j == 1) ? 0.0 : (j - 0.5) * d;
            const double u = (j == n) ? inf : (j + 0.5) * d;
            total += region(l, u, j * d);
        }
    } else {
        const int K = 1 << (bits - 1);
        for (int k = 1; k <= K; ++k) {
            const double l = (k - 1) * d;
            const double u = (k == K) ? inf : k * d;
            total += 2.0 * region(l, u, (k - 0.5) * d);
        }
    }
    return total;
}

struct GaussianQuantDesign {
    int bits = 0;
    bool half_wave = true;
    double step = 0.0;
    double mse = 0.0;
    std::vector<double> levels;  // strictly increasing; half-wave includes 0
    double level_max() const { return levels.back(); }
};

// Golden-section minimization of the (unimodal) MSE over the step size.
inline GaussianQuantDesign design_uniform_gaussian(int bits, bool half_wave) {
    if (bits < 1 || bits > 8) throw ValueError("design_uniform_gaussian: bits must be in [1,8]");
    double a = 1e-4, b = 4.0;
    const double gr = 0.6180339887498949;
    double c = b - gr * (b - a), d = a + gr * (b - a);
    double fc = uniform_gaussian_mse(c, bits, half_wave);
    double fd = uniform_gaussian_mse(d, bits, half_wave);
    while (b - a > 1e-12) {
        if (fc < fd) {
            b = d; d = c; fd = fc;
            c = b - gr * (b - a);
            fc = uniform_gaussian_mse(c, bits, half_wave);
        } else {
            a = c; c = d; fc = fd;
            d = a + gr * (b - a);
            fd = uniform_gaussian_mse(d, bits, half_wave);
        }
    }
    GaussianQuantDesign out;
    out.bits = bits;
    out.half_wave = half_wave;
    out.step = 0.5 * (a + b);
    out.mse = uniform_gaussian_mse(out.step, bits, half_wave);
    if (half_wave) {
        const int n = (1 << bits) - 1;
        out.levels.push_back(0.0);
        for (int j = 1; j <= n; ++j) out.levels.push_back(j * out.step);
    } else {
        const int K = 1 << (bits - 1);
        for (int k = -K; k < K; ++k) out.levels.push_back((k + 0.5) * out.step);
    }
    return out;
}

// Level tables are pure functions of (bits, half_wave); computed once.
inline const GaussianQuantDesign& gaussian_levels(int bits, bool half_wave) {
    static std::map<std::pair<int, bool>, GaussianQuantDesign> cache;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    auto key = std::make_pair(bits, half_wave);
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, design_uniform_gaussian(bits, half_wave)).first;
    return it->second;
}

// Population standard deviation over the whole tensor.
template <class T>
T tensor_std(const Tensor<T>& x) {
    const i64 n = x.numel();
    T mean = T(0);
    for (T v : x.values()) mean += v;
    mean /= T(n);
    T var = T(0);
    for (T v : x.values()) {
        const T d = v - mean;
        var += d * d;
    }
    return std::sqrt(var / T(n));
}

// Half/full-wave Gaussian quantization with a clipped straight-through
// backward: the gradient passes where x sits inside the representable range
// ([0, sigma*q_max] half-wave, [-sigma*q_max, sigma*q_max] full-wave) and is
// zero outside. sigma is recomputed from the tensor on every call.
template <class T>
Tensor<T> hwgq_quantize(Graph<T>* g, const Tensor<T>& x, const GaussianQuantDesign& qd,
                        QuantMode mode = QuantMode::Active) {
    if (!x.defined() || x.numel() == 0) throw ShapeError("hwgq_quantize: empty tensor");
    const i64 n = x.numel();
    Tensor<T> y(x.shape());
    const T* xd = x.values().data();
    T* yd = y.values().data();

    if (mode == QuantMode::Bypass) {
        if (qd.half_wave) {
            for (i64 i = 0; i < n; ++i) yd[i] = xd[i] > T(0) ? xd[i] : T(0);
        } else {
            for (i64 i = 0; i < n; ++i) yd[i] = xd[i];
        }
        if (detail::track(g, {&x})) {
            y.set_requires_grad(true);
            Tensor<T> xc = x, yc = y;
            const bool hw = qd.half_wave;
            g->record([xc, yc, hw]() mutable {
                const T* gy = yc.grads().data();
                const T* xd = xc.values().data();
                T* gx = xc.grads().data();
                for (i64 i = 0; i < xc.numel(); ++i)
                    if (!hw || xd[i] > T(0)) gx[i] += gy[i];
            });
        }
        return y;
    }

    const T sigma = tensor_std(x);
    if (sigma == T(0)) {
        // Degenerate input: all levels collapse, forward and backward are zero.
        if (detail::track(g, {&x})) y.set_requires_grad(true);
        return y;
    }

    const double step = qd.step;
    if (qd.half_wave) {
        const i64 npos = static_cast<i64>(qd.levels.size()) - 1;
        const T sd = sigma * T(step);
        for (i64 i = 0; i < n; ++i) {
            if (xd[i] <= T(0)) {
                yd[i] = T(0);
                continue;
            }
            // nearest positive level; exact midpoints round to the lower one
            i64 idx = static_cast<i64>(std::ceil(static_cast<double>(xd[i] / sd) - 0.5));
            idx = std::min(std::max<i64>(idx, 1), npos);
            yd[i] = sigma * T(qd.levels[static_cast<std::size_t>(idx)]);
        }
    } else {
        const i64 K = static_cast<i64>(qd.levels.size()) / 2;
        const T sd = sigma * T(step);
        for (i64 i = 0; i < n; ++i) {
            i64 k = static_cast<i64>(std::ceil(static_cast<double>(xd[i] / sd))) - 1;
            k = std::min(std::max(k, -K), K - 1);
            yd[i] = sigma * T(qd.levels[static_cast<std::size_t>(k + K)]);
        }
    }
    check_finite(y, "hwgq_quantize");

    if (detail::track(g, {&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        const T hi = sigma * T(qd.level_max());
        const T lo = qd.half_wave ? T(0) : -hi;
        g->record([xc, yc, lo, hi]() mutable {
            const T* gy = yc.grads().data();
            const T* xd = xc.values().data();
            T* gx = xc.grads().data();
            for (i64 i = 0; i < xc.numel(); ++i)
                if (xd[i] >= lo && xd[i] <= hi) gx[i] += gy[i];
        });
    }
    return y;
}

inline void lsq_bounds(int bits, bool signed_range, i64& qn, i64& qp) {
    if (bits < 1) throw ValueError("lsq: bits must be >= 1");
    if (signed_range) {
        qn = -(i64(1) << (bits - 1));
        qp = (i64(1) << (bits - 1)) - 1;
    } else {
        qn = 0;
        qp = (i64(1) << bits) - 1;
    }
}

// Learned-step-size quantization: y = round(clip(x/s, Qn, Qp)) * s.
// Gradients: clipped straight-through for x; for s the learned-step rule
// (round(v) - v inside the range, Qn/Qp at the rails) scaled by
// 1/sqrt(numel * Qp). In bypass mode the rounding is dropped and both
// gradients are the exact derivatives of the remaining clip surrogate.
template <class T>
Tensor<T> lsq_quantize(Graph<T>* g, const Tensor<T>& x, const Tensor<T>& s, int bits, bool signed_range,
                       QuantMode mode = QuantMode::Active) {
    if (s.numel() != 1) throw ShapeError("lsq_quantize: step size must be a scalar");
    const T sv = s.values()[0];
    if (!(sv > T(0))) throw ValueError("lsq_quantize: step size must be positive");
    i64 qn, qp;
    lsq_bounds(bits, signed_range, qn, qp);
    const i64 n = x.numel();
    Tensor<T> y(x.shape());
    const T* xd = x.values().data();
    T* yd = y.values().data();
    const bool active = (mode == QuantMode::Active);
    for (i64 i = 0; i < n; ++i) {
        T v = xd[i] / sv;
        if (v < T(qn)) v = T(qn);
        else if (v > T(qp)) v = T(qp);
        yd[i] = (active ? T(std::round(static_cast<double>(v))) : v) * sv;
    }
    check_finite(y, "lsq_quantize");

    if (detail::track(g, {&x, &s})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, sc = s, yc = y;
        const T gscale = active ? T(1.0 / std::sqrt(static_cast<double>(n) * static_cast<double>(std::max<i64>(qp, 1))))
                                : T(1);
        g->record([xc, sc, yc, qn, qp, sv, gscale, active]() mutable {
            const T* gy = yc.grads().data();
            const T* xd = xc.values().data();
            T* gx = xc.requires_grad() ? xc.grads().data() : nullptr;
            const bool need_s = sc.requires_grad();
            T sacc = T(0);
            for (i64 i = 0; i < xc.numel(); ++i) {
                const T v = xd[i] / sv;
                if (v < T(qn)) {
                    if (need_s) sacc += gy[i] * T(qn);
                } else if (v > T(qp)) {
                    if (need_s) sacc += gy[i] * T(qp);
                } else {
                    if (gx) gx[i] += gy[i];
                    if (need_s && active) sacc += gy[i] * (T(std::round(static_cast<double>(v))) - v);
                }
            }
            if (need_s) sc.grads()[0] += gscale * sacc;
        });
    }
    return y;
}

// Scheme + bit-width + wave shape of one quantization site. bits == 0 means
// the site stays full precision.
enum class QuantScheme { Hwgq, Lsq };

struct QuantizerSpec {
    QuantScheme scheme = QuantScheme::Hwgq;
    int bits = 0;
    bool half_wave = true;

    bool full_precision() const { return bits == 0; }

    static QuantizerSpec hwgq(int bits, bool half_wave) { return {QuantScheme::Hwgq, bits, half_wave}; }
    static QuantizerSpec lsq(int bits, bool half_wave) { return {QuantScheme::Lsq, bits, half_wave}; }
};

// Mutable per-site state for LSQ: the learnable step and its data-driven
// initialization flag (first training batch sets s = 2 * mean|x| / sqrt(Qp)).
template <class T>
struct LsqState {
    Tensor<T> step;
    bool initialized = false;

    static LsqState make() {
        LsqState st;
        st.step = Tensor<T>::scalar(T(1), true);
        return st;
    }
};

template <class T>
void lsq_maybe_init(LsqState<T>& st, const Tensor<T>& x, int bits, bool signed_range) {
    if (st.initialized) return;
    i64 qn, qp;
    lsq_bounds(bits, signed_range, qn, qp);
    T mabs = T(0);
    for (T v : x.values()) mabs += std::abs(v);
    mabs /= T(x.numel());
    T init = T(2) * mabs / T(std::sqrt(static_cast<double>(std::max<i64>(qp, 1))));
    if (!(init > T(0))) init = T(1);
    st.step.values()[0] = init;
    st.initialized = true;
}

// Applies one site's quantizer. Full-precision sites pass through untouched
// (activations still get their nonlinearity from relu at the call site).
template <class T>
Tensor<T> apply_quantizer(Graph<T>* g, const Tensor<T>& x, const QuantizerSpec& spec, LsqState<T>* lsq,
                          QuantMode mode, bool allow_lsq_init) {
    if (spec.full_precision()) return x;
    if (spec.scheme == QuantScheme::Hwgq) {
        return hwgq_quantize(g, x, gaussian_levels(spec.bits, spec.half_wave), mode);
    }
    if (!lsq) throw ValueError("apply_quantizer: lsq site without state");
    const bool signed_range = !spec.half_wave;
    if (allow_lsq_init) lsq_maybe_init(*lsq, x, spec.bits, signed_range);
    return lsq_quantize(g, x, lsq->step, spec.bits, signed_range, mode);
}

}  // namespace cmtkd
