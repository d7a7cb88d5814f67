#pragma once

#include <utility>
#include <vector>

#include "cmtkd/ops.hpp"

namespace cmtkd {

// Min-logit ensemble: shift each network's logits by its target-class logit,
// then take the elementwise minimum. The result is a detached target (it
// never joins the gradient graph), with z_bar[c] == 0 exactly per sample.
template <class T>
Tensor<T> min_logit_ensemble(const Tensor<T>& z_t, const Tensor<T>& z_s, const std::vector<int>& labels) {
    if (z_t.shape() != z_s.shape() || z_t.rank() != 2) throw ShapeError("min_logit_ensemble: shape mismatch");
    const i64 N = z_t.dim(0), M = z_t.dim(1);
    if (static_cast<i64>(labels.size()) != N) throw ShapeError("min_logit_ensemble: label count mismatch");
    Tensor<T> zbar({N, M});
    const T* td = z_t.values().data();
    const T* sd = z_s.values().data();
    T* bd = zbar.values().data();
    for (i64 n = 0; n < N; ++n) {
        const int c = labels[static_cast<std::size_t>(n)];
        if (c < 0 || c >= M) throw ValueError("min_logit_ensemble: label out of range");
        const T tc = td[n * M + c], sc = sd[n * M + c];
        for (i64 j = 0; j < M; ++j) {
            const T a = td[n * M + j] - tc;
            const T b = sd[n * M + j] - sc;
            bd[n * M + j] = a < b ? a : b;
        }
    }
    check_finite(zbar, "min_logit_ensemble");
    return zbar;
}

// Temperature-scaled softmax, rows summing to one.
template <class T>
Tensor<T> soft_logits(Graph<T>* g, const Tensor<T>& z, double temperature) {
    return ops::softmax_rows(g, z, temperature);
}

// The two mutual-learning losses against the detached ensemble target:
// (teacher_loss, student_loss) = T^2 * KL(p_bar || p^T), T^2 * KL(p_bar || p^S).
template <class T>
std::pair<Tensor<T>, Tensor<T>> mutual_kl_losses(Graph<T>* g, const Tensor<T>& zbar, const Tensor<T>& z_t,
                                                 const Tensor<T>& z_s, double temperature) {
    Tensor<T> p_bar = soft_logits<T>(nullptr, zbar, temperature);
    Tensor<T> kl_t = ops::kl_vs_fixed(g, p_bar, z_t, temperature);
    Tensor<T> kl_s = ops::kl_vs_fixed(g, p_bar, z_s, temperature);
    return {kl_t, kl_s};
}

}  // namespace cmtkd
