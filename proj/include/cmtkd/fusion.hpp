#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "cmtkd/ops.hpp"

namespace cmtkd {

// Fused shared knowledge: softmax-normalized importance weights over the
// teachers, applied to their (already quantized) activations. F = sum_i
// softmax(rho)_i * A_i, differentiable in both rho and every A_i.
template <class T>
Tensor<T> fuse(Graph<T>* g, const Tensor<T>& rho, const std::vector<Tensor<T>>& activations) {
    if (activations.empty()) throw ShapeError("fuse: empty activation list");
    if (rho.numel() != static_cast<i64>(activations.size()))
        throw ShapeError("fuse: logit count does not match teacher count");
    Tensor<T> pi = ops::softmax_vec(g, rho);
    return ops::weighted_sum(g, activations, pi);
}

// Learnable fusion weights: raw logits per (fusion layer, teacher). The
// constraint (weights sum to 1, each in [0,1]) holds by construction since
// only the logits are stored and softmax is applied on the fly.
template <class T>
struct ImportanceFactors {
    std::vector<int> layer_indices;  // fusion layer index per position
    std::vector<Tensor<T>> rho;      // one [n_teachers] logit vector per fusion layer
    // Exact weight override, used by the one-hot collapse paths and tests.
    std::optional<std::vector<std::vector<T>>> forced;

    static ImportanceFactors make(const std::vector<int>& fusion_indices, int n_teachers) {
        ImportanceFactors f;
        f.layer_indices = fusion_indices;
        for (std::size_t k = 0; k < fusion_indices.size(); ++k)
            f.rho.push_back(Tensor<T>({static_cast<i64>(n_teachers)}, true));
        return f;
    }

    int teachers() const { return rho.empty() ? 0 : static_cast<int>(rho[0].numel()); }

    Tensor<T> fuse_at(Graph<T>* g, std::size_t pos, const std::vector<Tensor<T>>& acts) const {
        if (forced) {
            Tensor<T> w = Tensor<T>::of({static_cast<i64>((*forced)[pos].size())}, (*forced)[pos]);
            return ops::weighted_sum(g, acts, w);
        }
        return fuse(g, rho[pos], acts);
    }

    void force_one_hot(int teacher) {
        std::vector<std::vector<T>> w;
        for (std::size_t k = 0; k < rho.size(); ++k) {
            std::vector<T> row(static_cast<std::size_t>(rho[k].numel()), T(0));
            row[static_cast<std::size_t>(teacher)] = T(1);
            w.push_back(std::move(row));
        }
        forced = std::move(w);
    }

    // Current weights, one row per fusion layer.
    std::vector<std::vector<double>> snapshot() const {
        std::vector<std::vector<double>> out;
        for (const auto& r : rho) {
            const auto& v = r.values();
            double mx = static_cast<double>(v[0]);
            for (T x : v) mx = std::max(mx, static_cast<double>(x));
            double se = 0;
            std::vector<double> row(v.size());
            for (std::size_t i = 0; i < v.size(); ++i) {
                row[i] = std::exp(static_cast<double>(v[i]) - mx);
                se += row[i];
            }
            for (double& x : row) x /= se;
            out.push_back(std::move(row));
        }
        return out;
    }
};

}  // namespace cmtkd
