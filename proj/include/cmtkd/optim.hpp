#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cmtkd/network.hpp"
#include "cmtkd/tensor.hpp"

namespace cmtkd {

// Weight decay keyed off the owning network's bit-width: 25e-6 at 1-2 bits,
// 1e-4 otherwise (full precision included).
inline double weight_decay_for_bits(int bits) {
    if (bits >= 1 && bits <= 2) return 25e-6;
    return 1e-4;
}

template <class T>
struct ParamGroup {
    std::string name;
    std::vector<Tensor<T>> params;
    double lr_scale = 1.0;
    double weight_decay = 0.0;
    bool clamp_positive = false;  // learned quantizer steps must stay > 0
    std::vector<std::vector<T>> velocity;
};

// SGD with momentum: v = mu*v + (g + wd*w); w -= lr*lr_scale*v.
template <class T>
class SgdMomentum {
public:
    explicit SgdMomentum(double momentum = 0.9) : momentum_(momentum) {
        if (momentum < 0 || momentum >= 1) throw ValueError("sgd: momentum must be in [0,1)");
    }

    ParamGroup<T>& add_group(std::string name, double lr_scale, double weight_decay,
                             bool clamp_positive = false) {
        groups_.push_back(ParamGroup<T>{std::move(name), {}, lr_scale, weight_decay, clamp_positive, {}});
        return groups_.back();
    }

    void add_param(ParamGroup<T>& group, const Tensor<T>& p) {
        group.params.push_back(p);
        group.velocity.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
    }

    std::vector<ParamGroup<T>>& groups() { return groups_; }

    void zero_grad() {
        for (auto& grp : groups_)
            for (auto& p : grp.params) p.zero_grad();
    }

    void step(double lr) {
        for (auto& grp : groups_) {
            const T eff_lr = T(lr * grp.lr_scale);
            const T wd = T(grp.weight_decay);
            for (std::size_t i = 0; i < grp.params.size(); ++i) {
                auto& p = grp.params[i];
                auto& v = grp.velocity[i];
                T* w = p.values().data();
                const T* gr = p.grads().data();
                for (i64 e = 0; e < p.numel(); ++e) {
                    const T gval = gr[e] + wd * w[e];
                    v[static_cast<std::size_t>(e)] = T(momentum_) * v[static_cast<std::size_t>(e)] + gval;
                    w[e] -= eff_lr * v[static_cast<std::size_t>(e)];
                    if (grp.clamp_positive && w[e] < T(1e-8)) w[e] = T(1e-8);
                }
            }
        }
    }

    // Global l2 gradient norm per group, for step reports.
    std::vector<double> grad_norms() const {
        std::vector<double> out;
        for (const auto& grp : groups_) {
            double acc = 0;
            for (Tensor<T> p : grp.params) {
                if (!p.has_grad_storage()) continue;
                for (T gv : p.grads()) acc += static_cast<double>(gv) * static_cast<double>(gv);
            }
            out.push_back(std::sqrt(acc));
        }
        return out;
    }

private:
    double momentum_;
    std::vector<ParamGroup<T>> groups_;
};

enum class LrSchedule { Step, Cosine };

struct OptimConfig {
    double base_lr = 0.02;
    double momentum = 0.9;
    int batch_size = 32;
    int epochs = 8;
    LrSchedule schedule = LrSchedule::Cosine;
    std::vector<int> milestones;  // step schedule: lr /= 10 at each passed milestone
};

inline double lr_at_epoch(int epoch, const OptimConfig& cfg) {
    if (epoch < 0 || epoch >= cfg.epochs) throw ValueError("lr_at_epoch: epoch out of range");
    if (cfg.schedule == LrSchedule::Step) {
        int passed = 0;
        for (int m : cfg.milestones)
            if (epoch >= m) ++passed;
        return cfg.base_lr / std::pow(10.0, passed);
    }
    return cfg.base_lr * 0.5 * (1.0 + std::cos(3.141592653589793 * epoch / cfg.epochs));
}

}  // namespace cmtkd
