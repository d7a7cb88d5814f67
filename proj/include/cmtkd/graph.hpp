#pragma once

#include <functional>
#include <initializer_list>
#include <vector>

#include "cmtkd/tensor.hpp"

namespace cmtkd {

// Reverse-mode tape. Ops append a backward closure as they execute;
// backward() replays the closures in exact reverse execution order.
// A graph records one step and is then discarded (no reuse).
template <class T>
class Graph {
public:
    void record(std::function<void()> fn) { tape_.push_back(std::move(fn)); }

    void register_parameter(const Tensor<T>& p) { params_.push_back(p); }
    const std::vector<Tensor<T>>& parameters() const { return params_; }

    std::size_t recorded_ops() const { return tape_.size(); }

    void backward(Tensor<T> loss) {
        if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar");
        if (used_) throw ValueError("backward: graph already consumed, re-record before calling again");
        used_ = true;
        loss.grads()[0] += T(1);
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> tape_;
    std::vector<Tensor<T>> params_;
    bool used_ = false;
};

namespace detail {
template <class T>
inline bool track(Graph<T>* g, std::initializer_list<const Tensor<T>*> inputs) {
    if (!g) return false;
    for (const Tensor<T>* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}
}  // namespace detail

}  // namespace cmtkd
