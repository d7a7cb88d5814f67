#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmtkd {

using i64 = std::int64_t;

struct ShapeError : std::invalid_argument { using std::invalid_argument::invalid_argument; };
struct ValueError : std::invalid_argument { using std::invalid_argument::invalid_argument; };
struct NumericError : std::runtime_error { using std::runtime_error::runtime_error; };

inline i64 shape_numel(const std::vector<i64>& shape) {
    i64 n = 1;
    for (i64 d : shape) {
        if (d <= 0) throw ShapeError("tensor extents must be positive");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const std::vector<i64>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {
template <class T>
struct Storage {
    std::vector<i64> shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first touched, then same length as data
    bool requires_grad = false;
};
}  // namespace detail

// Dense row-major tensor with an optional gradient slot. Copying a Tensor
// aliases the same storage (cheap handle); clone() deep-copies the values.
template <class T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<i64> shape, bool requires_grad = false) {
        auto s = std::make_shared<detail::Storage<T>>();
        const i64 n = shape_numel(shape);
        s->shape = std::move(shape);
        s->data.assign(static_cast<std::size_t>(n), T(0));
        s->requires_grad = requires_grad;
        s_ = std::move(s);
    }

    static Tensor zeros(std::vector<i64> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<i64> shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.values().begin(), t.values().end(), v);
        return t;
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        Tensor t(std::vector<i64>{1}, requires_grad);
        t.values()[0] = v;
        return t;
    }

    static Tensor of(std::vector<i64> shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<i64>(data.size()))
            throw ShapeError("data length does not match shape " + shape_str(shape));
        Tensor t;
        auto s = std::make_shared<detail::Storage<T>>();
        s->shape = std::move(shape);
        s->data = std::move(data);
        s->requires_grad = requires_grad;
        t.s_ = std::move(s);
        return t;
    }

    bool defined() const { return s_ != nullptr; }

    const std::vector<i64>& shape() const { return s_->shape; }
    i64 dim(std::size_t i) const { return s_->shape.at(i); }
    std::size_t rank() const { return s_->shape.size(); }
    i64 numel() const { return static_cast<i64>(s_->data.size()); }

    std::vector<T>& values() { return s_->data; }
    const std::vector<T>& values() const { return s_->data; }

    // Lazily allocates a zero gradient buffer on first access.
    std::vector<T>& grads() {
        if (s_->grad.size() != s_->data.size()) s_->grad.assign(s_->data.size(), T(0));
        return s_->grad;
    }
    bool has_grad_storage() const { return s_->grad.size() == s_->data.size(); }

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool rg) { s_->requires_grad = rg; }

    void zero_grad() {
        if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
    }

    T item() const {
        if (numel() != 1) throw ShapeError("item() requires a scalar tensor, got " + shape_str(shape()));
        return s_->data[0];
    }

    // Deep copy of the values; no gradient, no requires_grad.
    Tensor clone() const {
        Tensor t;
        auto s = std::make_shared<detail::Storage<T>>();
        s->shape = s_->shape;
        s->data = s_->data;
        t.s_ = std::move(s);
        return t;
    }

    bool same_storage(const Tensor& o) const { return s_ == o.s_; }

private:
    std::shared_ptr<detail::Storage<T>> s_;
};

// Forward ops call this on their outputs: a non-finite value is an error
// state, never silently propagated.
template <class T>
inline void check_finite(const Tensor<T>& t, const char* op) {
    for (T v : t.values()) {
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError(std::string(op) + ": non-finite value in output");
    }
}

}  // namespace cmtkd
