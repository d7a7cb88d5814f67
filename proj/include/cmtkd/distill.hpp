#pragma once

#include <vector>

#include "cmtkd/ops.hpp"

namespace cmtkd {

enum class FeatKind { Attention, FitNet };

// Attention transfer: compare l2-normalized channel-energy maps.
template <class T>
Tensor<T> attention_loss(Graph<T>* g, const Tensor<T>& f_teacher, const Tensor<T>& f_student) {
    Tensor<T> qt = ops::attention_map(g, f_teacher);
    Tensor<T> qs = ops::attention_map(g, f_student);
    return ops::normalized_l2_distance(g, qt, qs);
}

// FitNet hint: per-sample l2 between the teacher map and the student map
// passed through a trained 1x1 adapter convolution.
template <class T>
Tensor<T> fitnet_loss(Graph<T>* g, const Tensor<T>& f_teacher, const Tensor<T>& f_student,
                      const Tensor<T>& adapter_w) {
    Tensor<T> r = ops::conv2d(g, f_student, adapter_w, 1, 0);
    if (r.dim(2) != f_teacher.dim(2) || r.dim(3) != f_teacher.dim(3))
        throw ShapeError("fitnet_loss: spatial mismatch after adapter");
    return ops::l2_distance_loss(g, f_teacher, r);
}

// One full-precision 1x1 adapter per fusion layer (FitNet only).
template <class T>
struct FeatureAdapters {
    std::vector<Tensor<T>> w;  // [C_teacher, C_student, 1, 1]
};

// Sum over the fusion layers of the selected distance. Gradients flow to
// both the fused teacher maps and the student maps.
template <class T>
Tensor<T> feature_distill_loss(Graph<T>* g, const std::vector<Tensor<T>>& f_teacher,
                               const std::vector<Tensor<T>>& f_student, FeatKind kind,
                               const FeatureAdapters<T>* adapters = nullptr) {
    if (f_teacher.size() != f_student.size() || f_teacher.empty())
        throw ShapeError("feature_distill_loss: fusion index sets differ");
    Tensor<T> total;
    for (std::size_t k = 0; k < f_teacher.size(); ++k) {
        Tensor<T> term;
        if (kind == FeatKind::Attention) {
            term = attention_loss(g, f_teacher[k], f_student[k]);
        } else {
            if (!adapters || adapters->w.size() != f_teacher.size())
                throw ValueError("feature_distill_loss: fitnet needs one adapter per fusion layer");
            term = fitnet_loss(g, f_teacher[k], f_student[k], adapters->w[k]);
        }
        total = total.defined() ? ops::add(g, total, term) : term;
    }
    return total;
}

}  // namespace cmtkd
