#pragma once

#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "cmtkd/fusion.hpp"
#include "cmtkd/ops.hpp"
#include "cmtkd/quantize.hpp"
#include "cmtkd/rng.hpp"

namespace cmtkd {

// Blocks of (conv-BN-activation) x convs_per_block, pooled between blocks,
// followed by a global-average-pool + linear classifier head. Fusion points
// are 1-based conv ordinals; the default picks the last conv of each block.
struct ArchSpec {
    int in_channels = 1;
    int in_h = 16;
    int in_w = 16;
    std::vector<int> block_channels = {4, 8, 16};
    int convs_per_block = 2;
    int kernel = 3;
    std::string pool = "max";  // max | avg
    int num_classes = 10;
    std::vector<int> fusion_indices;  // filled by validate() when empty

    int conv_count() const { return static_cast<int>(block_channels.size()) * convs_per_block; }

    struct ConvDesc {
        int in_ch, out_ch;
        bool pool_after;  // 2x2 stride-2 pool between blocks
    };

    std::vector<ConvDesc> convs() const {
        std::vector<ConvDesc> out;
        int prev = in_channels;
        for (std::size_t b = 0; b < block_channels.size(); ++b)
            for (int j = 0; j < convs_per_block; ++j) {
                ConvDesc d;
                d.in_ch = prev;
                d.out_ch = block_channels[b];
                d.pool_after = (j == convs_per_block - 1) && (b + 1 < block_channels.size());
                out.push_back(d);
                prev = d.out_ch;
            }
        return out;
    }

    void validate() {
        if (block_channels.empty() || convs_per_block < 1) throw ValueError("arch: needs at least one conv");
        if (kernel < 1 || kernel % 2 == 0) throw ValueError("arch: kernel must be odd");
        if (num_classes < 2) throw ValueError("arch: needs at least two classes");
        if (pool != "max" && pool != "avg") throw ValueError("arch: pool must be max or avg");
        int h = in_h, w = in_w;
        for (std::size_t b = 0; b + 1 < block_channels.size(); ++b) {
            if (h % 2 != 0 || w % 2 != 0) throw ValueError("arch: spatial extent not divisible at pool");
            h /= 2;
            w /= 2;
        }
        if (fusion_indices.empty()) {
            for (std::size_t b = 0; b < block_channels.size(); ++b)
                fusion_indices.push_back(static_cast<int>(b + 1) * convs_per_block);
        }
        int prev = 0;
        for (int k : fusion_indices) {
            if (k <= prev) throw ValueError("arch: fusion indices must be strictly increasing");
            if (k < 1 || k > conv_count()) throw ValueError("arch: fusion index out of range");
            prev = k;
        }
    }

    int channels_at_conv(int conv_idx) const { return convs()[static_cast<std::size_t>(conv_idx - 1)].out_ch; }
};

enum class ParamKind { Weight, BnParam, Rho, LsqStep, Adapter };

template <class T>
struct ParamRef {
    std::string name;
    Tensor<T> tensor;
    ParamKind kind;
    int bits;  // bit-width of the owning network, 0 for full precision
};

template <class T>
struct BufferRef {
    std::string name;
    Tensor<T> tensor;
};

// What a forward pass should expose besides its output.
template <class T>
struct Capture {
    std::vector<Tensor<T>>* fusion_features = nullptr;  // activation at each fusion index
    std::vector<Tensor<T>>* quantized_activations = nullptr;  // every quantized activation tensor
};

// One convolutional network, optionally quantized. Layer structure is
// conv -> BN -> activation, where the activation is either relu (full
// precision sites) or the half-wave quantizer, which subsumes the
// rectification. First conv and the classifier head stay full precision.
template <class T>
class ConvNet {
public:
    ConvNet() = default;

    ConvNet(const ArchSpec& arch, QuantScheme scheme, int bits, bool with_head, std::string name)
        : arch_(arch), scheme_(scheme), bits_(bits), with_head_(with_head), name_(std::move(name)) {
        const auto descs = arch_.convs();
        layers_.resize(descs.size());
        for (std::size_t i = 0; i < descs.size(); ++i) {
            Layer& L = layers_[i];
            const auto& d = descs[i];
            L.w = Tensor<T>({d.out_ch, d.in_ch, arch_.kernel, arch_.kernel}, true);
            L.bn_gamma = Tensor<T>::full({d.out_ch}, T(1));
            L.bn_gamma.set_requires_grad(true);
            L.bn_beta = Tensor<T>({d.out_ch}, true);
            L.bn_rmean = Tensor<T>({d.out_ch});
            L.bn_rvar = Tensor<T>::full({d.out_ch}, T(1));
            const bool quantized_net = bits > 0;
            const bool first = (i == 0);
            L.quant_w = quantized_net && !first;
            L.quant_a = quantized_net && !first;
            if (scheme == QuantScheme::Lsq) {
                if (L.quant_w) L.lsq_w = LsqState<T>::make();
                if (L.quant_a) L.lsq_a = LsqState<T>::make();
            }
        }
        if (with_head_) {
            const int cf = descs.back().out_ch;
            head_w_ = Tensor<T>({arch_.num_classes, cf}, true);
            head_b_ = Tensor<T>({arch_.num_classes}, true);
        }
    }

    const ArchSpec& arch() const { return arch_; }
    int bits() const { return bits_; }
    QuantScheme scheme() const { return scheme_; }
    const std::string& name() const { return name_; }
    bool with_head() const { return with_head_; }

    void init(Rng& rng) {
        for (auto& L : layers_) he_uniform(rng, L.w, L.w.dim(1) * L.w.dim(2) * L.w.dim(3));
        if (with_head_) {
            he_uniform(rng, head_w_, head_w_.dim(1));
            std::fill(head_b_.values().begin(), head_b_.values().end(), T(0));
        }
    }

    // Runs convs in (from_conv, to_conv], both 1-based; from_conv == 0 starts
    // at the raw input. Applies from_conv's trailing pool first, so fused
    // features re-enter exactly where the producing activation left off.
    // Returns the activation output of conv to_conv (before its own pool).
    Tensor<T> forward_segment(Graph<T>* g, Tensor<T> x, int from_conv, int to_conv, bool train,
                              QuantMode qmode, Capture<T>* cap = nullptr) {
        const auto descs = arch_.convs();
        if (from_conv >= 1 && descs[static_cast<std::size_t>(from_conv - 1)].pool_after) x = pool(g, x);
        for (int ci = from_conv + 1; ci <= to_conv; ++ci) {
            Layer& L = layers_[static_cast<std::size_t>(ci - 1)];
            Tensor<T> w_eff = L.w;
            if (L.quant_w) {
                QuantizerSpec spec{scheme_, bits_, /*half_wave=*/false};
                w_eff = apply_quantizer(g, L.w, spec, L.lsq_w ? &*L.lsq_w : nullptr, qmode, train);
            }
            x = ops::conv2d(g, x, w_eff, 1, arch_.kernel / 2);
            x = ops::batch_norm2d(g, x, L.bn_gamma, L.bn_beta, L.bn_rmean, L.bn_rvar, train);
            if (L.quant_a) {
                QuantizerSpec spec{scheme_, bits_, /*half_wave=*/true};
                x = apply_quantizer(g, x, spec, L.lsq_a ? &*L.lsq_a : nullptr, qmode, train);
                if (cap && cap->quantized_activations) cap->quantized_activations->push_back(x);
            } else {
                x = ops::relu(g, x);
            }
            if (cap && cap->fusion_features) {
                for (int k : arch_.fusion_indices)
                    if (k == ci) cap->fusion_features->push_back(x);
            }
            if (ci < to_conv && descs[static_cast<std::size_t>(ci - 1)].pool_after) x = pool(g, x);
        }
        return x;
    }

    // Classifier head on the activation of the final conv: trailing pool if
    // the arch flags one, then global average pool + linear.
    Tensor<T> head_forward(Graph<T>* g, Tensor<T> x, bool) {
        if (!with_head_) throw ValueError("head_forward: network built without a head");
        const auto descs = arch_.convs();
        if (descs.back().pool_after) x = pool(g, x);
        Tensor<T> feat = ops::global_avg_pool(g, x);
        return ops::linear(g, feat, head_w_, head_b_);
    }

    // Full forward: input -> logits, capturing features on the way.
    Tensor<T> forward(Graph<T>* g, const Tensor<T>& x, bool train, QuantMode qmode = QuantMode::Active,
                      Capture<T>* cap = nullptr) {
        Tensor<T> feat = forward_segment(g, x, 0, arch_.conv_count(), train, qmode, cap);
        return head_forward(g, feat, train);
    }

    void collect_params(std::vector<ParamRef<T>>& out) {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const std::string p = name_ + "/conv" + std::to_string(i + 1);
            out.push_back({p + "/w", layers_[i].w, ParamKind::Weight, bits_});
            out.push_back({p + "/bn_gamma", layers_[i].bn_gamma, ParamKind::BnParam, bits_});
            out.push_back({p + "/bn_beta", layers_[i].bn_beta, ParamKind::BnParam, bits_});
            if (layers_[i].lsq_w) out.push_back({p + "/lsq_sw", layers_[i].lsq_w->step, ParamKind::LsqStep, bits_});
            if (layers_[i].lsq_a) out.push_back({p + "/lsq_sa", layers_[i].lsq_a->step, ParamKind::LsqStep, bits_});
        }
        if (with_head_) {
            out.push_back({name_ + "/head/w", head_w_, ParamKind::Weight, bits_});
            out.push_back({name_ + "/head/b", head_b_, ParamKind::Weight, bits_});
        }
    }

    void collect_buffers(std::vector<BufferRef<T>>& out) {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const std::string p = name_ + "/conv" + std::to_string(i + 1);
            out.push_back({p + "/bn_rmean", layers_[i].bn_rmean});
            out.push_back({p + "/bn_rvar", layers_[i].bn_rvar});
        }
    }

    void mark_lsq_initialized() {
        for (auto& L : layers_) {
            if (L.lsq_w) L.lsq_w->initialized = true;
            if (L.lsq_a) L.lsq_a->initialized = true;
        }
    }

    // Deep copy of all parameter and buffer values from another net of the
    // same architecture.
    void copy_values_from(ConvNet& src) {
        std::vector<ParamRef<T>> a, b;
        collect_params(a);
        src.collect_params(b);
        if (a.size() != b.size()) throw ShapeError("copy_values_from: parameter sets differ");
        for (std::size_t i = 0; i < a.size(); ++i) a[i].tensor.values() = b[i].tensor.values();
        std::vector<BufferRef<T>> ba, bb;
        collect_buffers(ba);
        src.collect_buffers(bb);
        for (std::size_t i = 0; i < ba.size(); ++i) ba[i].tensor.values() = bb[i].tensor.values();
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            if (layers_[i].lsq_w && src.layers_[i].lsq_w)
                layers_[i].lsq_w->initialized = src.layers_[i].lsq_w->initialized;
            if (layers_[i].lsq_a && src.layers_[i].lsq_a)
                layers_[i].lsq_a->initialized = src.layers_[i].lsq_a->initialized;
        }
    }

private:
    struct Layer {
        Tensor<T> w;
        Tensor<T> bn_gamma, bn_beta;
        Tensor<T> bn_rmean, bn_rvar;
        bool quant_w = false, quant_a = false;
        std::optional<LsqState<T>> lsq_w, lsq_a;
    };

    Tensor<T> pool(Graph<T>* g, const Tensor<T>& x) {
        return arch_.pool == "max" ? ops::max_pool2d(g, x, 2, 2) : ops::avg_pool2d(g, x, 2, 2);
    }

    void he_uniform(Rng& rng, Tensor<T>& w, i64 fan_in) {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        for (T& v : w.values()) v = T(rng.uniform(-bound, bound));
    }

    ArchSpec arch_;
    QuantScheme scheme_ = QuantScheme::Hwgq;
    int bits_ = 0;
    bool with_head_ = false;
    std::string name_;
    std::vector<Layer> layers_;
    Tensor<T> head_w_, head_b_;
};

template <class T>
struct CollabOutput {
    std::vector<Tensor<T>> fused;  // shared knowledge at each fusion index
    Tensor<T> logits;              // combined-teacher logits z^T
};

// Teachers of identical architecture at (typically) different bit-widths,
// one shared full-precision classifier head, and the learnable importance
// factors. During the collaborative forward every teacher's next segment
// consumes the fused features, not its own activation.
template <class T>
class TeacherEnsemble {
public:
    TeacherEnsemble() = default;

    TeacherEnsemble(const ArchSpec& arch, QuantScheme scheme, const std::vector<int>& teacher_bits)
        : arch_(arch) {
        if (teacher_bits.empty()) throw ValueError("ensemble: needs at least one teacher");
        for (std::size_t i = 0; i < teacher_bits.size(); ++i)
            teachers_.emplace_back(arch, scheme, teacher_bits[i], /*with_head=*/false,
                                   "teacher" + std::to_string(i));
        const int cf = arch.channels_at_conv(arch.fusion_indices.back());
        head_w_ = Tensor<T>({arch.num_classes, cf}, true);
        head_b_ = Tensor<T>({arch.num_classes}, true);
        importance_ = ImportanceFactors<T>::make(arch.fusion_indices, static_cast<int>(teacher_bits.size()));
    }

    void init(std::uint64_t master_seed) {
        for (std::size_t i = 0; i < teachers_.size(); ++i) {
            Rng r = Rng::substream(master_seed, "init:" + teachers_[i].name());
            teachers_[i].init(r);
        }
        Rng rh = Rng::substream(master_seed, "init:shared_head");
        const double bound = std::sqrt(6.0 / static_cast<double>(head_w_.dim(1)));
        for (T& v : head_w_.values()) v = T(rh.uniform(-bound, bound));
        std::fill(head_b_.values().begin(), head_b_.values().end(), T(0));
    }

    std::size_t size() const { return teachers_.size(); }
    ConvNet<T>& teacher(std::size_t i) { return teachers_[i]; }
    ImportanceFactors<T>& importance() { return importance_; }
    const ImportanceFactors<T>& importance() const { return importance_; }
    Tensor<T>& head_w() { return head_w_; }
    Tensor<T>& head_b() { return head_b_; }
    const ArchSpec& arch() const { return arch_; }

    CollabOutput<T> collaborative_forward(Graph<T>* g, const Tensor<T>& batch, bool train,
                                          QuantMode qmode = QuantMode::Active,
                                          Capture<T>* cap_all = nullptr) {
        if (teachers_.empty()) throw ValueError("collaborative_forward: empty ensemble");
        CollabOutput<T> out;
        Tensor<T> cur = batch;
        int prev_k = 0;
        for (std::size_t pos = 0; pos < arch_.fusion_indices.size(); ++pos) {
            const int k = arch_.fusion_indices[pos];
            std::vector<Tensor<T>> acts;
            acts.reserve(teachers_.size());
            for (auto& t : teachers_) {
                Capture<T> c;
                if (cap_all) c.quantized_activations = cap_all->quantized_activations;
                acts.push_back(t.forward_segment(g, cur, prev_k, k, train, qmode, &c));
            }
            for (std::size_t i = 1; i < acts.size(); ++i)
                if (acts[i].shape() != acts[0].shape())
                    throw ShapeError("collaborative_forward: teacher activation shape drift");
            Tensor<T> fk = importance_.fuse_at(g, pos, acts);
            out.fused.push_back(fk);
            cur = fk;
            prev_k = k;
        }
        Tensor<T> feat = ops::global_avg_pool(g, cur);
        out.logits = ops::linear(g, feat, head_w_, head_b_);
        return out;
    }

    void collect_params(std::vector<ParamRef<T>>& out) {
        for (auto& t : teachers_) t.collect_params(out);
        out.push_back({"ensemble/head/w", head_w_, ParamKind::Weight, 0});
        out.push_back({"ensemble/head/b", head_b_, ParamKind::Weight, 0});
        for (std::size_t k = 0; k < importance_.rho.size(); ++k)
            out.push_back({"fusion/rho" + std::to_string(arch_.fusion_indices[k]), importance_.rho[k],
                           ParamKind::Rho, 0});
    }

    void collect_buffers(std::vector<BufferRef<T>>& out) {
        for (auto& t : teachers_) t.collect_buffers(out);
    }

private:
    ArchSpec arch_;
    std::vector<ConvNet<T>> teachers_;
    Tensor<T> head_w_, head_b_;
    ImportanceFactors<T> importance_;
};

// Plain forward of the student (or any standalone net), features captured at
// the fusion indices. The student never consumes fused features.
template <class T>
struct StudentOutput {
    std::vector<Tensor<T>> features;
    Tensor<T> logits;
};

template <class T>
StudentOutput<T> student_forward(Graph<T>* g, ConvNet<T>& net, const Tensor<T>& batch, bool train,
                                 QuantMode qmode = QuantMode::Active, Capture<T>* cap_all = nullptr) {
    StudentOutput<T> out;
    Capture<T> cap;
    cap.fusion_features = &out.features;
    if (cap_all) cap.quantized_activations = cap_all->quantized_activations;
    out.logits = net.forward(g, batch, train, qmode, &cap);
    return out;
}

}  // namespace cmtkd
