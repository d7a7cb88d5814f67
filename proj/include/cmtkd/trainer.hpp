#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmtkd/checkpoint.hpp"
#include "cmtkd/config.hpp"
#include "cmtkd/dataset.hpp"
#include "cmtkd/distill.hpp"
#include "cmtkd/mutual.hpp"
#include "cmtkd/network.hpp"
#include "cmtkd/optim.hpp"

namespace cmtkd {

// ---------------------------------------------------------------------------
// Loss assembly: alpha*(ce_S + ce_T) + beta*(kl_S + kl_T) + gamma*feat.
// Undefined components count as zero. Non-finite components abort the step.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> total_loss(Graph<T>* g, const Tensor<T>& ce_s, const Tensor<T>& ce_t, const Tensor<T>& kl_s,
                     const Tensor<T>& kl_t, const Tensor<T>& feat, const LossWeights& w) {
    auto check = [](const Tensor<T>& t, const char* name) {
        if (t.defined() && !std::isfinite(static_cast<double>(t.item())))
            throw NumericError(std::string("total_loss: non-finite component ") + name);
    };
    check(ce_s, "ce_S");
    check(ce_t, "ce_T");
    check(kl_s, "kl_S");
    check(kl_t, "kl_T");
    check(feat, "feat");

    auto add_or = [&](const Tensor<T>& a, const Tensor<T>& b) {
        if (!a.defined()) return b;
        if (!b.defined()) return a;
        return ops::add(g, a, b);
    };
    Tensor<T> total;
    Tensor<T> ce = add_or(ce_s, ce_t);
    if (ce.defined()) total = ops::scalar_mul(g, ce, T(w.alpha));
    Tensor<T> kl = add_or(kl_s, kl_t);
    if (kl.defined()) total = add_or(total, ops::scalar_mul(g, kl, T(w.beta)));
    if (feat.defined()) total = add_or(total, ops::scalar_mul(g, feat, T(w.gamma)));
    if (!total.defined()) total = Tensor<T>::scalar(T(0));
    return total;
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------
struct EvalMetrics {
    double top1 = 0, top5 = 0;
};

template <class T>
void topk_tally(const Tensor<T>& logits, const std::vector<int>& labels, i64& hit1, i64& hit5) {
    const i64 N = logits.dim(0), M = logits.dim(1);
    const T* zd = logits.values().data();
    for (i64 n = 0; n < N; ++n) {
        const T ref = zd[n * M + labels[static_cast<std::size_t>(n)]];
        int rank = 0;
        for (i64 j = 0; j < M; ++j)
            if (zd[n * M + j] > ref) ++rank;
        if (rank == 0) ++hit1;
        if (rank < 5) ++hit5;
    }
}

// Student (or any standalone head-carrying net) accuracy on a test split.
template <class T>
EvalMetrics evaluate_net(ConvNet<T>& net, const Dataset& ds, const Normalizer& nm,
                         const std::vector<std::size_t>& idx, int batch_size = 256) {
    if (idx.empty()) throw ValueError("evaluate: empty test set");
    if (net.arch().num_classes < 5) {
        static bool noted = false;
        if (!noted) {
            std::fprintf(stderr, "[cmtkd] note: fewer than 5 classes, top-5 accuracy is trivially 100%%\n");
            noted = true;
        }
    }
    i64 hit1 = 0, hit5 = 0;
    for (std::size_t at = 0; at < idx.size(); at += static_cast<std::size_t>(batch_size)) {
        std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(at),
                                       idx.begin() + static_cast<std::ptrdiff_t>(
                                                         std::min(at + batch_size, idx.size())));
        Tensor<T> x = assemble_batch<T>(ds, nm, chunk, false, nullptr);
        std::vector<int> labels = batch_labels(ds, chunk);
        Tensor<T> z = net.forward(nullptr, x, /*train=*/false);
        topk_tally(z, labels, hit1, hit5);
    }
    EvalMetrics m;
    m.top1 = 100.0 * static_cast<double>(hit1) / static_cast<double>(idx.size());
    m.top5 = 100.0 * static_cast<double>(hit5) / static_cast<double>(idx.size());
    return m;
}

// Combined-teacher accuracy: scores the shared head on the fused features.
template <class T>
EvalMetrics evaluate_ensemble(TeacherEnsemble<T>& ens, const Dataset& ds, const Normalizer& nm,
                              const std::vector<std::size_t>& idx, int batch_size = 256) {
    if (idx.empty()) throw ValueError("evaluate: empty test set");
    i64 hit1 = 0, hit5 = 0;
    for (std::size_t at = 0; at < idx.size(); at += static_cast<std::size_t>(batch_size)) {
        std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(at),
                                       idx.begin() + static_cast<std::ptrdiff_t>(
                                                         std::min(at + batch_size, idx.size())));
        Tensor<T> x = assemble_batch<T>(ds, nm, chunk, false, nullptr);
        std::vector<int> labels = batch_labels(ds, chunk);
        CollabOutput<T> out = ens.collaborative_forward(nullptr, x, /*train=*/false);
        topk_tally(out.logits, labels, hit1, hit5);
    }
    EvalMetrics m;
    m.top1 = 100.0 * static_cast<double>(hit1) / static_cast<double>(idx.size());
    m.top5 = 100.0 * static_cast<double>(hit5) / static_cast<double>(idx.size());
    return m;
}

// ---------------------------------------------------------------------------
// Model bundle per preset.
// ---------------------------------------------------------------------------
template <class T>
struct Models {
    ConvNet<T> student;
    std::optional<TeacherEnsemble<T>> ensemble;
    std::optional<FeatureAdapters<T>> adapters;
    std::vector<ConvNet<T>> frozen;  // fixed pretrained teachers (kd_fp / average_teacher)
};

template <class T>
Models<T> build_models(const TrainConfig& cfg, std::uint64_t seed) {
    Models<T> m;
    m.student = ConvNet<T>(cfg.arch, cfg.quantizer, cfg.student_bits, /*with_head=*/true, "student");
    Rng rs = Rng::substream(seed, "init:student");
    m.student.init(rs);

    if (preset_is_collaborative(cfg.preset)) {
        if (cfg.teacher_bits.empty()) throw ValueError("collaborative preset needs at least one teacher");
        if (cfg.teacher_bits.size() < 2)
            std::fprintf(stderr, "[cmtkd] warning: collaborative run with a single teacher\n");
        for (int b : cfg.teacher_bits)
            if (b != 0 && cfg.student_bits != 0 && b < cfg.student_bits)
                std::fprintf(stderr,
                             "[cmtkd] warning: teacher bit-width %d below student bit-width %d\n", b,
                             cfg.student_bits);
        m.ensemble.emplace(cfg.arch, cfg.quantizer, cfg.teacher_bits);
        m.ensemble->init(seed);
        if (cfg.feat_loss == FeatKind::FitNet) {
            FeatureAdapters<T> ad;
            Rng ra = Rng::substream(seed, "init:adapters");
            for (int k : cfg.arch.fusion_indices) {
                const int c = cfg.arch.channels_at_conv(k);
                Tensor<T> w({c, c, 1, 1}, true);
                const double bound = std::sqrt(6.0 / c);
                for (T& v : w.values()) v = T(ra.uniform(-bound, bound));
                ad.w.push_back(w);
            }
            m.adapters = std::move(ad);
        }
    } else if (cfg.preset == Preset::KdFp) {
        m.frozen.emplace_back(cfg.arch, cfg.quantizer, 0, /*with_head=*/true, "fp_teacher");
        Rng rt = Rng::substream(seed, "init:fp_teacher");
        m.frozen.back().init(rt);
    } else if (cfg.preset == Preset::AverageTeacher) {
        if (cfg.teacher_bits.empty()) throw ValueError("average_teacher preset needs at least one teacher");
        for (std::size_t i = 0; i < cfg.teacher_bits.size(); ++i) {
            m.frozen.emplace_back(cfg.arch, cfg.quantizer, cfg.teacher_bits[i], /*with_head=*/true,
                                  "avg_teacher" + std::to_string(i));
            Rng rt = Rng::substream(seed, "init:avg_teacher" + std::to_string(i));
            m.frozen.back().init(rt);
        }
    }
    return m;
}

template <class T>
void collect_trainable(Models<T>& m, std::vector<ParamRef<T>>& out) {
    m.student.collect_params(out);
    if (m.ensemble) m.ensemble->collect_params(out);
    if (m.adapters)
        for (std::size_t k = 0; k < m.adapters->w.size(); ++k)
            out.push_back({"adapter/k" + std::to_string(k), m.adapters->w[k], ParamKind::Adapter, 0});
}

template <class T>
void collect_buffers_all(Models<T>& m, std::vector<BufferRef<T>>& out) {
    m.student.collect_buffers(out);
    if (m.ensemble) m.ensemble->collect_buffers(out);
}

// Parameter groups: per-kind treatment, with weight decay keyed off the
// owning network's bit-width for weights. Importance logits train at lr/10
// with no decay; BN parameters get no decay; learned steps stay positive.
template <class T>
SgdMomentum<T> build_optimizer(Models<T>& m, const TrainConfig& cfg) {
    SgdMomentum<T> opt(cfg.optim.momentum);
    std::vector<ParamRef<T>> params;
    collect_trainable(m, params);
    std::map<std::string, std::size_t> group_of;
    for (const auto& p : params) {
        std::string key;
        double lr_scale = 1.0, wd = 0.0;
        bool clamp = false;
        switch (p.kind) {
            case ParamKind::Weight:
                key = "weights_b" + std::to_string(p.bits);
                wd = weight_decay_for_bits(p.bits);
                break;
            case ParamKind::BnParam: key = "bn"; break;
            case ParamKind::Rho:
                key = "rho";
                lr_scale = 0.1;
                break;
            case ParamKind::LsqStep:
                key = "lsq_step";
                clamp = true;
                break;
            case ParamKind::Adapter:
                key = "adapter";
                wd = 1e-4;
                break;
        }
        auto it = group_of.find(key);
        if (it == group_of.end()) {
            opt.add_group(key, lr_scale, wd, clamp);
            it = group_of.emplace(key, opt.groups().size() - 1).first;
        }
        opt.add_param(opt.groups()[it->second], p.tensor);
    }
    return opt;
}

// ---------------------------------------------------------------------------
// One training step.
// ---------------------------------------------------------------------------
struct StepReport {
    double total = 0, ce_s = 0, ce_t = 0, kl_s = 0, kl_t = 0, feat = 0;
    std::vector<std::vector<double>> pi;
    std::vector<double> grad_norms;
    bool skipped = false;
};

template <class T>
class Trainer {
public:
    Trainer(TrainConfig cfg, Models<T>& models) : cfg_(std::move(cfg)), m_(models) {
        opt_ = build_optimizer(m_, cfg_);
    }

    SgdMomentum<T>& optimizer() { return opt_; }
    const TrainConfig& config() const { return cfg_; }

    StepReport step(const Tensor<T>& batch, const std::vector<int>& labels, double lr) {
        StepReport rep;
        opt_.zero_grad();
        Graph<T> g;
        try {
            Tensor<T> total = forward_loss(&g, batch, labels, rep);
            g.backward(total);
        } catch (const NumericError& e) {
            std::fprintf(stderr, "[cmtkd] step skipped: %s\n", e.what());
            rep.skipped = true;
            return rep;
        }
        rep.grad_norms = opt_.grad_norms();
        opt_.step(lr);
        if (m_.ensemble) {
            rep.pi = m_.ensemble->importance().snapshot();
            verify_pi(rep.pi);
        }
        return rep;
    }

    // Loss for the current preset; components land in `rep` as doubles and
    // the logged total is their weighted sum recomputed in double.
    Tensor<T> forward_loss(Graph<T>* g, const Tensor<T>& batch, const std::vector<int>& labels,
                           StepReport& rep) {
        const LossWeights& w = cfg_.weights;
        Tensor<T> ce_s, ce_t, kl_s, kl_t, feat;
        switch (cfg_.preset) {
            case Preset::Single: {
                Tensor<T> z = m_.student.forward(g, batch, true);
                ce_s = ops::softmax_cross_entropy(g, z, labels);
                break;
            }
            case Preset::KdFp:
            case Preset::AverageTeacher: {
                Tensor<T> z = m_.student.forward(g, batch, true);
                ce_s = ops::softmax_cross_entropy(g, z, labels);
                Tensor<T> target = frozen_soft_target(batch);
                kl_s = ops::kl_vs_fixed(g, target, z, w.temperature);
                break;
            }
            default: {  // collaborative presets
                CollabOutput<T> collab = m_.ensemble->collaborative_forward(g, batch, true);
                StudentOutput<T> st = student_forward(g, m_.student, batch, true);
                ce_s = ops::softmax_cross_entropy(g, st.logits, labels);
                ce_t = ops::softmax_cross_entropy(g, collab.logits, labels);
                const bool want_ml = cfg_.preset != Preset::CmtkdNoMl && w.beta != 0.0;
                const bool want_feat = cfg_.preset != Preset::CmtkdNoAtt && w.gamma != 0.0;
                if (want_ml) {
                    Tensor<T> zbar = min_logit_ensemble(collab.logits, st.logits, labels);
                    auto [t_loss, s_loss] = mutual_kl_losses(g, zbar, collab.logits, st.logits, w.temperature);
                    kl_t = t_loss;
                    kl_s = s_loss;
                }
                if (want_feat) {
                    feat = feature_distill_loss(g, collab.fused, st.features, cfg_.feat_loss,
                                                m_.adapters ? &*m_.adapters : nullptr);
                }
                break;
            }
        }
        Tensor<T> total = total_loss(g, ce_s, ce_t, kl_s, kl_t, feat, w);
        rep.ce_s = ce_s.defined() ? static_cast<double>(ce_s.item()) : 0.0;
        rep.ce_t = ce_t.defined() ? static_cast<double>(ce_t.item()) : 0.0;
        rep.kl_s = kl_s.defined() ? static_cast<double>(kl_s.item()) : 0.0;
        rep.kl_t = kl_t.defined() ? static_cast<double>(kl_t.item()) : 0.0;
        rep.feat = feat.defined() ? static_cast<double>(feat.item()) : 0.0;
        rep.total = w.alpha * (rep.ce_s + rep.ce_t) + w.beta * (rep.kl_s + rep.kl_t) + w.gamma * rep.feat;
        if (!std::isfinite(rep.total)) throw NumericError("total_loss: non-finite");
        return total;
    }

private:
    // Soft target from the fixed teachers: temperature softmax of the FP
    // teacher, or the average of the quantized teachers' soft outputs.
    Tensor<T> frozen_soft_target(const Tensor<T>& batch) {
        if (m_.frozen.empty()) throw ValueError("preset needs pretrained teachers");
        Tensor<T> acc;
        for (auto& t : m_.frozen) {
            Tensor<T> z = t.forward(nullptr, batch, false);
            Tensor<T> p = soft_logits<T>(nullptr, z, cfg_.weights.temperature);
            acc = acc.defined() ? ops::add<T>(nullptr, acc, p) : p;
        }
        return ops::scalar_mul<T>(nullptr, acc, T(1) / T(m_.frozen.size()));
    }

    void verify_pi(const std::vector<std::vector<double>>& pi) {
        for (const auto& row : pi) {
            double s = 0;
            for (double v : row) {
                if (v < 0.0 || v > 1.0) throw NumericError("importance weights left [0,1]");
                s += v;
            }
            if (std::abs(s - 1.0) > 1e-9) throw NumericError("importance weights do not sum to 1");
        }
    }

    TrainConfig cfg_;
    Models<T>& m_;
    SgdMomentum<T> opt_;
};

// ---------------------------------------------------------------------------
// Checkpoints: trainable arrays + BN buffers + normalizer + recorded metrics.
// ---------------------------------------------------------------------------
template <class T>
Checkpoint make_checkpoint(Models<T>& m, const TrainConfig& cfg, const Normalizer& nm,
                           const std::map<std::string, std::string>& rng_states, double top1, double top5,
                           double combined_top1) {
    Checkpoint ck;
    ck.config_echo = cfg.echo.empty() ? "{}" : cfg.echo;
    ck.rng_states = rng_states;
    std::vector<ParamRef<T>> params;
    collect_trainable(m, params);
    for (const auto& p : params) ck.arrays.push_back(array_from_tensor(p.name, p.tensor));
    std::vector<BufferRef<T>> bufs;
    collect_buffers_all(m, bufs);
    for (const auto& b : bufs) ck.arrays.push_back(array_from_tensor(b.name, b.tensor));
    if (cfg.quantizer == QuantScheme::Hwgq) {
        // quantizer level tables travel with the model
        auto push_levels = [&](int bits, bool hw, const std::string& name) {
            if (bits == 0) return;
            const auto& qd = gaussian_levels(bits, hw);
            CheckpointArray a;
            a.name = name;
            a.dtype = 'd';
            a.shape = {static_cast<i64>(qd.levels.size())};
            a.f64 = qd.levels;
            ck.arrays.push_back(std::move(a));
        };
        push_levels(cfg.student_bits, true, "levels/student_act");
        push_levels(cfg.student_bits, false, "levels/student_w");
        for (std::size_t i = 0; i < cfg.teacher_bits.size(); ++i) {
            push_levels(cfg.teacher_bits[i], true, "levels/teacher" + std::to_string(i) + "_act");
            push_levels(cfg.teacher_bits[i], false, "levels/teacher" + std::to_string(i) + "_w");
        }
    }
    auto push_scalar = [&](const std::string& name, double v) {
        CheckpointArray a;
        a.name = name;
        a.dtype = 'd';
        a.shape = {1};
        a.f64 = {v};
        ck.arrays.push_back(std::move(a));
    };
    for (std::size_t c = 0; c < nm.mean.size(); ++c) {
        push_scalar("normalizer/mean" + std::to_string(c), nm.mean[c]);
        push_scalar("normalizer/std" + std::to_string(c), nm.stddev[c]);
    }
    push_scalar("recorded/top1_student", top1);
    push_scalar("recorded/top5_student", top5);
    push_scalar("recorded/top1_combined_teacher", combined_top1);
    return ck;
}

template <class T>
void load_models_from_checkpoint(const Checkpoint& ck, const TrainConfig& cfg, Models<T>& m,
                                 Normalizer& nm) {
    std::vector<ParamRef<T>> params;
    collect_trainable(m, params);
    for (auto& p : params) {
        const CheckpointArray* a = ck.find(p.name);
        if (!a) throw ValueError("checkpoint: missing array " + p.name);
        tensor_from_array(*a, p.tensor);
    }
    std::vector<BufferRef<T>> bufs;
    collect_buffers_all(m, bufs);
    for (auto& b : bufs) {
        const CheckpointArray* a = ck.find(b.name);
        if (!a) throw ValueError("checkpoint: missing buffer " + b.name);
        tensor_from_array(*a, b.tensor);
    }
    m.student.mark_lsq_initialized();
    if (m.ensemble)
        for (std::size_t i = 0; i < m.ensemble->size(); ++i) m.ensemble->teacher(i).mark_lsq_initialized();
    nm.mean.clear();
    nm.stddev.clear();
    for (std::size_t c = 0;; ++c) {
        const CheckpointArray* am = ck.find("normalizer/mean" + std::to_string(c));
        const CheckpointArray* as = ck.find("normalizer/std" + std::to_string(c));
        if (!am || !as) break;
        nm.mean.push_back(am->f64[0]);
        nm.stddev.push_back(as->f64[0]);
    }
}

// ---------------------------------------------------------------------------
// Full experiment: phases, logging, checkpointing, report.
// ---------------------------------------------------------------------------
struct RunResult {
    double best_top1 = 0, best_top5 = 0, best_combined_top1 = 0;
    double final_top1 = 0, final_top5 = 0, final_combined_top1 = 0;
    int steps = 0, skipped = 0;
    std::string checkpoint_path, metrics_path, pi_path, report_path;
};

inline std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

template <class T>
class Experiment {
public:
    Experiment(TrainConfig cfg, std::uint64_t seed, std::string out_dir, bool verbose = true)
        : cfg_(std::move(cfg)), seed_(seed), out_dir_(std::move(out_dir)), verbose_(verbose) {}

    RunResult run() {
        namespace fs = std::filesystem;
        if (!out_dir_.empty()) fs::create_directories(out_dir_);
        ds_ = load_dataset(cfg_.data_path);
        if (static_cast<int>(ds_.classes) != cfg_.arch.num_classes)
            throw ValueError("dataset class count does not match arch.classes");
        split_ = split_dataset(ds_);
        nm_ = compute_normalizer(ds_, split_.train);

        Models<T> models = build_models<T>(cfg_, seed_);
        pretrain_frozen(models);
        Trainer<T> trainer(cfg_, models);

        Rng order_rng = Rng::substream(seed_, "data_order");
        Rng aug_rng = Rng::substream(seed_, "augment");

        RunResult res;
        res.metrics_path = path_in_out("metrics.csv");
        std::ofstream metrics(res.metrics_path);
        metrics << "step,epoch,lr,loss_total,ce_S,ce_T,kl_S,kl_T,feat,"
                   "top1_student,top5_student,top1_combined_teacher\n";
        std::ofstream pi_csv;
        const bool collab = preset_is_collaborative(cfg_.preset);
        if (collab) {
            res.pi_path = path_in_out("pi.csv");
            pi_csv.open(res.pi_path);
            pi_csv << "step,layer_index,teacher_index,pi_value\n";
        }

        const int B = cfg_.optim.batch_size;
        int step = 0, consecutive_skips = 0;
        double best_key = -1;
        res.checkpoint_path = path_in_out("best.ckpt");

        for (int epoch = 0; epoch < cfg_.optim.epochs; ++epoch) {
            const double lr = lr_at_epoch(epoch, cfg_.optim);
            std::vector<std::size_t> order = split_.train;
            order_rng.shuffle(order);
            const std::size_t nbatches = order.size() / static_cast<std::size_t>(B);
            for (std::size_t bi = 0; bi < nbatches; ++bi) {
                std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(bi * B),
                                             order.begin() + static_cast<std::ptrdiff_t>((bi + 1) * B));
                Tensor<T> batch = assemble_batch<T>(ds_, nm_, idx, cfg_.augment, &aug_rng);
                std::vector<int> labels = batch_labels(ds_, idx);
                StepReport rep = trainer.step(batch, labels, lr);
                ++step;
                ++res.steps;
                if (rep.skipped) {
                    ++res.skipped;
                    if (++consecutive_skips > 10)
                        throw NumericError("aborting: more than 10 consecutive non-finite steps");
                } else {
                    consecutive_skips = 0;
                }
                const bool last_of_epoch = (bi + 1 == nbatches);
                std::string eval_cols = ",,";
                if (last_of_epoch) {
                    EvalMetrics em = evaluate_net(models.student, ds_, nm_, split_.test);
                    EvalMetrics cm;
                    if (collab) cm = evaluate_ensemble(*models.ensemble, ds_, nm_, split_.test);
                    eval_cols = fmt_g17(em.top1) + "," + fmt_g17(em.top5) + "," +
                                (collab ? fmt_g17(cm.top1) : std::string());
                    res.final_top1 = em.top1;
                    res.final_top5 = em.top5;
                    res.final_combined_top1 = cm.top1;
                    const double key =
                        (cfg_.preset == Preset::CombinedTeacherEval && collab) ? cm.top1 : em.top1;
                    if (key > best_key) {
                        best_key = key;
                        res.best_top1 = em.top1;
                        res.best_top5 = em.top5;
                        res.best_combined_top1 = cm.top1;
                        save_best(models, order_rng, aug_rng, em, cm);
                    }
                    if (verbose_)
                        std::fprintf(stderr, "[cmtkd] %s seed=%llu epoch %d/%d lr=%.5f loss=%.4f top1=%.2f%s\n",
                                     preset_to_string(cfg_.preset).c_str(),
                                     static_cast<unsigned long long>(seed_), epoch + 1, cfg_.optim.epochs,
                                     lr, rep.total, em.top1,
                                     collab ? (" combined=" + std::to_string(cm.top1)).c_str() : "");
                } else {
                    eval_cols = ",,";
                }
                metrics << step << "," << epoch << "," << fmt_g17(lr) << "," << fmt_g17(rep.total) << ","
                        << fmt_g17(rep.ce_s) << "," << fmt_g17(rep.ce_t) << "," << fmt_g17(rep.kl_s) << ","
                        << fmt_g17(rep.kl_t) << "," << fmt_g17(rep.feat) << "," << eval_cols << "\n";
                if (collab)
                    for (std::size_t k = 0; k < rep.pi.size(); ++k)
                        for (std::size_t i = 0; i < rep.pi[k].size(); ++i)
                            pi_csv << step << "," << cfg_.arch.fusion_indices[k] << "," << i << ","
                                   << fmt_g17(rep.pi[k][i]) << "\n";
            }
        }
        metrics.close();
        if (collab) pi_csv.close();
        write_report(res);
        return res;
    }

    const Dataset& dataset() const { return ds_; }
    const SplitIndices& split() const { return split_; }
    const Normalizer& normalizer() const { return nm_; }

private:
    std::string path_in_out(const std::string& name) const {
        return out_dir_.empty() ? name : out_dir_ + "/" + name;
    }

    // kd_fp / average_teacher: fixed teachers get a plain cross-entropy run
    // with the same recipe before the student phase.
    void pretrain_frozen(Models<T>& models) {
        for (std::size_t i = 0; i < models.frozen.size(); ++i) {
            if (verbose_)
                std::fprintf(stderr, "[cmtkd] pretraining fixed teacher %zu (%d bits)\n", i,
                             models.frozen[i].bits());
            TrainConfig tcfg = cfg_;
            tcfg.preset = Preset::Single;
            Models<T> shell;
            shell.student = models.frozen[i];  // shares storage: trains in place
            Trainer<T> t(tcfg, shell);
            Rng order_rng = Rng::substream(seed_, "pretrain" + std::to_string(i) + ":data_order");
            Rng aug_rng = Rng::substream(seed_, "pretrain" + std::to_string(i) + ":augment");
            const int B = tcfg.optim.batch_size;
            for (int epoch = 0; epoch < tcfg.optim.epochs; ++epoch) {
                const double lr = lr_at_epoch(epoch, tcfg.optim);
                std::vector<std::size_t> order = split_.train;
                order_rng.shuffle(order);
                const std::size_t nbatches = order.size() / static_cast<std::size_t>(B);
                for (std::size_t bi = 0; bi < nbatches; ++bi) {
                    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(bi * B),
                                                 order.begin() + static_cast<std::ptrdiff_t>((bi + 1) * B));
                    Tensor<T> batch = assemble_batch<T>(ds_, nm_, idx, tcfg.augment, &aug_rng);
                    t.step(batch, batch_labels(ds_, idx), lr);
                }
            }
            models.frozen[i].mark_lsq_initialized();
        }
    }

    void save_best(Models<T>& models, const Rng& order_rng, const Rng& aug_rng, const EvalMetrics& em,
                   const EvalMetrics& cm) {
        std::map<std::string, std::string> rng_states{{"data_order", order_rng.state()},
                                                      {"augment", aug_rng.state()}};
        Checkpoint ck = make_checkpoint(models, cfg_, nm_, rng_states, em.top1, em.top5, cm.top1);
        save_checkpoint(ck, path_in_out("best.ckpt"));
    }

    void write_report(RunResult& res) {
        nlohmann::json j;
        j["preset"] = preset_to_string(cfg_.preset);
        j["seed"] = seed_;
        j["steps"] = res.steps;
        j["skipped_steps"] = res.skipped;
        j["best"] = {{"top1_student", res.best_top1},
                     {"top5_student", res.best_top5},
                     {"top1_combined_teacher", res.best_combined_top1}};
        j["final"] = {{"top1_student", res.final_top1},
                      {"top5_student", res.final_top5},
                      {"top1_combined_teacher", res.final_combined_top1}};
        j["config"] = nlohmann::json::parse(cfg_.echo.empty() ? "{}" : cfg_.echo);
        res.report_path = path_in_out("report.json");
        std::ofstream os(res.report_path);
        os << j.dump(2) << "\n";
    }

    TrainConfig cfg_;
    std::uint64_t seed_;
    std::string out_dir_;
    bool verbose_;
    Dataset ds_;
    SplitIndices split_;
    Normalizer nm_;
};

}  // namespace cmtkd
