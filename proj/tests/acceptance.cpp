// Acceptance suite: exercises every gate criterion at its stated tolerance
// and prints one PASS/FAIL line per criterion. Exit code 0 only if all pass.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cmtkd/trainer.hpp"
#include "oracles.hpp"

using namespace cmtkd;

namespace {

struct Criterion {
    int id;
    bool pass = true;
    std::string detail;

    void fail(const std::string& why) {
        pass = false;
        if (!detail.empty()) detail += "; ";
        detail += why;
    }
    void note(const std::string& what) {
        if (!detail.empty()) detail += "; ";
        detail += what;
    }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

const char* kOut = "acceptance_artifacts";

// ---------------------------------------------------------------------------
// 1. Quantizer design vs independent grid-search oracle.
// ---------------------------------------------------------------------------
Criterion criterion_1() {
    Criterion c{1};
    const auto t0 = std::chrono::steady_clock::now();
    for (int bits : {1, 2, 3, 4}) {
        for (bool hw : {true, false}) {
            const double impl = design_uniform_gaussian(bits, hw).step;
            const double ref = oracle::grid_search_step(bits, hw);
            if (std::abs(impl - ref) > 1e-4)
                c.fail("bits=" + std::to_string(bits) + (hw ? " half" : " full") + ": step " + fmt(impl) +
                       " vs oracle " + fmt(ref));
        }
    }
    const double one_bit = design_uniform_gaussian(1, true).levels[1];
    const double closed_form = std::sqrt(2.0 / 3.141592653589793);
    if (std::abs(one_bit - closed_form) > 1e-4)
        c.fail("1-bit half-wave level " + fmt(one_bit) + " vs sqrt(2/pi)");
    const double dt = seconds_since(t0);
    if (dt >= 10.0) c.fail("runtime " + fmt(dt) + "s >= 10s");
    c.note("8 step comparisons within 1e-4, " + fmt(dt) + "s");
    return c;
}

// ---------------------------------------------------------------------------
// 2. Whole-system gradient check on the toy configuration.
// ---------------------------------------------------------------------------
TrainConfig toy_config() {
    TrainConfig cfg;
    cfg.preset = Preset::Cmtkd;
    cfg.teacher_bits = {2, 4};
    cfg.student_bits = 2;
    cfg.quantizer = QuantScheme::Lsq;
    cfg.feat_loss = FeatKind::FitNet;
    cfg.weights.alpha = 1.0;
    cfg.weights.beta = 0.5;
    cfg.weights.gamma = 1.0;
    cfg.weights.temperature = 4.0;
    cfg.arch.in_channels = 1;
    cfg.arch.in_h = 8;
    cfg.arch.in_w = 8;
    cfg.arch.block_channels = {3, 4};
    cfg.arch.convs_per_block = 2;
    cfg.arch.num_classes = 3;
    cfg.arch.fusion_indices.clear();
    cfg.arch.validate();
    cfg.echo = "{}";
    return cfg;
}

Criterion criterion_2() {
    Criterion c{2};
    const auto t0 = std::chrono::steady_clock::now();
    TrainConfig cfg = toy_config();
    Models<double> models = build_models<double>(cfg, 42);

    Rng rng(4242);
    Tensor<double> batch({4, 1, 8, 8});
    for (double& v : batch.values()) v = rng.normal();
    std::vector<int> labels = {0, 1, 2, 1};

    // The full training loss with rounding bypassed (clip surrogates stay).
    auto forward_total = [&](Graph<double>* g) {
        CollabOutput<double> collab =
            models.ensemble->collaborative_forward(g, batch, true, QuantMode::Bypass);
        StudentOutput<double> st =
            student_forward(g, models.student, batch, true, QuantMode::Bypass);
        Tensor<double> ce_s = ops::softmax_cross_entropy(g, st.logits, labels);
        Tensor<double> ce_t = ops::softmax_cross_entropy(g, collab.logits, labels);
        Tensor<double> zbar = min_logit_ensemble(collab.logits, st.logits, labels);
        auto [kl_t, kl_s] = mutual_kl_losses(g, zbar, collab.logits, st.logits, cfg.weights.temperature);
        Tensor<double> feat = feature_distill_loss(g, collab.fused, st.features, cfg.feat_loss,
                                                   &*models.adapters);
        return total_loss(g, ce_s, ce_t, kl_s, kl_t, feat, cfg.weights);
    };

    // Warm-up forward initializes the learned steps, then pin them so a mix
    // of elements sits inside and outside the clip range.
    forward_total(nullptr);
    std::vector<ParamRef<double>> params;
    collect_trainable(models, params);
    int step_idx = 0;
    for (auto& p : params)
        if (p.kind == ParamKind::LsqStep) p.tensor.values()[0] = 0.05 + 0.01 * (step_idx++ % 7);

    Graph<double> g;
    Tensor<double> total = forward_total(&g);
    g.backward(total);

    std::map<std::string, double> group_worst;
    for (auto& p : params) {
        auto analytic = oracle::grads_of(p.tensor);
        auto fd = oracle::fd_gradient(p.tensor, [&]() { return forward_total(nullptr).item(); });
        const double err = oracle::max_rel_err(analytic, fd);
        std::string group;
        switch (p.kind) {
            case ParamKind::Weight:
                group = p.name.rfind("student", 0) == 0 ? "student weights" : "teacher weights";
                break;
            case ParamKind::BnParam: group = "bn params"; break;
            case ParamKind::Rho: group = "importance logits"; break;
            case ParamKind::LsqStep: group = "lsq steps"; break;
            case ParamKind::Adapter: group = "fitnet adapter"; break;
        }
        group_worst[group] = std::max(group_worst[group], err);
        if (err >= 1e-4) c.fail(p.name + " rel err " + fmt(err));
    }
    std::string groups;
    for (const auto& [k, v] : group_worst) groups += k + "=" + fmt(v) + " ";

    // Second pass: straight-through masks against the range-check oracle,
    // with rounding active.
    for (bool hw : {true, false}) {
        const auto& qd = gaussian_levels(2, hw);
        Tensor<double> x({256}, true);
        for (double& v : x.values()) v = rng.normal(0.0, 2.0);
        Tensor<double> up({256});
        for (double& v : up.values()) v = rng.normal();
        Graph<double> gq;
        Tensor<double> y = hwgq_quantize(&gq, x, qd);
        gq.backward(ops::sum(&gq, ops::mul(&gq, y, up)));
        const double sigma = tensor_std(x);
        const double hi = sigma * qd.level_max(), lo = hw ? 0.0 : -hi;
        for (i64 i = 0; i < 256; ++i) {
            const double mask = (x.values()[i] >= lo && x.values()[i] <= hi) ? 1.0 : 0.0;
            if (x.grads()[i] != mask * up.values()[i]) {
                c.fail("ste mask mismatch at element " + std::to_string(i));
                break;
            }
        }
    }

    const double dt = seconds_since(t0);
    if (dt >= 120.0) c.fail("runtime " + fmt(dt) + "s >= 2min");
    c.note("worst rel err per group: " + groups + "(" + std::to_string(params.size()) +
           " tensors), ste masks exact, " + fmt(dt) + "s");
    return c;
}

// ---------------------------------------------------------------------------
// Desk runs shared by criteria 3, 5 and 6.
// ---------------------------------------------------------------------------
TrainConfig desk_config(Preset preset, const std::string& data_path) {
    nlohmann::json j = {
        {"preset", preset_to_string(preset)},
        {"teacher_bits", {4, 6, 8}},
        {"student_bits", 2},
        {"quantizer", "hwgq"},
        {"feat_loss", "attention"},
        {"alpha", 1.0},
        {"beta", 0.5},
        {"gamma", 1.0},
        {"temperature", 2.0},
        {"epochs", 20},
        {"batch_size", 32},
        {"base_lr", 0.02},
        {"schedule", "cosine"},
        {"fusion_indices", {2, 4, 6}},
        {"arch",
         {{"input", {1, 16, 16}},
          {"channels", {4, 8, 16}},
          {"convs_per_block", 2},
          {"kernel", 3},
          {"pool", "max"},
          {"classes", 10}}},
        {"data_path", data_path},
        {"precision", "f32"},
    };
    return parse_config_json(j);
}

struct DeskRuns {
    std::map<std::string, std::vector<RunResult>> results;  // preset -> per-seed
    std::string data_path;
    double wall_seconds = 0;
};

DeskRuns run_desk_matrix() {
    DeskRuns out;
    const auto t0 = std::chrono::steady_clock::now();
    std::filesystem::create_directories(kOut);
    out.data_path = std::string(kOut) + "/desk.cmtd";
    Dataset ds = make_synthetic(10, 313, 16, 16, 1, 7, 0.40);
    save_dataset(ds, out.data_path);

    struct Job {
        Preset preset;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (std::uint64_t seed : {1, 2, 3})
        for (Preset p : {Preset::Single, Preset::Cmtkd, Preset::CmtkdNoAtt, Preset::CmtkdNoMl})
            jobs.push_back({p, seed});

    std::vector<RunResult> results(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            const auto& job = jobs[i];
            TrainConfig cfg = desk_config(job.preset, out.data_path);
            const std::string dir = std::string(kOut) + "/" + preset_to_string(job.preset) + "_s" +
                                    std::to_string(job.seed);
            std::fprintf(stderr, "[acceptance] desk run %s seed %llu...\n",
                         preset_to_string(job.preset).c_str(),
                         static_cast<unsigned long long>(job.seed));
            Experiment<float> exp(cfg, job.seed, dir, /*verbose=*/false);
            results[i] = exp.run();
        }
    };
    std::thread t1(worker), t2(worker);
    t1.join();
    t2.join();
    for (std::size_t i = 0; i < jobs.size(); ++i)
        out.results[preset_to_string(jobs[i].preset)].push_back(results[i]);
    out.wall_seconds = seconds_since(t0);
    return out;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::ifstream is(path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(is, line)) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.push_back("");
        rows.push_back(cells);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// 3. Importance-factor invariants over a long desk run + property tests.
// ---------------------------------------------------------------------------
Criterion criterion_3(const DeskRuns& desk) {
    Criterion c{3};
    const RunResult& run = desk.results.at("cmtkd")[0];
    if (run.steps < 500) c.fail("desk run has only " + std::to_string(run.steps) + " steps (< 500)");
    auto pi = read_csv(run.pi_path);
    if (pi.size() < 2) {
        c.fail("missing pi log");
        return c;
    }
    std::map<std::pair<int, int>, double> sums;
    for (std::size_t r = 1; r < pi.size(); ++r) {
        const int step = std::stoi(pi[r][0]);
        const int layer = std::stoi(pi[r][1]);
        const double v = std::stod(pi[r][3]);
        if (v < 0.0 || v > 1.0) {
            c.fail("pi out of [0,1] at step " + std::to_string(step));
            break;
        }
        sums[{step, layer}] += v;
    }
    for (const auto& [key, s] : sums) {
        if (std::abs(s - 1.0) > 1e-9) {
            c.fail("pi sum " + fmt(s) + " at step " + std::to_string(key.first));
            break;
        }
    }
    c.note(std::to_string(run.steps) + " steps, " + std::to_string(sums.size()) +
           " (step,layer) snapshots all normalized");

    // permutation and shift invariance on random instances
    Rng rng(333);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 2 + static_cast<int>(rng.randint(0, 2));
        Tensor<double> rho({n});
        for (double& v : rho.values()) v = rng.normal();
        std::vector<Tensor<double>> acts;
        for (int i = 0; i < n; ++i) {
            Tensor<double> a({6});
            for (double& v : a.values()) v = rng.normal();
            acts.push_back(a);
        }
        Tensor<double> pi_v = ops::softmax_vec<double>(nullptr, rho);
        Tensor<double> f = fuse<double>(nullptr, rho, acts);

        Tensor<double> rho_rot({n});
        std::vector<Tensor<double>> acts_rot;
        for (int i = 0; i < n; ++i) {
            rho_rot.values()[i] = rho.values()[(i + 1) % n];
            acts_rot.push_back(acts[(i + 1) % n]);
        }
        Tensor<double> pi_rot = ops::softmax_vec<double>(nullptr, rho_rot);
        Tensor<double> f_rot = fuse<double>(nullptr, rho_rot, acts_rot);
        for (int i = 0; i < n; ++i)
            if (std::abs(pi_rot.values()[i] - pi_v.values()[(i + 1) % n]) > 1e-12)
                c.fail("permutation equivariance violated");
        for (i64 e = 0; e < f.numel(); ++e)
            if (std::abs(f_rot.values()[e] - f.values()[e]) > 1e-9) c.fail("fused map moved under permutation");

        const double shift = rng.normal();
        Tensor<double> rho_s({n});
        for (int i = 0; i < n; ++i) rho_s.values()[i] = rho.values()[i] + shift;
        Tensor<double> pi_s = ops::softmax_vec<double>(nullptr, rho_s);
        for (int i = 0; i < n; ++i)
            if (std::abs(pi_s.values()[i] - pi_v.values()[i]) > 1e-12) c.fail("shift invariance violated");
        if (!c.pass) break;
    }
    if (c.pass) c.note("100 permutation/shift property instances");
    return c;
}

// ---------------------------------------------------------------------------
// 4. Min-logit ensemble properties.
// ---------------------------------------------------------------------------
Criterion criterion_4() {
    Criterion c{4};
    Rng rng(444);
    for (int trial = 0; trial < 1000 && c.pass; ++trial) {
        const i64 m = 3 + rng.randint(0, 7);
        Tensor<double> zt({1, m}), zs({1, m});
        for (double& v : zt.values()) v = rng.normal(0.0, 3.0);
        for (double& v : zs.values()) v = rng.normal(0.0, 3.0);
        const int cls = static_cast<int>(rng.randint(0, m - 1));
        Tensor<double> zbar = min_logit_ensemble(zt, zs, {cls});
        if (zbar.values()[static_cast<std::size_t>(cls)] != 0.0) c.fail("anchor not exactly zero");
        for (i64 j = 0; j < m; ++j) {
            const double a = zt.values()[j] - zt.values()[cls];
            const double b = zs.values()[j] - zs.values()[cls];
            if (zbar.values()[j] > a || zbar.values()[j] > b) c.fail("dominance violated");
        }
        const double shift = rng.normal(0.0, 10.0);
        Tensor<double> zt2({1, m});
        for (i64 j = 0; j < m; ++j) zt2.values()[j] = zt.values()[j] + shift;
        Tensor<double> zbar2 = min_logit_ensemble(zt2, zs, {cls});
        for (i64 j = 0; j < m; ++j)
            if (std::abs(zbar2.values()[j] - zbar.values()[j]) > 1e-12) c.fail("shift invariance violated");
    }
    Tensor<double> zt = Tensor<double>::of({1, 3}, {2, 5, 1});
    Tensor<double> zs = Tensor<double>::of({1, 3}, {3, 4, 2});
    Tensor<double> zbar = min_logit_ensemble(zt, zs, {1});
    if (zbar.values() != std::vector<double>{-3, 0, -4}) c.fail("worked example mismatch");
    if (c.pass) c.note("1000 random triples + worked example");
    return c;
}

// ---------------------------------------------------------------------------
// 5. Loss invariants.
// ---------------------------------------------------------------------------
Criterion criterion_5(const DeskRuns& desk) {
    Criterion c{5};
    Rng rng(555);

    // attention scale invariance and range
    for (int trial = 0; trial < 100; ++trial) {
        Tensor<double> ft({2, 3, 4, 4}), fs({2, 3, 4, 4});
        for (double& v : ft.values()) v = rng.normal();
        for (double& v : fs.values()) v = rng.normal();
        const double base = attention_loss<double>(nullptr, ft, fs).item();
        if (base < 0.0 || base > 2.0) c.fail("attention loss outside [0,2]");
        const double ct = std::exp(rng.uniform(-2, 2)), cs = std::exp(rng.uniform(-2, 2));
        Tensor<double> ft2({2, 3, 4, 4}), fs2({2, 3, 4, 4});
        for (i64 i = 0; i < ft.numel(); ++i) {
            ft2.values()[i] = ct * ft.values()[i];
            fs2.values()[i] = cs * fs.values()[i];
        }
        if (std::abs(attention_loss<double>(nullptr, ft2, fs2).item() - base) > 1e-9)
            c.fail("attention scale invariance violated");
        if (!c.pass) break;
    }

    // KL non-negativity, identity, temperature-squared scaling
    for (int trial = 0; trial < 100 && c.pass; ++trial) {
        Tensor<double> za({2, 5}), zb({2, 5});
        for (double& v : za.values()) v = rng.normal();
        for (double& v : zb.values()) v = rng.normal();
        Tensor<double> pa = soft_logits<double>(nullptr, za, 3.0);
        const double kl = ops::kl_vs_fixed<double>(nullptr, pa, zb, 3.0).item();
        if (kl < -1e-15) c.fail("negative KL");
        if (ops::kl_vs_fixed<double>(nullptr, pa, za, 3.0).item() > 1e-9) c.fail("KL(p||p) != 0");
        const double t1 = 2.0, t2 = 4.0;
        Tensor<double> z1({2, 5}), z2({2, 5});
        for (i64 i = 0; i < 10; ++i) {
            z1.values()[i] = zb.values()[i] * t1;
            z2.values()[i] = zb.values()[i] * t2;
        }
        const double l1 = ops::kl_vs_fixed<double>(nullptr, pa, z1, t1).item();
        const double l2 = ops::kl_vs_fixed<double>(nullptr, pa, z2, t2).item();
        if (std::abs(l2 - 4.0 * l1) > 1e-9) c.fail("temperature-squared scaling violated");
    }

    // component accounting identity on every logged step of every desk run
    std::size_t rows_checked = 0;
    for (const auto& [preset, runs] : desk.results) {
        for (const auto& run : runs) {
            auto rowsv = read_csv(run.metrics_path);
            for (std::size_t r = 1; r < rowsv.size() && c.pass; ++r) {
                const double total = std::stod(rowsv[r][3]);
                const double expect = 1.0 * (std::stod(rowsv[r][4]) + std::stod(rowsv[r][5])) +
                                      0.5 * (std::stod(rowsv[r][6]) + std::stod(rowsv[r][7])) +
                                      1.0 * std::stod(rowsv[r][8]);
                if (std::abs(total - expect) > 1e-9)
                    c.fail(preset + " accounting drift " + fmt(std::abs(total - expect)));
                ++rows_checked;
            }
        }
    }
    if (c.pass)
        c.note("100 attention + 100 KL property instances, accounting identity on " +
               std::to_string(rows_checked) + " logged steps");
    return c;
}

// ---------------------------------------------------------------------------
// 6. Directional ablation over three seeds.
// ---------------------------------------------------------------------------
Criterion criterion_6(const DeskRuns& desk) {
    Criterion c{6};
    auto mean_top1 = [&](const std::string& preset) {
        const auto& runs = desk.results.at(preset);
        double s = 0;
        for (const auto& r : runs) s += r.best_top1;
        return s / static_cast<double>(runs.size());
    };
    const double single = mean_top1("single");
    const double cmtkd = mean_top1("cmtkd");
    const double no_att = mean_top1("cmtkd_no_att");
    const double no_ml = mean_top1("cmtkd_no_ml");
    if (cmtkd < single) c.fail("cmtkd " + fmt(cmtkd) + " < single " + fmt(single));
    if (cmtkd < no_att - 0.5) c.fail("cmtkd " + fmt(cmtkd) + " < no_att - 0.5 (" + fmt(no_att) + ")");
    if (cmtkd < no_ml - 0.5) c.fail("cmtkd " + fmt(cmtkd) + " < no_ml - 0.5 (" + fmt(no_ml) + ")");
    if (desk.wall_seconds >= 1800.0) c.fail("runtime " + fmt(desk.wall_seconds) + "s >= 30min");
    c.note("mean top-1: single=" + fmt(single) + " cmtkd=" + fmt(cmtkd) + " no_att=" + fmt(no_att) +
           " no_ml=" + fmt(no_ml) + ", " + fmt(desk.wall_seconds) + "s");
    return c;
}

// ---------------------------------------------------------------------------
// 7. Collapse tests.
// ---------------------------------------------------------------------------
Criterion criterion_7(const DeskRuns& desk) {
    Criterion c{7};

    // (a) one-hot importance reproduces the standalone teacher bit-exactly
    {
        ArchSpec arch;
        arch.in_channels = 1;
        arch.in_h = 8;
        arch.in_w = 8;
        arch.block_channels = {3, 4};
        arch.num_classes = 3;
        arch.fusion_indices.clear();
        arch.validate();
        TeacherEnsemble<double> ens(arch, QuantScheme::Hwgq, {2, 4, 8});
        ens.init(777);
        ens.importance().force_one_hot(2);
        Rng rng(77);
        Tensor<double> x({4, 1, 8, 8});
        for (double& v : x.values()) v = rng.normal();
        CollabOutput<double> out = ens.collaborative_forward(nullptr, x, false);
        Tensor<double> s1 = ens.teacher(2).forward_segment(nullptr, x, 0, 2, false, QuantMode::Active);
        Tensor<double> s2 = ens.teacher(2).forward_segment(nullptr, s1, 2, 4, false, QuantMode::Active);
        Tensor<double> pooled = ops::global_avg_pool<double>(nullptr, s2);
        Tensor<double> z = ops::linear<double>(nullptr, pooled, ens.head_w(), ens.head_b());
        if (out.fused[0].values() != s1.values() || out.fused[1].values() != s2.values())
            c.fail("one-hot fusion drifted from the standalone features");
        if (out.logits.values() != z.values()) c.fail("one-hot combined logits differ");
    }

    // (b) full-precision single-teacher run with beta=gamma=0 matches plain
    // cross-entropy training bit for bit
    {
        Dataset ds = load_dataset(desk.data_path);
        SplitIndices split = split_dataset(ds);
        Normalizer nm = compute_normalizer(ds, split.train);
        auto run_steps = [&](Preset preset) {
            TrainConfig cfg = desk_config(preset, desk.data_path);
            cfg.preset = preset;
            cfg.student_bits = 0;
            cfg.teacher_bits = {0};
            cfg.weights.beta = 0.0;
            cfg.weights.gamma = 0.0;
            Models<double> models = build_models<double>(cfg, 99);
            Trainer<double> trainer(cfg, models);
            Rng order = Rng::substream(99, "data_order");
            Rng aug = Rng::substream(99, "augment");
            std::vector<std::size_t> train = split.train;
            order.shuffle(train);
            for (int s = 0; s < 10; ++s) {
                std::vector<std::size_t> idx(train.begin() + s * 32, train.begin() + (s + 1) * 32);
                Tensor<double> batch = assemble_batch<double>(ds, nm, idx, true, &aug);
                trainer.step(batch, batch_labels(ds, idx), 0.02);
            }
            std::vector<ParamRef<double>> params;
            models.student.collect_params(params);
            std::vector<std::vector<double>> out;
            for (auto& p : params) out.push_back(p.tensor.values());
            return out;
        };
        auto a = run_steps(Preset::Single);
        auto b = run_steps(Preset::Cmtkd);
        if (a != b) c.fail("ce-only collaborative run diverged from plain training");
    }

    // (c) with two bits everywhere, every quantized activation holds at most
    // four distinct values
    {
        TrainConfig cfg = desk_config(Preset::Cmtkd, desk.data_path);
        cfg.teacher_bits = {2, 2, 2};
        cfg.student_bits = 2;
        Models<float> models = build_models<float>(cfg, 5);
        Dataset ds = load_dataset(desk.data_path);
        SplitIndices split = split_dataset(ds);
        Normalizer nm = compute_normalizer(ds, split.train);
        std::vector<std::size_t> idx(split.train.begin(), split.train.begin() + 32);
        Tensor<float> batch = assemble_batch<float>(ds, nm, idx, false, nullptr);
        std::vector<Tensor<float>> quantized;
        Capture<float> cap;
        cap.quantized_activations = &quantized;
        models.ensemble->collaborative_forward(nullptr, batch, false, QuantMode::Active, &cap);
        student_forward<float>(nullptr, models.student, batch, false, QuantMode::Active, &cap);
        if (quantized.empty()) c.fail("no quantized activations captured");
        std::size_t worst = 0;
        for (const auto& t : quantized) {
            std::set<float> distinct(t.values().begin(), t.values().end());
            worst = std::max(worst, distinct.size());
            if (distinct.size() > 4) c.fail("activation with " + std::to_string(distinct.size()) + " levels");
        }
        c.note("collapse checks exact, " + std::to_string(quantized.size()) +
               " quantized tensors with <= " + std::to_string(worst) + " levels");
    }
    return c;
}

// ---------------------------------------------------------------------------
// 8. Persistence round-trips.
// ---------------------------------------------------------------------------
Criterion criterion_8(const DeskRuns& desk) {
    Criterion c{8};

    // dataset round-trip
    Dataset ds = make_synthetic(10, 40, 16, 16, 1, 123, 0.40);
    const std::string dpath = std::string(kOut) + "/roundtrip.cmtd";
    save_dataset(ds, dpath);
    Dataset back = load_dataset(dpath);
    if (back.pixels != ds.pixels || back.labels != ds.labels || back.classes != ds.classes)
        c.fail("dataset round-trip not bit-exact");

    // checkpoint of the first cmtkd desk run reproduces its recorded accuracy
    const RunResult& run = desk.results.at("cmtkd")[0];
    Checkpoint ck = load_checkpoint(run.checkpoint_path);
    TrainConfig cfg = parse_config_json(nlohmann::json::parse(ck.config_echo));
    Models<float> models = build_models<float>(cfg, 31337);
    Normalizer nm;
    load_models_from_checkpoint(ck, cfg, models, nm);
    Dataset desk_ds = load_dataset(desk.data_path);
    SplitIndices split = split_dataset(desk_ds);
    EvalMetrics em = evaluate_net(models.student, desk_ds, nm, split.test);
    const double rec1 = ck.find("recorded/top1_student")->f64[0];
    const double rec5 = ck.find("recorded/top5_student")->f64[0];
    if (em.top1 != rec1 || em.top5 != rec5)
        c.fail("reloaded evaluation " + fmt(em.top1) + "/" + fmt(em.top5) + " differs from recorded " +
               fmt(rec1) + "/" + fmt(rec5));

    // checkpoint file round-trip is bit-exact
    const std::string cpath = std::string(kOut) + "/ck_copy.bin";
    save_checkpoint(ck, cpath);
    Checkpoint ck2 = load_checkpoint(cpath);
    if (ck2.arrays.size() != ck.arrays.size()) c.fail("checkpoint array count changed");
    for (std::size_t i = 0; i < ck.arrays.size() && c.pass; ++i)
        if (ck2.arrays[i].f64 != ck.arrays[i].f64 || ck2.arrays[i].f32 != ck.arrays[i].f32 ||
            ck2.arrays[i].name != ck.arrays[i].name)
            c.fail("checkpoint round-trip not bit-exact at " + ck.arrays[i].name);

    // pi log: one row per (step, layer, teacher), no gaps
    auto pi = read_csv(run.pi_path);
    const std::size_t expect = static_cast<std::size_t>(run.steps) * 3 * 3;
    if (pi.size() != expect + 1)
        c.fail("pi log has " + std::to_string(pi.size() - 1) + " rows, expected " + std::to_string(expect));
    std::size_t at = 1;
    for (int s = 1; s <= run.steps && c.pass; ++s)
        for (int k : {2, 4, 6})
            for (int t = 0; t < 3; ++t, ++at)
                if (std::stoi(pi[at][0]) != s || std::stoi(pi[at][1]) != k || std::stoi(pi[at][2]) != t) {
                    c.fail("pi log gap at row " + std::to_string(at));
                    break;
                }
    if (c.pass)
        c.note("dataset + checkpoint round-trips bit-exact, evaluation reproduced exactly, pi log dense");
    return c;
}

}  // namespace

int main() {
    std::vector<Criterion> results;
    std::fprintf(stderr, "[acceptance] criteria 1-2 (oracles, whole-system gradients)...\n");
    results.push_back(criterion_1());
    results.push_back(criterion_2());
    std::fprintf(stderr, "[acceptance] desk training matrix (criteria 3, 5, 6)...\n");
    DeskRuns desk = run_desk_matrix();
    results.push_back(criterion_3(desk));
    results.push_back(criterion_4());
    results.push_back(criterion_5(desk));
    results.push_back(criterion_6(desk));
    std::fprintf(stderr, "[acceptance] collapse and persistence checks...\n");
    results.push_back(criterion_7(desk));
    results.push_back(criterion_8(desk));

    static const char* kNames[] = {
        "quantizer level design matches the brute-force oracle",
        "whole-system gradients match central finite differences",
        "importance-factor invariants over a 500+ step run",
        "min-logit ensemble properties",
        "loss invariants and component accounting",
        "directional ablation over three seeds",
        "collapse tests",
        "persistence round-trips",
    };
    bool all = true;
    for (const auto& r : results) {
        std::printf("%s criterion %d: %s%s%s\n", r.pass ? "PASS" : "FAIL", r.id, kNames[r.id - 1],
                    r.detail.empty() ? "" : " -- ", r.detail.c_str());
        all = all && r.pass;
    }
    return all ? 0 : 1;
}
