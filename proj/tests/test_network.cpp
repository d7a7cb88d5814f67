#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "cmtkd/network.hpp"
#include "cmtkd/ops.hpp"
#include "oracles.hpp"

using namespace cmtkd;
using Catch::Approx;

namespace {

ArchSpec tiny_arch() {
    ArchSpec a;
    a.in_channels = 1;
    a.in_h = 8;
    a.in_w = 8;
    a.block_channels = {3, 4};
    a.convs_per_block = 2;
    a.kernel = 3;
    a.num_classes = 3;
    a.validate();
    return a;
}

Tensor<double> random_batch(Rng& rng, const ArchSpec& a, int n) {
    Tensor<double> x({n, a.in_channels, a.in_h, a.in_w});
    for (double& v : x.values()) v = rng.normal();
    return x;
}

// Shared-head forward on a trunk output, mirroring the ensemble head.
Tensor<double> head_apply(Tensor<double> feat, Tensor<double> w, Tensor<double> b) {
    Tensor<double> pooled = ops::global_avg_pool<double>(nullptr, feat);
    return ops::linear<double>(nullptr, pooled, w, b);
}

}  // namespace

TEST_CASE("arch validation") {
    ArchSpec a = tiny_arch();
    REQUIRE(a.conv_count() == 4);
    REQUIRE(a.fusion_indices == std::vector<int>{2, 4});
    REQUIRE(a.channels_at_conv(2) == 3);
    REQUIRE(a.channels_at_conv(4) == 4);

    ArchSpec bad = tiny_arch();
    bad.fusion_indices = {3, 2};
    REQUIRE_THROWS_AS(bad.validate(), ValueError);
    ArchSpec bad2 = tiny_arch();
    bad2.fusion_indices = {5};
    REQUIRE_THROWS_AS(bad2.validate(), ValueError);
}

TEST_CASE("full-precision build gives finite logits on zeros") {
    ArchSpec a = tiny_arch();
    ConvNet<double> net(a, QuantScheme::Hwgq, 0, true, "net");
    Rng rng = Rng::substream(99, "init:net");
    net.init(rng);
    Tensor<double> x({4, 1, 8, 8});
    Tensor<double> z = net.forward(nullptr, x, false);
    REQUIRE(z.shape() == std::vector<i64>{4, 3});
    for (double v : z.values()) REQUIRE(std::isfinite(v));
}

TEST_CASE("two builds from the same seed are identical") {
    ArchSpec a = tiny_arch();
    auto build = [&]() {
        ConvNet<double> net(a, QuantScheme::Hwgq, 2, true, "net");
        Rng rng = Rng::substream(123, "init:net");
        net.init(rng);
        return net;
    };
    ConvNet<double> n1 = build();
    ConvNet<double> n2 = build();
    std::vector<ParamRef<double>> p1, p2;
    n1.collect_params(p1);
    n2.collect_params(p2);
    REQUIRE(p1.size() == p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i) REQUIRE(p1[i].tensor.values() == p2[i].tensor.values());

    Rng rb(5);
    Tensor<double> x = random_batch(rb, a, 4);
    Tensor<double> z1 = n1.forward(nullptr, x, false);
    Tensor<double> z2 = n2.forward(nullptr, x, false);
    REQUIRE(z1.values() == z2.values());
}

TEST_CASE("two-bit activations take at most four distinct values") {
    ArchSpec a = tiny_arch();
    ConvNet<double> net(a, QuantScheme::Hwgq, 2, true, "net");
    Rng rng = Rng::substream(7, "init:net");
    net.init(rng);
    Rng rb(8);
    Tensor<double> x = random_batch(rb, a, 4);
    std::vector<Tensor<double>> quantized;
    Capture<double> cap;
    cap.quantized_activations = &quantized;
    net.forward(nullptr, x, false, QuantMode::Active, &cap);
    REQUIRE(quantized.size() == 3);  // first conv stays full precision
    for (const auto& t : quantized) {
        std::set<double> distinct(t.values().begin(), t.values().end());
        REQUIRE(static_cast<int>(distinct.size()) <= 4);
    }
}

TEST_CASE("single-teacher ensemble collapses to the standalone forward") {
    ArchSpec a = tiny_arch();
    TeacherEnsemble<double> ens(a, QuantScheme::Hwgq, {3});
    ens.init(17);
    Rng rb(9);
    Tensor<double> x = random_batch(rb, a, 4);
    CollabOutput<double> out = ens.collaborative_forward(nullptr, x, false);

    // manual run: teacher trunk segments chained directly, then the shared head
    Tensor<double> t1 = ens.teacher(0).forward_segment(nullptr, x, 0, 2, false, QuantMode::Active);
    Tensor<double> t2 = ens.teacher(0).forward_segment(nullptr, t1, 2, 4, false, QuantMode::Active);
    Tensor<double> z = head_apply(t2, ens.head_w(), ens.head_b());
    REQUIRE(out.fused.size() == 2);
    REQUIRE(out.fused[0].values() == t1.values());
    REQUIRE(out.fused[1].values() == t2.values());
    REQUIRE(out.logits.values() == z.values());
}

TEST_CASE("one-hot importance reproduces the chosen teacher exactly") {
    ArchSpec a = tiny_arch();
    TeacherEnsemble<double> ens(a, QuantScheme::Hwgq, {2, 4, 8});
    ens.init(31);
    ens.importance().force_one_hot(1);
    Rng rb(10);
    Tensor<double> x = random_batch(rb, a, 4);
    CollabOutput<double> out = ens.collaborative_forward(nullptr, x, false);

    Tensor<double> s1 = ens.teacher(1).forward_segment(nullptr, x, 0, 2, false, QuantMode::Active);
    Tensor<double> s2 = ens.teacher(1).forward_segment(nullptr, s1, 2, 4, false, QuantMode::Active);
    Tensor<double> z = head_apply(s2, ens.head_w(), ens.head_b());
    REQUIRE(out.fused[0].values() == s1.values());
    REQUIRE(out.fused[1].values() == s2.values());
    REQUIRE(out.logits.values() == z.values());
}

TEST_CASE("duplicate teachers with equal importance fuse to either one") {
    ArchSpec a = tiny_arch();
    TeacherEnsemble<double> ens(a, QuantScheme::Hwgq, {4, 4});
    ens.init(53);
    ens.teacher(1).copy_values_from(ens.teacher(0));
    Rng rb(11);
    Tensor<double> x = random_batch(rb, a, 4);
    CollabOutput<double> out = ens.collaborative_forward(nullptr, x, false);

    Tensor<double> s1 = ens.teacher(0).forward_segment(nullptr, x, 0, 2, false, QuantMode::Active);
    Tensor<double> s2 = ens.teacher(0).forward_segment(nullptr, s1, 2, 4, false, QuantMode::Active);
    REQUIRE(out.fused[0].values() == s1.values());
    REQUIRE(out.fused[1].values() == s2.values());
}

TEST_CASE("teacher and student features agree in shape") {
    ArchSpec a = tiny_arch();
    TeacherEnsemble<double> ens(a, QuantScheme::Hwgq, {4, 8});
    ens.init(71);
    ConvNet<double> student(a, QuantScheme::Hwgq, 2, true, "student");
    Rng rs = Rng::substream(71, "init:student");
    student.init(rs);
    Rng rb(12);
    Tensor<double> x = random_batch(rb, a, 2);
    CollabOutput<double> t = ens.collaborative_forward(nullptr, x, false);
    StudentOutput<double> s = student_forward<double>(nullptr, student, x, false);
    REQUIRE(s.features.size() == t.fused.size());
    REQUIRE(s.features.size() == a.fusion_indices.size());
    for (std::size_t k = 0; k < s.features.size(); ++k)
        REQUIRE(s.features[k].shape() == t.fused[k].shape());
    REQUIRE(s.logits.shape() == t.logits.shape());
}

TEST_CASE("gradients reach every teacher through the fusion") {
    ArchSpec a = tiny_arch();
    TeacherEnsemble<double> ens(a, QuantScheme::Hwgq, {4, 6, 8});
    ens.init(83);
    Rng rb(13);
    Tensor<double> x = random_batch(rb, a, 4);
    Graph<double> g;
    CollabOutput<double> out = ens.collaborative_forward(&g, x, true);
    Tensor<double> loss = ops::softmax_cross_entropy(&g, out.logits, {0, 1, 2, 0});
    g.backward(loss);
    for (std::size_t i = 0; i < ens.size(); ++i) {
        std::vector<ParamRef<double>> params;
        ens.teacher(i).collect_params(params);
        for (auto& p : params) {
            if (p.kind != ParamKind::Weight) continue;
            double total = 0;
            for (double v : p.tensor.grads()) total += std::abs(v);
            INFO(p.name);
            REQUIRE(total > 0.0);
        }
    }
    // importance logits receive gradient too
    double rho_total = 0;
    for (auto& r : ens.importance().rho)
        for (double v : r.grads()) rho_total += std::abs(v);
    REQUIRE(rho_total > 0.0);
}

TEST_CASE("student forward captures deterministically") {
    ArchSpec a = tiny_arch();
    ConvNet<double> student(a, QuantScheme::Hwgq, 2, true, "student");
    Rng rs = Rng::substream(5, "init:student");
    student.init(rs);
    Rng rb(14);
    Tensor<double> x = random_batch(rb, a, 2);
    StudentOutput<double> o1 = student_forward<double>(nullptr, student, x, false);
    StudentOutput<double> o2 = student_forward<double>(nullptr, student, x, false);
    REQUIRE(o1.features.size() == 2);
    REQUIRE(o1.logits.values() == o2.logits.values());
    for (std::size_t k = 0; k < o1.features.size(); ++k)
        REQUIRE(o1.features[k].values() == o2.features[k].values());
}

TEST_CASE("bypass quantization matches the unquantized network exactly") {
    ArchSpec a = tiny_arch();
    ConvNet<double> quant(a, QuantScheme::Hwgq, 2, true, "net");
    Rng r1 = Rng::substream(404, "init:net");
    quant.init(r1);
    ConvNet<double> fp(a, QuantScheme::Hwgq, 0, true, "net");
    Rng r2 = Rng::substream(404, "init:net");
    fp.init(r2);

    Rng rb(15);
    Tensor<double> x = random_batch(rb, a, 4);
    std::vector<int> labels = {0, 1, 2, 1};

    Graph<double> gq;
    Tensor<double> zq = quant.forward(&gq, x, true, QuantMode::Bypass);
    gq.backward(ops::softmax_cross_entropy(&gq, zq, labels));
    Graph<double> gf;
    Tensor<double> zf = fp.forward(&gf, x, true, QuantMode::Active);
    gf.backward(ops::softmax_cross_entropy(&gf, zf, labels));

    REQUIRE(zq.values() == zf.values());
    std::vector<ParamRef<double>> pq, pf;
    quant.collect_params(pq);
    fp.collect_params(pf);
    std::size_t compared = 0;
    for (auto& q : pq) {
        if (q.kind == ParamKind::LsqStep) continue;
        for (auto& f : pf)
            if (f.name == q.name) {
                REQUIRE(q.tensor.grads() == f.tensor.grads());
                ++compared;
            }
    }
    REQUIRE(compared == pf.size());
}

TEST_CASE("empty ensemble is rejected") {
    ArchSpec a = tiny_arch();
    REQUIRE_THROWS_AS(TeacherEnsemble<double>(a, QuantScheme::Hwgq, {}), ValueError);
}
