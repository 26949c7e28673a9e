#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "doremi/moe.hpp"
#include "doremi/pretrain.hpp"
#include "oracles.hpp"

using namespace doremi;

namespace {

PretrainConfig tiny_config() {
    PretrainConfig cfg;
    cfg.backbone.widths = {8, 12};
    cfg.backbone.blocks = {1, 1};
    cfg.backbone.ffn_mult = 2;
    cfg.backbone.voxel_size = 0.25;
    cfg.prototypes = 12;
    cfg.proj_dim = 8;
    return cfg;
}

DomainSpec small_domain() {
    DomainSpec s;
    s.domain_id = 0;
    s.name = "tiny";
    s.density_points_per_m3 = 250.0;
    s.class_set = {0, 1, 2, 3};
    return s;
}

CorpusManifest tiny_corpus(int scenes) {
    CorpusManifest m;
    DomainEntry d;
    d.spec = small_domain();
    d.train = {10, scenes};
    d.eval = {900, 1};
    m.domains.push_back(d);
    return m;
}

}  // namespace

TEST_CASE("ema_update: m = 1 freezes, m = 0 copies, closed form at 0.996") {
    Rng rng(1);
    ParamRegistry teacher, student;
    Tensor t = Tensor::randn({6}, rng, 1.0, false);
    Tensor s = Tensor::randn({6}, rng, 1.0, true);
    teacher.add("p", t);
    student.add("p", s);

    std::vector<double> t0(t.values().begin(), t.values().end());
    ema_update(teacher, student, 1.0);
    CHECK(std::equal(t.values().begin(), t.values().end(), t0.begin()));

    ema_update(teacher, student, 0.0);
    CHECK(std::equal(t.values().begin(), t.values().end(), s.values().begin()));

    // Reset and iterate 100 steps with a constant student.
    std::copy(t0.begin(), t0.end(), t.values().begin());
    for (int i = 0; i < 100; ++i) ema_update(teacher, student, 0.996);
    const double decay = std::pow(0.996, 100);
    for (int i = 0; i < 6; ++i) {
        const double want =
            s.values()[static_cast<std::size_t>(i)] +
            decay * (t0[static_cast<std::size_t>(i)] - s.values()[static_cast<std::size_t>(i)]);
        CHECK(std::fabs(t.values()[static_cast<std::size_t>(i)] - want) <= 1e-12);
    }

    CHECK_THROWS_AS(ema_update(teacher, student, 1.5), ConfigError);
}

TEST_CASE("pretrain model: teacher mirrors student and takes no gradients") {
    PretrainModel m = make_pretrain_model(tiny_config(), 7);
    REQUIRE(m.teacher_params.entries().size() == m.student_params.entries().size());
    for (std::size_t i = 0; i < m.teacher_params.entries().size(); ++i) {
        const auto& t = m.teacher_params.entries()[i].second;
        const auto& s = m.student_params.entries()[i].second;
        CHECK(!t.requires_grad());
        CHECK(std::equal(t.values().begin(), t.values().end(), s.values().begin()));
    }

    // A full distillation forward must leave no tape trace of teacher params.
    PointCloud cloud = generate_scene(small_domain(), 3);
    SceneTokens scene = build_scene_tokens(cloud, m.cfg.backbone);
    std::vector<int> surviving(cloud.size());
    for (std::size_t i = 0; i < surviving.size(); ++i) surviving[i] = static_cast<int>(i);
    Tape tape;
    Tensor loss = distill_loss(tape, m, scene, scene, surviving, true);
    tape.backward(loss);
    for (const auto& [name, t] : m.teacher_params.entries()) {
        CHECK(!tape.touches(t.node.get()));
        CHECK(!t.has_grad());
    }
}

TEST_CASE("distill self-consistency: equal temps, no centering, raw inputs") {
    PretrainConfig cfg = tiny_config();
    cfg.teacher_temp = cfg.student_temp = 0.1;
    PretrainModel m = make_pretrain_model(cfg, 11);

    PointCloud cloud = generate_scene(small_domain(), 5);
    SceneTokens scene = build_scene_tokens(cloud, cfg.backbone);
    std::vector<int> surviving(cloud.size());
    for (std::size_t i = 0; i < surviving.size(); ++i) surviving[i] = static_cast<int>(i);

    Tape tape;
    Tensor loss = distill_loss(tape, m, scene, scene, surviving, /*apply_centering=*/false);

    // Teacher and student are identical, so the per-point loss equals the
    // entropy of the shared assignment and the logit gradient vanishes.
    Tensor t_proj_probe = Tensor();  // recompute the shared assignment directly
    Tape probe;
    BackboneOut bb = backbone_forward(probe, m.student, scene);
    Tensor pts = gather_rows(probe, bb.full_res, scene.vox.point_to_voxel);
    Tensor proj = linear(probe, pts, m.student_head.proj.weight, m.student_head.proj.bias);
    Tensor normed = row_l2_normalize(probe, proj);
    Tensor sim = matmul_bt(probe, normed, m.student_head.prototypes);
    Tensor logits = scale(probe, sim, 1.0 / cfg.student_temp);
    Tensor q = softmax_last(probe, logits);
    double entropy = 0.0;
    const int P = cfg.prototypes;
    for (int i = 0; i < q.rows(); ++i)
        for (int j = 0; j < P; ++j) {
            const double v = q.at(static_cast<std::int64_t>(i) * P + j);
            if (v > 0.0) entropy -= v * std::log(v);
        }
    entropy /= q.rows();
    CHECK(loss.scalar() == doctest::Approx(entropy).epsilon(1e-9));
    (void)t_proj_probe;

    // Gradient of CE(q, logits) w.r.t. logits is (softmax - q) / n = 0.
    Tape gtape;
    Tensor sim2 = Tensor::from_data(sim.shape(),
                                    {sim.values().begin(), sim.values().end()}, true);
    Tensor logits2 = scale(gtape, sim2, 1.0 / cfg.student_temp);
    Tensor target = Tensor::from_data(q.shape(), {q.values().begin(), q.values().end()}, false);
    Tensor match = cross_entropy_soft(gtape, logits2, target);
    gtape.backward(match);
    for (double g : sim2.grad()) CHECK(std::fabs(g) <= 1e-12);
}

TEST_CASE("distill loss is invariant to point permutation of the input cloud") {
    PretrainConfig cfg = tiny_config();
    PretrainModel m = make_pretrain_model(cfg, 13);
    PointCloud cloud = generate_scene(small_domain(), 8);

    SceneTokens scene = build_scene_tokens(cloud, cfg.backbone);
    std::vector<int> all(cloud.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    Tape t1;
    const double a = distill_loss(t1, m, scene, scene, all, true).scalar();

    Rng rng(21);
    std::vector<int> perm = all;
    rng.shuffle(perm);
    PointCloud shuffled;
    shuffled.domain_id = cloud.domain_id;
    for (int i : perm) {
        shuffled.positions.push_back(cloud.positions[static_cast<std::size_t>(i)]);
        shuffled.colors.push_back(cloud.colors[static_cast<std::size_t>(i)]);
        shuffled.labels.push_back(cloud.labels[static_cast<std::size_t>(i)]);
    }
    SceneTokens scene2 = build_scene_tokens(shuffled, cfg.backbone);
    Tape t2;
    const double b = distill_loss(t2, m, scene2, scene2, all, true).scalar();
    CHECK(std::fabs(a - b) <= 1e-9);
}

TEST_CASE("distill gradient matches finite differences on a small cloud") {
    PretrainConfig cfg = tiny_config();
    cfg.backbone.widths = {6, 8};
    cfg.prototypes = 6;
    cfg.proj_dim = 5;
    PretrainModel m = make_pretrain_model(cfg, 17);

    // 32-point cloud.
    PointCloud cloud;
    cloud.domain_id = 0;
    Rng rng(23);
    for (int i = 0; i < 32; ++i) {
        cloud.positions.push_back({rng.uniform(0.0, 1.2), rng.uniform(0.0, 1.2),
                                   rng.uniform(0.0, 1.2)});
        cloud.colors.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
        cloud.labels.push_back(0);
    }
    SceneTokens scene = build_scene_tokens(cloud, cfg.backbone);
    std::vector<int> surviving(cloud.size());
    for (std::size_t i = 0; i < surviving.size(); ++i) surviving[i] = static_cast<int>(i);

    auto forward = [&](Tape& t) {
        return distill_loss(t, m, scene, scene, surviving, true);
    };
    Tape tape;
    Tensor loss = forward(tape);
    tape.backward(loss);

    // Spot-check representative parameters across the student.
    std::vector<Tensor> checked{
        m.student_head.prototypes,
        m.student_head.proj.weight,
        m.student.stem.weight,
        m.student.stages[0].blocks[0].conv.weight,
        m.student.stages[0].blocks[0].ffn.up.weight,
        m.student.out_gain,
    };
    for (Tensor& p : checked) {
        std::vector<double> analytic(p.grad().begin(), p.grad().end());
        auto recompute = [&] {
            Tape t;
            return forward(t).scalar();
        };
        CHECK(testing::gradcheck_param(recompute, p, analytic));
    }
}

TEST_CASE("pretrain_step keeps prototypes unit-norm and updates the teacher") {
    PretrainConfig cfg = tiny_config();
    PretrainModel m = make_pretrain_model(cfg, 29);
    AdamW opt(m.student_params, cfg.opt);
    PointCloud cloud = generate_scene(small_domain(), 31);
    SceneTokens scene = build_scene_tokens(cloud, cfg.backbone);

    std::vector<double> teacher_before(
        m.teacher_params.entries()[0].second.values().begin(),
        m.teacher_params.entries()[0].second.values().end());
    StepResult r = pretrain_step(m, opt, cloud, scene, 0.0, 77);
    CHECK(!r.skipped);
    CHECK(std::isfinite(r.loss));

    const int P = cfg.prototypes, D = cfg.proj_dim;
    for (int i = 0; i < P; ++i) {
        double s = 0.0;
        for (int j = 0; j < D; ++j) {
            const double v = m.student_head.prototypes.at(static_cast<std::int64_t>(i) * D + j);
            s += v * v;
        }
        CHECK(std::fabs(std::sqrt(s) - 1.0) <= 1e-12);
    }
    CHECK(!std::equal(teacher_before.begin(), teacher_before.end(),
                      m.teacher_params.entries()[0].second.values().begin()));
}

TEST_CASE("pretraining loss on a fixed 8-scene corpus trends down over 50 epochs") {
    PretrainConfig cfg = tiny_config();
    cfg.epochs = 50;
    PretrainModel m = make_pretrain_model(cfg, 37);
    PretrainRunResult r = run_pretraining(m, tiny_corpus(8), cfg.epochs, 37);
    REQUIRE(static_cast<int>(r.probe_losses.size()) == cfg.epochs);
    // Non-increasing 5-epoch moving average of the probe loss.
    auto avg = [&](int start) {
        double s = 0.0;
        for (int i = start; i < start + 5; ++i) s += r.probe_losses[static_cast<std::size_t>(i)];
        return s / 5.0;
    };
    for (int start = 0; start + 6 <= cfg.epochs; ++start)
        CHECK(avg(start + 1) <= avg(start) + 1e-9);
    CHECK(avg(cfg.epochs - 5) < avg(0));
}

TEST_CASE("checkpoint: export, reload, duplication, stable hash") {
    PretrainConfig cfg = tiny_config();
    PretrainModel m = make_pretrain_model(cfg, 41);
    const std::string path = "test_pretrain.ckpt";
    save_pretrain_checkpoint(m, path);

    // Bit-exact round trip into an identically shaped model.
    PretrainModel m2 = make_pretrain_model(cfg, 999);
    load_into(load_checkpoint(path), m2.student_params);
    for (std::size_t i = 0; i < m.student_params.entries().size(); ++i) {
        const auto& a = m.student_params.entries()[i].second;
        const auto& b = m2.student_params.entries()[i].second;
        CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
    }

    // Per-stage FFN export feeds K + 1 identical copies.
    auto ffns = export_pretrained_ffn(m.student);
    REQUIRE(ffns.size() == m.cfg.backbone.widths.size());
    Rng rng(5);
    Tensor emb = Tensor::randn({1, 4}, rng, 0.02, true);
    DoremiLayer layer = build_layer_from_pretrained(ffns[0], 4, cfg.backbone.widths[0], 4, emb,
                                                    {0}, rng);
    for (const auto& e : layer.bank.do_experts)
        CHECK(std::equal(e.up.weight.values().begin(), e.up.weight.values().end(),
                         layer.bank.re_expert.up.weight.values().begin()));

    // Same seed, fresh run: same bytes.
    PretrainModel m3 = make_pretrain_model(cfg, 41);
    const std::string path3 = "test_pretrain_b.ckpt";
    save_pretrain_checkpoint(m3, path3);
    CHECK(file_hash(path) == file_hash(path3));

    std::filesystem::remove(path);
    std::filesystem::remove(path3);
}
