#include "doremi/pretrain.hpp"

#include <cmath>
#include <cstdio>

#include "json.hpp"

namespace doremi {

namespace {

void register_pretrain(ParamRegistry& reg, BackboneParams& bb, DistillHead& head) {
    bb.register_params(reg, "backbone.");
    reg.add_linear("head.proj", head.proj);
    reg.add("head.prototypes", head.prototypes);
}

// Per-point projected features: voxel features gathered back to points
// through the token-to-voxel map, projected and normalized.
Tensor point_proj(Tape& tape, const BackboneParams& bb, const DistillHead& head,
                  const SceneTokens& scene) {
    BackboneOut out = backbone_forward(tape, bb, scene);
    Tensor pts = gather_rows(tape, out.full_res, scene.vox.point_to_voxel);
    Tensor proj = linear(tape, pts, head.proj.weight, head.proj.bias);
    return row_l2_normalize(tape, proj);
}

std::vector<double> unit_rows(const Tensor& t) {
    const int n = t.rows(), d = t.cols();
    std::vector<double> out(t.values().begin(), t.values().end());
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += out[static_cast<std::size_t>(i) * d + j] *
                                         out[static_cast<std::size_t>(i) * d + j];
        const double inv = 1.0 / std::max(std::sqrt(s), 1e-12);
        for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(i) * d + j] *= inv;
    }
    return out;
}

}  // namespace

PretrainModel make_pretrain_model(const PretrainConfig& cfg, std::uint64_t seed) {
    PretrainModel m;
    m.cfg = cfg;
    Rng rng(mix_seed(seed, 0x9E7EA11ULL));
    m.student = make_backbone(cfg.backbone, rng, true);
    m.student_head.proj = make_linear(cfg.backbone.widths[0], cfg.proj_dim, rng, true);
    m.student_head.prototypes = Tensor::randn({cfg.prototypes, cfg.proj_dim}, rng, 1.0, true);
    renormalize_prototypes(m.student_head);
    m.center = Tensor::zeros({cfg.prototypes}, false);

    register_pretrain(m.student_params, m.student, m.student_head);

    // Teacher starts as an exact copy with gradients disabled.
    Rng rng2(mix_seed(seed, 0x9E7EA11ULL));
    m.teacher = make_backbone(cfg.backbone, rng2, false);
    m.teacher_head.proj = make_linear(cfg.backbone.widths[0], cfg.proj_dim, rng2, false);
    m.teacher_head.prototypes = Tensor::randn({cfg.prototypes, cfg.proj_dim}, rng2, 1.0, false);
    register_pretrain(m.teacher_params, m.teacher, m.teacher_head);
    for (std::size_t i = 0; i < m.teacher_params.entries().size(); ++i) {
        const auto& src = m.student_params.entries()[i].second;
        auto& dst = m.teacher_params.entries()[i].second;
        std::copy(src.values().begin(), src.values().end(), dst.node->value.begin());
    }
    return m;
}

void ema_update(ParamRegistry& teacher, const ParamRegistry& student, double m) {
    if (m <= 0.0 || m >= 1.0) {
        if (m != 0.0 && m != 1.0) throw ConfigError("EMA momentum must lie in [0, 1]");
    }
    if (teacher.entries().size() != student.entries().size())
        throw ConfigError("EMA: parameter sets differ");
    for (std::size_t i = 0; i < teacher.entries().size(); ++i) {
        Tensor tt = teacher.entries()[i].second;  // shared handle
        auto t = tt.values();
        auto s = student.entries()[i].second.values();
        for (std::size_t j = 0; j < t.size(); ++j) t[j] = m * t[j] + (1.0 - m) * s[j];
    }
}

void renormalize_prototypes(DistillHead& head) {
    const int p = head.prototypes.rows(), d = head.prototypes.cols();
    auto v = head.prototypes.values();
    for (int i = 0; i < p; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += v[static_cast<std::size_t>(i) * d + j] *
                                         v[static_cast<std::size_t>(i) * d + j];
        const double inv = 1.0 / std::max(std::sqrt(s), 1e-12);
        for (int j = 0; j < d; ++j) v[static_cast<std::size_t>(i) * d + j] *= inv;
    }
}

Tensor distill_loss(Tape& tape, const PretrainModel& model, const SceneTokens& teacher_scene,
                    const SceneTokens& student_scene, const std::vector<int>& surviving,
                    bool apply_centering, std::vector<double>* teacher_sim_mean) {
    const int p = model.cfg.prototypes;

    // Teacher path carries no gradients; its params are non-trainable, so
    // nothing lands on the tape.
    Tensor t_proj = point_proj(tape, model.teacher, model.teacher_head, teacher_scene);
    std::vector<double> protos_t = unit_rows(model.teacher_head.prototypes);
    Tensor protos_t_tensor =
        Tensor::from_data(model.teacher_head.prototypes.shape(), std::move(protos_t), false);
    Tensor t_sim = matmul_bt(tape, t_proj, protos_t_tensor);  // [N_raw x P]

    if (teacher_sim_mean) {
        teacher_sim_mean->assign(static_cast<std::size_t>(p), 0.0);
        const int n = t_sim.rows();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < p; ++j)
                (*teacher_sim_mean)[static_cast<std::size_t>(j)] +=
                    t_sim.at(static_cast<std::int64_t>(i) * p + j);
        for (auto& v : *teacher_sim_mean) v /= n;
    }

    // Targets for surviving points: softmax((sim - center) / teacher_temp).
    const std::size_t ns = surviving.size();
    std::vector<double> target(ns * static_cast<std::size_t>(p));
    for (std::size_t r = 0; r < ns; ++r) {
        const double* row =
            t_sim.values().data() + static_cast<std::size_t>(surviving[r]) * p;
        double m = -1e300;
        for (int j = 0; j < p; ++j) {
            double v = row[j];
            if (apply_centering) v -= model.center.at(j);
            v /= model.cfg.teacher_temp;
            target[r * static_cast<std::size_t>(p) + static_cast<std::size_t>(j)] = v;
            m = std::max(m, v);
        }
        double s = 0.0;
        for (int j = 0; j < p; ++j) {
            double& v = target[r * static_cast<std::size_t>(p) + static_cast<std::size_t>(j)];
            v = std::exp(v - m);
            s += v;
        }
        for (int j = 0; j < p; ++j)
            target[r * static_cast<std::size_t>(p) + static_cast<std::size_t>(j)] /= s;
    }
    Tensor target_tensor =
        Tensor::from_data({static_cast<int>(ns), p}, std::move(target), false);

    Tensor s_proj = point_proj(tape, model.student, model.student_head, student_scene);
    Tensor s_sim = matmul_bt(tape, s_proj, model.student_head.prototypes);
    Tensor s_logits = scale(tape, s_sim, 1.0 / model.cfg.student_temp);
    return cross_entropy_soft(tape, s_logits, target_tensor);
}

StepResult pretrain_step(PretrainModel& model, AdamW& opt, const PointCloud& cloud,
                         const SceneTokens& teacher_scene, double epoch_progress,
                         std::uint64_t seed) {
    StepResult result;
    auto patches = partition_patches(cloud.positions, model.cfg.patch_extent);
    AugmentedCloud aug;
    try {
        aug = augment_student(cloud, patches, model.cfg.augment, epoch_progress, seed);
    } catch (const GenerationError&) {
        std::fprintf(stderr, "warning: augmentation emptied a sample; skipping\n");
        result.skipped = true;
        return result;
    }
    SceneTokens student_scene = build_scene_tokens(aug.cloud, model.cfg.backbone);

    Tape tape;
    std::vector<double> sim_mean;
    Tensor loss = distill_loss(tape, model, teacher_scene, student_scene, aug.surviving,
                               /*apply_centering=*/true, &sim_mean);
    opt.zero_grad();
    tape.backward(loss);
    opt.step();
    renormalize_prototypes(model.student_head);
    ema_update(model.teacher_params, model.student_params, model.cfg.ema_momentum);

    // First batch seeds the center so warm-up does not shift the targets.
    auto center = model.center.values();
    if (!model.center_initialized) {
        for (std::size_t j = 0; j < center.size(); ++j) center[j] = sim_mean[j];
        model.center_initialized = true;
    } else {
        for (std::size_t j = 0; j < center.size(); ++j)
            center[j] = model.cfg.center_momentum * center[j] +
                        (1.0 - model.cfg.center_momentum) * sim_mean[j];
    }

    result.loss = loss.scalar();
    return result;
}

PretrainRunResult run_pretraining(PretrainModel& model, const CorpusManifest& corpus, int epochs,
                                  std::uint64_t seed, bool verbose) {
    PretrainRunResult out;
    AdamW opt(model.student_params, model.cfg.opt);

    struct CachedScene {
        PointCloud cloud;
        SceneTokens tokens;
        SceneTokens probe_tokens;  // frozen augmented view
        std::vector<int> probe_surviving;
    };
    std::vector<CachedScene> scenes;
    for (int id : corpus.training_domain_ids()) {
        const DomainEntry& d = corpus.domain(id);
        for (int i = 0; i < d.train.count; ++i) {
            CachedScene cs;
            cs.cloud = generate_scene(d.spec, d.train.seed_base + static_cast<std::uint64_t>(i));
            cs.tokens = build_scene_tokens(cs.cloud, model.cfg.backbone);
            auto patches = partition_patches(cs.cloud.positions, model.cfg.patch_extent);
            AugmentedCloud aug = augment_student(
                cs.cloud, patches, model.cfg.augment, 0.5,
                mix_seed(seed, 0xBEEF00ULL + scenes.size()));
            cs.probe_tokens = build_scene_tokens(aug.cloud, model.cfg.backbone);
            cs.probe_surviving = std::move(aug.surviving);
            scenes.push_back(std::move(cs));
        }
    }
    if (scenes.empty()) throw ConfigError("pretraining corpus has no training scenes");

    std::uint64_t step_seed = mix_seed(seed, 0x57E9ULL);
    for (int e = 0; e < epochs; ++e) {
        const double progress = epochs > 1 ? static_cast<double>(e) / (epochs - 1) : 0.0;
        double total = 0.0;
        int counted = 0;
        for (std::size_t i = 0; i < scenes.size(); ++i) {
            StepResult r = pretrain_step(model, opt, scenes[i].cloud, scenes[i].tokens, progress,
                                         mix_seed(step_seed, static_cast<std::uint64_t>(e) * 10007 + i));
            if (r.skipped) {
                ++out.skipped_samples;
                continue;
            }
            total += r.loss;
            ++counted;
        }
        out.epoch_losses.push_back(counted > 0 ? total / counted : 0.0);

        double probe = 0.0;
        for (const auto& cs : scenes) {
            Tape tape;
            probe += distill_loss(tape, model, cs.tokens, cs.probe_tokens, cs.probe_surviving,
                                  /*apply_centering=*/true)
                         .scalar();
        }
        out.probe_losses.push_back(probe / static_cast<double>(scenes.size()));
        if (verbose)
            std::fprintf(stderr, "pretrain epoch %d/%d loss %.6f probe %.6f\n", e + 1, epochs,
                         out.epoch_losses.back(), out.probe_losses.back());
    }
    return out;
}

std::vector<FfnParams> export_pretrained_ffn(const BackboneParams& student) {
    std::vector<FfnParams> out;
    for (const auto& stage : student.stages) {
        if (stage.blocks.empty()) throw FormatError("backbone stage has no blocks to export");
        out.push_back(clone_ffn(stage.blocks.back().ffn, false));
    }
    return out;
}

void save_pretrain_checkpoint(const PretrainModel& model, const std::string& path) {
    nlohmann::json meta;
    meta["kind"] = "pretrain";
    meta["widths"] = model.cfg.backbone.widths;
    meta["blocks"] = model.cfg.backbone.blocks;
    meta["in_dim"] = model.cfg.backbone.in_dim;
    meta["prototypes"] = model.cfg.prototypes;
    meta["proj_dim"] = model.cfg.proj_dim;
    save_checkpoint(path, model.student_params, meta.dump());
}

}  // namespace doremi
