#pragma once

#include "doremi/backbone.hpp"
#include "doremi/checkpoint.hpp"

namespace doremi {

struct PretrainConfig {
    BackboneConfig backbone;
    int prototypes = 64;
    int proj_dim = 32;
    double teacher_temp = 0.04;
    double student_temp = 0.1;
    double center_momentum = 0.9;
    double ema_momentum = 0.996;
    double patch_extent = 0.5;
    AugmentPolicy augment;
    AdamW::Options opt;  // lr 4e-4, weight decay 0.01
    int epochs = 20;
};

struct DistillHead {
    LinearParams proj;  // widths[0] -> proj_dim
    Tensor prototypes;  // [P x proj_dim], rows kept unit-norm
};

// Teacher-student distillation state. The teacher is a structurally identical
// non-trainable copy updated only through EMA.
struct PretrainModel {
    PretrainConfig cfg;
    BackboneParams student;
    DistillHead student_head;
    BackboneParams teacher;
    DistillHead teacher_head;
    Tensor center;  // [P], EMA of teacher prototype similarities
    bool center_initialized = false;
    ParamRegistry student_params;
    ParamRegistry teacher_params;
};

PretrainModel make_pretrain_model(const PretrainConfig& cfg, std::uint64_t seed);

// teacher = m * teacher + (1 - m) * student, exact, for every parameter pair.
void ema_update(ParamRegistry& teacher, const ParamRegistry& student, double m);

void renormalize_prototypes(DistillHead& head);

// Per-point prototype-assignment cross-entropy between the sharpened,
// centered teacher and the student, averaged over surviving points.
// teacher_sim_mean, when given, receives the batch-mean teacher similarity
// per prototype (the center update input).
Tensor distill_loss(Tape& tape, const PretrainModel& model, const SceneTokens& teacher_scene,
                    const SceneTokens& student_scene, const std::vector<int>& surviving,
                    bool apply_centering, std::vector<double>* teacher_sim_mean = nullptr);

struct StepResult {
    double loss = 0.0;
    bool skipped = false;
};

// One full training transaction: teacher forward on the raw cloud, student on
// the augmented cloud, backward, optimizer step, prototype renorm, EMA and
// center updates. Augmentations that would empty the cloud skip the sample.
StepResult pretrain_step(PretrainModel& model, AdamW& opt, const PointCloud& cloud,
                         const SceneTokens& teacher_scene, double epoch_progress,
                         std::uint64_t seed);

struct PretrainRunResult {
    std::vector<double> epoch_losses;  // mean training loss per epoch
    // Distillation loss on frozen probe augmentations (one fixed augmented
    // view per scene, mid-curriculum), measured after every epoch. Free of
    // augmentation sampling noise, so trends are meaningful at small scale.
    std::vector<double> probe_losses;
    int skipped_samples = 0;
};

PretrainRunResult run_pretraining(PretrainModel& model, const CorpusManifest& corpus, int epochs,
                                  std::uint64_t seed, bool verbose = false);

// Final-block FFN of every stage; the weights every expert is seeded from.
std::vector<FfnParams> export_pretrained_ffn(const BackboneParams& student);

void save_pretrain_checkpoint(const PretrainModel& model, const std::string& path);

}  // namespace doremi
