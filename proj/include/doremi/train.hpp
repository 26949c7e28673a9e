#pragma once

#include "doremi/metrics.hpp"
#include "doremi/moe.hpp"
#include "doremi/pretrain.hpp"

namespace doremi {

struct TrainConfig {
    std::string corpus;  // manifest path
    int epochs = 30;
    int batch_scenes = 1;
    double lr = 4e-4;
    double weight_decay = 0.01;
    double lambda_balance = 0.001;
    int experts = 8;
    int k_min = 1;
    int k_max = 8;
    int fixed_k = 2;  // used when use_eda is off
    bool use_re = true;
    bool use_dsr = true;
    bool use_eda = true;
    std::vector<std::pair<int, int>> placement{{0, 1}, {1, 1}, {2, 1}};
    std::uint64_t seed = 7;
    std::string eval_split = "eval";
    std::string pretrained;  // checkpoint path; empty = random init
    double voxel_size = 0.1;
    std::vector<int> widths{32, 64, 96};
    std::vector<int> blocks{2, 2, 2};
    int ffn_mult = 4;
    double tau = 0.07;
    int domain_embed_dim = 32;
    int n_classes = kNumSceneClasses;
    std::vector<std::string> grid_rows;        // ablation grid mode
    std::vector<std::uint64_t> grid_seeds;

    BackboneConfig backbone_config() const;
    void validate() const;
};

TrainConfig load_train_config(const std::string& path);  // unknown keys rejected
std::string train_config_json(const TrainConfig& cfg);
TrainConfig parse_train_config(const std::string& json_text);

// Flag presets for the ablation grid.
TrainConfig apply_grid_row(TrainConfig base, const std::string& row);

// An insertion point where the block FFN is replaced by a DoReMi layer.
// The Re expert shares the block's (frozen) FFN tensors.
struct MoePoint {
    int stage = 0;
    int block = 0;
    bool routed = true;  // false: single Do expert + Re, no gate
    DoremiLayer layer;
};

struct SegModel {
    TrainConfig cfg;
    BackboneParams backbone;
    Tensor domain_embeddings;  // defined only when routing is enabled
    std::vector<int> domain_ids;
    std::vector<MoePoint> moe;
    LinearParams head;
    Tensor class_embeddings;  // [C x widths[0]], rows kept unit-norm
    ParamRegistry params;
    bool unseen_mode = false;

    int expert_count() const { return cfg.use_dsr ? cfg.experts : 1; }
    void renormalize_class_embeddings();
};

SegModel make_seg_model(const TrainConfig& cfg, const CorpusManifest& corpus, std::uint64_t seed);

void save_seg_checkpoint(const SegModel& model, const std::string& path);
SegModel load_seg_model(const std::string& path, const CorpusManifest& corpus);

struct ModelForward {
    Tensor point_feats;   // head output per point
    Tensor point_logits;  // cosine / tau against the class table
    std::vector<LayerForward> moe;
    Tensor balance_sum;  // scalar; undefined when no routed layer ran
};

ModelForward seg_forward(Tape& tape, SegModel& model, const SceneTokens& scene);

// Cosine-similarity classification head loss; rows with labels outside the
// table are excluded (count reported through excluded_out).
Tensor infonce_class_loss(Tape& tape, const Tensor& features, const std::vector<int>& labels,
                          const Tensor& class_embeddings, double tau, int* excluded_out = nullptr);

// Standard cross-entropy over given probabilities (log clamped at 1e-12).
Tensor seg_cross_entropy(Tape& tape, const Tensor& probs, const std::vector<int>& labels);

struct EvalOptions {
    std::string split = "eval";
    std::vector<int> domain_ids;  // empty = model's training domains
    std::string trace_dir;        // empty = no trace files
    int threads = 1;
};

MetricsReport evaluate(SegModel& model, const CorpusManifest& corpus, const EvalOptions& opt);

struct JointTrainResult {
    std::vector<double> epoch_losses;
    MetricsReport eval_report;
    std::uint64_t checkpoint_hash = 0;
};

// Round-robin multi-domain supervised training with the InfoNCE head and
// lambda-weighted balance losses; writes checkpoint/report/traces into
// out_dir when given.
JointTrainResult joint_train(const TrainConfig& cfg, const CorpusManifest& corpus,
                             SegModel& model, const std::string& out_dir = "",
                             bool verbose = false);

struct FinetuneResult {
    MetricsReport zero_shot;
    MetricsReport final_report;
    std::vector<double> epoch_losses;
};

// Held-out-domain protocol: averaged domain embedding, task loss
// (seg cross-entropy) plus lambda * balance.
FinetuneResult finetune(SegModel& model, const CorpusManifest& corpus, int target_domain,
                        int epochs, std::uint64_t seed, const std::string& out_dir = "",
                        bool verbose = false);

struct BenchResult {
    std::int64_t activated_params = 0;
    double mean_active_k = 0.0;
    double throughput_scenes_per_s = 0.0;
};

BenchResult bench(SegModel& model, const CorpusManifest& corpus, const std::string& split,
                  int timed_passes = 5);

struct AblationRow {
    std::string name;
    std::uint64_t seed;
    MetricsReport report;
};

std::vector<AblationRow> run_ablation(const TrainConfig& base, const CorpusManifest& corpus,
                                      const std::vector<std::string>& rows,
                                      const std::vector<std::uint64_t>& seeds,
                                      const std::string& out_dir = "", bool verbose = false,
                                      int parallel_jobs = 1);

}  // namespace doremi
