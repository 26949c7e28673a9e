#pragma once

#include <functional>
#include <memory>

#include "doremi/sparse_conv.hpp"

namespace doremi {

struct BackboneConfig {
    int in_dim = 4;  // r, g, b, normalized height
    std::vector<int> widths{32, 64, 96};
    std::vector<int> blocks{2, 2, 2};
    int ffn_mult = 4;
    int conv_extent = 3;
    int pool_factor = 2;
    double voxel_size = 0.05;
    double z_scale = 2.2;

    int stages() const { return static_cast<int>(widths.size()); }
    void validate() const;
};

struct BlockParams {
    SparseConvKernel conv;
    FfnParams ffn;
};

struct StageParams {
    std::vector<BlockParams> blocks;
};

// U-shaped encoder/decoder over the voxel pyramid. Each block is a
// submanifold convolution followed by a residual FFN; the decoder projects
// coarse features back up with skip additions and a final layer norm.
struct BackboneParams {
    BackboneConfig cfg;
    LinearParams stem;
    std::vector<StageParams> stages;
    std::vector<LinearParams> down;  // widths[s] -> widths[s+1]
    std::vector<LinearParams> up;    // widths[s+1] -> widths[s]
    Tensor out_gain, out_offset;

    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

BackboneParams make_backbone(const BackboneConfig& cfg, Rng& rng, bool trainable = true);

// Static per-scene structure: voxelization, per-stage grids, convolution
// plans, and pooling maps. Built once per scene and reused across epochs.
struct SceneTokens {
    Voxelization vox;
    Tensor input_feats;  // [M0 x in_dim], constant
    std::vector<SparseVoxelGrid> grids;  // structure only, per stage
    std::vector<std::shared_ptr<ConvPlan>> plans;
    std::vector<std::shared_ptr<PoolingMap>> pools;  // size stages-1
    std::vector<std::uint32_t> point_labels;
    int domain_id = 0;
    int points = 0;
};

SceneTokens build_scene_tokens(const PointCloud& cloud, const BackboneConfig& cfg);

// Replaces the plain FFN at (stage, block) when set; h is the block's
// post-convolution feature tensor.
using FfnOverride =
    std::function<Tensor(Tape& tape, int stage, int block, const Tensor& h)>;

struct BackboneOut {
    Tensor full_res;                 // [M0 x widths[0]]
    std::vector<Tensor> stage_out;   // per-stage encoder outputs
};

BackboneOut backbone_forward(Tape& tape, const BackboneParams& params, const SceneTokens& scene,
                             const FfnOverride& ffn_override = nullptr);

}  // namespace doremi
