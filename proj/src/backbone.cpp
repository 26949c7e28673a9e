#include "doremi/backbone.hpp"

namespace doremi {

void BackboneConfig::validate() const {
    if (widths.empty() || widths.size() != blocks.size())
        throw ConfigError("backbone widths and block counts must align");
    if (in_dim < 1) throw ConfigError("backbone input width must be positive");
    if (voxel_size <= 0.0) throw ConfigError("voxel size must be positive");
    for (int b : blocks)
        if (b < 1) throw ConfigError("each stage needs at least one block");
}

void BackboneParams::register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add_linear(prefix + "stem", stem);
    for (std::size_t s = 0; s < stages.size(); ++s) {
        for (std::size_t b = 0; b < stages[s].blocks.size(); ++b) {
            const std::string bp =
                prefix + "stage" + std::to_string(s) + ".block" + std::to_string(b);
            const BlockParams& blk = stages[s].blocks[b];
            reg.add(bp + ".conv.weight", blk.conv.weight);
            reg.add(bp + ".conv.bias", blk.conv.bias);
            reg.add(bp + ".conv.gain", blk.conv.gain);
            reg.add(bp + ".conv.offset", blk.conv.offset);
            reg.add_ffn(bp + ".ffn", blk.ffn);
        }
    }
    for (std::size_t s = 0; s < down.size(); ++s)
        reg.add_linear(prefix + "down" + std::to_string(s), down[s]);
    for (std::size_t s = 0; s < up.size(); ++s)
        reg.add_linear(prefix + "up" + std::to_string(s), up[s]);
    reg.add(prefix + "out.gain", out_gain);
    reg.add(prefix + "out.offset", out_offset);
}

BackboneParams make_backbone(const BackboneConfig& cfg, Rng& rng, bool trainable) {
    cfg.validate();
    BackboneParams p;
    p.cfg = cfg;
    p.stem = make_linear(cfg.in_dim, cfg.widths[0], rng, trainable);
    for (int s = 0; s < cfg.stages(); ++s) {
        StageParams stage;
        for (int b = 0; b < cfg.blocks[static_cast<std::size_t>(s)]; ++b) {
            BlockParams blk;
            blk.conv = make_conv(cfg.widths[static_cast<std::size_t>(s)],
                                 cfg.widths[static_cast<std::size_t>(s)], cfg.conv_extent, rng,
                                 trainable);
            blk.ffn = make_ffn(cfg.widths[static_cast<std::size_t>(s)], cfg.ffn_mult, rng,
                               trainable);
            stage.blocks.push_back(std::move(blk));
        }
        p.stages.push_back(std::move(stage));
    }
    for (int s = 0; s + 1 < cfg.stages(); ++s) {
        p.down.push_back(make_linear(cfg.widths[static_cast<std::size_t>(s)],
                                     cfg.widths[static_cast<std::size_t>(s + 1)], rng, trainable));
        p.up.push_back(make_linear(cfg.widths[static_cast<std::size_t>(s + 1)],
                                   cfg.widths[static_cast<std::size_t>(s)], rng, trainable));
    }
    p.out_gain = Tensor::full({cfg.widths[0]}, 1.0, trainable);
    p.out_offset = Tensor::zeros({cfg.widths[0]}, trainable);
    return p;
}

SceneTokens build_scene_tokens(const PointCloud& cloud, const BackboneConfig& cfg) {
    cfg.validate();
    SceneTokens scene;
    scene.domain_id = cloud.domain_id;
    scene.points = static_cast<int>(cloud.size());
    scene.point_labels = cloud.labels;
    scene.vox = voxelize(cloud, cfg.voxel_size);

    const SparseVoxelGrid& g0 = scene.vox.grid;
    const int m0 = g0.rows();
    // Voxel attributes are [r, g, b, x, y, z]; the network consumes color and
    // normalized height.
    std::vector<double> in(static_cast<std::size_t>(m0) * cfg.in_dim, 0.0);
    for (int i = 0; i < m0; ++i) {
        const double* a = g0.row(i);
        in[static_cast<std::size_t>(i) * cfg.in_dim + 0] = a[0];
        in[static_cast<std::size_t>(i) * cfg.in_dim + 1] = a[1];
        in[static_cast<std::size_t>(i) * cfg.in_dim + 2] = a[2];
        if (cfg.in_dim > 3)
            in[static_cast<std::size_t>(i) * cfg.in_dim + 3] = a[5] / cfg.z_scale;
    }
    scene.input_feats = Tensor::from_data({m0, cfg.in_dim}, std::move(in), false);

    scene.grids.push_back(g0);
    scene.grids[0].features.clear();
    scene.grids[0].width = 0;
    for (int s = 0; s + 1 < cfg.stages(); ++s) {
        auto map = build_pooling_map(scene.grids[static_cast<std::size_t>(s)], cfg.pool_factor);
        scene.pools.push_back(map);
        scene.grids.push_back(
            child_grid(scene.grids[static_cast<std::size_t>(s)], *map, cfg.pool_factor));
    }
    for (int s = 0; s < cfg.stages(); ++s)
        scene.plans.push_back(
            build_conv_plan(scene.grids[static_cast<std::size_t>(s)], cfg.conv_extent));
    return scene;
}

BackboneOut backbone_forward(Tape& tape, const BackboneParams& params, const SceneTokens& scene,
                             const FfnOverride& ffn_override) {
    const BackboneConfig& cfg = params.cfg;
    BackboneOut out;

    Tensor x = linear(tape, scene.input_feats, params.stem.weight, params.stem.bias);
    for (int s = 0; s < cfg.stages(); ++s) {
        const auto& plan = scene.plans[static_cast<std::size_t>(s)];
        for (std::size_t b = 0; b < params.stages[static_cast<std::size_t>(s)].blocks.size();
             ++b) {
            const BlockParams& blk = params.stages[static_cast<std::size_t>(s)].blocks[b];
            Tensor h = submanifold_conv(tape, x, plan, blk.conv);
            Tensor f;
            if (ffn_override) f = ffn_override(tape, s, static_cast<int>(b), h);
            if (!f.defined()) f = ffn(tape, h, blk.ffn);
            x = add(tape, h, f);
        }
        out.stage_out.push_back(x);
        if (s + 1 < cfg.stages()) {
            Tensor pooled = grid_pool(tape, x, scene.pools[static_cast<std::size_t>(s)]);
            x = linear(tape, pooled, params.down[static_cast<std::size_t>(s)].weight,
                       params.down[static_cast<std::size_t>(s)].bias);
        }
    }

    // Decoder: project, unpool, add skip.
    Tensor f = out.stage_out.back();
    for (int s = cfg.stages() - 2; s >= 0; --s) {
        Tensor small = linear(tape, f, params.up[static_cast<std::size_t>(s)].weight,
                              params.up[static_cast<std::size_t>(s)].bias);
        Tensor upsampled = grid_unpool(tape, small, scene.pools[static_cast<std::size_t>(s)]);
        f = add(tape, upsampled, out.stage_out[static_cast<std::size_t>(s)]);
    }
    out.full_res = layer_norm(tape, f, params.out_gain, params.out_offset);
    return out;
}

}  // namespace doremi
