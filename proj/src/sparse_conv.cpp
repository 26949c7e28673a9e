#include "doremi/sparse_conv.hpp"

#include <cmath>

#include "doremi/kernels.hpp"

namespace doremi {

using detail::check_finite;
using detail::grad_of;

SparseConvKernel make_conv(int din, int dout, int extent, Rng& rng, bool trainable) {
    if (extent < 1 || extent % 2 == 0) throw ConfigError("kernel extent must be odd");
    SparseConvKernel k;
    k.extent = extent;
    k.din = din;
    k.dout = dout;
    const int taps = extent * extent * extent;
    k.weight = Tensor::randn({taps * din, dout}, rng,
                             1.0 / std::sqrt(static_cast<double>(din * taps)), trainable);
    k.bias = Tensor::zeros({dout}, trainable);
    k.gain = Tensor::full({dout}, 1.0, trainable);
    k.offset = Tensor::zeros({dout}, trainable);
    return k;
}

std::shared_ptr<ConvPlan> build_conv_plan(const SparseVoxelGrid& grid, int extent) {
    if (extent < 1 || extent % 2 == 0) throw ConfigError("kernel extent must be odd");
    auto plan = std::make_shared<ConvPlan>();
    plan->extent = extent;
    plan->offsets = extent * extent * extent;
    plan->rows = grid.rows();
    plan->src.resize(static_cast<std::size_t>(plan->offsets));
    plan->dst.resize(static_cast<std::size_t>(plan->offsets));
    const int r = extent / 2;
    int o = 0;
    for (int dx = -r; dx <= r; ++dx) {
        for (int dy = -r; dy <= r; ++dy) {
            for (int dz = -r; dz <= r; ++dz, ++o) {
                auto& src = plan->src[static_cast<std::size_t>(o)];
                auto& dst = plan->dst[static_cast<std::size_t>(o)];
                for (int v = 0; v < grid.rows(); ++v) {
                    const auto& c = grid.coords[static_cast<std::size_t>(v)];
                    const int u = grid.find({c[0] + dx, c[1] + dy, c[2] + dz});
                    if (u >= 0) {
                        src.push_back(u);
                        dst.push_back(v);
                    }
                }
            }
        }
    }
    return plan;
}

namespace {

// Raw convolution (no normalization): out[v] += W_o * feat[v + delta_o] + bias.
Tensor conv_raw(Tape& tape, const Tensor& feats, const std::shared_ptr<ConvPlan>& plan,
                const Tensor& weight, const Tensor& bias, int din, int dout) {
    if (feats.cols() != din) throw ConfigError("conv: feature width must match kernel din");
    if (feats.rows() != plan->rows) throw ConfigError("conv: plan built for a different grid");
    const int m = plan->rows;
    const bool rg = detail::any_requires_grad({&feats, &weight, &bias});
    Tensor out = Tensor::zeros({m, dout}, false);
    out.node->requires_grad = rg;

    const double* fv = feats.node->value.data();
    const double* wv = weight.node->value.data();
    double* ov = out.node->value.data();

    std::vector<double> gathered;
    std::vector<double> produced;
    for (int o = 0; o < plan->offsets; ++o) {
        const auto& src = plan->src[static_cast<std::size_t>(o)];
        const auto& dst = plan->dst[static_cast<std::size_t>(o)];
        if (src.empty()) continue;
        const int p = static_cast<int>(src.size());
        gathered.assign(static_cast<std::size_t>(p) * din, 0.0);
        for (int i = 0; i < p; ++i)
            std::copy_n(fv + static_cast<std::size_t>(src[static_cast<std::size_t>(i)]) * din, din,
                        gathered.data() + static_cast<std::size_t>(i) * din);
        produced.assign(static_cast<std::size_t>(p) * dout, 0.0);
        kernels::ops().gemm_acc(produced.data(), gathered.data(),
                                wv + static_cast<std::size_t>(o) * din * dout, p, din, dout);
        for (int i = 0; i < p; ++i) {
            double* dstrow = ov + static_cast<std::size_t>(dst[static_cast<std::size_t>(i)]) * dout;
            const double* srcrow = produced.data() + static_cast<std::size_t>(i) * dout;
            for (int j = 0; j < dout; ++j) dstrow[j] += srcrow[j];
        }
    }
    kernels::ops().add_row_broadcast(ov, bias.node->value.data(), m, dout);
    check_finite(out, "submanifold_conv");

    if (rg) {
        auto fn = feats.node, wn = weight.node, bn = bias.node, on = out.node;
        tape.record(
            {fn, wn, bn}, on,
            [fn, wn, bn, on, plan, din, dout, m] {
                const double* go = on->grad.data();
                std::vector<double> g_gather;
                std::vector<double> x_gather;
                for (int o = 0; o < plan->offsets; ++o) {
                    const auto& src = plan->src[static_cast<std::size_t>(o)];
                    const auto& dst = plan->dst[static_cast<std::size_t>(o)];
                    if (src.empty()) continue;
                    const int p = static_cast<int>(src.size());
                    g_gather.assign(static_cast<std::size_t>(p) * dout, 0.0);
                    for (int i = 0; i < p; ++i)
                        std::copy_n(go + static_cast<std::size_t>(dst[static_cast<std::size_t>(i)]) * dout,
                                    dout, g_gather.data() + static_cast<std::size_t>(i) * dout);
                    const double* wo =
                        wn->value.data() + static_cast<std::size_t>(o) * din * dout;
                    if (fn->requires_grad) {
                        // dX_o = dY_o * W_o^T, scattered back to source rows.
                        std::vector<double> wt(static_cast<std::size_t>(din) * dout);
                        for (int a = 0; a < din; ++a)
                            for (int b = 0; b < dout; ++b)
                                wt[static_cast<std::size_t>(b) * din + a] =
                                    wo[static_cast<std::size_t>(a) * dout + b];
                        std::vector<double> dx(static_cast<std::size_t>(p) * din, 0.0);
                        kernels::ops().gemm_acc(dx.data(), g_gather.data(), wt.data(), p, dout,
                                                din);
                        auto gf = grad_of(fn);
                        for (int i = 0; i < p; ++i) {
                            double* dstrow =
                                gf.data() + static_cast<std::size_t>(src[static_cast<std::size_t>(i)]) * din;
                            const double* srcrow = dx.data() + static_cast<std::size_t>(i) * din;
                            for (int j = 0; j < din; ++j) dstrow[j] += srcrow[j];
                        }
                    }
                    if (wn->requires_grad) {
                        x_gather.assign(static_cast<std::size_t>(p) * din, 0.0);
                        for (int i = 0; i < p; ++i)
                            std::copy_n(
                                fn->value.data() + static_cast<std::size_t>(src[static_cast<std::size_t>(i)]) * din,
                                din, x_gather.data() + static_cast<std::size_t>(i) * din);
                        std::vector<double> xt(static_cast<std::size_t>(din) * p);
                        for (int i = 0; i < p; ++i)
                            for (int a = 0; a < din; ++a)
                                xt[static_cast<std::size_t>(a) * p + i] =
                                    x_gather[static_cast<std::size_t>(i) * din + a];
                        kernels::ops().gemm_acc(grad_of(wn).data() +
                                                    static_cast<std::size_t>(o) * din * dout,
                                                xt.data(), g_gather.data(), din, p, dout);
                    }
                }
                if (bn->requires_grad) {
                    auto gb = grad_of(bn);
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < dout; ++j)
                            gb[static_cast<std::size_t>(j)] +=
                                go[static_cast<std::size_t>(i) * dout + j];
                }
            },
            "submanifold_conv");
    }
    return out;
}

}  // namespace

Tensor submanifold_conv(Tape& tape, const Tensor& feats, const std::shared_ptr<ConvPlan>& plan,
                        const SparseConvKernel& kernel) {
    Tensor raw = conv_raw(tape, feats, plan, kernel.weight, kernel.bias, kernel.din, kernel.dout);
    if (!kernel.normalize) return raw;
    return layer_norm(tape, raw, kernel.gain, kernel.offset);
}

SparseVoxelGrid submanifold_conv(const SparseVoxelGrid& grid, const SparseConvKernel& kernel) {
    auto plan = build_conv_plan(grid, kernel.extent);
    Tape tape;
    Tensor feats = Tensor::from_data({grid.rows(), grid.width}, grid.features, false);
    Tensor out = submanifold_conv(tape, feats, plan, kernel);
    SparseVoxelGrid result;
    result.coords = grid.coords;
    result.voxel_size_m = grid.voxel_size_m;
    result.width = kernel.dout;
    result.features.assign(out.values().begin(), out.values().end());
    result.rebuild_index();
    return result;
}

std::vector<std::array<int, 3>> neighbor_lookup(const SparseVoxelGrid& grid,
                                                const std::array<int, 3>& coord, int extent) {
    if (extent < 1 || extent % 2 == 0) throw ConfigError("extent must be odd");
    std::vector<std::array<int, 3>> hits;
    const int r = extent / 2;
    for (int dx = -r; dx <= r; ++dx)
        for (int dy = -r; dy <= r; ++dy)
            for (int dz = -r; dz <= r; ++dz)
                if (grid.find({coord[0] + dx, coord[1] + dy, coord[2] + dz}) >= 0)
                    hits.push_back({dx, dy, dz});
    return hits;
}

std::shared_ptr<PoolingMap> build_pooling_map(const SparseVoxelGrid& grid, int factor) {
    if (factor < 2) throw ConfigError("pooling factor must be at least 2");
    auto map = std::make_shared<PoolingMap>();
    std::vector<std::array<int, 3>> child(grid.coords.size());
    for (std::size_t i = 0; i < grid.coords.size(); ++i) {
        for (int c = 0; c < 3; ++c)
            child[i][static_cast<std::size_t>(c)] = static_cast<int>(
                floor_div(grid.coords[i][static_cast<std::size_t>(c)], factor));
    }
    map->child_coords = child;
    std::sort(map->child_coords.begin(), map->child_coords.end());
    map->child_coords.erase(std::unique(map->child_coords.begin(), map->child_coords.end()),
                            map->child_coords.end());

    std::unordered_map<std::array<int, 3>, int, VoxelKeyHash> index;
    for (std::size_t i = 0; i < map->child_coords.size(); ++i)
        index.emplace(map->child_coords[i], static_cast<int>(i));

    map->parent_to_child.resize(grid.coords.size());
    map->child_members.resize(map->child_coords.size());
    for (std::size_t i = 0; i < grid.coords.size(); ++i) {
        const int c = index.at(child[i]);
        map->parent_to_child[i] = c;
        map->child_members[static_cast<std::size_t>(c)].push_back(static_cast<int>(i));
    }
    return map;
}

SparseVoxelGrid child_grid(const SparseVoxelGrid& parent, const PoolingMap& map, int factor) {
    SparseVoxelGrid g;
    g.coords = map.child_coords;
    g.voxel_size_m = parent.voxel_size_m * factor;
    g.width = 0;
    g.rebuild_index();
    return g;
}

Tensor grid_pool(Tape& tape, const Tensor& parent_feats, const std::shared_ptr<PoolingMap>& map) {
    const int d = parent_feats.cols();
    if (parent_feats.rows() != static_cast<int>(map->parent_to_child.size()))
        throw ConfigError("grid_pool: map built for a different grid");
    const int mc = static_cast<int>(map->child_members.size());
    const bool rg = parent_feats.requires_grad();
    Tensor out = Tensor::zeros({mc, d}, false);
    out.node->requires_grad = rg;
    const double* pv = parent_feats.node->value.data();
    double* ov = out.node->value.data();
    for (int c = 0; c < mc; ++c) {
        const auto& members = map->child_members[static_cast<std::size_t>(c)];
        double* dst = ov + static_cast<std::size_t>(c) * d;
        for (int p : members) {
            const double* src = pv + static_cast<std::size_t>(p) * d;
            for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
        const double inv = 1.0 / static_cast<double>(members.size());
        for (int j = 0; j < d; ++j) dst[j] *= inv;
    }
    check_finite(out, "grid_pool");
    if (rg) {
        auto pn = parent_feats.node, on = out.node;
        tape.record({pn}, on,
                    [pn, on, map, d] {
                        auto gp = grad_of(pn);
                        const double* go = on->grad.data();
                        for (std::size_t c = 0; c < map->child_members.size(); ++c) {
                            const auto& members = map->child_members[c];
                            const double inv = 1.0 / static_cast<double>(members.size());
                            const double* src = go + c * static_cast<std::size_t>(d);
                            for (int p : members) {
                                double* dst = gp.data() + static_cast<std::size_t>(p) * d;
                                for (int j = 0; j < d; ++j) dst[j] += src[j] * inv;
                            }
                        }
                    },
                    "grid_pool");
    }
    return out;
}

Tensor grid_unpool(Tape& tape, const Tensor& child_feats, const std::shared_ptr<PoolingMap>& map) {
    const int d = child_feats.cols();
    if (child_feats.rows() != static_cast<int>(map->child_members.size()))
        throw ConfigError("grid_unpool: map built for a different grid");
    const int mp = static_cast<int>(map->parent_to_child.size());
    const bool rg = child_feats.requires_grad();
    Tensor out = Tensor::zeros({mp, d}, false);
    out.node->requires_grad = rg;
    const double* cv = child_feats.node->value.data();
    double* ov = out.node->value.data();
    for (int p = 0; p < mp; ++p)
        std::copy_n(cv + static_cast<std::size_t>(map->parent_to_child[static_cast<std::size_t>(p)]) * d,
                    d, ov + static_cast<std::size_t>(p) * d);
    if (rg) {
        auto cn = child_feats.node, on = out.node;
        tape.record({cn}, on,
                    [cn, on, map, d] {
                        auto gc = grad_of(cn);
                        const double* go = on->grad.data();
                        for (std::size_t p = 0; p < map->parent_to_child.size(); ++p) {
                            double* dst =
                                gc.data() +
                                static_cast<std::size_t>(map->parent_to_child[p]) * d;
                            const double* src = go + p * static_cast<std::size_t>(d);
                            for (int j = 0; j < d; ++j) dst[j] += src[j];
                        }
                    },
                    "grid_unpool");
    }
    return out;
}

}  // namespace doremi
