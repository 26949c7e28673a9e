#pragma once

#include <memory>

#include "doremi/nn.hpp"
#include "doremi/tensor.hpp"
#include "doremi/voxel.hpp"

namespace doremi {

// Submanifold 3-d convolution kernel: weight rows are grouped per offset in
// fixed lexicographic (dx, dy, dz) order. Layer normalization with the
// kernel's gain/offset runs after the convolution unless disabled.
struct SparseConvKernel {
    Tensor weight;  // [extent^3 * din, dout]
    Tensor bias;    // [dout]
    Tensor gain;    // [dout]
    Tensor offset;  // [dout]
    int extent = 3;
    int din = 0;
    int dout = 0;
    bool normalize = true;
};

SparseConvKernel make_conv(int din, int dout, int extent, Rng& rng, bool trainable = true);

// Gather/scatter pairs per kernel offset for one grid; built once per grid
// and reused across every convolution on it.
struct ConvPlan {
    int extent = 3;
    int offsets = 27;
    std::vector<std::vector<int>> src;  // per offset: source rows
    std::vector<std::vector<int>> dst;  // per offset: destination rows (ascending)
    int rows = 0;
};

std::shared_ptr<ConvPlan> build_conv_plan(const SparseVoxelGrid& grid, int extent);

// Differentiable submanifold convolution over token features living on the
// plan's grid. Output occupies exactly the input's rows.
Tensor submanifold_conv(Tape& tape, const Tensor& feats, const std::shared_ptr<ConvPlan>& plan,
                        const SparseConvKernel& kernel);

// Spec-surface wrapper: features in, features out, same active set.
SparseVoxelGrid submanifold_conv(const SparseVoxelGrid& grid, const SparseConvKernel& kernel);

// All occupied offsets within the centered window around coord (including the
// center if occupied), in lexicographic offset order.
std::vector<std::array<int, 3>> neighbor_lookup(const SparseVoxelGrid& grid,
                                                const std::array<int, 3>& coord, int extent);

// Mean pooling onto floor(coord / factor); every parent belongs to exactly
// one child.
struct PoolingMap {
    std::vector<std::array<int, 3>> child_coords;  // sorted
    std::vector<int> parent_to_child;              // size = parent rows
    std::vector<std::vector<int>> child_members;   // ascending parent rows
};

std::shared_ptr<PoolingMap> build_pooling_map(const SparseVoxelGrid& grid, int factor);
SparseVoxelGrid child_grid(const SparseVoxelGrid& parent, const PoolingMap& map, int factor);

Tensor grid_pool(Tape& tape, const Tensor& parent_feats, const std::shared_ptr<PoolingMap>& map);
Tensor grid_unpool(Tape& tape, const Tensor& child_feats, const std::shared_ptr<PoolingMap>& map);

}  // namespace doremi
