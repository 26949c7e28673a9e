#pragma once

#include <array>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "doremi/pointcloud.hpp"

namespace doremi {

struct VoxelKeyHash {
    std::size_t operator()(const std::array<int, 3>& k) const {
        std::uint64_t h = 0x9e3779b97f4a7c15ULL;
        for (int v : k) {
            h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(v)) + 0x9e3779b97f4a7c15ULL +
                 (h << 6) + (h >> 2);
        }
        return static_cast<std::size_t>(h);
    }
};

// Hashed map from integer voxel coordinates to feature rows. Rows are kept
// in canonical (lexicographic coordinate) order so downstream reductions are
// order-stable.
struct SparseVoxelGrid {
    std::vector<std::array<int, 3>> coords;  // M x 3, sorted lexicographically
    std::vector<double> features;            // M x width, row-major
    int width = 0;
    double voxel_size_m = 1.0;
    std::unordered_map<std::array<int, 3>, int, VoxelKeyHash> coord_index;

    int rows() const { return static_cast<int>(coords.size()); }
    int find(const std::array<int, 3>& c) const {
        auto it = coord_index.find(c);
        return it == coord_index.end() ? -1 : it->second;
    }
    const double* row(int i) const { return features.data() + static_cast<std::size_t>(i) * width; }
    double* row(int i) { return features.data() + static_cast<std::size_t>(i) * width; }
    void rebuild_index();
    void validate() const;
};

enum class VoxelReducer { mean, sum };

struct Voxelization {
    SparseVoxelGrid grid;
    std::vector<int> point_to_voxel;  // token-to-voxel map
};

// One row per occupied voxel at floor(position / voxel_size); features reduced
// from per-point attribute rows. Member reduction order is value-sorted, so
// the result is invariant to input point permutation.
Voxelization voxelize(const std::vector<std::array<double, 3>>& positions,
                      const std::vector<double>& attrs, int attr_width, double voxel_size_m,
                      VoxelReducer reducer = VoxelReducer::mean);

// Convenience: attributes = [r, g, b, x, y, z].
Voxelization voxelize(const PointCloud& cloud, double voxel_size_m,
                      VoxelReducer reducer = VoxelReducer::mean);

struct Patch {
    std::array<int, 3> cell;
    std::vector<int> members;  // ascending point indices
};

// Grid partition by floor(position / patch_extent); disjoint and covering.
std::vector<Patch> partition_patches(const std::vector<std::array<double, 3>>& positions,
                                     double patch_extent_m);

struct AugmentPolicy {
    double color_drop_prob = 0.5;
    double color_ratio_lo = 0.0;
    double color_ratio_hi = 0.6;
    double point_drop_prob = 0.5;
    double point_ratio_lo = 0.0;
    double point_ratio_hi = 0.6;
    double mask_lo = 0.1;
    double mask_hi = 0.5;
};

// Cosine curriculum for whole-patch masking; exact at both endpoints.
double mask_fraction(const AugmentPolicy& policy, double epoch_progress);

struct AugmentedCloud {
    PointCloud cloud;
    std::vector<int> surviving;  // original point indices, ascending
};

// Per-patch color blackout, per-patch point dropout, and whole-patch masking.
// Never invents points; throws GenerationError if nothing would survive.
AugmentedCloud augment_student(const PointCloud& cloud, const std::vector<Patch>& patches,
                               const AugmentPolicy& policy, double epoch_progress,
                               std::uint64_t seed);

}  // namespace doremi
