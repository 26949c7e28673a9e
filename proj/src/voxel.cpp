#include "doremi/voxel.hpp"

#include <algorithm>
#include <cmath>

namespace doremi {

void SparseVoxelGrid::rebuild_index() {
    coord_index.clear();
    coord_index.reserve(coords.size() * 2);
    for (std::size_t i = 0; i < coords.size(); ++i) {
        if (!coord_index.emplace(coords[i], static_cast<int>(i)).second)
            throw ConfigError("duplicate voxel coordinate");
    }
}

void SparseVoxelGrid::validate() const {
    if (static_cast<std::size_t>(rows()) * static_cast<std::size_t>(width) != features.size())
        throw ConfigError("voxel grid feature row count mismatch");
    if (coord_index.size() != coords.size())
        throw ConfigError("voxel grid index is not a bijection");
}

namespace {

std::array<int, 3> voxel_of(const std::array<double, 3>& p, double voxel_size) {
    return {static_cast<int>(std::floor(p[0] / voxel_size)),
            static_cast<int>(std::floor(p[1] / voxel_size)),
            static_cast<int>(std::floor(p[2] / voxel_size))};
}

}  // namespace

Voxelization voxelize(const std::vector<std::array<double, 3>>& positions,
                      const std::vector<double>& attrs, int attr_width, double voxel_size_m,
                      VoxelReducer reducer) {
    if (voxel_size_m <= 0.0) throw ConfigError("voxel size must be positive");
    const std::size_t n = positions.size();
    if (attrs.size() != n * static_cast<std::size_t>(attr_width))
        throw ConfigError("attribute row count must match point count");

    std::vector<std::array<int, 3>> keys(n);
    for (std::size_t i = 0; i < n; ++i) keys[i] = voxel_of(positions[i], voxel_size_m);

    // Canonical voxel order: lexicographic coordinates.
    std::vector<std::array<int, 3>> uniq(keys.begin(), keys.end());
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());

    Voxelization out;
    out.grid.coords = uniq;
    out.grid.width = attr_width;
    out.grid.voxel_size_m = voxel_size_m;
    out.grid.features.assign(uniq.size() * static_cast<std::size_t>(attr_width), 0.0);
    out.grid.rebuild_index();

    out.point_to_voxel.resize(n);
    std::vector<std::vector<int>> members(uniq.size());
    for (std::size_t i = 0; i < n; ++i) {
        const int row = out.grid.find(keys[i]);
        out.point_to_voxel[i] = row;
        members[static_cast<std::size_t>(row)].push_back(static_cast<int>(i));
    }

    // Reduce each voxel in value-sorted member order so the feature bits do
    // not depend on input point order.
    for (std::size_t v = 0; v < members.size(); ++v) {
        auto& m = members[v];
        std::sort(m.begin(), m.end(), [&](int a, int b) {
            if (positions[static_cast<std::size_t>(a)] != positions[static_cast<std::size_t>(b)])
                return positions[static_cast<std::size_t>(a)] < positions[static_cast<std::size_t>(b)];
            for (int c = 0; c < attr_width; ++c) {
                const double av = attrs[static_cast<std::size_t>(a) * attr_width + c];
                const double bv = attrs[static_cast<std::size_t>(b) * attr_width + c];
                if (av != bv) return av < bv;
            }
            return false;
        });
        double* dst = out.grid.row(static_cast<int>(v));
        for (int idx : m)
            for (int c = 0; c < attr_width; ++c)
                dst[c] += attrs[static_cast<std::size_t>(idx) * attr_width + c];
        if (reducer == VoxelReducer::mean && !m.empty()) {
            const double inv = 1.0 / static_cast<double>(m.size());
            for (int c = 0; c < attr_width; ++c) dst[c] *= inv;
        }
    }
    return out;
}

Voxelization voxelize(const PointCloud& cloud, double voxel_size_m, VoxelReducer reducer) {
    const std::size_t n = cloud.size();
    std::vector<double> attrs(n * 6);
    for (std::size_t i = 0; i < n; ++i) {
        for (int c = 0; c < 3; ++c) attrs[i * 6 + static_cast<std::size_t>(c)] = cloud.colors[i][static_cast<std::size_t>(c)];
        for (int c = 0; c < 3; ++c) attrs[i * 6 + 3 + static_cast<std::size_t>(c)] = cloud.positions[i][static_cast<std::size_t>(c)];
    }
    return voxelize(cloud.positions, attrs, 6, voxel_size_m, reducer);
}

std::vector<Patch> partition_patches(const std::vector<std::array<double, 3>>& positions,
                                     double patch_extent_m) {
    if (patch_extent_m <= 0.0) throw ConfigError("patch extent must be positive");
    std::unordered_map<std::array<int, 3>, std::vector<int>, VoxelKeyHash> cells;
    for (std::size_t i = 0; i < positions.size(); ++i)
        cells[voxel_of(positions[i], patch_extent_m)].push_back(static_cast<int>(i));

    std::vector<Patch> patches;
    patches.reserve(cells.size());
    for (auto& [cell, members] : cells) {
        Patch p;
        p.cell = cell;
        p.members = std::move(members);
        std::sort(p.members.begin(), p.members.end());
        patches.push_back(std::move(p));
    }
    std::sort(patches.begin(), patches.end(),
              [](const Patch& a, const Patch& b) { return a.cell < b.cell; });
    return patches;
}

double mask_fraction(const AugmentPolicy& policy, double epoch_progress) {
    if (epoch_progress <= 0.0) return policy.mask_lo;
    if (epoch_progress >= 1.0) return policy.mask_hi;
    return policy.mask_lo + (policy.mask_hi - policy.mask_lo) *
                                (1.0 - std::cos(3.14159265358979323846 * epoch_progress)) * 0.5;
}

AugmentedCloud augment_student(const PointCloud& cloud, const std::vector<Patch>& patches,
                               const AugmentPolicy& policy, double epoch_progress,
                               std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0xA0617EA7ULL));

    const std::size_t n = cloud.size();
    std::vector<char> keep(n, 1);
    std::vector<char> blacken(n, 0);

    // Whole-patch masking.
    const double frac = mask_fraction(policy, epoch_progress);
    const int n_patches = static_cast<int>(patches.size());
    const int n_mask = static_cast<int>(std::floor(frac * n_patches + 0.5));
    std::vector<int> order(patches.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    std::vector<char> masked(patches.size(), 0);
    for (int i = 0; i < n_mask; ++i) masked[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;

    for (std::size_t pi = 0; pi < patches.size(); ++pi) {
        const Patch& patch = patches[pi];
        if (masked[pi]) {
            for (int idx : patch.members) keep[static_cast<std::size_t>(idx)] = 0;
            continue;
        }
        if (rng.uniform() < policy.color_drop_prob) {
            const double ratio = rng.uniform(policy.color_ratio_lo, policy.color_ratio_hi);
            for (int idx : patch.members)
                if (rng.uniform() < ratio) blacken[static_cast<std::size_t>(idx)] = 1;
        }
        if (rng.uniform() < policy.point_drop_prob) {
            const double ratio = rng.uniform(policy.point_ratio_lo, policy.point_ratio_hi);
            for (int idx : patch.members)
                if (rng.uniform() < ratio) keep[static_cast<std::size_t>(idx)] = 0;
        }
    }

    AugmentedCloud out;
    out.cloud.domain_id = cloud.domain_id;
    for (std::size_t i = 0; i < n; ++i) {
        if (!keep[i]) continue;
        out.surviving.push_back(static_cast<int>(i));
        out.cloud.positions.push_back(cloud.positions[i]);
        out.cloud.colors.push_back(blacken[i] ? std::array<double, 3>{0.0, 0.0, 0.0}
                                              : cloud.colors[i]);
        out.cloud.labels.push_back(cloud.labels[i]);
    }
    if (out.cloud.positions.empty())
        throw GenerationError("augmentation would remove every point");
    return out;
}

}  // namespace doremi
