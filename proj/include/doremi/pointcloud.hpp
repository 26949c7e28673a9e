#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "doremi/common.hpp"
#include "doremi/rng.hpp"

namespace doremi {

// Semantic classes used by the synthetic scenes.
enum SceneClass : int {
    kClassFloor = 0,
    kClassWall = 1,
    kClassBox = 2,
    kClassSphere = 3,
    kClassCylinder = 4,
    kClassCone = 5,
};
constexpr int kNumSceneClasses = 6;

struct DomainSpec {
    int domain_id = 0;
    std::string name;
    double density_points_per_m3 = 2000.0;
    std::array<double, 3> color_palette_bias{1.0, 1.0, 1.0};
    double noise_sigma_m = 0.0;
    double occlusion_fraction = 0.0;  // in [0, 1)
    std::vector<int> class_set;

    void validate() const;
};

struct PointCloud {
    std::vector<std::array<double, 3>> positions;
    std::vector<std::array<double, 3>> colors;  // each channel in [0, 1]
    std::vector<std::uint32_t> labels;
    int domain_id = 0;

    std::size_t size() const { return positions.size(); }
};

// Room of geometric primitives sampled on their surfaces, with the spec's
// density / palette / noise / view-cone occlusion applied. Bit-identical for
// equal (spec, seed).
PointCloud generate_scene(const DomainSpec& spec, std::uint64_t seed);

// Flat binary columns with a short text header; round-trips bit-exactly.
void save_cloud(const PointCloud& cloud, const std::string& path);
PointCloud load_cloud(const std::string& path);

struct SplitRange {
    std::uint64_t seed_base = 0;
    int count = 0;
};

struct DomainEntry {
    DomainSpec spec;
    bool held_out = false;
    SplitRange train;
    SplitRange eval;
};

struct CorpusManifest {
    std::vector<DomainEntry> domains;

    const DomainEntry& domain(int domain_id) const;
    std::vector<int> training_domain_ids() const;
    std::vector<int> held_out_domain_ids() const;
    const SplitRange& split(int domain_id, const std::string& split_name) const;

    void validate() const;
};

CorpusManifest load_manifest(const std::string& path);
void save_manifest(const CorpusManifest& m, const std::string& path);

// The corpus used by the default configs: three training domains spanning the
// color / density / completeness axes plus one held-out domain.
CorpusManifest standard_corpus(int train_scenes = 12, int eval_scenes = 4);

}  // namespace doremi
