#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "doremi/voxel.hpp"

using namespace doremi;

namespace {

DomainSpec test_spec() {
    DomainSpec s;
    s.domain_id = 0;
    s.name = "test";
    s.density_points_per_m3 = 900.0;
    s.color_palette_bias = {1.0, 1.0, 1.0};
    s.noise_sigma_m = 0.0;
    s.occlusion_fraction = 0.0;
    s.class_set = {0, 1, 2, 3, 4, 5};
    return s;
}

}  // namespace

TEST_CASE("generate_scene: same seed twice gives bit-identical clouds") {
    DomainSpec spec = test_spec();
    PointCloud a = generate_scene(spec, 42);
    PointCloud b = generate_scene(spec, 42);
    REQUIRE(a.size() == b.size());
    CHECK(a.positions == b.positions);
    CHECK(a.colors == b.colors);
    CHECK(a.labels == b.labels);
    PointCloud c = generate_scene(spec, 43);
    CHECK(a.positions != c.positions);
}

TEST_CASE("generate_scene: noiseless points lie on analytic surfaces") {
    DomainSpec spec = test_spec();
    spec.class_set = {3};  // spheres only
    spec.density_points_per_m3 = 3000.0;
    PointCloud cloud = generate_scene(spec, 7);
    REQUIRE(cloud.size() >= 64);
    for (auto l : cloud.labels) CHECK(l == kClassSphere);

    // Walls-only domain: every point on x == 0 or y == 0 exactly.
    DomainSpec walls = test_spec();
    walls.class_set = {1};
    PointCloud wc = generate_scene(walls, 9);
    for (const auto& p : wc.positions) {
        const bool on_wall = p[0] == 0.0 || p[1] == 0.0;
        CHECK(on_wall);
    }

    DomainSpec floor = test_spec();
    floor.class_set = {0};
    PointCloud fc = generate_scene(floor, 9);
    for (const auto& p : fc.positions) CHECK(p[2] == 0.0);
}

TEST_CASE("generate_scene: doubling density doubles expected point count") {
    DomainSpec lo = test_spec();
    DomainSpec hi = test_spec();
    hi.density_points_per_m3 *= 2.0;
    double n_lo = 0.0, n_hi = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        n_lo += static_cast<double>(generate_scene(lo, seed).size());
        n_hi += static_cast<double>(generate_scene(hi, seed).size());
    }
    const double ratio = n_hi / n_lo;
    CHECK(ratio > 1.8);
    CHECK(ratio < 2.2);
}

TEST_CASE("generate_scene: too-low density is a generation error") {
    DomainSpec spec = test_spec();
    spec.density_points_per_m3 = 0.5;
    CHECK_THROWS_AS(generate_scene(spec, 1), GenerationError);
}

TEST_CASE("generate_scene: occlusion removes the requested fraction") {
    DomainSpec spec = test_spec();
    PointCloud base = generate_scene(spec, 11);
    spec.occlusion_fraction = 0.3;
    PointCloud occluded = generate_scene(spec, 11);
    // Same pre-occlusion sampling stream, so the kept count is exact.
    const auto expected =
        base.size() - static_cast<std::size_t>(std::floor(0.3 * static_cast<double>(base.size())));
    CHECK(occluded.size() == expected);
}

TEST_CASE("cloud serialization round-trips bit-exactly") {
    PointCloud cloud = generate_scene(test_spec(), 99);
    const std::string path = "test_cloud.dpc";
    save_cloud(cloud, path);
    PointCloud back = load_cloud(path);
    CHECK(back.domain_id == cloud.domain_id);
    CHECK(back.positions == cloud.positions);
    CHECK(back.colors == cloud.colors);
    CHECK(back.labels == cloud.labels);
    std::filesystem::remove(path);
}

TEST_CASE("voxelize: mean of co-located points, identity on a unit grid") {
    std::vector<std::array<double, 3>> pos{{0.2, 0.2, 0.2}, {0.7, 0.7, 0.7}};
    std::vector<double> attrs{1, 0, 0, 0, 1, 0};
    Voxelization v = voxelize(pos, attrs, 3, 1.0);
    REQUIRE(v.grid.rows() == 1);
    CHECK(v.grid.row(0)[0] == 0.5);
    CHECK(v.grid.row(0)[1] == 0.5);
    CHECK(v.grid.row(0)[2] == 0.0);

    // Points on a unit lattice with voxel size 1: one voxel per point.
    std::vector<std::array<double, 3>> lattice;
    std::vector<double> lattice_attrs;
    for (int i = 0; i < 5; ++i) {
        lattice.push_back({i + 0.5, 0.5, 0.5});
        lattice_attrs.push_back(static_cast<double>(i));
    }
    Voxelization lv = voxelize(lattice, lattice_attrs, 1, 1.0);
    CHECK(lv.grid.rows() == 5);
    for (std::size_t i = 0; i < lattice.size(); ++i)
        CHECK(lv.grid.row(lv.point_to_voxel[i])[0] == static_cast<double>(i));
}

TEST_CASE("voxelize: occupied count equals distinct floor coordinates") {
    PointCloud cloud = generate_scene(test_spec(), 3);
    const double vs = 0.11;
    Voxelization v = voxelize(cloud, vs);
    std::set<std::array<int, 3>> distinct;
    for (const auto& p : cloud.positions)
        distinct.insert({static_cast<int>(std::floor(p[0] / vs)),
                         static_cast<int>(std::floor(p[1] / vs)),
                         static_cast<int>(std::floor(p[2] / vs))});
    CHECK(static_cast<std::size_t>(v.grid.rows()) == distinct.size());
    v.grid.validate();
}

TEST_CASE("voxelize: permutation-invariant including feature bits") {
    PointCloud cloud = generate_scene(test_spec(), 5);
    Voxelization a = voxelize(cloud, 0.13);

    Rng rng(123);
    std::vector<int> perm(cloud.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    rng.shuffle(perm);
    PointCloud shuffled;
    shuffled.domain_id = cloud.domain_id;
    for (int i : perm) {
        shuffled.positions.push_back(cloud.positions[static_cast<std::size_t>(i)]);
        shuffled.colors.push_back(cloud.colors[static_cast<std::size_t>(i)]);
        shuffled.labels.push_back(cloud.labels[static_cast<std::size_t>(i)]);
    }
    Voxelization b = voxelize(shuffled, 0.13);

    REQUIRE(a.grid.rows() == b.grid.rows());
    CHECK(a.grid.coords == b.grid.coords);      // canonical sort
    CHECK(a.grid.features == b.grid.features);  // bit-identical reductions
    for (std::size_t i = 0; i < perm.size(); ++i)
        CHECK(b.point_to_voxel[i] ==
              a.point_to_voxel[static_cast<std::size_t>(perm[i])]);
}

TEST_CASE("partition_patches: disjoint cover") {
    CHECK(partition_patches({{0.1, 0.1, 0.1}}, 0.5).size() == 1);

    PointCloud cloud = generate_scene(test_spec(), 8);
    auto patches = partition_patches(cloud.positions, 0.5);
    std::vector<char> seen(cloud.size(), 0);
    for (const auto& p : patches) {
        for (int idx : p.members) {
            CHECK(!seen[static_cast<std::size_t>(idx)]);
            seen[static_cast<std::size_t>(idx)] = 1;
        }
    }
    for (char c : seen) CHECK(c == 1);

    // Patch extent beyond the bounding box: a single patch.
    auto one = partition_patches(cloud.positions, 100.0);
    CHECK(one.size() == 1);
    CHECK(one[0].members.size() == cloud.size());
}

TEST_CASE("mask_fraction: exact cosine endpoints") {
    AugmentPolicy policy;
    CHECK(mask_fraction(policy, 0.0) == policy.mask_lo);
    CHECK(mask_fraction(policy, 1.0) == policy.mask_hi);
    CHECK(mask_fraction(policy, 0.5) ==
          doctest::Approx(0.5 * (policy.mask_lo + policy.mask_hi)).epsilon(1e-12));
    for (double t = 0.0; t <= 1.0; t += 0.01) {
        const double f = mask_fraction(policy, t);
        CHECK(f >= policy.mask_lo);
        CHECK(f <= policy.mask_hi);
    }
}

TEST_CASE("augment_student: identity under zero ratios") {
    PointCloud cloud = generate_scene(test_spec(), 12);
    auto patches = partition_patches(cloud.positions, 0.5);
    AugmentPolicy zero;
    zero.color_drop_prob = 0.0;
    zero.point_drop_prob = 0.0;
    zero.mask_lo = 0.0;
    zero.mask_hi = 0.0;
    AugmentedCloud out = augment_student(cloud, patches, zero, 0.5, 4);
    CHECK(out.cloud.positions == cloud.positions);
    CHECK(out.cloud.colors == cloud.colors);
    CHECK(out.cloud.labels == cloud.labels);
    CHECK(out.surviving.size() == cloud.size());
}

TEST_CASE("augment_student: full color drop blackens every survivor") {
    PointCloud cloud = generate_scene(test_spec(), 13);
    auto patches = partition_patches(cloud.positions, 100.0);  // one patch
    AugmentPolicy policy;
    policy.color_drop_prob = 1.0;
    policy.color_ratio_lo = policy.color_ratio_hi = 1.0;
    policy.point_drop_prob = 0.0;
    policy.mask_lo = policy.mask_hi = 0.0;
    AugmentedCloud out = augment_student(cloud, patches, policy, 0.0, 4);
    CHECK(out.cloud.size() == cloud.size());
    for (const auto& c : out.cloud.colors) {
        CHECK(c[0] == 0.0);
        CHECK(c[1] == 0.0);
        CHECK(c[2] == 0.0);
    }
}

TEST_CASE("augment_student: never invents points, colors only blacken") {
    PointCloud cloud = generate_scene(test_spec(), 14);
    auto patches = partition_patches(cloud.positions, 0.5);
    AugmentPolicy policy;  // defaults exercise all three axes
    AugmentedCloud out = augment_student(cloud, patches, policy, 0.7, 21);
    REQUIRE(out.surviving.size() == out.cloud.size());
    for (std::size_t r = 0; r < out.surviving.size(); ++r) {
        const auto orig = static_cast<std::size_t>(out.surviving[r]);
        CHECK(out.cloud.positions[r] == cloud.positions[orig]);
        CHECK(out.cloud.labels[r] == cloud.labels[orig]);
        const bool unchanged = out.cloud.colors[r] == cloud.colors[orig];
        const bool black = out.cloud.colors[r] == std::array<double, 3>{0.0, 0.0, 0.0};
        CHECK((unchanged || black));
    }
    for (std::size_t r = 1; r < out.surviving.size(); ++r)
        CHECK(out.surviving[r] > out.surviving[r - 1]);
}

TEST_CASE("augment_student: measured drop fraction tracks the sampled ratio") {
    // One big synthetic patch of 1e5 points.
    const int n = 100000;
    PointCloud cloud;
    cloud.domain_id = 0;
    Rng rng(55);
    for (int i = 0; i < n; ++i) {
        cloud.positions.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
        cloud.colors.push_back({0.5, 0.5, 0.5});
        cloud.labels.push_back(0);
    }
    auto patches = partition_patches(cloud.positions, 10.0);
    REQUIRE(patches.size() == 1);

    AugmentPolicy policy;
    policy.color_drop_prob = 1.0;
    policy.color_ratio_lo = policy.color_ratio_hi = 0.37;
    policy.point_drop_prob = 1.0;
    policy.point_ratio_lo = policy.point_ratio_hi = 0.22;
    policy.mask_lo = policy.mask_hi = 0.0;
    AugmentedCloud out = augment_student(cloud, patches, policy, 0.0, 6);

    const double surv_frac = static_cast<double>(out.cloud.size()) / n;
    CHECK(surv_frac == doctest::Approx(1.0 - 0.22).epsilon(0.02));
    int black = 0;
    for (const auto& c : out.cloud.colors)
        if (c[0] == 0.0 && c[1] == 0.0 && c[2] == 0.0) ++black;
    CHECK(static_cast<double>(black) / static_cast<double>(out.cloud.size()) ==
          doctest::Approx(0.37).epsilon(0.02));
}

TEST_CASE("augment_student: removing everything is an error") {
    PointCloud cloud = generate_scene(test_spec(), 15);
    auto patches = partition_patches(cloud.positions, 0.5);
    AugmentPolicy policy;
    policy.mask_lo = policy.mask_hi = 0.999;  // floor(0.999 * P + 0.5) == P
    CHECK_THROWS_AS(augment_student(cloud, patches, policy, 0.5, 1), GenerationError);
}

TEST_CASE("manifest: save/load round-trip and validation") {
    CorpusManifest m = standard_corpus(4, 2);
    const std::string path = "test_manifest.json";
    save_manifest(m, path);
    CorpusManifest back = load_manifest(path);
    REQUIRE(back.domains.size() == m.domains.size());
    for (std::size_t i = 0; i < m.domains.size(); ++i) {
        CHECK(back.domains[i].spec.domain_id == m.domains[i].spec.domain_id);
        CHECK(back.domains[i].spec.density_points_per_m3 ==
              m.domains[i].spec.density_points_per_m3);
        CHECK(back.domains[i].train.count == m.domains[i].train.count);
        CHECK(back.domains[i].held_out == m.domains[i].held_out);
    }
    std::filesystem::remove(path);

    CorpusManifest bad = m;
    bad.domains.push_back(bad.domains.front());  // duplicate id
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
