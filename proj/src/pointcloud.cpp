#include "doremi/pointcloud.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace doremi {

namespace {

constexpr double kPi = 3.14159265358979323846;
// Converts volumetric density to an expected surface sample count.
constexpr double kSurfaceShell = 0.02;
// Furniture carries more detail per unit area than room planes.
constexpr double kObjectBoost = 3.0;

const std::array<std::array<double, 3>, kNumSceneClasses> kClassBaseColor{{
    {0.45, 0.42, 0.40},  // floor
    {0.85, 0.85, 0.82},  // wall
    {0.75, 0.25, 0.20},  // box
    {0.20, 0.65, 0.25},  // sphere
    {0.20, 0.35, 0.80},  // cylinder
    {0.85, 0.75, 0.15},  // cone
}};

struct Surface {
    int cls;
    double area;
    bool is_object;
    // Fills one uniformly sampled point on the surface.
    std::array<double, 3> (*sample)(const Surface&, Rng&);
    // Geometry parameters, meaning depends on the primitive.
    std::array<double, 3> origin{};
    std::array<double, 3> extent{};
};

std::array<double, 3> sample_floor(const Surface& s, Rng& rng) {
    return {s.origin[0] + rng.uniform() * s.extent[0], s.origin[1] + rng.uniform() * s.extent[1],
            s.origin[2]};
}

std::array<double, 3> sample_wall_x(const Surface& s, Rng& rng) {
    // plane of constant x
    return {s.origin[0], s.origin[1] + rng.uniform() * s.extent[1],
            s.origin[2] + rng.uniform() * s.extent[2]};
}

std::array<double, 3> sample_wall_y(const Surface& s, Rng& rng) {
    return {s.origin[0] + rng.uniform() * s.extent[0], s.origin[1],
            s.origin[2] + rng.uniform() * s.extent[2]};
}

// Box: origin = center, extent = half sizes. Four sides plus top.
std::array<double, 3> sample_box(const Surface& s, Rng& rng) {
    const double hx = s.extent[0], hy = s.extent[1], hz = s.extent[2];
    const double a_top = 4.0 * hx * hy;
    const double a_x = 4.0 * hy * hz;  // both x-normal faces
    const double a_y = 4.0 * hx * hz;
    const double pick = rng.uniform() * (a_top + a_x + a_y);
    double u = rng.uniform(-1.0, 1.0), v = rng.uniform(-1.0, 1.0);
    std::array<double, 3> p;
    if (pick < a_top) {
        p = {u * hx, v * hy, hz};
    } else if (pick < a_top + a_x) {
        const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
        p = {side * hx, u * hy, v * hz};
    } else {
        const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
        p = {u * hx, side * hy, v * hz};
    }
    return {s.origin[0] + p[0], s.origin[1] + p[1], s.origin[2] + p[2]};
}

std::array<double, 3> sample_sphere(const Surface& s, Rng& rng) {
    const double r = s.extent[0];
    double x, y, z, n2;
    do {
        x = rng.normal();
        y = rng.normal();
        z = rng.normal();
        n2 = x * x + y * y + z * z;
    } while (n2 < 1e-12);
    const double inv = r / std::sqrt(n2);
    return {s.origin[0] + x * inv, s.origin[1] + y * inv, s.origin[2] + z * inv};
}

// Cylinder: extent = (radius, height, 0); side plus top cap.
std::array<double, 3> sample_cylinder(const Surface& s, Rng& rng) {
    const double r = s.extent[0], h = s.extent[1];
    const double a_side = 2.0 * kPi * r * h;
    const double a_cap = kPi * r * r;
    if (rng.uniform() * (a_side + a_cap) < a_side) {
        const double phi = rng.uniform() * 2.0 * kPi;
        return {s.origin[0] + r * std::cos(phi), s.origin[1] + r * std::sin(phi),
                s.origin[2] + rng.uniform() * h};
    }
    const double rr = r * std::sqrt(rng.uniform());
    const double phi = rng.uniform() * 2.0 * kPi;
    return {s.origin[0] + rr * std::cos(phi), s.origin[1] + rr * std::sin(phi), s.origin[2] + h};
}

// Cone: extent = (base radius, height, 0); lateral surface, apex up.
std::array<double, 3> sample_cone(const Surface& s, Rng& rng) {
    const double r = s.extent[0], h = s.extent[1];
    // Uniform over the lateral surface: distance from apex ~ sqrt(u).
    const double t = std::sqrt(rng.uniform());  // 1 at base
    const double phi = rng.uniform() * 2.0 * kPi;
    return {s.origin[0] + t * r * std::cos(phi), s.origin[1] + t * r * std::sin(phi),
            s.origin[2] + h * (1.0 - t)};
}

}  // namespace

void DomainSpec::validate() const {
    if (density_points_per_m3 <= 0.0) throw ConfigError("domain density must be positive");
    if (noise_sigma_m < 0.0) throw ConfigError("noise sigma must be nonnegative");
    if (occlusion_fraction < 0.0 || occlusion_fraction >= 1.0)
        throw ConfigError("occlusion fraction must lie in [0, 1)");
    if (class_set.empty()) throw ConfigError("domain class set must not be empty");
    for (int c : class_set)
        if (c < 0 || c >= kNumSceneClasses) throw ConfigError("unknown class id in class set");
}

PointCloud generate_scene(const DomainSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(mix_seed(static_cast<std::uint64_t>(spec.domain_id) + 1, seed));

    const double room_w = rng.uniform(2.6, 3.4);
    const double room_l = rng.uniform(2.6, 3.4);
    const double room_h = 2.2;

    std::vector<Surface> surfaces;
    auto has_class = [&](int c) {
        return std::find(spec.class_set.begin(), spec.class_set.end(), c) != spec.class_set.end();
    };

    if (has_class(kClassFloor)) {
        Surface s{kClassFloor, room_w * room_l, false, sample_floor};
        s.origin = {0.0, 0.0, 0.0};
        s.extent = {room_w, room_l, 0.0};
        surfaces.push_back(s);
    }
    if (has_class(kClassWall)) {
        Surface wx{kClassWall, room_l * room_h, false, sample_wall_x};
        wx.origin = {0.0, 0.0, 0.0};
        wx.extent = {0.0, room_l, room_h};
        surfaces.push_back(wx);
        Surface wy{kClassWall, room_w * room_h, false, sample_wall_y};
        wy.origin = {0.0, 0.0, 0.0};
        wy.extent = {room_w, 0.0, room_h};
        surfaces.push_back(wy);
    }

    std::vector<int> object_classes;
    for (int c : spec.class_set)
        if (c >= kClassBox) object_classes.push_back(c);

    if (!object_classes.empty()) {
        const int n_objects = rng.uniform_int(4, 8);
        for (int i = 0; i < n_objects; ++i) {
            const int cls = object_classes[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<int>(object_classes.size())))];
            const double cx = rng.uniform(0.4, room_w - 0.4);
            const double cy = rng.uniform(0.4, room_l - 0.4);
            const double s0 = rng.uniform(0.25, 0.55);
            Surface s{cls, 0.0, true, nullptr};
            switch (cls) {
                case kClassBox: {
                    const double hx = s0 * rng.uniform(0.5, 1.0);
                    const double hy = s0 * rng.uniform(0.5, 1.0);
                    const double hz = s0 * rng.uniform(0.5, 1.2);
                    s.origin = {cx, cy, hz};
                    s.extent = {hx, hy, hz};
                    s.area = 4.0 * hx * hy + 8.0 * hy * hz + 8.0 * hx * hz;
                    s.sample = sample_box;
                    break;
                }
                case kClassSphere: {
                    const double r = s0 * rng.uniform(0.5, 0.9);
                    s.origin = {cx, cy, r};
                    s.extent = {r, 0.0, 0.0};
                    s.area = 4.0 * kPi * r * r;
                    s.sample = sample_sphere;
                    break;
                }
                case kClassCylinder: {
                    const double r = s0 * rng.uniform(0.35, 0.6);
                    const double h = s0 * rng.uniform(1.2, 2.2);
                    s.origin = {cx, cy, 0.0};
                    s.extent = {r, h, 0.0};
                    s.area = 2.0 * kPi * r * h + kPi * r * r;
                    s.sample = sample_cylinder;
                    break;
                }
                case kClassCone: {
                    const double r = s0 * rng.uniform(0.4, 0.7);
                    const double h = s0 * rng.uniform(1.2, 2.0);
                    s.origin = {cx, cy, 0.0};
                    s.extent = {r, h, 0.0};
                    s.area = kPi * r * std::sqrt(r * r + h * h);
                    s.sample = sample_cone;
                    break;
                }
                default:
                    break;
            }
            surfaces.push_back(s);
        }
    }

    PointCloud cloud;
    cloud.domain_id = spec.domain_id;
    for (const auto& s : surfaces) {
        const double boost = s.is_object ? kObjectBoost : 1.0;
        const double lambda = spec.density_points_per_m3 * s.area * kSurfaceShell * boost;
        const int n = rng.poisson(lambda);
        for (int i = 0; i < n; ++i) {
            auto p = s.sample(s, rng);
            std::array<double, 3> col;
            for (int c = 0; c < 3; ++c) {
                double v = kClassBaseColor[static_cast<std::size_t>(s.cls)][static_cast<std::size_t>(c)] *
                               spec.color_palette_bias[static_cast<std::size_t>(c)] +
                           rng.uniform(-0.05, 0.05);
                col[static_cast<std::size_t>(c)] = std::clamp(v, 0.0, 1.0);
            }
            if (spec.noise_sigma_m > 0.0)
                for (auto& v : p) v += rng.normal(0.0, spec.noise_sigma_m);
            cloud.positions.push_back(p);
            cloud.colors.push_back(col);
            cloud.labels.push_back(static_cast<std::uint32_t>(s.cls));
        }
    }

    if (spec.occlusion_fraction > 0.0 && !cloud.positions.empty()) {
        // View-cone incompleteness: drop the fraction of points most aligned
        // with a random viewing direction from the scene centroid.
        double ux = rng.normal(), uy = rng.normal(), uz = rng.normal();
        const double un = std::sqrt(ux * ux + uy * uy + uz * uz);
        ux /= un;
        uy /= un;
        uz /= un;
        std::array<double, 3> centroid{0.0, 0.0, 0.0};
        for (const auto& p : cloud.positions)
            for (int c = 0; c < 3; ++c) centroid[static_cast<std::size_t>(c)] += p[static_cast<std::size_t>(c)];
        for (auto& v : centroid) v /= static_cast<double>(cloud.positions.size());

        const std::size_t n = cloud.positions.size();
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::vector<double> score(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& p = cloud.positions[i];
            score[i] = (p[0] - centroid[0]) * ux + (p[1] - centroid[1]) * uy +
                       (p[2] - centroid[2]) * uz;
        }
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
        const std::size_t n_drop =
            static_cast<std::size_t>(std::floor(spec.occlusion_fraction * static_cast<double>(n)));
        std::vector<char> drop(n, 0);
        for (std::size_t i = 0; i < n_drop; ++i) drop[order[i]] = 1;

        PointCloud kept;
        kept.domain_id = cloud.domain_id;
        for (std::size_t i = 0; i < n; ++i) {
            if (drop[i]) continue;
            kept.positions.push_back(cloud.positions[i]);
            kept.colors.push_back(cloud.colors[i]);
            kept.labels.push_back(cloud.labels[i]);
        }
        cloud = std::move(kept);
    }

    if (cloud.positions.size() < 64)
        throw GenerationError("scene has fewer than 64 points; raise density");
    return cloud;
}

void save_cloud(const PointCloud& cloud, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open for writing: " + path);
    out << "DPC1\n"
        << "points " << cloud.size() << "\n"
        << "domain " << cloud.domain_id << "\n"
        << "data\n";
    auto write_doubles = [&](const std::vector<std::array<double, 3>>& v) {
        out.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(v.size() * sizeof(double) * 3));
    };
    write_doubles(cloud.positions);
    write_doubles(cloud.colors);
    out.write(reinterpret_cast<const char*>(cloud.labels.data()),
              static_cast<std::streamsize>(cloud.labels.size() * sizeof(std::uint32_t)));
    if (!out) throw FormatError("write failed: " + path);
}

PointCloud load_cloud(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open: " + path);
    std::string magic;
    std::getline(in, magic);
    if (magic != "DPC1") throw FormatError("bad cloud magic in " + path);
    std::string key;
    std::size_t n = 0;
    int domain = 0;
    in >> key >> n;
    if (key != "points") throw FormatError("bad cloud header in " + path);
    in >> key >> domain;
    if (key != "domain") throw FormatError("bad cloud header in " + path);
    in >> key;
    if (key != "data") throw FormatError("bad cloud header in " + path);
    in.get();  // newline after "data"

    PointCloud cloud;
    cloud.domain_id = domain;
    cloud.positions.resize(n);
    cloud.colors.resize(n);
    cloud.labels.resize(n);
    in.read(reinterpret_cast<char*>(cloud.positions.data()),
            static_cast<std::streamsize>(n * sizeof(double) * 3));
    in.read(reinterpret_cast<char*>(cloud.colors.data()),
            static_cast<std::streamsize>(n * sizeof(double) * 3));
    in.read(reinterpret_cast<char*>(cloud.labels.data()),
            static_cast<std::streamsize>(n * sizeof(std::uint32_t)));
    if (!in) throw FormatError("truncated cloud file: " + path);
    return cloud;
}

const DomainEntry& CorpusManifest::domain(int domain_id) const {
    for (const auto& d : domains)
        if (d.spec.domain_id == domain_id) return d;
    throw ConfigError("unknown domain id " + std::to_string(domain_id));
}

std::vector<int> CorpusManifest::training_domain_ids() const {
    std::vector<int> ids;
    for (const auto& d : domains)
        if (!d.held_out) ids.push_back(d.spec.domain_id);
    return ids;
}

std::vector<int> CorpusManifest::held_out_domain_ids() const {
    std::vector<int> ids;
    for (const auto& d : domains)
        if (d.held_out) ids.push_back(d.spec.domain_id);
    return ids;
}

const SplitRange& CorpusManifest::split(int domain_id, const std::string& split_name) const {
    const DomainEntry& d = domain(domain_id);
    if (split_name == "train") return d.train;
    if (split_name == "eval") return d.eval;
    throw ConfigError("unknown split: " + split_name);
}

void CorpusManifest::validate() const {
    if (domains.empty()) throw ConfigError("manifest has no domains");
    for (std::size_t i = 0; i < domains.size(); ++i) {
        domains[i].spec.validate();
        for (std::size_t j = i + 1; j < domains.size(); ++j)
            if (domains[i].spec.domain_id == domains[j].spec.domain_id)
                throw ConfigError("duplicate domain id in manifest");
    }
}

namespace {

using nlohmann::json;

json spec_to_json(const DomainEntry& d) {
    return json{
        {"domain_id", d.spec.domain_id},
        {"name", d.spec.name},
        {"density_points_per_m3", d.spec.density_points_per_m3},
        {"color_palette_bias", d.spec.color_palette_bias},
        {"noise_sigma_m", d.spec.noise_sigma_m},
        {"occlusion_fraction", d.spec.occlusion_fraction},
        {"class_set", d.spec.class_set},
        {"held_out", d.held_out},
        {"splits",
         {{"train", {{"seed_base", d.train.seed_base}, {"count", d.train.count}}},
          {"eval", {{"seed_base", d.eval.seed_base}, {"count", d.eval.count}}}}},
    };
}

DomainEntry spec_from_json(const json& j) {
    DomainEntry d;
    d.spec.domain_id = j.at("domain_id").get<int>();
    d.spec.name = j.at("name").get<std::string>();
    d.spec.density_points_per_m3 = j.at("density_points_per_m3").get<double>();
    auto bias = j.at("color_palette_bias");
    for (int c = 0; c < 3; ++c) d.spec.color_palette_bias[static_cast<std::size_t>(c)] = bias.at(c).get<double>();
    d.spec.noise_sigma_m = j.at("noise_sigma_m").get<double>();
    d.spec.occlusion_fraction = j.at("occlusion_fraction").get<double>();
    d.spec.class_set = j.at("class_set").get<std::vector<int>>();
    d.held_out = j.value("held_out", false);
    const auto& splits = j.at("splits");
    d.train.seed_base = splits.at("train").at("seed_base").get<std::uint64_t>();
    d.train.count = splits.at("train").at("count").get<int>();
    d.eval.seed_base = splits.at("eval").at("seed_base").get<std::uint64_t>();
    d.eval.count = splits.at("eval").at("count").get<int>();
    return d;
}

}  // namespace

CorpusManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open manifest: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError("manifest parse error in " + path + ": " + e.what());
    }
    CorpusManifest m;
    try {
        for (const auto& d : j.at("domains")) m.domains.push_back(spec_from_json(d));
    } catch (const json::exception& e) {
        throw FormatError("manifest field error in " + path + ": " + e.what());
    }
    m.validate();
    return m;
}

void save_manifest(const CorpusManifest& m, const std::string& path) {
    json j;
    j["domains"] = json::array();
    for (const auto& d : m.domains) j["domains"].push_back(spec_to_json(d));
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open manifest for writing: " + path);
    out << j.dump(2) << "\n";
}

CorpusManifest standard_corpus(int train_scenes, int eval_scenes) {
    CorpusManifest m;
    auto make = [&](int id, const char* name, double density, std::array<double, 3> bias,
                    double sigma, double occl, std::vector<int> classes, bool held_out) {
        DomainEntry d;
        d.spec.domain_id = id;
        d.spec.name = name;
        d.spec.density_points_per_m3 = density;
        d.spec.color_palette_bias = bias;
        d.spec.noise_sigma_m = sigma;
        d.spec.occlusion_fraction = occl;
        d.spec.class_set = std::move(classes);
        d.held_out = held_out;
        d.train = {static_cast<std::uint64_t>(1000 * (id + 1)), train_scenes};
        d.eval = {static_cast<std::uint64_t>(1000 * (id + 1) + 500), eval_scenes};
        return d;
    };
    m.domains.push_back(make(0, "dense-clean", 650.0, {1.0, 0.95, 0.9}, 0.0, 0.0,
                             {0, 1, 2, 3, 4}, false));
    m.domains.push_back(make(1, "sparse-noisy", 360.0, {0.7, 0.8, 1.0}, 0.02, 0.05,
                             {0, 1, 2, 4, 5}, false));
    m.domains.push_back(make(2, "occluded-colored", 520.0, {1.0, 0.7, 0.7}, 0.01, 0.35,
                             {0, 1, 3, 4, 5}, false));
    m.domains.push_back(make(3, "mixed-heldout", 460.0, {0.85, 1.0, 0.85}, 0.015, 0.2,
                             {0, 1, 2, 3, 4, 5}, true));
    m.validate();
    return m;
}

}  // namespace doremi
