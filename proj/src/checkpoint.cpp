#include "doremi/checkpoint.hpp"

#include <fstream>

#include "json.hpp"

namespace doremi {

namespace {
constexpr char kMagic[] = "DRMCKPT1\n";
}

void save_checkpoint(const std::string& path, const ParamRegistry& params,
                     const std::string& meta_json) {
    nlohmann::json header;
    header["meta"] = meta_json.empty() ? nlohmann::json::object()
                                       : nlohmann::json::parse(meta_json);
    auto& plist = header["params"];
    plist = nlohmann::json::array();
    for (const auto& [name, t] : params.entries()) {
        plist.push_back({{"name", name}, {"shape", t.shape()}, {"trainable", t.requires_grad()}});
    }
    const std::string htext = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open checkpoint for writing: " + path);
    out.write(kMagic, sizeof(kMagic) - 1);
    const std::uint64_t hlen = htext.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const auto& [name, t] : params.entries()) {
        out.write(reinterpret_cast<const char*>(t.values().data()),
                  static_cast<std::streamsize>(t.values().size() * sizeof(double)));
    }
    if (!out) throw FormatError("checkpoint write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint: " + path);
    char magic[sizeof(kMagic) - 1];
    in.read(magic, sizeof(magic));
    if (!in || std::string(magic, sizeof(magic)) != std::string(kMagic, sizeof(magic)))
        throw FormatError("bad checkpoint magic in " + path);
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string htext(hlen, '\0');
    in.read(htext.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw FormatError("truncated checkpoint header: " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(htext);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint header parse error: " + std::string(e.what()));
    }

    LoadedCheckpoint ckpt;
    ckpt.meta_json = header.value("meta", nlohmann::json::object()).dump();
    for (const auto& p : header.at("params")) {
        const std::string name = p.at("name").get<std::string>();
        const std::vector<int> shape = p.at("shape").get<std::vector<int>>();
        const bool trainable = p.value("trainable", false);
        std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
        in.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!in) throw FormatError("truncated checkpoint blob for " + name);
        ckpt.params.emplace_back(name, Tensor::from_data(shape, std::move(data), trainable));
    }
    return ckpt;
}

Tensor LoadedCheckpoint::find(const std::string& name) const {
    for (const auto& [n, t] : params)
        if (n == name) return t;
    throw FormatError("checkpoint is missing parameter: " + name);
}

bool LoadedCheckpoint::contains(const std::string& name) const {
    for (const auto& [n, t] : params)
        if (n == name) return true;
    return false;
}

void load_into(const LoadedCheckpoint& ckpt, ParamRegistry& params) {
    for (const auto& [name, dst] : params.entries()) {
        Tensor src = ckpt.find(name);
        if (src.shape() != dst.shape())
            throw FormatError("checkpoint shape mismatch for " + name);
        std::copy(src.values().begin(), src.values().end(), dst.node->value.begin());
    }
}

std::uint64_t registry_hash(const ParamRegistry& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : params.entries()) {
        h = fnv1a64(name.data(), name.size(), h);
        h = fnv1a64(t.values().data(), t.values().size() * sizeof(double), h);
    }
    return h;
}

std::uint64_t file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open for hashing: " + path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
        h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
    return h;
}

}  // namespace doremi
