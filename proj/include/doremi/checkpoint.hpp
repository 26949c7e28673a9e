#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "doremi/nn.hpp"

namespace doremi {

// Versioned container: magic string, JSON header (metadata + parameter table),
// then flat fp64 blobs in registry order. Round-trips bit-exactly.
void save_checkpoint(const std::string& path, const ParamRegistry& params,
                     const std::string& meta_json);

struct LoadedCheckpoint {
    std::string meta_json;
    std::vector<std::pair<std::string, Tensor>> params;

    Tensor find(const std::string& name) const;
    bool contains(const std::string& name) const;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// Copies values into same-named registry entries; every registry entry must
// be present with a matching shape.
void load_into(const LoadedCheckpoint& ckpt, ParamRegistry& params);

std::uint64_t registry_hash(const ParamRegistry& params);
std::uint64_t file_hash(const std::string& path);

}  // namespace doremi
