#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace doremi {

// Invalid shapes, bad config files, dimension mismatches.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API misuse (e.g. backward on a non-scalar loss).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf escaping a forward op.
struct NumericsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Corrupt or mismatched serialized data.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Scene generation produced an unusable cloud.
struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

}  // namespace doremi
