#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace uavm {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Independent stream seed for a given purpose. Streams derived from the same
// base seed with different tags never collide in practice, which lets batch
// sampling, augmentation and modality draws advance independently.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a offset basis
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return splitmix64(base ^ h);
}

inline Rng make_rng(std::uint64_t seed) {
    return Rng(splitmix64(seed));
}

}  // namespace uavm
