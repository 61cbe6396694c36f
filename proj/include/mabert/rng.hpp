#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mabert {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t mix_key(std::uint64_t a, std::uint64_t b) { return mix64(a ^ mix64(b)); }

constexpr std::uint64_t hash_name(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

// Stateless generator: the value for (seed, step, site, index) never depends
// on how many other draws were made.
struct CounterRng {
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    std::uint64_t site = 0;

    std::uint64_t bits(std::uint64_t index) const { return mix_key(mix_key(mix_key(seed, step), site), index); }
    // Uniform in [0, 1) with 53 random bits.
    double uniform(std::uint64_t index) const { return static_cast<double>(bits(index) >> 11) * 0x1.0p-53; }
};

// Seeded std engine for a named purpose, so streams for different purposes never overlap.
inline std::mt19937_64 keyed_engine(std::uint64_t seed, std::string_view purpose, std::uint64_t step = 0) {
    return std::mt19937_64(mix_key(mix_key(seed, hash_name(purpose)), step));
}

}  // namespace mabert
