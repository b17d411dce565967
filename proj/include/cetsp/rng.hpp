#pragma once

#include <cstdint>
#include <random>

namespace cetsp {

// splitmix64; used to decorrelate seeds of derived streams.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
    return mix64(mix64(a) ^ (b + 0x9e3779b97f4a7c15ull));
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix64(mix64(a, b), c);
}

// Independent stream per (seed, index); workers index by instance, not by
// thread, so results do not depend on the scheduling.
inline std::mt19937_64 rng_stream(std::uint64_t seed, std::uint64_t index) {
    return std::mt19937_64(mix64(seed, index));
}

inline std::mt19937_64 rng_stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    return std::mt19937_64(mix64(seed, a, b));
}

inline double uniform01(std::mt19937_64& rng) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

}  // namespace cetsp
