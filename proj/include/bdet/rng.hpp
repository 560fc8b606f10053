#pragma once

#include <cmath>
#include <cstdint>

namespace bdet {

// SplitMix64 finalizer. Used both as a standalone hash and as the engine
// behind Rng so that every random draw in the project is reproducible from
// explicit 64-bit seeds, independent of the standard library.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ (splitmix64(b) + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

inline std::uint64_t hash3(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return hash_combine(hash_combine(a, b), c);
}

// Maps a hash to [0, 1).
inline double hash_to_unit(std::uint64_t h) {
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// Small deterministic generator (SplitMix64 stream). Not cryptographic.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return hash_to_unit(next_u64()); }

    // [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // {0, 1, ..., n-1}
    std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller (one value per call, bit-reproducible).
    double normal() {
        double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

private:
    std::uint64_t state_;
};

}  // namespace bdet
