#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace randlab {

// Mixes two 64-bit values into a fresh seed (splitmix64 finalizer).
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Seeded generator with self-contained uniform/normal draws. The raw
// engine is std::mt19937_64 (sequence fixed by the standard); the
// distribution transforms below are our own, so every draw is
// reproducible from the seed alone.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed), seed_(seed) {}

    uint64_t seed() const { return seed_; }

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n).
    int uniform_int(int n) {
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return static_cast<int>(x % un);
    }

    // Standard normal via Box-Muller; one value per call, no cached state.
    double normal() {
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Independent child stream, stable under the parent's draw history.
    Rng fork(uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

private:
    std::mt19937_64 engine_;
    uint64_t seed_;
};

}  // namespace randlab
