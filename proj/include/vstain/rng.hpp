#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace vstain {

/// Deterministic random stream. Value semantics: copying an Rng copies its
/// position, so a callee given a copy cannot perturb the caller's stream.
///
/// Uniform and normal draws are derived from raw 64-bit output with fixed
/// arithmetic (no std::*_distribution), so sequences are identical across
/// standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), gen_(seed) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [lo, hi). Requires lo < hi.
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(uniform() * static_cast<double>(hi - lo));
    }

    /// Standard normal via Box-Muller (cosine branch). Two uniforms per draw;
    /// stateless apart from the generator position.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        // Guard against log(0).
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    float normalf() { return static_cast<float>(normal()); }

    /// Independent substream keyed by (this stream's seed, key). Derivation is
    /// position-independent, so parallel consumers get stable streams no
    /// matter the order in which they are spawned.
    Rng child(std::uint64_t key) const { return Rng(mix(seed_ ^ (key + 0x9e3779b97f4a7c15ULL))); }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
    std::mt19937_64 gen_;
};

}  // namespace vstain
