#pragma once

#include <cmath>
#include <cstdint>

namespace exotst {

/// Deterministic pseudo-random generator used everywhere randomness is needed:
/// xoshiro256** seeded through splitmix64. The exact update rules below are the
/// contract; every consumer (init, shuffling, synthesis, corruption) draws from
/// this generator so that a fixed seed reproduces runs bit for bit across
/// platforms with IEEE-754 doubles.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        // splitmix64 expands the single seed word into the four state words.
        std::uint64_t x = seed;
        for (auto& word : state_) {
            x += 0x9E3779B97F4A7C15ULL;
            std::uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
            z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
            word = z ^ (z >> 31);
        }
    }

    /// xoshiro256**: next 64-bit word.
    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5ULL, 7) * 9ULL;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform double in (0, 1]. The +1 keeps log() in normal() finite.
    double uniform01() {
        return static_cast<double>((next_u64() >> 11) + 1ULL) * 0x1.0p-53;
    }

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Standard normal via Box-Muller. Draws two uniforms per call and keeps
    /// no cached second variate, so the draw count per call is constant.
    double normal() {
        const double u1 = uniform01();
        const double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
    }

    /// Uniform integer in [0, n). n must be positive. Simple multiply-shift
    /// rejection-free map; bias is below 2^-53 for the n used here.
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(uniform01() * static_cast<double>(n)) % n;
    }

private:
    static constexpr double kPi = 3.14159265358979323846;

    static std::uint64_t rotl(std::uint64_t v, int k) {
        return (v << k) | (v >> (64 - k));
    }

    std::uint64_t state_[4];
};

}  // namespace exotst
