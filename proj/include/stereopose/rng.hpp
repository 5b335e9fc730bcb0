#pragma once

#include <cmath>
#include <cstdint>

namespace stereopose {

// Deterministic, splittable PRNG built on splitmix64. Every consumer of
// randomness in this library derives its own stream from a (seed, key...)
// tuple, so results do not depend on evaluation order or thread schedule.
struct Rng {
    std::uint64_t state;

    explicit Rng(std::uint64_t seed) : state(seed) {}

    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t next_u64() {
        state += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() {
        return double(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        // 53-bit scaling; bias is negligible for the n used here (< 2^32)
        return std::uint64_t(uniform() * double(n)) % n;
    }

    // standard normal via Box-Muller (no cached spare, fully stateless
    // w.r.t. call history beyond the counter)
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }
};

// Derive an independent stream from a seed and up to three keys.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t k0, std::uint64_t k1 = 0, std::uint64_t k2 = 0) {
    std::uint64_t s = Rng::mix(seed ^ 0x5851f42d4c957f2dULL);
    s = Rng::mix(s ^ Rng::mix(k0 + 0x14057b7ef767814fULL));
    s = Rng::mix(s ^ Rng::mix(k1 + 0x27bb2ee687b0b0fdULL));
    s = Rng::mix(s ^ Rng::mix(k2 + 0xb504f333f9de6484ULL));
    return Rng(s);
}

} // namespace stereopose
