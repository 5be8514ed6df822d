#pragma once

#include <cmath>
#include <cstdint>

#include "splm/error.hpp"

namespace splm {

// splitmix64 finalizer; also used as the stream-derivation hash.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b) { return mix64(a ^ mix64(b)); }

template <typename... Rest>
uint64_t mix64(uint64_t a, uint64_t b, Rest... rest) {
    return mix64(mix64(a, b), static_cast<uint64_t>(rest)...);
}

// Deterministic, platform-independent RNG. All stochastic choices in the
// project go through this type so that runs are reproducible bit-for-bit;
// std::random distributions are implementation-defined and are not used.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t x = state_;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n), n >= 1. Rejection sampling keeps it unbiased.
    int64_t next_below(int64_t n) {
        require(n >= 1, "Rng::next_below: n must be >= 1, got ", n);
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return static_cast<int64_t>(x % un);
    }

    // Standard normal via Box-Muller (no cached second value).
    double next_gaussian() {
        double u1 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        const double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    bool next_bernoulli(double p) { return next_double() < p; }

private:
    uint64_t state_;
};

}  // namespace splm
