// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace kwsim {

// Counter-free splittable RNG built on SplitMix64.
//
// Every consumer derives its own stream from (seed, path...) so that
// independent pieces of the simulation (per macro, per trial, per epoch)
// never share mutable state and results do not depend on evaluation order.
class RngStream {
public:
    RngStream() = default;
    explicit RngStream(uint64_t state) : state_(state) {}

    // Hash a seed plus a short index path into an independent stream.
    static RngStream derive(uint64_t seed, std::initializer_list<uint64_t> path) {
        uint64_t h = mix(seed ^ 0x9e3779b97f4a7c15ull);
        for (uint64_t p : path) h = mix(h ^ mix(p + 0x6a09e667f3bcc909ull));
        return RngStream(h);
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return mix(state_);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Uniform integer in [lo, hi] (inclusive). Modulo bias is irrelevant at
    // the range sizes used here (all far below 2^32).
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
    }

    // Standard normal via Box-Muller. Explicit formula rather than
    // std::normal_distribution, which is implementation-defined and would
    // break fixed-seed reproducibility.
    double next_gaussian() {
        double u1 = next_double();
        double u2 = next_double();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    static uint64_t mix(uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

    uint64_t state_ = 0;
};

} // namespace kwsim
