// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace mural {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Seed splitting: every stage of a run gets its own stream derived from the
// root seed, a stage id and a per-stage counter (sample index, step, ...).
//   derive_seed(root, stage, counter) = splitmix64(splitmix64(root ^ (stage * golden)) + counter)
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stage, std::uint64_t counter = 0) {
    return splitmix64(splitmix64(root ^ (stage * 0x9E3779B97F4A7C15ull)) + counter);
}

// Stable stage ids for derive_seed.
namespace stage {
inline constexpr std::uint64_t synth_train = 1;
inline constexpr std::uint64_t synth_test = 2;
inline constexpr std::uint64_t init_params = 3;
inline constexpr std::uint64_t train = 4;
inline constexpr std::uint64_t train_diffusers = 5;
inline constexpr std::uint64_t sample = 6;
inline constexpr std::uint64_t contour = 7;
}  // namespace stage

// Portable generator: mt19937_64 bits with hand-written transforms, so that
// streams are identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n <= 1) return 0;
        const std::uint64_t limit = ~0ull - (~0ull % n);
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    // Standard normal via Box-Muller; the second variate is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// FNV-1a 64; used for config and checkpoint fingerprints.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace mural
