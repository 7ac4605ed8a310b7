#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace clipgs {

/// Seeded generator whose output sequence is fixed across standard libraries
/// (mt19937_64 is fully specified; the distributions below are hand-rolled).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do v = engine_(); while (v >= limit);
        return v % n;
    }

    double normal() {
        // Box-Muller; the second variate is discarded to keep the stream simple
        double u1 = uniform();
        while (u1 <= 0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::mt19937_64 engine_;
};

} // namespace clipgs
