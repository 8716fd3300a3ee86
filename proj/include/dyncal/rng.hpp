#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "dyncal/errors.hpp"

namespace dyncal {

// Deterministic random stream built on mt19937_64 with explicit transforms
// (standard-library distributions are implementation-defined, so the same
// seed would not reproduce across toolchains). The transforms used here are
// documented in dataset manifests:
//   uniform  - top 53 bits of the engine output
//   int      - rejection sampling on the engine output
//   normal   - Box-Muller (two uniforms per draw, no cache)
//   gamma    - Marsaglia-Tsang squeeze for shape >= 1, boost below 1
//   beta     - ratio of two gamma draws
class RandomStream {
public:
    explicit RandomStream(std::uint64_t seed) : engine_(seed) {}

    static constexpr const char* algorithm() {
        return "mt19937_64; uniform=53-bit, normal=box-muller, gamma=marsaglia-tsang, beta=gamma-ratio";
    }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi], inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        if (lo > hi) throw UsageError("uniform_int: empty range");
        std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
        if (range == 0) return lo + static_cast<std::int64_t>(engine_()); // full 64-bit range
        std::uint64_t bound = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % range;
        std::uint64_t x;
        do { x = engine_(); } while (x >= bound);
        return lo + static_cast<std::int64_t>(x % range);
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = 1.0 - uniform(); // (0, 1], keeps log finite
        double u2 = uniform();
        double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
        return mean + stddev * z;
    }

    // Gamma(shape, 1) for shape > 0.
    double gamma(double shape) {
        if (shape <= 0.0) throw UsageError("gamma: shape must be positive");
        if (shape < 1.0) {
            double u = uniform();
            if (u <= 0.0) u = 0x1.0p-53;
            return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        // Marsaglia & Tsang (2000)
        double d = shape - 1.0 / 3.0;
        double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = normal();
            double t = 1.0 + c * x;
            if (t <= 0.0) continue;
            double v = t * t * t;
            double u = uniform();
            if (u <= 0.0) u = 0x1.0p-53;
            double x2 = x * x;
            if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
            if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    double beta(double a, double b) {
        double x = gamma(a);
        double y = gamma(b);
        return x / (x + y);
    }

    // Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(
                uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

} // namespace dyncal
