#pragma once

#include <cstdint>
#include <cmath>
#include <random>
#include <vector>

namespace cmta {

// Seeded random source with hand-rolled distributions so that streams are
// bitwise reproducible across standard-library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller (one draw per call).
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1], keeps the log finite
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Uniform index in [0, n). Modulo bias is negligible for the sizes used here.
    std::size_t uniform_index(std::size_t n) {
        return static_cast<std::size_t>(next_u64() % static_cast<std::uint64_t>(n));
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[uniform_index(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace cmta
