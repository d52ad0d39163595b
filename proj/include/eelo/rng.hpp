#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace eelo {

// Uniform double in [0, 1) built from the top 53 bits of the generator.
// Fully specified so results do not depend on libstdc++ distribution details.
inline double uniform01(std::mt19937_64& gen) {
    return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

// Box-Muller normal sampler with a cached spare, deterministic per seed.
class GaussianRng {
public:
    explicit GaussianRng(uint64_t seed) : gen_(seed) {}

    double next(double mean = 0.0, double stddev = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + spare_ * stddev;
        }
        double u1 = uniform01(gen_);
        double u2 = uniform01(gen_);
        // avoid log(0)
        double r = std::sqrt(-2.0 * std::log(1.0 - u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return mean + r * std::cos(theta) * stddev;
    }

    std::mt19937_64& generator() { return gen_; }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace eelo
