#pragma once

// Seeded RNG helpers. Distributions are hand-rolled on top of mt19937_64 so
// streams are identical across standard library implementations.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "sfc/tensor.hpp"

namespace sfc {

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    double uniform() {  // [0, 1)
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller, one value per call (second value discarded for simplicity).
    double gaussian(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    std::size_t index(std::size_t n) { return static_cast<std::size_t>(gen_() % n); }

    // Weighted choice; weights need not be normalized.
    std::size_t choice(const std::vector<double>& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        double r = uniform() * total;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            r -= weights[i];
            if (r < 0.0) return i;
        }
        return weights.size() - 1;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
    }

    Tensor gaussian_tensor(std::vector<std::size_t> shape, double stddev) {
        Tensor t(std::move(shape));
        for (double& x : t.mut()) x = gaussian(0.0, stddev);
        return t;
    }

    uint64_t raw() { return gen_(); }

private:
    std::mt19937_64 gen_;
};

}  // namespace sfc
