#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "hgpe/tensor.hpp"

namespace hgpe {

// Deterministic RNG. Uniform/normal draws are derived from raw engine
// output rather than std distributions, so streams are identical across
// standard-library implementations.
class Rng {
  public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive range
        return lo + static_cast<int64_t>(eng_() % static_cast<uint64_t>(hi - lo + 1));
    }

    // Box-Muller; one draw per call (the pair's second half is discarded to
    // keep the stream position independent of call parity).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Normal truncated to +-2 sigma by rejection.
    double truncated_normal(double mean, double stddev) {
        double z = normal();
        while (std::fabs(z) > 2.0) z = normal();
        return mean + stddev * z;
    }

    template <typename T>
    void fill_uniform(TensorT<T>& t, double lo, double hi) {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(uniform(lo, hi));
    }

    template <typename T>
    void fill_normal(TensorT<T>& t, double mean, double stddev) {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(normal(mean, stddev));
    }

    template <typename T>
    void fill_truncated_normal(TensorT<T>& t, double mean, double stddev) {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(truncated_normal(mean, stddev));
    }

  private:
    std::mt19937_64 eng_;
};

}  // namespace hgpe
