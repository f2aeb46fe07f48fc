#pragma once

#include <cmath>
#include <cstdint>

namespace dcglr {

// Counter-free splitmix64 stream. Deterministic across platforms, cheap to
// fork: every sample/epoch gets its own stream derived from the run seed, so
// resume never has to serialize engine state.
class RngStream {
public:
    explicit RngStream(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller.
    double gaussian() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Child stream for an indexed unit of work (sample, epoch, crop).
    RngStream fork(uint64_t index) const {
        RngStream child(state_ ^ (0x5851f42d4c957f2dull * (index + 1)));
        child.next_u64();
        return child;
    }

private:
    uint64_t state_;
};

}  // namespace dcglr
