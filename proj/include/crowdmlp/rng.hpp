#pragma once

#include <cstdint>

namespace crowdmlp {

// Deterministic splittable generator (splitmix64 core). The same seed and the
// same call sequence produce the same stream on every platform; split()
// derives an independent child stream from the seed alone, so per-sample
// streams do not depend on how much the parent has been consumed.
class RngState {
public:
    RngState() : RngState(0) {}
    explicit RngState(std::uint64_t seed) : seed_(seed), state_(seed) {}

    std::uint64_t next_u64();

    // Uniform double in [0, 1), 53-bit resolution.
    double uniform();
    double uniform(double lo, double hi);

    // Uniform integer in [lo, hi], both ends inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

    // Standard normal via Box-Muller; consumes exactly two draws per call.
    double normal();
    double normal(double mean, double stddev);

    bool bernoulli(double p);

    // Child stream keyed on (seed, stream). Stable under parent consumption.
    RngState split(std::uint64_t stream) const;

    std::uint64_t seed() const { return seed_; }
    std::uint64_t state() const { return state_; }
    static RngState restore(std::uint64_t seed, std::uint64_t state);

private:
    std::uint64_t seed_;
    std::uint64_t state_;
};

} // namespace crowdmlp
