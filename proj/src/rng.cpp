#include "crowdmlp/rng.hpp"

#include <cmath>

namespace crowdmlp {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

} // namespace

std::uint64_t RngState::next_u64() {
    state_ += kGolden;
    return mix64(state_);
}

double RngState::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngState::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

std::int64_t RngState::uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo + 1);
    return lo + static_cast<std::int64_t>(next_u64() % span);
}

double RngState::normal() {
    // 1 - u keeps the log argument strictly positive.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

double RngState::normal(double mean, double stddev) {
    return mean + stddev * normal();
}

bool RngState::bernoulli(double p) {
    return uniform() < p;
}

RngState RngState::split(std::uint64_t stream) const {
    return RngState(mix64(seed_ + kGolden * (stream + 1)));
}

RngState RngState::restore(std::uint64_t seed, std::uint64_t state) {
    RngState rng(seed);
    rng.state_ = state;
    return rng;
}

} // namespace crowdmlp
