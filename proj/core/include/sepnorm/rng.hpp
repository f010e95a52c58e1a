#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace sepnorm {

// Seeded random source with explicitly implemented distributions.
// std::normal_distribution is implementation-defined, so the transforms
// live here; identical seeds give identical streams on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1)
    double uniform();
    double uniform(double lo, double hi);

    // standard normal via Box-Muller (one value per call, cache unused)
    double normal();
    double normal(double mean, double std);

    // normal resampled until |z| <= 2, the usual truncated-normal init
    double truncated_normal(double std);

    // uniform integer in [0, n)
    std::size_t index(std::size_t n);

    // random k-subset of {0..n-1} by partial Fisher-Yates, sorted ascending
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

    std::string serialize() const;
    void deserialize(const std::string& state);

private:
    std::mt19937_64 engine_;
};

}  // namespace sepnorm
