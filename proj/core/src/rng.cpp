#include "sepnorm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace sepnorm {

double Rng::uniform() {
    // 53-bit mantissa from the top of the 64-bit word
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double Rng::normal(double mean, double std) { return mean + std * normal(); }

double Rng::truncated_normal(double std) {
    double z = normal();
    while (std::abs(z) > 2.0) z = normal();
    return std * z;
}

std::size_t Rng::index(std::size_t n) {
    // rejection sampling for an unbiased bounded draw
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return static_cast<std::size_t>(v % n);
}

std::vector<std::size_t> Rng::sample_without_replacement(std::size_t n, std::size_t k) {
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + index(n - i);
        std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    std::sort(pool.begin(), pool.end());
    return pool;
}

std::string Rng::serialize() const {
    std::ostringstream oss;
    oss << engine_;
    return oss.str();
}

void Rng::deserialize(const std::string& state) {
    std::istringstream iss(state);
    iss >> engine_;
}

}  // namespace sepnorm
