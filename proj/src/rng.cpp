#include "dgc/rng.hpp"

#include <cmath>
#include <numbers>

namespace dgc {

std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

SplitMix64::SplitMix64(std::uint64_t seed, std::uint64_t streamId)
    : state_(mix64(seed) ^ mix64(streamId * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL)) {}

std::uint64_t SplitMix64::next() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix64(state_);
}

double SplitMix64::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

double SplitMix64::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double SplitMix64::normal() {
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<double> sine_coefficients(std::uint64_t seed, std::uint64_t sampleId, int K) {
    SplitMix64 rng(seed, sampleId);
    std::vector<double> c(K);
    for (int k = 1; k <= K; ++k) c[k - 1] = rng.uniform(-1.0, 1.0) / (static_cast<double>(k) * k);
    return c;
}

std::vector<double> sine_series_nodes(const std::vector<double>& coef, int N) {
    std::vector<double> u(N + 1, 0.0);
    for (int j = 1; j < N; ++j) {
        double x = static_cast<double>(j) / N;
        double s = 0.0;
        for (std::size_t k = 0; k < coef.size(); ++k) s += coef[k] * std::sin((k + 1.0) * std::numbers::pi * x);
        u[j] = s;
    }
    return u;
}

}  // namespace dgc
