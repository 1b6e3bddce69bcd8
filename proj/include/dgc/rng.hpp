#pragma once

#include <cstdint>
#include <vector>

namespace dgc {

// SplitMix64 (Steele, Lea, Flood 2014). A stream is keyed by (seed, streamId).
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed, std::uint64_t streamId = 0);

    std::uint64_t next();
    double uniform();                  // [0, 1), 53 random bits
    double uniform(double lo, double hi);
    double normal();                   // Box-Muller, one value per call

private:
    std::uint64_t state_;
};

std::uint64_t mix64(std::uint64_t z);

// Coefficients c_k = U(-1,1) / k^2, k = 1..K.
std::vector<double> sine_coefficients(std::uint64_t seed, std::uint64_t sampleId, int K);

// sum_k c_k sin(k pi x) at the nodes x_j = j/N.
std::vector<double> sine_series_nodes(const std::vector<double>& coef, int N);

}  // namespace dgc
