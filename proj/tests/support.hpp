#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "dgc/pde_solver.hpp"
#include "dgc/rng.hpp"

namespace dgc::testing_support {

inline Problem default_problem(int N = 100, int M = 200, double T = 1.0, double alpha = 0.5,
                               CoefficientSpec cs = {}, SolverParams sp = {}) {
    auto space = make_space_grid(N);
    auto time = make_time_grid(T, M);
    auto sub = snap_subdomains(SubdomainSpec{}, space);
    auto deg = make_power_spec(alpha);
    return make_problem(deg, space, time, sub, make_coefficients(cs, space, time, sub), sp);
}

inline CoefficientSpec heat_spec() {
    CoefficientSpec c;
    c.bAmp = 0.0;
    c.d1 = c.d2 = 0.0;
    c.b11 = c.b12 = c.b22 = 0.0;
    c.b21 = 1e-300;  // keeps the omega1 hypothesis formally satisfied
    return c;
}

inline std::vector<double> sine_nodes(int N, double k = 1.0) {
    std::vector<double> u(N + 1, 0.0);
    for (int j = 1; j < N; ++j) u[j] = std::sin(k * std::numbers::pi * j / N);
    return u;
}

inline Field random_field(const Problem& p, std::uint64_t seed, std::uint64_t id, bool omegaOnly = false) {
    SplitMix64 rng(seed, id);
    Field f(p.time.levels(), p.space.nodes());
    for (int k = 1; k <= p.time.M; ++k)
        for (int j = 1; j < p.space.N; ++j)
            if (!omegaOnly || p.chi[j] > 0.0) f(k, j) = rng.uniform(-1.0, 1.0);
    return f;
}

inline double max_abs(const Field& f) {
    double m = 0.0;
    for (double v : f.raw()) m = std::max(m, std::abs(v));
    return m;
}

}  // namespace dgc::testing_support
