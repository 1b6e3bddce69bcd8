#pragma once

#include <span>
#include <utility>
#include <vector>

#include "dgc/common.hpp"

namespace dgc {

// a(x) = x^alpha. alpha = 0 is the non-degenerate (heat) validation mode.
struct DegeneracySpec {
    double alpha = 0.5;
    double K = 0.5;
};

DegeneracySpec make_power_spec(double alpha);
void validate(const DegeneracySpec& spec);

struct SpaceGrid {
    int N = 100;

    double h() const { return 1.0 / N; }
    double x(int j) const { return static_cast<double>(j) / N; }
    double xmid(int j) const { return (j + 0.5) / N; }  // x_{j+1/2}
    int nodes() const { return N + 1; }
};

struct TimeGrid {
    double T = 1.0;
    int M = 200;
    double clipDelta = 0.0025;

    double dt() const { return T / M; }
    double t(int k) const { return T * k / M; }
    int levels() const { return M + 1; }
};

SpaceGrid make_space_grid(int N);
TimeGrid make_time_grid(double T, int M);  // clipDelta = dt/2

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
    bool contains(double x) const { return lo <= x && x <= hi; }
};

// Node index range [jlo, jhi] of an interval snapped to the grid.
struct NodeRange {
    int jlo = 0;
    int jhi = 0;
};

struct SubdomainSpec {
    Interval omega{0.6, 0.9};
    Interval omegaPrime{0.65, 0.85};
    Interval omega1{0.7, 0.8};
};

// Snaps every endpoint to its nearest node and checks nesting; throws Config on failure.
SubdomainSpec snap_subdomains(const SubdomainSpec& sub, const SpaceGrid& grid);
NodeRange node_range(const Interval& iv, const SpaceGrid& grid);

// Trapezoid weights of the snapped interval, zero outside it.
std::vector<double> indicator_weights(const Interval& iv, const SpaceGrid& grid);

double eval_a(const DegeneracySpec& spec, double x);
double eval_da(const DegeneracySpec& spec, double x);  // a'(x), x > 0 when alpha > 0

// max over midpoints of x a'(x) / a(x).
double max_degeneracy_ratio(const DegeneracySpec& spec, const SpaceGrid& grid);

double trapz(std::span<const double> f, double h);
double l2_norm_sq(std::span<const double> u, const SpaceGrid& grid);

// Squared weighted norms. Both require u_0 = u_N = 0.
double h1a_norm(std::span<const double> u, const DegeneracySpec& spec, const SpaceGrid& grid);
double h2a_norm(std::span<const double> u, const DegeneracySpec& spec, const SpaceGrid& grid);

// int a u_x^2 from midpoint differences.
double grad_a_sq(std::span<const double> u, const DegeneracySpec& spec, const SpaceGrid& grid);
// Nodal flux divergence (a u_x)_x at interior nodes; boundary entries are 0.
std::vector<double> flux_divergence(std::span<const double> u, const DegeneracySpec& spec,
                                    const SpaceGrid& grid);

double hardy_quotient(std::span<const double> w, const DegeneracySpec& spec, const SpaceGrid& grid);

}  // namespace dgc
