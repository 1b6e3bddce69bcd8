#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "dgc/common.hpp"
#include "dgc/core_domain.hpp"

namespace dgc {

// Constant-in-space data from which CoefficientSet is tabulated.
struct CoefficientSpec {
    double bMean = 1.0;
    double bAmp = 0.5;  // b(t) = bMean + bAmp sin(pi t / T)
    double d1 = 0.1, d2 = 0.1;
    double b11 = 1.0, b12 = 0.5, b21 = 1.0, b22 = 1.0;
};

struct CoefficientSet {
    std::vector<double> b, bDot;  // per time level
    double b0 = 0.0;              // min b
    double Bbound = 0.0;          // max |b'/b|, two-sided
    Field d1, d2, b11, b12, b21, b22;  // (M+1) x (N+1)
    double b21min = 0.0;               // inf of b21 on omega1 x [0,T]
    double maxAbsDrift = 0.0;
    double maxAbsCoupling = 0.0;
};

CoefficientSet make_coefficients(const CoefficientSpec& spec, const SpaceGrid& grid, const TimeGrid& tg,
                                 const SubdomainSpec& sub);
// Recomputes the recorded bounds and checks b0 > 0, b21min > 0 and the discrete b'/b bound.
void validate_coefficients(CoefficientSet& c, const SpaceGrid& grid, const TimeGrid& tg, const SubdomainSpec& sub);

struct SolverParams {
    double theta = 1.0;
    bool upwind = false;
    int picardSweeps = 1;
};

struct Problem {
    DegeneracySpec deg;
    SpaceGrid space;
    TimeGrid time;
    SubdomainSpec sub;  // snapped
    CoefficientSet coeffs;
    SolverParams solver;
    std::vector<double> amid;   // a(x_{j+1/2})
    std::vector<double> sqrta;  // sqrt(a(x_j))
    std::vector<double> chi;    // trapezoid indicator of omega
};

Problem make_problem(const DegeneracySpec& deg, const SpaceGrid& space, const TimeGrid& time,
                     const SubdomainSpec& sub, CoefficientSet coeffs, SolverParams solver = {});

// Same problem read backwards in time: coefficients at t are those at T - t.
Problem time_reversed(const Problem& p);

struct Tridiagonal {
    std::vector<double> lo, di, up;  // rows 0 and N are zero (Dirichlet)
    std::vector<double> apply(const std::vector<double>& w) const;
};

// Row j: b(t)[a_{j+1/2}(w_{j+1}-w_j) - a_{j-1/2}(w_j-w_{j-1})]/h^2 - d_i sqrt(a_j) (w_{j+1}-w_{j-1})/(2h).
// whichEq is 1 or 2 and selects the drift d1 or d2.
Tridiagonal assemble_degenerate_operator(const Problem& p, int k, int whichEq);

using Vec2 = std::array<double, 2>;
using Mat2 = std::array<double, 4>;  // row-major
using Level = std::vector<Vec2>;     // one value pair per node

// Block tridiagonal L with y_t + L y = f; L = -(elliptic part) + couplings.
struct BlockOperator {
    std::vector<Mat2> lower, diag, upper;  // indexed by node; only interior rows used
    Level apply(const Level& y) const;
    Level apply_transpose(const Level& y) const;
};

BlockOperator assemble_block_operator(const Problem& p, int k);

// Solves (c I + s L) x = r, or its transpose, on interior nodes; x is zero on the boundary.
Level solve_shifted(const BlockOperator& L, double c, double s, const Level& r, bool transpose);

struct StatePair {
    Field u, v;
};

struct AdjointPair {
    Field phi, psi;  // row M holds terminal data, row k-1 the step-k unknown
    std::vector<double> phiInit, psiInit;  // the vectors paired with u0 and v0
};

// Source rows are indexed by time level: row k drives the step ending at t_k (row 0 unused).
// Empty fields mean zero.
struct ForwardData {
    std::vector<double> u0, v0;
    Field h, H1, H2;
};

// Extra left-hand terms F_i(x, t, u, v) of the semilinear system.
struct SemilinearHooks {
    std::function<double(double, double, double, double)> F1, F2;
};

struct ForwardDiagnostics {
    double maxContraction = 0.0;  // largest observed Picard contraction estimate
};

StatePair solve_forward(const Problem& p, const ForwardData& data, const SemilinearHooks* hooks = nullptr,
                        ForwardDiagnostics* diag = nullptr);

// Backward march of the exact discrete transpose. F rows are indexed like forward sources.
AdjointPair solve_adjoint(const Problem& p, const std::vector<double>& phiT, const std::vector<double>& psiT,
                          const Field& F1, const Field& F2);
AdjointPair solve_adjoint(const Problem& p, const std::vector<double>& phiT, const Field& F1, const Field& F2);

// Converts nodal source values at levels into step rows for the theta scheme.
Field blend_source(const Field& nodal, double theta);

double inner(const std::vector<double>& a, const std::vector<double>& b, const SpaceGrid& g);
// sum_k dt <src_k, adj_{k-1}> over steps, optionally weighted by the omega indicator.
double pair_steps(const Problem& p, const Field& src, const Field& adj, bool omegaOnly = false);
// sum_k dt <F_k, y_k> over steps.
double pair_levels(const Problem& p, const Field& F, const Field& y);

struct DualityTerms {
    double terminal = 0.0, initial = 0.0, control = 0.0, sources = 0.0, adjointSources = 0.0;
    double residual() const { return terminal - initial - control - sources + adjointSources; }
    double relative() const;
};

DualityTerms duality_terms(const Problem& p, const ForwardData& data, const StatePair& y, const AdjointPair& z,
                           const std::vector<double>& phiT, const std::vector<double>& psiT, const Field& F1,
                           const Field& F2);

struct EnergyReport {
    double K1 = 0, K2 = 0, K3 = 0;
    double lhs1 = 0, lhs2 = 0, lhs3 = 0;
    double data = 0;
    double aprioriRate = 0;            // C in e^{C T}
    double fitted1 = 0, fitted2 = 0, fitted3 = 0;
    double fittedConstant = 0;         // max_i lhs_i / data, the fitted e^{C* T}
    bool pass1 = true, pass2 = true, pass3 = true;
    bool pass() const { return pass1 && pass2 && pass3; }
};

EnergyReport check_energy_estimates(const Problem& p, const StatePair& traj, const ForwardData& data);

void write_trajectory_csv(const Problem& p, const StatePair& y, const std::string& path);
void write_trajectory_binary(const Field& a, const Field& b, const std::string& path);
StatePair read_trajectory_binary(const std::string& path);

}  // namespace dgc
