#include "dgc/core_domain.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dgc {

DegeneracySpec make_power_spec(double alpha) {
    DegeneracySpec s{alpha, alpha};
    validate(s);
    return s;
}

void validate(const DegeneracySpec& spec) {
    require(std::isfinite(spec.alpha) && spec.alpha >= 0.0, ErrorKind::Config,
            "alpha must be a finite nonnegative number");
    require(spec.alpha < 1.0, ErrorKind::Config, "weakly degenerate requires α<1");
    require(spec.K < 1.0 && spec.K >= spec.alpha - 1e-15, ErrorKind::Config,
            "degeneracy constant K must satisfy alpha <= K < 1");
}

SpaceGrid make_space_grid(int N) {
    require(N >= 4, ErrorKind::Config, "space grid needs N >= 4 cells");
    return SpaceGrid{N};
}

TimeGrid make_time_grid(double T, int M) {
    require(std::isfinite(T) && T > 0.0, ErrorKind::Config, "horizon T must be positive");
    require(M >= 2, ErrorKind::Config, "time grid needs M >= 2 steps");
    TimeGrid g{T, M, 0.5 * T / M};
    return g;
}

NodeRange node_range(const Interval& iv, const SpaceGrid& grid) {
    return {static_cast<int>(std::lround(iv.lo * grid.N)), static_cast<int>(std::lround(iv.hi * grid.N))};
}

SubdomainSpec snap_subdomains(const SubdomainSpec& sub, const SpaceGrid& grid) {
    auto snap = [&](const Interval& iv, const char* name) {
        require(0.0 < iv.lo && iv.lo < iv.hi && iv.hi < 1.0, ErrorKind::Config,
                std::string(name) + " must be a nonempty subinterval of (0,1)");
        NodeRange r = node_range(iv, grid);
        require(0 < r.jlo && r.jlo < r.jhi && r.jhi < grid.N, ErrorKind::Config,
                std::string(name) + " collapses after snapping to the grid");
        return Interval{grid.x(r.jlo), grid.x(r.jhi)};
    };
    SubdomainSpec out{snap(sub.omega, "omega"), snap(sub.omegaPrime, "omega_prime"), snap(sub.omega1, "omega1")};
    require(out.omega.lo < out.omegaPrime.lo && out.omegaPrime.hi < out.omega.hi, ErrorKind::Config,
            "closure of omega_prime must lie inside omega");
    require(out.omega.lo < out.omega1.lo && out.omega1.hi < out.omega.hi, ErrorKind::Config,
            "closure of omega1 must lie inside omega");
    return out;
}

std::vector<double> indicator_weights(const Interval& iv, const SpaceGrid& grid) {
    std::vector<double> chi(grid.nodes(), 0.0);
    NodeRange r = node_range(iv, grid);
    for (int j = std::max(r.jlo, 0); j <= std::min(r.jhi, grid.N); ++j) chi[j] = 1.0;
    if (r.jlo >= 0 && r.jlo <= grid.N) chi[r.jlo] = 0.5;
    if (r.jhi >= 0 && r.jhi <= grid.N) chi[r.jhi] = 0.5;
    return chi;
}

double eval_a(const DegeneracySpec& spec, double x) {
    if (!(x >= 0.0 && x <= 1.0)) {
        std::ostringstream os;
        os << "eval_a: x = " << x << " outside [0,1]";
        fail(ErrorKind::Domain, os.str());
    }
    if (spec.alpha == 0.0) return 1.0;
    return std::pow(x, spec.alpha);
}

double eval_da(const DegeneracySpec& spec, double x) {
    if (spec.alpha == 0.0) return 0.0;
    require(x > 0.0 && x <= 1.0, ErrorKind::Domain, "eval_da: x must lie in (0,1]");
    return spec.alpha * std::pow(x, spec.alpha - 1.0);
}

double max_degeneracy_ratio(const DegeneracySpec& spec, const SpaceGrid& grid) {
    double worst = 0.0;
    for (int j = 0; j < grid.N; ++j) {
        double x = grid.xmid(j);
        worst = std::max(worst, x * eval_da(spec, x) / eval_a(spec, x));
    }
    return worst;
}

double trapz(std::span<const double> f, double h) {
    if (f.size() < 2) return 0.0;
    double s = 0.5 * (f.front() + f.back());
    for (std::size_t i = 1; i + 1 < f.size(); ++i) s += f[i];
    return s * h;
}

double l2_norm_sq(std::span<const double> u, const SpaceGrid& grid) {
    double s = 0.5 * (u.front() * u.front() + u.back() * u.back());
    for (std::size_t i = 1; i + 1 < u.size(); ++i) s += u[i] * u[i];
    return s * grid.h();
}

namespace {

void check_nodal(std::span<const double> u, const SpaceGrid& grid, bool both_ends, const char* who) {
    require(static_cast<int>(u.size()) == grid.nodes(), ErrorKind::Contract,
            std::string(who) + ": expected N+1 nodal values");
    require(u.front() == 0.0, ErrorKind::Contract, std::string(who) + ": nonzero value at x=0");
    if (both_ends) require(u.back() == 0.0, ErrorKind::Contract, std::string(who) + ": nonzero value at x=1");
}

}  // namespace

double grad_a_sq(std::span<const double> u, const DegeneracySpec& spec, const SpaceGrid& grid) {
    const double h = grid.h();
    double s = 0.0;
    for (int j = 0; j < grid.N; ++j) {
        double du = (u[j + 1] - u[j]) / h;
        s += eval_a(spec, grid.xmid(j)) * du * du;
    }
    return s * h;
}

std::vector<double> flux_divergence(std::span<const double> u, const DegeneracySpec& spec,
                                    const SpaceGrid& grid) {
    const double h = grid.h();
    std::vector<double> out(grid.nodes(), 0.0);
    for (int j = 1; j < grid.N; ++j) {
        double fr = eval_a(spec, grid.xmid(j)) * (u[j + 1] - u[j]);
        double fl = eval_a(spec, grid.xmid(j - 1)) * (u[j] - u[j - 1]);
        out[j] = (fr - fl) / (h * h);
    }
    return out;
}

double h1a_norm(std::span<const double> u, const DegeneracySpec& spec, const SpaceGrid& grid) {
    check_nodal(u, grid, true, "h1a_norm");
    return l2_norm_sq(u, grid) + grad_a_sq(u, spec, grid);
}

double h2a_norm(std::span<const double> u, const DegeneracySpec& spec, const SpaceGrid& grid) {
    check_nodal(u, grid, true, "h2a_norm");
    auto div = flux_divergence(u, spec, grid);
    return h1a_norm(u, spec, grid) + l2_norm_sq(div, grid);
}

double hardy_quotient(std::span<const double> w, const DegeneracySpec& spec, const SpaceGrid& grid) {
    check_nodal(w, grid, false, "hardy_quotient");
    std::vector<double> f(grid.nodes(), 0.0);
    for (int j = 1; j <= grid.N; ++j) {
        double x = grid.x(j);
        f[j] = eval_a(spec, x) / (x * x) * w[j] * w[j];
    }
    double num = trapz(f, grid.h());
    double den = grad_a_sq(w, spec, grid);
    require(den > 0.0, ErrorKind::Domain, "hardy_quotient: w is identically zero");
    return num / den;
}

}  // namespace dgc
