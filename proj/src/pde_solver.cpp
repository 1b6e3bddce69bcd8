#include "dgc/pde_solver.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "dgc/io.hpp"

namespace dgc {

CoefficientSet make_coefficients(const CoefficientSpec& spec, const SpaceGrid& grid, const TimeGrid& tg,
                                 const SubdomainSpec& sub) {
    CoefficientSet c;
    const int K = tg.levels(), J = grid.nodes();
    const double w = std::numbers::pi / tg.T;
    c.b.resize(K);
    c.bDot.resize(K);
    for (int k = 0; k < K; ++k) {
        double t = tg.t(k);
        c.b[k] = spec.bMean + spec.bAmp * std::sin(w * t);
        c.bDot[k] = spec.bAmp * w * std::cos(w * t);
    }
    c.d1 = Field(K, J, spec.d1);
    c.d2 = Field(K, J, spec.d2);
    c.b11 = Field(K, J, spec.b11);
    c.b12 = Field(K, J, spec.b12);
    c.b21 = Field(K, J, spec.b21);
    c.b22 = Field(K, J, spec.b22);
    validate_coefficients(c, grid, tg, sub);
    return c;
}

void validate_coefficients(CoefficientSet& c, const SpaceGrid& grid, const TimeGrid& tg, const SubdomainSpec& sub) {
    const int K = tg.levels(), J = grid.nodes();
    require(static_cast<int>(c.b.size()) == K, ErrorKind::Contract, "b(t) must be sampled at every time level");
    for (const Field* f : {&c.d1, &c.d2, &c.b11, &c.b12, &c.b21, &c.b22})
        require(static_cast<int>(f->rows()) == K && static_cast<int>(f->cols()) == J, ErrorKind::Contract,
                "coefficient arrays must be (M+1) x (N+1)");
    c.b0 = *std::min_element(c.b.begin(), c.b.end());
    require(c.b0 > 0.0, ErrorKind::Config, "b(t) must be bounded below by b0 > 0");
    c.Bbound = 0.0;
    for (int k = 0; k < K; ++k) {
        if (!c.bDot.empty()) c.Bbound = std::max(c.Bbound, std::abs(c.bDot[k]) / c.b[k]);
        if (k + 1 < K) c.Bbound = std::max(c.Bbound, std::abs(c.b[k + 1] - c.b[k]) / (tg.dt() * c.b[k]));
    }
    c.maxAbsDrift = 0.0;
    for (const Field* f : {&c.d1, &c.d2})
        for (double v : f->raw()) c.maxAbsDrift = std::max(c.maxAbsDrift, std::abs(v));
    c.maxAbsCoupling = 0.0;
    for (const Field* f : {&c.b11, &c.b12, &c.b21, &c.b22})
        for (double v : f->raw()) c.maxAbsCoupling = std::max(c.maxAbsCoupling, std::abs(v));
    require(std::isfinite(c.maxAbsDrift) && std::isfinite(c.maxAbsCoupling), ErrorKind::Config,
            "drift and coupling coefficients must be bounded");
    NodeRange r1 = node_range(sub.omega1, grid);
    c.b21min = 1e300;
    for (int k = 0; k < K; ++k)
        for (int j = r1.jlo; j <= r1.jhi; ++j) c.b21min = std::min(c.b21min, c.b21(k, j));
    require(c.b21min > 0.0, ErrorKind::Config, "b21 must satisfy inf over omega1 x (0,T) > 0");
}

Problem make_problem(const DegeneracySpec& deg, const SpaceGrid& space, const TimeGrid& time,
                     const SubdomainSpec& sub, CoefficientSet coeffs, SolverParams solver) {
    validate(deg);
    require(solver.theta >= 0.5 && solver.theta <= 1.0, ErrorKind::Config, "theta must lie in [0.5, 1]");
    require(solver.picardSweeps >= 1 && solver.picardSweeps <= 25, ErrorKind::Config,
            "picard sweeps must lie in [1, 25]");
    Problem p{deg, space, time, sub, std::move(coeffs), solver, {}, {}, {}};
    p.amid.resize(space.N);
    for (int j = 0; j < space.N; ++j) p.amid[j] = eval_a(deg, space.xmid(j));
    p.sqrta.resize(space.nodes());
    for (int j = 0; j <= space.N; ++j) p.sqrta[j] = std::sqrt(eval_a(deg, space.x(j)));
    p.chi = indicator_weights(sub.omega, space);
    return p;
}

Problem time_reversed(const Problem& p) {
    Problem r = p;
    const int K = p.time.levels();
    auto flip = [&](const Field& f) {
        Field g(f.rows(), f.cols());
        for (int k = 0; k < K; ++k)
            for (std::size_t j = 0; j < f.cols(); ++j) g(k, j) = f(K - 1 - k, j);
        return g;
    };
    for (int k = 0; k < K; ++k) {
        r.coeffs.b[k] = p.coeffs.b[K - 1 - k];
        if (!p.coeffs.bDot.empty()) r.coeffs.bDot[k] = -p.coeffs.bDot[K - 1 - k];
    }
    r.coeffs.d1 = flip(p.coeffs.d1);
    r.coeffs.d2 = flip(p.coeffs.d2);
    r.coeffs.b11 = flip(p.coeffs.b11);
    r.coeffs.b12 = flip(p.coeffs.b12);
    r.coeffs.b21 = flip(p.coeffs.b21);
    r.coeffs.b22 = flip(p.coeffs.b22);
    return r;
}

std::vector<double> Tridiagonal::apply(const std::vector<double>& w) const {
    const std::size_t n = di.size();
    std::vector<double> out(n, 0.0);
    for (std::size_t j = 1; j + 1 < n; ++j) out[j] = lo[j] * w[j - 1] + di[j] * w[j] + up[j] * w[j + 1];
    return out;
}

Tridiagonal assemble_degenerate_operator(const Problem& p, int k, int whichEq) {
    require(whichEq == 1 || whichEq == 2, ErrorKind::Contract, "whichEq must be 1 or 2");
    require(k >= 0 && k <= p.time.M, ErrorKind::Contract, "time level out of range");
    const int N = p.space.N;
    const double h = p.space.h();
    const double bt = p.coeffs.b[k];
    const Field& d = whichEq == 1 ? p.coeffs.d1 : p.coeffs.d2;
    Tridiagonal T{std::vector<double>(N + 1, 0.0), std::vector<double>(N + 1, 0.0), std::vector<double>(N + 1, 0.0)};
    for (int j = 1; j < N; ++j) {
        double ar = p.amid[j], al = p.amid[j - 1];
        T.lo[j] = bt * al / (h * h);
        T.up[j] = bt * ar / (h * h);
        T.di[j] = -bt * (al + ar) / (h * h);
        double v = d(k, j) * p.sqrta[j];
        if (p.solver.upwind) {
            if (v >= 0.0) {
                T.di[j] -= v / h;
                T.lo[j] += v / h;
            } else {
                T.up[j] += v / h;
                T.di[j] -= -v / h;
            }
        } else {
            T.up[j] -= v / (2.0 * h);
            T.lo[j] += v / (2.0 * h);
        }
    }
    return T;
}

namespace {

inline Vec2 mul(const Mat2& m, const Vec2& x) { return {m[0] * x[0] + m[1] * x[1], m[2] * x[0] + m[3] * x[1]}; }
inline Mat2 mul(const Mat2& a, const Mat2& b) {
    return {a[0] * b[0] + a[1] * b[2], a[0] * b[1] + a[1] * b[3], a[2] * b[0] + a[3] * b[2], a[2] * b[1] + a[3] * b[3]};
}
inline Mat2 transpose(const Mat2& m) { return {m[0], m[2], m[1], m[3]}; }
inline Mat2 inverse(const Mat2& m) {
    double det = m[0] * m[3] - m[1] * m[2];
    require(std::abs(det) > 0.0 && std::isfinite(det), ErrorKind::Numerical, "singular 2x2 block in implicit step");
    return {m[3] / det, -m[1] / det, -m[2] / det, m[0] / det};
}
inline Mat2 sub(const Mat2& a, const Mat2& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]}; }
inline Vec2 sub(const Vec2& a, const Vec2& b) { return {a[0] - b[0], a[1] - b[1]}; }

}  // namespace

BlockOperator assemble_block_operator(const Problem& p, int k) {
    const int N = p.space.N;
    Tridiagonal e1 = assemble_degenerate_operator(p, k, 1);
    Tridiagonal e2 = assemble_degenerate_operator(p, k, 2);
    BlockOperator L;
    L.lower.assign(N + 1, Mat2{});
    L.diag.assign(N + 1, Mat2{});
    L.upper.assign(N + 1, Mat2{});
    const auto& c = p.coeffs;
    for (int j = 1; j < N; ++j) {
        L.lower[j] = {-e1.lo[j], 0.0, 0.0, -e2.lo[j]};
        L.upper[j] = {-e1.up[j], 0.0, 0.0, -e2.up[j]};
        L.diag[j] = {-e1.di[j] + c.b11(k, j), c.b12(k, j), c.b21(k, j), -e2.di[j] + c.b22(k, j)};
    }
    return L;
}

Level BlockOperator::apply(const Level& y) const {
    const std::size_t n = diag.size();
    Level out(n, Vec2{0.0, 0.0});
    for (std::size_t j = 1; j + 1 < n; ++j) {
        Vec2 a = mul(lower[j], y[j - 1]), b = mul(diag[j], y[j]), c = mul(upper[j], y[j + 1]);
        out[j] = {a[0] + b[0] + c[0], a[1] + b[1] + c[1]};
    }
    return out;
}

Level BlockOperator::apply_transpose(const Level& y) const {
    const std::size_t n = diag.size();
    Level out(n, Vec2{0.0, 0.0});
    for (std::size_t j = 1; j + 1 < n; ++j) {
        Vec2 b = mul(transpose(diag[j]), y[j]);
        Vec2 a = j >= 2 ? mul(transpose(upper[j - 1]), y[j - 1]) : Vec2{0.0, 0.0};
        Vec2 c = j + 2 < n ? mul(transpose(lower[j + 1]), y[j + 1]) : Vec2{0.0, 0.0};
        out[j] = {a[0] + b[0] + c[0], a[1] + b[1] + c[1]};
    }
    return out;
}

Level solve_shifted(const BlockOperator& L, double c, double s, const Level& r, bool transpose_) {
    const std::size_t n = L.diag.size();
    const int N = static_cast<int>(n) - 1;
    Level x(n, Vec2{0.0, 0.0});
    if (N < 2) return x;
    auto A = [&](int j) -> Mat2 {  // block (j, j-1)
        Mat2 m = transpose_ ? transpose(L.upper[j - 1]) : L.lower[j];
        return {s * m[0], s * m[1], s * m[2], s * m[3]};
    };
    auto B = [&](int j) -> Mat2 {
        Mat2 m = transpose_ ? transpose(L.diag[j]) : L.diag[j];
        return {c + s * m[0], s * m[1], s * m[2], c + s * m[3]};
    };
    auto C = [&](int j) -> Mat2 {  // block (j, j+1)
        Mat2 m = transpose_ ? transpose(L.lower[j + 1]) : L.upper[j];
        return {s * m[0], s * m[1], s * m[2], s * m[3]};
    };
    std::vector<Mat2> Cp(n);
    Level rp(n);
    for (int j = 1; j < N; ++j) {
        Mat2 D = B(j);
        Vec2 rhs = r[j];
        if (j > 1) {
            Mat2 a = A(j);
            D = sub(D, mul(a, Cp[j - 1]));
            rhs = sub(rhs, mul(a, rp[j - 1]));
        }
        Mat2 Di = inverse(D);
        if (j + 1 < N) Cp[j] = mul(Di, C(j));
        rp[j] = mul(Di, rhs);
    }
    x[N - 1] = rp[N - 1];
    for (int j = N - 2; j >= 1; --j) x[j] = sub(rp[j], mul(Cp[j], x[j + 1]));
    return x;
}

namespace {

Level pack(const std::vector<double>& u, const std::vector<double>& v, int nodes) {
    Level y(nodes, Vec2{0.0, 0.0});
    for (int j = 0; j < nodes; ++j) {
        y[j][0] = u.empty() ? 0.0 : u[j];
        y[j][1] = v.empty() ? 0.0 : v[j];
    }
    return y;
}

void unpack(const Level& y, Field& a, Field& b, int row) {
    for (std::size_t j = 0; j < y.size(); ++j) {
        a(row, j) = y[j][0];
        b(row, j) = y[j][1];
    }
}

double at(const Field& f, int k, int j) { return f.empty() ? 0.0 : f(k, j); }

void check_initial(const std::vector<double>& u, int nodes, const char* name) {
    if (u.empty()) return;
    require(static_cast<int>(u.size()) == nodes, ErrorKind::Contract, std::string(name) + " must have N+1 values");
    require(u.front() == 0.0 && u.back() == 0.0, ErrorKind::Contract, std::string(name) + " must vanish at x=0,1");
}

void check_source(const Field& f, const Problem& p, const char* name) {
    if (f.empty()) return;
    require(static_cast<int>(f.rows()) == p.time.levels() && static_cast<int>(f.cols()) == p.space.nodes(),
            ErrorKind::Contract, std::string(name) + " must be (M+1) x (N+1)");
}

}  // namespace

StatePair solve_forward(const Problem& p, const ForwardData& data, const SemilinearHooks* hooks,
                        ForwardDiagnostics* diag) {
    const int N = p.space.N, M = p.time.M, J = N + 1;
    const double dt = p.time.dt(), th = p.solver.theta;
    check_initial(data.u0, J, "u0");
    check_initial(data.v0, J, "v0");
    check_source(data.h, p, "h");
    check_source(data.H1, p, "H1");
    check_source(data.H2, p, "H2");
    if (!data.h.empty()) {
        for (int k = 0; k <= M; ++k)
            for (int j = 0; j < J; ++j)
                require(p.chi[j] > 0.0 || data.h(k, j) == 0.0, ErrorKind::Contract, "control h must be supported on omega");
    }
    const bool semilinear = hooks && (hooks->F1 || hooks->F2);

    StatePair out{Field(M + 1, J), Field(M + 1, J)};
    Level y = pack(data.u0, data.v0, J);
    unpack(y, out.u, out.v, 0);
    BlockOperator Lprev = assemble_block_operator(p, 0);
    int nonContracting = 0;
    for (int k = 1; k <= M; ++k) {
        BlockOperator L = assemble_block_operator(p, k);
        Level rhs(J, Vec2{0.0, 0.0});
        Level Ly = th < 1.0 ? Lprev.apply(y) : Level();
        for (int j = 1; j < N; ++j) {
            double s1 = p.chi[j] * at(data.h, k, j) + at(data.H1, k, j);
            double s2 = at(data.H2, k, j);
            rhs[j][0] = y[j][0] / dt + s1;
            rhs[j][1] = y[j][1] / dt + s2;
            if (th < 1.0) {
                rhs[j][0] -= (1.0 - th) * Ly[j][0];
                rhs[j][1] -= (1.0 - th) * Ly[j][1];
            }
        }
        Level next;
        if (!semilinear) {
            next = solve_shifted(L, 1.0 / dt, th, rhs, false);
        } else {
            const double t = p.time.t(k);
            auto sweep = [&](const Level& guess) {
                Level r = rhs;
                for (int j = 1; j < N; ++j) {
                    double x = p.space.x(j);
                    if (hooks->F1) r[j][0] -= hooks->F1(x, t, guess[j][0], guess[j][1]);
                    if (hooks->F2) r[j][1] -= hooks->F2(x, t, guess[j][0], guess[j][1]);
                }
                return solve_shifted(L, 1.0 / dt, th, r, false);
            };
            Level prev = y;
            next = sweep(prev);
            for (int it = 1; it < p.solver.picardSweeps; ++it) {
                prev = next;
                next = sweep(prev);
            }
            // Guard: one probe sweep estimates the contraction factor of the fixed-point map.
            Level probe = sweep(next);
            double num = 0.0, den = 0.0;
            for (int j = 0; j < J; ++j)
                for (int c = 0; c < 2; ++c) {
                    num += (probe[j][c] - next[j][c]) * (probe[j][c] - next[j][c]);
                    den += (next[j][c] - prev[j][c]) * (next[j][c] - prev[j][c]);
                }
            double q = den > 0.0 ? std::sqrt(num / den) : 0.0;
            if (diag) diag->maxContraction = std::max(diag->maxContraction, q);
            nonContracting = q >= 1.0 ? nonContracting + 1 : 0;
            if (nonContracting >= 25) {
                std::ostringstream os;
                os << "nonlinearity too stiff: Picard map failed to contract over 25 sweeps (factor " << q
                   << " at t = " << t << ")";
                fail(ErrorKind::Numerical, os.str());
            }
        }
        for (const auto& q : next)
            require(std::isfinite(q[0]) && std::isfinite(q[1]), ErrorKind::Numerical, "forward solve produced non-finite values");
        y = std::move(next);
        unpack(y, out.u, out.v, k);
        if (th < 1.0) Lprev = std::move(L);
    }
    return out;
}

AdjointPair solve_adjoint(const Problem& p, const std::vector<double>& phiT, const std::vector<double>& psiT,
                          const Field& F1, const Field& F2) {
    const int N = p.space.N, M = p.time.M, J = N + 1;
    const double dt = p.time.dt(), th = p.solver.theta;
    check_initial(phiT, J, "phiT");
    check_initial(psiT, J, "psiT");
    check_source(F1, p, "F1");
    check_source(F2, p, "F2");
    AdjointPair z{Field(M + 1, J), Field(M + 1, J), {}, {}};
    Level term = pack(phiT, psiT, J);
    unpack(term, z.phi, z.psi, M);
    Level next = term;  // p^{k+1}
    for (int k = M; k >= 1; --k) {
        BlockOperator L = assemble_block_operator(p, k);
        Level rhs(J, Vec2{0.0, 0.0});
        Level Ltn = (k < M && th < 1.0) ? L.apply_transpose(next) : Level();
        for (int j = 1; j < N; ++j) {
            rhs[j][0] = next[j][0] / dt + at(F1, k, j);
            rhs[j][1] = next[j][1] / dt + at(F2, k, j);
            if (k < M && th < 1.0) {
                rhs[j][0] -= (1.0 - th) * Ltn[j][0];
                rhs[j][1] -= (1.0 - th) * Ltn[j][1];
            }
        }
        Level cur = solve_shifted(L, 1.0 / dt, th, rhs, true);
        for (const auto& q : cur)
            require(std::isfinite(q[0]) && std::isfinite(q[1]), ErrorKind::Numerical, "adjoint solve produced non-finite values");
        unpack(cur, z.phi, z.psi, k - 1);
        next = std::move(cur);
    }
    // next holds p^1; pair it with the initial state through the explicit part of step 1.
    Level init = next;
    if (th < 1.0) {
        BlockOperator L0 = assemble_block_operator(p, 0);
        Level Lt = L0.apply_transpose(next);
        for (int j = 0; j < J; ++j)
            for (int c = 0; c < 2; ++c) init[j][c] -= dt * (1.0 - th) * Lt[j][c];
    }
    z.phiInit.resize(J);
    z.psiInit.resize(J);
    for (int j = 0; j < J; ++j) {
        z.phiInit[j] = init[j][0];
        z.psiInit[j] = init[j][1];
    }
    return z;
}

AdjointPair solve_adjoint(const Problem& p, const std::vector<double>& phiT, const Field& F1, const Field& F2) {
    return solve_adjoint(p, phiT, std::vector<double>(p.space.nodes(), 0.0), F1, F2);
}

Field blend_source(const Field& nodal, double theta) {
    if (nodal.empty()) return nodal;
    Field out(nodal.rows(), nodal.cols());
    for (std::size_t k = 1; k < nodal.rows(); ++k)
        for (std::size_t j = 0; j < nodal.cols(); ++j)
            out(k, j) = theta * nodal(k, j) + (1.0 - theta) * nodal(k - 1, j);
    return out;
}

double inner(const std::vector<double>& a, const std::vector<double>& b, const SpaceGrid& g) {
    if (a.empty() || b.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) s += a[j] * b[j];
    return s * g.h();
}

double pair_steps(const Problem& p, const Field& src, const Field& adj, bool omegaOnly) {
    if (src.empty() || adj.empty()) return 0.0;
    double s = 0.0;
    for (int k = 1; k <= p.time.M; ++k)
        for (int j = 0; j <= p.space.N; ++j) s += (omegaOnly ? p.chi[j] : 1.0) * src(k, j) * adj(k - 1, j);
    return s * p.time.dt() * p.space.h();
}

double pair_levels(const Problem& p, const Field& F, const Field& y) {
    if (F.empty() || y.empty()) return 0.0;
    double s = 0.0;
    for (int k = 1; k <= p.time.M; ++k)
        for (int j = 0; j <= p.space.N; ++j) s += F(k, j) * y(k, j);
    return s * p.time.dt() * p.space.h();
}

double DualityTerms::relative() const {
    double scale = std::abs(terminal) + std::abs(initial) + std::abs(control) + std::abs(sources) + std::abs(adjointSources);
    return scale > 0.0 ? std::abs(residual()) / scale : 0.0;
}

DualityTerms duality_terms(const Problem& p, const ForwardData& data, const StatePair& y, const AdjointPair& z,
                           const std::vector<double>& phiT, const std::vector<double>& psiT, const Field& F1,
                           const Field& F2) {
    const int M = p.time.M;
    DualityTerms d;
    std::vector<double> uT(y.u.row(M).begin(), y.u.row(M).end()), vT(y.v.row(M).begin(), y.v.row(M).end());
    d.terminal = inner(uT, phiT, p.space) + inner(vT, psiT, p.space);
    d.initial = inner(data.u0, z.phiInit, p.space) + inner(data.v0, z.psiInit, p.space);
    d.control = pair_steps(p, data.h, z.phi, true);
    d.sources = pair_steps(p, data.H1, z.phi) + pair_steps(p, data.H2, z.psi);
    d.adjointSources = pair_levels(p, F1, y.u) + pair_levels(p, F2, y.v);
    return d;
}

EnergyReport check_energy_estimates(const Problem& p, const StatePair& traj, const ForwardData& data) {
    const int N = p.space.N, M = p.time.M, J = N + 1;
    const double dt = p.time.dt(), h = p.space.h(), T = p.time.T;
    const auto& c = p.coeffs;
    EnergyReport rep;

    auto rowvec = [](const Field& f, int k) { return std::vector<double>(f.row(k).begin(), f.row(k).end()); };
    std::vector<double> zero(J, 0.0);
    double data0 = h1a_norm(data.u0.empty() ? zero : data.u0, p.deg, p.space) +
                   h1a_norm(data.v0.empty() ? zero : data.v0, p.deg, p.space);
    double src = 0.0;
    for (int k = 1; k <= M; ++k)
        for (int j = 0; j < J; ++j) {
            double s1 = p.chi[j] * at(data.h, k, j) + at(data.H1, k, j);
            double s2 = at(data.H2, k, j);
            src += (s1 * s1 + s2 * s2) * dt * h;
        }
    rep.data = data0 + src;

    double supL2 = 0.0, intGrad = 0.0, supGrad = 0.0, intUt = 0.0, intDiv = 0.0;
    for (int k = 0; k <= M; ++k) {
        auto u = rowvec(traj.u, k), v = rowvec(traj.v, k);
        supL2 = std::max(supL2, l2_norm_sq(u, p.space) + l2_norm_sq(v, p.space));
        double g = grad_a_sq(u, p.deg, p.space) + grad_a_sq(v, p.deg, p.space);
        supGrad = std::max(supGrad, g);
        if (k == 0) continue;
        intGrad += dt * g;
        auto du = flux_divergence(u, p.deg, p.space), dv = flux_divergence(v, p.deg, p.space);
        intDiv += dt * (l2_norm_sq(du, p.space) + l2_norm_sq(dv, p.space));
        double ut = 0.0;
        for (int j = 0; j < J; ++j) {
            double a = (traj.u(k, j) - traj.u(k - 1, j)) / dt, b = (traj.v(k, j) - traj.v(k - 1, j)) / dt;
            ut += a * a + b * b;
        }
        intUt += dt * h * ut;
    }
    rep.lhs1 = supL2 + intGrad;
    rep.lhs2 = intUt + supGrad;
    rep.lhs3 = supGrad + intDiv;

    // A-priori Gronwall rates from the coefficient bounds.
    const double b0 = c.b0, D = c.maxAbsDrift, Rn = 2.0 * c.maxAbsCoupling, B = c.Bbound;
    const double bmax = *std::max_element(c.b.begin(), c.b.end());
    const double c1 = D * D / b0 + 2.0 * Rn + 1.0;
    const double c2 = B + 3.0 * D * D / b0;
    const double c3 = 3.0 * D * D / b0;
    rep.aprioriRate = std::max({c1, c2, c3});
    rep.K1 = (1.0 + 1.0 / b0) * std::exp(c1 * T) * rep.data;
    rep.K2 = std::max(1.0, 1.0 / b0) * std::exp(c2 * T) * ((bmax + 3.0) * rep.data + 3.0 * Rn * Rn * T * rep.K1);
    rep.K3 = (1.0 + 1.0 / b0) * std::exp(c3 * T) * (rep.data + 3.0 / b0 * (rep.data + Rn * Rn * T * rep.K1));
    rep.pass1 = rep.lhs1 <= rep.K1;
    rep.pass2 = rep.lhs2 <= rep.K2;
    rep.pass3 = rep.lhs3 <= rep.K3;
    if (rep.data > 0.0) {
        rep.fitted1 = rep.lhs1 / rep.data;
        rep.fitted2 = rep.lhs2 / rep.data;
        rep.fitted3 = rep.lhs3 / rep.data;
        rep.fittedConstant = std::max({rep.fitted1, rep.fitted2, rep.fitted3});
    }
    return rep;
}

void write_trajectory_csv(const Problem& p, const StatePair& y, const std::string& path) {
    std::string out = "t,x,u,v\n";
    for (std::size_t k = 0; k < y.u.rows(); ++k)
        for (std::size_t j = 0; j < y.u.cols(); ++j)
            out += join_csv({format_double(p.time.t(static_cast<int>(k))), format_double(p.space.x(static_cast<int>(j))),
                             format_double(y.u(k, j)), format_double(y.v(k, j))});
    write_text_file(path, out);
}

void write_trajectory_binary(const Field& a, const Field& b, const std::string& path) {
    require(a.same_shape(b), ErrorKind::Contract, "trajectory components differ in shape");
    std::string buf(24, '\0');
    std::memcpy(buf.data(), "DGC1", 4);
    std::int64_t N = a.empty() ? 0 : static_cast<std::int64_t>(a.cols()) - 1;
    std::int64_t M = a.empty() ? 0 : static_cast<std::int64_t>(a.rows()) - 1;
    std::memcpy(buf.data() + 8, &N, 8);
    std::memcpy(buf.data() + 16, &M, 8);
    for (const Field* f : {&a, &b})
        buf.append(reinterpret_cast<const char*>(f->raw().data()), f->raw().size() * sizeof(double));
    write_text_file(path, buf);
}

StatePair read_trajectory_binary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path);
    char head[24];
    in.read(head, 24);
    require(in.gcount() == 24 && std::memcmp(head, "DGC1", 4) == 0, ErrorKind::Io, "bad trajectory header in " + path);
    std::int64_t N, M;
    std::memcpy(&N, head + 8, 8);
    std::memcpy(&M, head + 16, 8);
    StatePair y{Field(M + 1, N + 1), Field(M + 1, N + 1)};
    for (Field* f : {&y.u, &y.v}) {
        in.read(reinterpret_cast<char*>(f->raw().data()), static_cast<std::streamsize>(f->raw().size() * sizeof(double)));
        require(static_cast<bool>(in), ErrorKind::Io, "truncated trajectory block in " + path);
    }
    return y;
}

}  // namespace dgc
