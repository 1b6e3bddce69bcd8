#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "dgc/pde_solver.hpp"
#include "dgc/rng.hpp"
#include "support.hpp"

using namespace dgc;
using namespace dgc::testing_support;

namespace {

const double kPi = std::numbers::pi;

std::vector<double> row(const Field& f, int k) { return {f.row(k).begin(), f.row(k).end()}; }

double l2(const std::vector<double>& u, const SpaceGrid& g) { return std::sqrt(l2_norm_sq(u, g)); }

}  // namespace

TEST(Operator, HeatStencil) {
    auto p = default_problem(20, 10, 1.0, 0.0, heat_spec());
    auto T = assemble_degenerate_operator(p, 3, 1);
    for (int j = 1; j < 20; ++j) {
        EXPECT_NEAR(T.lo[j], 400.0, 1e-12);
        EXPECT_NEAR(T.di[j], -800.0, 1e-12);
        EXPECT_NEAR(T.up[j], 400.0, 1e-12);
    }
    EXPECT_EQ(T.di[0], 0.0);
    EXPECT_EQ(T.di[20], 0.0);
}

TEST(Operator, FluxFormAnnihilatesConstants) {
    auto cs = heat_spec();
    auto p = default_problem(40, 10, 1.0, 0.5, cs);
    auto T = assemble_degenerate_operator(p, 0, 2);
    std::vector<double> one(41, 1.0);
    auto r = T.apply(one);
    for (int j = 1; j < 40; ++j) EXPECT_NEAR(r[j], 0.0, 1e-10);
}

TEST(Operator, DegenerateFluxAgainstAnalytic) {
    auto cs = heat_spec();
    auto err = [&](int N, double xlo) {
        auto p = default_problem(N, 10, 1.0, 0.5, cs);
        auto T = assemble_degenerate_operator(p, 0, 1);
        std::vector<double> u(N + 1);
        for (int j = 0; j <= N; ++j) u[j] = p.space.x(j) * (1 - p.space.x(j));
        auto r = T.apply(u);
        double e = 0.0;
        for (int j = 1; j < N; ++j) {
            double x = p.space.x(j);
            if (x < xlo) continue;
            double exact = 0.5 / std::sqrt(x) * (1 - 2 * x) - 2 * std::sqrt(x);
            e = std::max(e, std::abs(r[j] - exact));
        }
        return e;
    };
    // Interior: second order.
    double e1 = err(100, 0.2), e2 = err(200, 0.2);
    EXPECT_GT(std::log2(e1 / e2), 1.8);
    EXPECT_LT(e2, 1e-3);
}

TEST(Forward, ZeroInZeroOut) {
    auto p = default_problem(40, 40);
    ForwardData d;
    d.u0.assign(41, 0.0);
    d.v0.assign(41, 0.0);
    auto y = solve_forward(p, d);
    EXPECT_EQ(max_abs(y.u), 0.0);
    EXPECT_EQ(max_abs(y.v), 0.0);
}

TEST(Forward, HeatModeDecay) {
    auto p = default_problem(200, 400, 0.1, 0.0, heat_spec());
    ForwardData d;
    d.u0 = sine_nodes(200);
    auto y = solve_forward(p, d);
    double ratio = l2(row(y.u, 400), p.space) / l2(d.u0, p.space);
    EXPECT_NEAR(ratio / std::exp(-kPi * kPi * 0.1), 1.0, 0.02);
    for (int k = 0; k <= 400; k += 40) {
        double r = l2(row(y.u, k), p.space) / l2(d.u0, p.space);
        EXPECT_NEAR(r / std::exp(-kPi * kPi * p.time.t(k)), 1.0, 0.02);
    }
}

namespace {

// Manufactured pair with nodal sources evaluated from the exact solution.
struct Manufactured {
    std::function<double(double, double)> u, ut, ux, uxx, v, vt, vx, vxx;
};

double mms_error(const Manufactured& m, int N, int M) {
    auto p = default_problem(N, M);
    const auto& c = p.coeffs;
    ForwardData d;
    d.u0.resize(N + 1);
    d.v0.resize(N + 1);
    for (int j = 0; j <= N; ++j) {
        d.u0[j] = m.u(p.space.x(j), 0.0);
        d.v0[j] = m.v(p.space.x(j), 0.0);
    }
    d.u0[0] = d.u0[N] = d.v0[0] = d.v0[N] = 0.0;
    d.H1 = Field(M + 1, N + 1);
    d.H2 = Field(M + 1, N + 1);
    for (int k = 1; k <= M; ++k) {
        double t = p.time.t(k);
        for (int j = 1; j < N; ++j) {
            double x = p.space.x(j);
            double a = eval_a(p.deg, x), da = eval_da(p.deg, x), sa = std::sqrt(a);
            double du = da * m.ux(x, t) + a * m.uxx(x, t);
            double dv = da * m.vx(x, t) + a * m.vxx(x, t);
            d.H1(k, j) = m.ut(x, t) - c.b[k] * du + c.d1(k, j) * sa * m.ux(x, t) + c.b11(k, j) * m.u(x, t) +
                         c.b12(k, j) * m.v(x, t);
            d.H2(k, j) = m.vt(x, t) - c.b[k] * dv + c.d2(k, j) * sa * m.vx(x, t) + c.b21(k, j) * m.u(x, t) +
                         c.b22(k, j) * m.v(x, t);
        }
    }
    auto y = solve_forward(p, d);
    double e = 0.0;
    for (int k = 0; k <= M; ++k) {
        double s = 0.0;
        for (int j = 0; j <= N; ++j) {
            double x = p.space.x(j), t = p.time.t(k);
            double a = y.u(k, j) - m.u(x, t), b = y.v(k, j) - m.v(x, t);
            s += (a * a + b * b) * p.space.h();
        }
        e = std::max(e, std::sqrt(s));
    }
    return e;
}

}  // namespace

TEST(Forward, ManufacturedSolutionConverges) {
    Manufactured m;
    m.u = [](double x, double t) { return std::sin(kPi * x) * (1 + t); };
    m.ut = [](double x, double) { return std::sin(kPi * x); };
    m.ux = [](double x, double t) { return kPi * std::cos(kPi * x) * (1 + t); };
    m.uxx = [](double x, double t) { return -kPi * kPi * std::sin(kPi * x) * (1 + t); };
    m.v = [](double x, double t) { return x * (1 - x) * (1 - t / 2); };
    m.vt = [](double x, double) { return -x * (1 - x) / 2; };
    m.vx = [](double x, double t) { return (1 - 2 * x) * (1 - t / 2); };
    m.vxx = [](double, double t) { return -2 * (1 - t / 2); };
    std::vector<double> e;
    for (int r = 0; r < 4; ++r) e.push_back(mms_error(m, 20 << r, 20 << r));
    for (int r = 0; r < 3; ++r) {
        EXPECT_LT(e[r + 1], e[r]);
        EXPECT_GE(std::log2(e[r] / e[r + 1]), 0.9) << r;
    }
}

TEST(Forward, TemporalOrderOnTimeCurvedSolution) {
    Manufactured m;
    m.u = [](double x, double t) { return std::sin(kPi * x) * std::exp(-3 * t); };
    m.ut = [](double x, double t) { return -3 * std::sin(kPi * x) * std::exp(-3 * t); };
    m.ux = [](double x, double t) { return kPi * std::cos(kPi * x) * std::exp(-3 * t); };
    m.uxx = [](double x, double t) { return -kPi * kPi * std::sin(kPi * x) * std::exp(-3 * t); };
    m.v = [](double x, double t) { return x * (1 - x) * std::cos(2 * t); };
    m.vt = [](double x, double t) { return -2 * x * (1 - x) * std::sin(2 * t); };
    m.vx = [](double x, double t) { return (1 - 2 * x) * std::cos(2 * t); };
    m.vxx = [](double, double t) { return -2 * std::cos(2 * t); };
    std::vector<double> e;
    for (int r = 0; r < 4; ++r) e.push_back(mms_error(m, 400, 20 << r));
    for (int r = 0; r < 3; ++r) {
        EXPECT_LT(e[r + 1], e[r]);
        EXPECT_GE(std::log2(e[r] / e[r + 1]), 0.9) << r;
    }
}

TEST(Forward, LinearityAndSuperposition) {
    auto p = default_problem(50, 60);
    ForwardData a, b, ab;
    a.u0 = sine_nodes(50);
    a.v0 = sine_nodes(50, 2.0);
    b.h = random_field(p, 3, 1, true);
    b.H2 = random_field(p, 3, 2);
    ab = b;
    ab.u0 = a.u0;
    ab.v0 = a.v0;
    auto ya = solve_forward(p, a), yb = solve_forward(p, b), yab = solve_forward(p, ab);
    double scale = max_abs(yab.u);
    for (std::size_t i = 0; i < yab.u.raw().size(); ++i) {
        EXPECT_NEAR(ya.u.raw()[i] + yb.u.raw()[i], yab.u.raw()[i], 1e-12 * scale);
        EXPECT_NEAR(ya.v.raw()[i] + yb.v.raw()[i], yab.v.raw()[i], 1e-12 * scale);
    }
    ForwardData c = ab;
    for (double& x : c.u0) x *= 2.5;
    for (double& x : c.v0) x *= 2.5;
    for (double& x : c.h.raw()) x *= 2.5;
    for (double& x : c.H2.raw()) x *= 2.5;
    auto yc = solve_forward(p, c);
    for (std::size_t i = 0; i < yab.u.raw().size(); ++i) EXPECT_NEAR(yc.u.raw()[i], 2.5 * yab.u.raw()[i], 1e-12 * scale * 2.5);
}

TEST(Forward, RejectsControlOutsideOmega) {
    auto p = default_problem(20, 20);
    ForwardData d;
    d.h = Field(21, 21);
    d.h(3, 2) = 1.0;
    EXPECT_THROW(solve_forward(p, d), Error);
}

TEST(Forward, UnconditionalStability) {
    for (int M : {10, 100, 1000}) {
        auto p = default_problem(50, M);
        ForwardData d;
        d.u0 = sine_nodes(50, 3.0);
        d.v0 = sine_nodes(50, 1.0);
        auto y = solve_forward(p, d);
        EXPECT_LE(std::max(max_abs(y.u), max_abs(y.v)), 2.0) << M;
    }
}

TEST(Adjoint, ZeroInZeroOut) {
    auto p = default_problem(30, 30);
    auto z = solve_adjoint(p, std::vector<double>(31, 0.0), Field(), Field());
    EXPECT_EQ(max_abs(z.phi), 0.0);
    EXPECT_EQ(max_abs(z.psi), 0.0);
}

TEST(Adjoint, HeatModeMatchesForward) {
    auto p = default_problem(100, 200, 0.1, 0.0, heat_spec());
    ForwardData d;
    d.u0 = sine_nodes(100);
    auto y = solve_forward(p, d);
    auto z = solve_adjoint(p, sine_nodes(100), Field(), Field());
    double f = l2(row(y.u, 200), p.space), b = l2(row(z.phi, 0), p.space);
    EXPECT_NEAR(f / b, 1.0, 1e-12);
}

class DualityTest : public ::testing::TestWithParam<double> {};

TEST_P(DualityTest, RandomInstances) {
    SolverParams sp;
    sp.theta = GetParam();
    auto p = default_problem(40, 50, 1.0, 0.5, CoefficientSpec{}, sp);
    for (int id = 0; id < 10; ++id) {
        ForwardData d;
        d.u0 = sine_series_nodes(sine_coefficients(5, 100 + id, 10), 40);
        d.v0 = sine_series_nodes(sine_coefficients(5, 200 + id, 10), 40);
        d.h = random_field(p, 5, 300 + id, true);
        d.H1 = random_field(p, 5, 400 + id);
        d.H2 = random_field(p, 5, 500 + id);
        auto phiT = sine_series_nodes(sine_coefficients(5, 600 + id, 10), 40);
        auto psiT = sine_series_nodes(sine_coefficients(5, 700 + id, 10), 40);
        Field F1 = random_field(p, 5, 800 + id), F2 = random_field(p, 5, 900 + id);
        auto y = solve_forward(p, d);
        auto z = solve_adjoint(p, phiT, psiT, F1, F2);
        auto terms = duality_terms(p, d, y, z, phiT, psiT, F1, F2);
        EXPECT_LE(terms.relative(), 1e-10) << id;
    }
}

INSTANTIATE_TEST_SUITE_P(Theta, DualityTest, ::testing::Values(1.0, 0.5, 0.75));

TEST(Semilinear, LipschitzHookRuns) {
    auto p = default_problem(40, 80);
    ForwardData d;
    d.u0 = sine_nodes(40);
    SemilinearHooks hk;
    hk.F1 = [](double, double, double u, double) { return 0.5 * std::sin(u); };
    ForwardDiagnostics diag;
    auto y = solve_forward(p, d, &hk, &diag);
    EXPECT_LT(diag.maxContraction, 1.0);
    EXPECT_TRUE(std::isfinite(max_abs(y.u)));
}

TEST(Semilinear, StiffHookRejected) {
    auto p = default_problem(40, 80);
    ForwardData d;
    d.u0 = sine_nodes(40);
    SemilinearHooks hk;
    hk.F1 = [](double, double, double u, double) { return -5e4 * u; };
    try {
        solve_forward(p, d, &hk);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Numerical);
        EXPECT_NE(std::string(e.what()).find("too stiff"), std::string::npos);
    }
}

TEST(Energy, ZeroData) {
    auto p = default_problem(30, 30);
    ForwardData d;
    auto y = solve_forward(p, d);
    auto rep = check_energy_estimates(p, y, d);
    EXPECT_EQ(rep.lhs1, 0.0);
    EXPECT_EQ(rep.lhs2, 0.0);
    EXPECT_EQ(rep.lhs3, 0.0);
    EXPECT_TRUE(rep.pass());
}

TEST(Energy, RandomDataPassAndMeshStable) {
    auto run = [](int N, int M) {
        auto p = default_problem(N, M);
        ForwardData d;
        d.u0 = sine_series_nodes(sine_coefficients(9, 1, 8), N);
        d.v0 = sine_series_nodes(sine_coefficients(9, 2, 8), N);
        d.H1 = Field(M + 1, N + 1);
        for (int k = 1; k <= M; ++k)
            for (int j = 1; j < N; ++j) d.H1(k, j) = std::sin(kPi * p.space.x(j)) * std::cos(3 * p.time.t(k));
        auto y = solve_forward(p, d);
        return check_energy_estimates(p, y, d);
    };
    auto a = run(100, 200), b = run(200, 400);
    EXPECT_TRUE(a.pass());
    EXPECT_TRUE(b.pass());
    EXPECT_TRUE(std::isfinite(a.fittedConstant));
    EXPECT_NEAR(b.fittedConstant / a.fittedConstant, 1.0, 0.3);
}

TEST(Energy, HeatModeAnalytic) {
    auto p = default_problem(200, 400, 0.1, 0.0, heat_spec());
    ForwardData d;
    d.u0 = sine_nodes(200);
    auto y = solve_forward(p, d);
    auto rep = check_energy_estimates(p, y, d);
    double expected = 0.5 + 0.25 * (1 - std::exp(-2 * kPi * kPi * 0.1));
    EXPECT_NEAR(rep.lhs1 / expected, 1.0, 0.02);
}

TEST(TrajectoryIo, BinaryRoundTripAndCsv) {
    auto p = default_problem(20, 8);
    ForwardData d;
    d.u0 = sine_nodes(20);
    auto y = solve_forward(p, d);
    auto dir = std::filesystem::temp_directory_path() / "dgc_traj";
    write_trajectory_binary(y.u, y.v, (dir / "t.bin").string());
    auto back = read_trajectory_binary((dir / "t.bin").string());
    EXPECT_EQ(back.u.raw(), y.u.raw());
    EXPECT_EQ(back.v.raw(), y.v.raw());
    EXPECT_EQ(std::filesystem::file_size(dir / "t.bin"), 24u + 2u * 9u * 21u * 8u);
    write_trajectory_csv(p, y, (dir / "t.csv").string());
    EXPECT_TRUE(std::filesystem::exists(dir / "t.csv"));
}
