#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dgc/weights.hpp"

using namespace dgc;

namespace {

struct Defaults {
    DegeneracySpec spec = make_power_spec(0.5);
    SpaceGrid grid = make_space_grid(100);
    TimeGrid tg = make_time_grid(1.0, 200);
    SubdomainSpec sub = snap_subdomains(SubdomainSpec{}, grid);
    PsiProfile psi = build_psi(spec, sub, grid);
};

std::string slurp(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Psi, AnalyticPieces) {
    Defaults s;
    EXPECT_NEAR(s.psi.value(0.25), std::pow(0.25, 1.5) / 1.5, 1e-15);
    EXPECT_NEAR(s.psi.value(0.25), 1.0 / 12.0, 1e-15);
    EXPECT_EQ(s.psi.value(0.0), 0.0);
    EXPECT_NEAR(s.psi.value(0.85), 0.0, 1e-15);
}

TEST(Psi, DerivativeIsXOverA) {
    Defaults s;
    for (int j = 1; j <= s.grid.N; ++j) {
        double x = s.grid.x(j);
        if (x > 0.65 - 1e-12 && x < 0.85 - 1e-12) continue;
        double expect = (x < 0.65 ? 1.0 : -1.0) * x / eval_a(s.spec, x);
        EXPECT_NEAR(s.psi.derivative()[j] / expect, 1.0, 1e-10) << x;
    }
}

TEST(Psi, C2AtJoins) {
    Defaults s;
    for (double xj : {0.65, 0.85}) {
        double e = 1e-12;
        PsiPoint l = s.psi.eval(xj - e), r = s.psi.eval(xj + e);
        EXPECT_NEAR(l.psi, r.psi, 1e-8);
        EXPECT_NEAR(l.d1, r.d1, 1e-8);
        EXPECT_NEAR(l.d2, r.d2, 1e-8);
    }
}

TEST(Psi, ShapeInvariants) {
    Defaults s;
    const auto& v = s.psi.values();
    for (int j = 1; j <= 65; ++j) EXPECT_GT(v[j], v[j - 1]);
    for (int j = 86; j <= 100; ++j) EXPECT_LT(v[j], v[j - 1]);
    EXPECT_GE(s.psi.psiInf(), s.psi.nodalPsiInf());
    EXPECT_NEAR(s.psi.psiInf(), s.psi.nodalPsiInf(), 1e-3);
}

TEST(Psi, RegularProductsMatchFiniteDifferences) {
    Defaults s;
    for (double x : {0.3, 0.7, 0.8, 0.95}) {
        double e = 1e-6;
        auto g = [&](double y) { return s.psi.eval(y).g; };
        PsiPoint p = s.psi.eval(x);
        EXPECT_NEAR(p.g1, (g(x + e) - g(x - e)) / (2 * e), 1e-6);
        auto q = [&](double y) { auto r = s.psi.eval(y); return r.a * r.d1 * r.d1; };
        EXPECT_NEAR(p.q1, (q(x + e) - q(x - e)) / (2 * e), 1e-6);
        auto g1 = [&](double y) { return s.psi.eval(y).g1; };
        EXPECT_NEAR(p.g2, (g1(x + e) - g1(x - e)) / (2 * e), 1e-4);
    }
}

TEST(Instationary, KnownValues) {
    EXPECT_DOUBLE_EQ(theta_weight(0.5, 1.0), 256.0);
    EXPECT_NEAR(m_weight(0.75, 1.0), std::pow(0.75, 4) * std::pow(0.25, 4), 1e-18);
    EXPECT_DOUBLE_EQ(m_weight(0.25, 1.0), std::pow(0.25, 4));
    EXPECT_GE(m_weight(0.25, 1.0), std::pow(0.25 * 0.75, 4));
    EXPECT_THROW(theta_weight(0.0, 1.0), Error);
    EXPECT_THROW(theta_weight(1.0, 1.0), Error);
}

TEST(Instationary, DerivativesMatchDifferences) {
    EXPECT_NEAR(theta_weight_dt(0.5, 1.0), 0.0, 1e-9);
    for (double t : {0.2, 0.5, 0.8}) {
        double e = 1e-6;
        double fd1 = (theta_weight(t + e, 1.0) - theta_weight(t - e, 1.0)) / (2 * e);
        EXPECT_NEAR(theta_weight_dt(t, 1.0), fd1, 1e-6 * std::abs(theta_weight(t, 1.0)));
        double fd2 = (theta_weight_dt(t + e, 1.0) - theta_weight_dt(t - e, 1.0)) / (2 * e);
        EXPECT_NEAR(theta_weight_dtt(t, 1.0) / fd2, 1.0, 1e-6);
    }
}

TEST(Instationary, ClippedRowCount) {
    auto tg = make_time_grid(1.0, 200);
    auto w = build_instationary(tg);
    EXPECT_EQ(w.t.size(), 199u);
    EXPECT_GE(w.t.front(), tg.clipDelta);
}

TEST(Ordering, ScalarProfile) {
    double l = min_lambda_for_ordering(1.0, 1.0, -1.0);
    EXPECT_GT(l, 0.9);
    EXPECT_LT(l, 1.1);
    EXPECT_GT(ordering_margin(l + 1.0, 1.0, 1.0, -1.0), 0.0);
    EXPECT_LT(ordering_margin(l / 2.0, 1.0, 1.0, -1.0), 0.0);
    EXPECT_THROW(min_lambda_for_ordering(0.0, 0.0, 0.0), Error);
}

TEST(Fields, DefaultInvariants) {
    Defaults s;
    double lstar = min_lambda_for_ordering(s.psi);
    auto f = assemble_fields(s.psi, {lstar + 1.0, 1.0}, s.grid, s.tg);
    auto rep = check_weight_invariants(f);
    EXPECT_TRUE(rep.ok());
    EXPECT_LE(rep.maxRhoHatErr, 1e-12);
    EXPECT_LE(rep.maxZeta0Spread, 1e-12);
    EXPECT_TRUE(rep.orderingHolds);
    // eta at the continuum argmax of Psi.
    EXPECT_NEAR(f.model.eta(s.psi.argMax()) / std::exp(2 * f.model.lambda() * s.psi.psiInf()), 1.0, 1e-12);
}

TEST(Fields, OrderingFailsBelowThreshold) {
    Defaults s;
    double lstar = min_lambda_for_ordering(s.psi);
    auto f = assemble_fields(s.psi, {0.5 * lstar, 1.0}, s.grid, s.tg);
    EXPECT_FALSE(check_weight_invariants(f).orderingHolds);
}

TEST(Fields, DominationConstantRecorded) {
    Defaults s;
    double lstar = min_lambda_for_ordering(s.psi);
    auto f = assemble_fields(s.psi, {lstar + 1.0, 1.0}, s.grid, s.tg);
    for (int n = 0; n <= 8; ++n) {
        EXPECT_TRUE(std::isfinite(f.logDomination[n]));
        EXPECT_GE(f.logDomination[n], -1e-12);
    }
}

TEST(Dump, RowCountAndDeterminism) {
    Defaults s;
    double lstar = min_lambda_for_ordering(s.psi);
    auto f = assemble_fields(s.psi, {lstar + 1.0, 1.0}, s.grid, s.tg);
    auto dir = std::filesystem::temp_directory_path() / "dgc_weights_test";
    std::filesystem::create_directories(dir);
    auto p1 = (dir / "a.csv").string(), p2 = (dir / "b.csv").string();
    dump_weights(f, p1);
    dump_weights(f, p2);
    std::string a = slurp(p1);
    EXPECT_EQ(a, slurp(p2));
    std::size_t lines = std::count(a.begin(), a.end(), '\n');
    EXPECT_EQ(lines, 1u + 199u * 101u);
}

TEST(Dump, EmptyGridHeaderOnly) {
    WeightFields f;
    auto p = (std::filesystem::temp_directory_path() / "dgc_weights_empty.csv").string();
    dump_weights(f, p);
    std::string a = slurp(p);
    EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 1);
}
