#include "dgc/carleman.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "dgc/io.hpp"
#include "dgc/rng.hpp"

namespace dgc {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kInf = std::numeric_limits<double>::infinity();

// 3-point Gauss-Legendre on [0,1].
constexpr std::array<double, 3> kGaussX{0.5 - 0.3872983346207417, 0.5, 0.5 + 0.3872983346207417};
constexpr std::array<double, 3> kGaussW{5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0};

double logsumexp(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace

double Scaled::log_abs() const { return value == 0.0 ? kNegInf : std::log(std::abs(value)) + logScale; }

Scaled operator+(const Scaled& a, const Scaled& b) {
    if (a.value == 0.0) return b;
    if (b.value == 0.0) return a;
    double L = std::max(a.logScale, b.logScale);
    return {a.value * std::exp(a.logScale - L) + b.value * std::exp(b.logScale - L), L};
}

Scaled operator-(const Scaled& a, const Scaled& b) { return a + b * -1.0; }

double ratio(const Scaled& a, const Scaled& b) {
    if (a.value == 0.0) return b.value == 0.0 ? std::numeric_limits<double>::quiet_NaN() : 0.0;
    return a.value / b.value * std::exp(a.logScale - b.logScale);
}

double log_ratio(const Scaled& a, const Scaled& b) { return a.log_abs() - b.log_abs(); }

Quadrature::Quadrature(const WeightFields& f, const Problem& prob, QuadratureSpec q) : f_(&f), q_(q) {
    const CoefficientSet& c = prob.coeffs;
    require(prob.space.N == f.space.N, ErrorKind::Contract, "problem and weights use different space grids");
    {
        NodeRange r = node_range(prob.sub.omega, prob.space);
        omega_ = {r.jlo, r.jhi};
    }
    require(q.refine >= 1, ErrorKind::Config, "quadrature refine must be >= 1");
    require(q.cutoff > 0.0, ErrorKind::Config, "quadrature cutoff must be positive");
    require(static_cast<int>(c.b.size()) == f.time.levels(), ErrorKind::Contract, "coefficients and weights use different time grids");
    const auto& W = f.model;
    const auto& psi = W.psi();
    const int N = f.space.N, M = f.time.M, R = q.refine;
    const double h = f.space.h(), dt = f.time.dt(), T = f.time.T, delta = f.time.clipDelta;
    per_ = 3 * R;

    xs_.resize(N);
    double lip = 0.0;
    for (int j = 0; j < N; ++j) {
        xs_[j].reserve(per_);
        for (int r = 0; r < R; ++r)
            for (int g = 0; g < 3; ++g) {
                double xi = (r + kGaussX[g]) / R;
                double x = f.space.x(j) + xi * h;
                XNode n{x, kGaussW[g] * h / R, xi, W.eta(x), eval_da(prob.deg, x), psi.eval(x)};
                lip = std::max(lip, std::abs(n.psi.d1));
                xs_[j].push_back(n);
            }
    }
    lip *= 1.1;
    etaCellMax_.resize(N);
    for (int j = 0; j < N; ++j) {
        double pmax = std::max(psi.value(f.space.x(j)), psi.value(f.space.x(j + 1))) + 0.5 * lip * h;
        pmax = std::min(pmax, psi.psiMax());
        etaCellMax_[j] = std::exp(W.lambda() * (psi.psiInf() + pmax));
    }

    ts_.resize(M);
    thetaCellMin_.assign(M, kInf);
    tauCellMin_.assign(M, kInf);
    for (int k = 0; k < M; ++k) {
        const double ta = f.time.t(k), tb = f.time.t(k + 1);
        const double slope = (c.b[k + 1] - c.b[k]) / dt;
        ts_[k].reserve(per_);
        for (int r = 0; r < R; ++r)
            for (int g = 0; g < 3; ++g) {
                double et = (r + kGaussX[g]) / R;
                double t = ta + et * dt;
                TNode n{};
                n.t = t;
                n.w = kGaussW[g] * dt / R;
                n.et = et;
                n.phiValid = t >= delta && t <= T - delta;
                n.aValid = t <= T - delta;
                if (n.phiValid) {
                    n.theta = theta_weight(t, T);
                    n.dtheta = theta_weight_dt(t, T);
                    n.ddtheta = theta_weight_dtt(t, T);
                }
                if (n.aValid) n.tau = 1.0 / m_weight(t, T);
                n.b = c.b[k] + slope * (t - ta);
                n.bdot = slope;
                ts_[k].push_back(n);
            }
        double lo = std::max(ta, delta), hi = std::min(tb, T - delta);
        if (lo <= hi) thetaCellMin_[k] = theta_weight(std::clamp(0.5 * T, lo, hi), T);
        if (ta <= T - delta) tauCellMin_[k] = 1.0 / m_weight(ta, T);
    }

    right_ = XNode{1.0, 1.0, 1.0, W.eta(1.0), eval_da(prob.deg, 1.0), psi.eval(1.0)};
}

double Quadrature::exponent(WeightKind kind, const XNode& xn, const TNode& tn) const {
    const auto& W = f_->model;
    const double s2 = 2.0 * W.s();
    switch (kind) {
    case WeightKind::None: return 0.0;
    case WeightKind::Phi: return tn.phiValid ? s2 * tn.theta * (xn.eta - W.E()) : kNegInf;
    case WeightKind::A: return tn.aValid ? s2 * tn.tau * (xn.eta - W.E()) : kNegInf;
    case WeightKind::AStar: return tn.aValid ? s2 * tn.tau * (W.etaMax() - W.E()) : kNegInf;
    }
    return kNegInf;
}

double Quadrature::cell_bound(WeightKind kind, int j, int k) const {
    const auto& W = f_->model;
    const double s2 = 2.0 * W.s();
    switch (kind) {
    case WeightKind::None: return 0.0;
    case WeightKind::Phi:
        return thetaCellMin_[k] == kInf ? kNegInf : s2 * thetaCellMin_[k] * (etaCellMax_[j] - W.E());
    case WeightKind::A:
        return tauCellMin_[k] == kInf ? kNegInf : s2 * tauCellMin_[k] * (etaCellMax_[j] - W.E());
    case WeightKind::AStar:
        return tauCellMin_[k] == kInf ? kNegInf : s2 * tauCellMin_[k] * (W.etaMax() - W.E());
    }
    return kNegInf;
}

Scaled Quadrature::integrate(WeightKind kind, NodeSpan xr, NodeSpan tr,
                             const std::function<double(const QuadPoint&)>& g) const {
    require(xr.lo >= 0 && xr.hi <= f_->space.N && xr.lo <= xr.hi, ErrorKind::Contract, "x range outside grid");
    require(tr.lo >= 0 && tr.hi <= f_->time.M && tr.lo <= tr.hi, ErrorKind::Contract, "t range outside grid");
    double ref = kNegInf;
    for (int k = tr.lo; k < tr.hi; ++k)
        for (int j = xr.lo; j < xr.hi; ++j) ref = std::max(ref, cell_bound(kind, j, k));
    if (ref == kNegInf) return {};
    const double floor = ref - q_.cutoff;
    double sum = 0.0;
    QuadPoint p;
    for (int k = tr.lo; k < tr.hi; ++k) {
        for (int j = xr.lo; j < xr.hi; ++j) {
            if (cell_bound(kind, j, k) < floor) continue;
            p.j = j;
            p.k = k;
            for (const auto& tn : ts_[k]) {
                p.t = tn.t;
                p.et = tn.et;
                p.theta = tn.theta;
                p.dtheta = tn.dtheta;
                p.ddtheta = tn.ddtheta;
                p.tau = tn.tau;
                p.b = tn.b;
                p.bdot = tn.bdot;
                for (const auto& xn : xs_[j]) {
                    double e = exponent(kind, xn, tn);
                    if (e == kNegInf) continue;
                    p.x = xn.x;
                    p.xi = xn.xi;
                    p.psi = &xn.psi;
                    p.da = xn.da;
                    p.eta = xn.eta;
                    p.w = xn.w * tn.w;
                    sum += p.w * g(p) * std::exp(e - ref);
                }
            }
        }
    }
    return {sum, ref};
}

Scaled Quadrature::integrate(WeightKind kind, NodeSpan xr, const std::function<double(const QuadPoint&)>& g) const {
    return integrate(kind, xr, all_t(), g);
}

Scaled Quadrature::integrate_right_edge(const std::function<double(const QuadPoint&)>& g) const {
    const auto& W = f_->model;
    const double s2 = 2.0 * W.s();
    double ref = kNegInf;
    for (int k = 0; k < f_->time.M; ++k)
        if (thetaCellMin_[k] != kInf) ref = std::max(ref, s2 * thetaCellMin_[k] * (right_.eta - W.E()));
    if (ref == kNegInf) return {};
    double sum = 0.0;
    QuadPoint p;
    p.x = 1.0;
    p.xi = 1.0;
    p.j = f_->space.N - 1;
    p.psi = &right_.psi;
    p.da = right_.da;
    p.eta = right_.eta;
    for (int k = 0; k < f_->time.M; ++k) {
        if (thetaCellMin_[k] == kInf || s2 * thetaCellMin_[k] * (right_.eta - W.E()) < ref - q_.cutoff) continue;
        p.k = k;
        for (const auto& tn : ts_[k]) {
            double e = exponent(WeightKind::Phi, right_, tn);
            if (e == kNegInf) continue;
            p.t = tn.t;
            p.et = tn.et;
            p.theta = tn.theta;
            p.dtheta = tn.dtheta;
            p.ddtheta = tn.ddtheta;
            p.tau = tn.tau;
            p.b = tn.b;
            p.bdot = tn.bdot;
            p.w = tn.w;
            sum += p.w * g(p) * std::exp(e - ref);
        }
    }
    return {sum, ref};
}

SmoothSample product_sine_sample(double T) {
    const double pi = std::numbers::pi;
    return [=](double x, double t) {
        double sx = std::sin(pi * x), cx = std::cos(pi * x), st = std::sin(pi * t / T), ct = std::cos(pi * t / T);
        return SampleValue{sx * st, pi * cx * st, -pi * pi * sx * st, sx * ct * pi / T};
    };
}

SmoothSample random_smooth_sample(std::uint64_t seed, std::uint64_t id, double T) {
    SplitMix64 rng(seed, id);
    std::array<std::array<double, 2>, 4> c{};
    for (int k = 0; k < 4; ++k)
        for (int l = 0; l < 2; ++l) c[k][l] = rng.uniform(-1.0, 1.0) / ((k + 1.0) * (k + 1.0));
    const double pi = std::numbers::pi;
    return [=](double x, double t) {
        SampleValue s;
        for (int k = 0; k < 4; ++k) {
            double kp = (k + 1) * pi;
            double sx = std::sin(kp * x), cx = std::cos(kp * x);
            for (int l = 0; l < 2; ++l) {
                double lp = (l + 1) * pi / T;
                double st = std::sin(lp * t), ct = std::cos(lp * t);
                s.v += c[k][l] * sx * st;
                s.vx += c[k][l] * kp * cx * st;
                s.vxx -= c[k][l] * kp * kp * sx * st;
                s.vt += c[k][l] * sx * lp * ct;
            }
        }
        return s;
    };
}

namespace {

struct Bilinear {
    const Field& f;
    double h;
    double value(const QuadPoint& p) const {
        const int k = p.k, j = p.j;
        double lo = (1.0 - p.xi) * f(k, j) + p.xi * f(k, j + 1);
        double hi = (1.0 - p.xi) * f(k + 1, j) + p.xi * f(k + 1, j + 1);
        return (1.0 - p.et) * lo + p.et * hi;
    }
    double dx(const QuadPoint& p) const {
        const int k = p.k, j = p.j;
        return ((1.0 - p.et) * (f(k, j + 1) - f(k, j)) + p.et * (f(k + 1, j + 1) - f(k + 1, j))) / h;
    }
};

void check_traj(const Field& f, const Quadrature& q, const char* name) {
    const auto& F = q.fields();
    require(static_cast<int>(f.rows()) == F.time.levels() && static_cast<int>(f.cols()) == F.space.nodes(),
            ErrorKind::Contract, std::string(name) + " does not match the weight grids");
}

}  // namespace

Scaled functional_I(const Field& traj, const Quadrature& q, NodeSpan tr) {
    check_traj(traj, q, "trajectory");
    Bilinear B{traj, q.fields().space.h()};
    const double sl = q.s() * q.lambda();
    return q.integrate(WeightKind::Phi, q.all_x(), tr, [&](const QuadPoint& p) {
        double sigma = p.theta * p.eta, b2 = p.b * p.b;
        double v = B.value(p), vx = B.dx(p);
        return sl * sigma * b2 * p.psi->a * vx * vx + sl * sl * sigma * sigma * b2 * v * v;
    });
}

Scaled functional_I(const Field& traj, const Quadrature& q) { return functional_I(traj, q, q.all_t()); }

Scaled functional_Gamma0(const AdjointPair& pair, const Quadrature& q, NodeSpan tr) {
    check_traj(pair.phi, q, "phi");
    check_traj(pair.psi, q, "psi");
    const double h = q.fields().space.h();
    Bilinear P{pair.phi, h}, S{pair.psi, h};
    const double sl = q.s() * q.lambda();
    return q.integrate(WeightKind::A, q.all_x(), tr, [&](const QuadPoint& p) {
        double zeta = p.tau * p.eta, b2 = p.b * p.b;
        double px = P.dx(p), sx = S.dx(p), pv = P.value(p), sv = S.value(p);
        return sl * zeta * b2 * p.psi->a * (px * px + sx * sx) + sl * sl * zeta * zeta * b2 * (pv * pv + sv * sv);
    });
}

Scaled functional_Gamma0(const AdjointPair& pair, const Quadrature& q) {
    return functional_Gamma0(pair, q, q.all_t());
}

namespace {

// Weight derivatives and the state of w = e^{s phi} v, all divided by e^{s phi}.
struct Local {
    double v, wx, wt;
    double phix, aphix, daphix, ddaphix, aphix2, daphix2;
    double phit, phitt, phixt, axphix;
    double Lp, Lm;
};

Local local(const QuadPoint& p, const SampleValue& sv, double s, double lam, double E) {
    const PsiPoint& ps = *p.psi;
    const double th = p.theta, eta = p.eta, tl = th * lam * eta;
    Local o{};
    o.v = sv.v;
    o.phix = tl * ps.d1;
    o.aphix = tl * ps.g;
    o.daphix = tl * (lam * ps.d1 * ps.g + ps.g1);
    o.ddaphix = tl * (lam * lam * ps.d1 * ps.d1 * ps.g + 2.0 * lam * ps.d1 * ps.g1 + lam * ps.d2g + ps.g2);
    o.aphix2 = tl * tl * ps.g * ps.d1;
    o.daphix2 = tl * tl * (ps.q1 + 2.0 * lam * ps.g * ps.d1 * ps.d1);
    o.phit = p.dtheta * (eta - E);
    o.phitt = p.ddtheta * (eta - E);
    o.phixt = p.dtheta * lam * ps.d1 * eta;
    o.axphix = tl * ps.daD1;
    o.wx = sv.vx + s * o.phix * sv.v;
    o.wt = sv.vt + s * o.phit * sv.v;
    double flux = ps.a * sv.vxx + p.da * sv.vx;  // (a v_x)_x
    double aw = flux + 2.0 * s * o.aphix * sv.vx + s * o.daphix * sv.v + s * s * o.aphix2 * sv.v;
    o.Lp = p.b * aw - s * o.phit * sv.v + s * s * p.b * o.aphix2 * sv.v;
    o.Lm = o.wt - 2.0 * s * p.b * o.aphix * o.wx - s * p.b * o.daphix * sv.v;
    return o;
}

}  // namespace

LemmaA1Terms lemma_a1_terms(const SmoothSample& v, const Quadrature& q) {
    const double s = q.s(), lam = q.lambda(), E = q.fields().model.E();
    LemmaA1Terms out;
    auto I = [&](auto&& g) {
        return q.integrate(WeightKind::Phi, q.all_x(), [&](const QuadPoint& p) {
            SampleValue sv = v(p.x, p.t);
            return g(p, local(p, sv, s, lam, E));
        });
    };
    out.lhs = I([&](const QuadPoint&, const Local& o) { return o.Lp * o.Lm; });
    out.terms[0] = I([&](const QuadPoint&, const Local& o) { return 0.5 * s * o.phitt * o.v * o.v; });
    out.terms[1] = I([&](const QuadPoint& p, const Local& o) { return 0.5 * p.psi->a * p.bdot * o.wx * o.wx; });
    out.terms[2] = I([&](const QuadPoint& p, const Local& o) { return -0.5 * s * s * p.bdot * o.aphix2 * o.v * o.v; });
    out.terms[3] = I([&](const QuadPoint& p, const Local& o) {
        return s * p.psi->a * p.b * p.b * o.ddaphix * o.v * o.wx;
    });
    out.terms[4] = I([&](const QuadPoint& p, const Local& o) {
        return s * p.psi->a * p.b * p.b * (2.0 * o.daphix - o.axphix) * o.wx * o.wx;
    });
    out.terms[5] = I([&](const QuadPoint& p, const Local& o) { return -2.0 * s * s * p.b * o.aphix * o.phixt * o.v * o.v; });
    out.terms[6] = I([&](const QuadPoint& p, const Local& o) {
        return s * s * s * p.b * p.b * o.aphix * o.daphix2 * o.v * o.v;
    });
    out.boundary = q.integrate_right_edge([&](const QuadPoint& p) {
        SampleValue sv = v(1.0, p.t);
        double phix = p.theta * lam * p.psi->d1 * p.eta;
        double a = p.psi->a;
        return -s * a * a * p.b * p.b * phix * sv.vx * sv.vx;
    });
    out.rhs = out.boundary;
    for (const auto& t : out.terms) out.rhs = out.rhs + t;
    double L = std::max(out.lhs.log_abs(), out.rhs.log_abs());
    if (L == kNegInf) {
        out.residual = 0.0;
    } else {
        Scaled d = out.lhs - out.rhs;
        out.residual = d.value == 0.0 ? 0.0 : std::exp(d.log_abs() - L);
    }
    return out;
}

double lemma_a1_residual(const SmoothSample& v, const Quadrature& q) { return lemma_a1_terms(v, q).residual; }

LemmaId parse_lemma_id(const std::string& name) {
    static const std::pair<const char*, LemmaId> table[] = {
        {"A2", LemmaId::A2}, {"A2_1", LemmaId::A2_1}, {"A2_2", LemmaId::A2_2}, {"A3", LemmaId::A3},
        {"A4", LemmaId::A4}, {"A5", LemmaId::A5},     {"A6", LemmaId::A6},     {"A7", LemmaId::A7},
        {"A8", LemmaId::A8}, {"A9", LemmaId::A9},     {"A10", LemmaId::A10}};
    for (const auto& [n, id] : table)
        if (name == n) return id;
    fail(ErrorKind::Config, "unknown lemma id '" + name + "'");
}

std::string lemma_name(LemmaId id) {
    switch (id) {
    case LemmaId::A2: return "A2";
    case LemmaId::A2_1: return "A2_1";
    case LemmaId::A2_2: return "A2_2";
    case LemmaId::A3: return "A3";
    case LemmaId::A4: return "A4";
    case LemmaId::A5: return "A5";
    case LemmaId::A6: return "A6";
    case LemmaId::A7: return "A7";
    case LemmaId::A8: return "A8";
    case LemmaId::A9: return "A9";
    case LemmaId::A10: return "A10";
    }
    return "?";
}

namespace {

// Smallest C with X >= -C Y.
double fit_lower(const Scaled& X, const Scaled& Y) {
    if (X.value >= 0.0) return 0.0;
    return ratio(X * -1.0, Y);
}

}  // namespace

TermCheck term_inequality_check(LemmaId id, const SmoothSample& v, const Quadrature& q) {
    const auto& F = q.fields();
    const double s = q.s(), lam = q.lambda(), E = F.model.E();
    const int jap = static_cast<int>(std::lround(F.model.psi().alphaPrime() * F.space.N));
    const int jbp = static_cast<int>(std::lround(F.model.psi().betaPrime() * F.space.N));
    const NodeSpan Z0{0, jap}, Zw{jap, jbp}, Z1{jbp, F.space.N}, All = q.all_x();

    auto I = [&](NodeSpan z, auto&& g) {
        return q.integrate(WeightKind::Phi, z, [&](const QuadPoint& p) {
            SampleValue sv = v(p.x, p.t);
            return g(p, local(p, sv, s, lam, E), sv);
        });
    };
    auto sigma = [](const QuadPoint& p) { return p.theta * p.eta; };
    // Groups that recur in the lemma right sides.
    auto X2a = [&] {
        return I(Z0, [&](const QuadPoint& p, const Local& o, const SampleValue&) {
            double sg = sigma(p), x = p.x;
            return p.b * p.b * std::pow(x, 2.0) / p.psi->a * sg * sg * sg * o.v * o.v;
        });
    };
    auto Xw3 = [&] {
        return I(Zw, [&](const QuadPoint& p, const Local& o, const SampleValue&) {
            double sg = sigma(p);
            return p.b * p.b * sg * sg * sg * o.v * o.v;
        });
    };
    auto Xpsi4 = [&](NodeSpan z) {
        return I(z, [&](const QuadPoint& p, const Local& o, const SampleValue&) {
            double sg = sigma(p), g = p.psi->g, d1 = p.psi->d1;
            return p.b * p.b * g * g * d1 * d1 * sg * sg * sg * o.v * o.v;
        });
    };
    auto Y0 = [&] {
        return I(Z0, [&](const QuadPoint& p, const Local& o, const SampleValue&) {
            return p.psi->a * p.b * p.b * sigma(p) * o.wx * o.wx;
        });
    };
    auto Yw = [&] {
        return I(Zw, [&](const QuadPoint& p, const Local& o, const SampleValue&) {
            return p.b * p.b * sigma(p) * o.wx * o.wx;
        });
    };
    auto Ypsi2 = [&](NodeSpan z) {
        return I(z, [&](const QuadPoint& p, const Local& o, const SampleValue&) {
            double g = p.psi->g;
            return g * g * p.b * p.b * sigma(p) * o.wx * o.wx;
        });
    };

    TermCheck tc;
    tc.id = id;
    const double s2l2 = s * s * lam * lam;
    switch (id) {
    case LemmaId::A2:
        tc.lhs = I(All, [&](const QuadPoint& p, const Local& o, const SampleValue&) {
            return -0.5 * s * s * p.bdot * o.aphix2 * o.v * o.v;
        });
        tc.rhs = (X2a() + Xw3() + Xpsi4(All)) * s2l2;
        tc.fitted = fit_lower(tc.lhs, tc.rhs);
        break;
    case LemmaId::A2_1:
        tc.lhs = I(All, [&](const QuadPoint& p, const Local& o, const SampleValue&) {
            return 0.5 * p.psi->a * p.bdot * o.wx * o.wx;
        });
        tc.rhs = Y0() + Yw() + Ypsi2(Z1);
        tc.fitted = fit_lower(tc.lhs, tc.rhs);
        break;
    case LemmaId::A2_2:
        tc.lhs = I(All, [&](const QuadPoint&, const Local& o, const SampleValue&) { return 0.5 * s * o.phitt * o.v * o.v; });
        tc.rhs = (Y0() + Yw() + Ypsi2(Z1)) * std::sqrt(s) + (X2a() + Xw3() + Xpsi4(All)) * s2l2;
        tc.fitted = fit_lower(tc.lhs, tc.rhs);
        break;
    case LemmaId::A3:
        tc.lhs = I(All, [&](const QuadPoint& p, const Local& o, const SampleValue&) {
            return -2.0 * s * s * p.b * o.aphix * o.phixt * o.v * o.v;
        });
        tc.rhs = (X2a() + Xw3() + Xpsi4(All)) * s2l2;
        tc.fitted = fit_lower(tc.lhs, tc.rhs);
        break;
    case LemmaId::A4: {
        auto i3 = [&](NodeSpan z) {
            return I(z, [&](const QuadPoint& p, const Local& o, const SampleValue&) {
                return s * s * s * p.b * p.b * o.aphix * o.daphix2 * o.v * o.v;
            });
        };
        tc.lhs = i3(All);
        Scaled lead = i3(Z0);
        const double s3l3 = s * s * s * lam * lam * lam;
        Scaled P = X2a() * s3l3 + Xpsi4(All) * (s3l3 * lam);
        Scaled Nw = Xw3() * s3l3;
        tc.rhs = P;
        Scaled gap = P - tc.lhs;
        tc.fitted = gap.value <= 0.0 ? 0.0 : ratio(gap, Nw);
        tc.signHolds = lead.value > 0.0 || v(0.5 * F.model.psi().alphaPrime(), 0.5 * F.time.T).v == 0.0;
        break;
    }
    case LemmaId::A5:
        tc.lhs = q.integrate_right_edge([&](const QuadPoint& p) {
            SampleValue sv = v(1.0, p.t);
            double phix = p.theta * lam * p.psi->d1 * p.eta;
            return -2.0 * s * p.b * p.b * phix * sv.vx * sv.vx;
        });
        tc.rhs = {};
        tc.fitted = 0.0;
        tc.signHolds = tc.lhs.value >= -1e-12;
        break;
    case LemmaId::A6: {
        tc.lhs = I(All, [&](const QuadPoint& p, const Local& o, const SampleValue&) {
            return 2.0 * s * p.b * p.b * o.daphix * p.psi->a * o.wx * o.wx;
        });
        Scaled P = Y0() * (2.0 * s * lam) + Ypsi2(All) * (s * lam * lam);
        tc.rhs = P;
        Scaled gap = P - tc.lhs;
        tc.fitted = gap.value <= 0.0 ? 0.0 : ratio(gap, Yw() * (s * lam));
        break;
    }
    case LemmaId::A7:
        tc.lhs = I(All, [&](const QuadPoint& p, const Local& o, const SampleValue&) {
            return -s * p.b * p.b * p.psi->a * o.axphix * o.wx * o.wx;
        });
        tc.rhs = (Y0() + Yw()) * (s * lam);
        tc.fitted = fit_lower(tc.lhs, tc.rhs);
        break;
    case LemmaId::A8:
        tc.lhs = I(All, [&](const QuadPoint& p, const Local& o, const SampleValue&) {
            return s * p.b * p.b * p.psi->a * o.ddaphix * o.wx * o.v;
        });
        tc.rhs = (X2a() + Xw3()) * (s * s * lam * lam * lam) + (Y0() + Yw()) * lam + Xpsi4(All) * (s2l2 * lam * lam) +
                 Ypsi2(All) * (lam * lam);
        tc.fitted = fit_lower(tc.lhs, tc.rhs);
        break;
    case LemmaId::A9: {
        const double s3l3 = s * s * s * lam * lam * lam;
        tc.lhs = X2a() * s3l3 + Y0() * (s * lam) + Xpsi4(All) * (s3l3 * lam) + Ypsi2(All) * (s * lam * lam);
        Scaled src = I(All, [&](const QuadPoint& p, const Local&, const SampleValue& sv) {
            double h = sv.vt + p.b * (p.psi->a * sv.vxx + p.da * sv.vx);
            return h * h;
        });
        tc.rhs = src + Xw3() * s3l3 + Yw() * (s * lam);
        tc.fitted = ratio(tc.lhs, tc.rhs);
        break;
    }
    case LemmaId::A10: {
        const double s3l3 = s * s * s * lam * lam * lam;
        // Same integrals in the original variable v; the e^{2 s phi} factor is carried by the quadrature.
        auto vx2 = [](const Local&, const SampleValue& sv) { return sv.vx * sv.vx; };
        Scaled a1 = I(Z0, [&](const QuadPoint& p, const Local& o, const SampleValue&) {
            double sg = sigma(p);
            return std::pow(p.x, 2.0) / p.psi->a * p.b * p.b * sg * sg * sg * o.v * o.v;
        });
        Scaled a2 = I(Z0, [&](const QuadPoint& p, const Local& o, const SampleValue& sv) {
            return p.b * p.b * p.psi->a * sigma(p) * vx2(o, sv);
        });
        Scaled a3 = Xpsi4(All);
        Scaled a4 = I(All, [&](const QuadPoint& p, const Local& o, const SampleValue& sv) {
            double g = p.psi->g;
            return p.b * p.b * g * g * sigma(p) * vx2(o, sv);
        });
        tc.lhs = a1 * s3l3 + a2 * (s * lam) + a3 * (s3l3 * lam) + a4 * (s * lam * lam);
        Scaled src = I(All, [&](const QuadPoint& p, const Local&, const SampleValue& sv) {
            double h = sv.vt + p.b * (p.psi->a * sv.vxx + p.da * sv.vx);
            return h * h;
        });
        Scaled ctl = q.integrate(WeightKind::Phi, q.omega(), [&](const QuadPoint& p) {
            double sg = sigma(p), vv = v(p.x, p.t).v;
            return sg * sg * sg * vv * vv;
        });
        tc.rhs = src + ctl * s3l3;
        tc.fitted = ratio(tc.lhs, tc.rhs);
        break;
    }
    }
    return tc;
}

CarlemanReport make_report(int sampleId, const Quadrature& q, const Scaled& lhs, const Scaled& src, const Scaled& ctl) {
    CarlemanReport r;
    r.sampleId = sampleId;
    r.s = q.s();
    r.lambda = q.lambda();
    double L = std::max({lhs.log_abs(), src.log_abs(), ctl.log_abs()});
    if (L == kNegInf) return r;  // 0/0 reads as ratio 0
    auto at = [&](const Scaled& x) { return x.value == 0.0 ? 0.0 : x.value * std::exp(x.logScale - L); };
    r.logScale = L;
    r.lhs = at(lhs);
    r.rhsSource = at(src);
    r.rhsControl = at(ctl);
    double rhs = r.rhsSource + r.rhsControl;
    if (rhs > 0.0) {
        r.ratio = r.lhs / rhs;
    } else {
        r.ratio = std::numeric_limits<double>::infinity();
        r.violation = r.lhs > 0.0;
    }
    return r;
}

Field solve_single_backward(const Problem& p, const std::vector<double>& wT, const Field& h) {
    Problem single = p;
    auto& c = single.coeffs;
    for (auto* f : {&c.b12, &c.b21, &c.b22}) std::fill(f->raw().begin(), f->raw().end(), 0.0);
    Problem r = time_reversed(single);
    // In reversed time: W_t - b (a W_x)_x - d1 sqrt(a) W_x + b11 W = -h.
    for (double& d : r.coeffs.d1.raw()) d = -d;
    const int M = p.time.M;
    ForwardData data;
    data.u0 = wT;
    if (!h.empty()) {
        data.H1 = Field(h.rows(), h.cols());
        for (int k = 0; k <= M; ++k)
            for (std::size_t j = 0; j < h.cols(); ++j) data.H1(k, j) = -h(M - k, j);
    }
    StatePair y = solve_forward(r, data);
    Field w(y.u.rows(), y.u.cols());
    for (int k = 0; k <= M; ++k)
        for (std::size_t j = 0; j < w.cols(); ++j) w(k, j) = y.u(M - k, j);
    return w;
}

namespace {

Scaled weighted_square(const Quadrature& q, WeightKind kind, NodeSpan xr, const Field& f,
                       const std::function<double(const QuadPoint&)>& factor) {
    if (f.empty()) return {};
    check_traj(f, q, "source");
    Bilinear B{f, q.fields().space.h()};
    return q.integrate(kind, xr, [&](const QuadPoint& p) {
        double v = B.value(p);
        return factor(p) * v * v;
    });
}

}  // namespace

CarlemanReport carleman_ratio_single(const Problem& p, const Quadrature& q, const std::vector<double>& wT,
                                     const Field& h, int sampleId) {
    Field w = solve_single_backward(p, wT, h);
    const double sl = q.s() * q.lambda();
    Scaled lhs = functional_I(w, q);
    Scaled src = weighted_square(q, WeightKind::Phi, q.all_x(), h, [](const QuadPoint&) { return 1.0; });
    Scaled ctl = weighted_square(q, WeightKind::Phi, q.omega(), w, [&](const QuadPoint& pt) {
        double sg = pt.theta * pt.eta;
        return sl * sl * sl * sg * sg * sg;
    });
    return make_report(sampleId, q, lhs, src, ctl);
}

namespace {

AdjointPair adjoint_from(const Problem& p, const std::vector<double>& phiT, const Field& F1, const Field& F2) {
    return solve_adjoint(p, phiT, F1, F2);
}

double pow4(double x) { return x * x * x * x; }

}  // namespace

CarlemanReport carleman_ratio_system(const Problem& p, const Quadrature& q, const std::vector<double>& phiT,
                                     const Field& F1, const Field& F2, int sampleId) {
    AdjointPair z = adjoint_from(p, phiT, F1, F2);
    const double sl = q.s() * q.lambda();
    Scaled lhs = functional_I(z.phi, q) + functional_I(z.psi, q);
    auto srcW = [&](const QuadPoint& pt) { return pow4(sl * pt.theta * pt.eta); };
    Scaled src = weighted_square(q, WeightKind::Phi, q.all_x(), F1, srcW) +
                 weighted_square(q, WeightKind::Phi, q.all_x(), F2, srcW);
    Scaled ctl = weighted_square(q, WeightKind::Phi, q.omega(), z.phi, [&](const QuadPoint& pt) {
        double v = pow4(sl * pt.theta * pt.eta);
        return v * v;
    });
    return make_report(sampleId, q, lhs, src, ctl);
}

CarlemanReport gamma0_ratio(const Problem& p, const Quadrature& q, const std::vector<double>& phiT, const Field& F1,
                            const Field& F2, int sampleId) {
    AdjointPair z = adjoint_from(p, phiT, F1, F2);
    const double sl = q.s() * q.lambda();
    Scaled lhs = functional_Gamma0(z, q);
    auto srcW = [&](const QuadPoint& pt) { return pow4(sl * pt.tau * pt.eta); };
    Scaled src = weighted_square(q, WeightKind::A, q.all_x(), F1, srcW) +
                 weighted_square(q, WeightKind::A, q.all_x(), F2, srcW);
    Scaled ctl = weighted_square(q, WeightKind::A, q.omega(), z.phi, [&](const QuadPoint& pt) {
        double v = pow4(sl * pt.tau * pt.eta);
        return v * v;
    });
    return make_report(sampleId, q, lhs, src, ctl);
}

ObservabilityReport observability_ratio(const Problem& p, const Quadrature& q, const std::vector<double>& phiT,
                                        int sampleId) {
    const auto& F = q.fields();
    AdjointPair z = solve_adjoint(p, phiT, Field(), Field());
    ObservabilityReport r;
    r.sampleId = sampleId;
    std::vector<double> p0(z.phi.row(0).begin(), z.phi.row(0).end()), s0(z.psi.row(0).begin(), z.psi.row(0).end());
    double init = l2_norm_sq(p0, p.space) + l2_norm_sq(s0, p.space);
    r.logInitial = init > 0.0 ? std::log(init) : kNegInf;
    const double sl = q.s() * q.lambda();
    Scaled obs = weighted_square(q, WeightKind::A, q.omega(), z.phi, [&](const QuadPoint& pt) {
        double v = pow4(sl * pt.tau * pt.eta);
        return v * v;
    });
    r.logObservation = obs.log_abs();

    // t-only weights on the clipped levels, trapezoid in x.
    const double dt = p.time.dt();
    const auto chi = p.chi;
    double simpleL = kNegInf, simpleR = kNegInf;
    for (std::size_t i = 0; i < F.level.size(); ++i) {
        int k = F.level[i];
        std::vector<double> ph(z.phi.row(k).begin(), z.phi.row(k).end()), ps(z.psi.row(k).begin(), z.psi.row(k).end());
        double both = l2_norm_sq(ph, p.space) + l2_norm_sq(ps, p.space);
        double om = 0.0;
        for (int j = 0; j <= p.space.N; ++j) om += chi[j] * ph[j] * ph[j];
        om *= p.space.h();
        if (both > 0.0) simpleL = logsumexp(simpleL, -2.0 * F.logRho2[i] + std::log(dt * both));
        if (om > 0.0) simpleR = logsumexp(simpleR, -2.0 * F.logRho1[i] + std::log(dt * om));
    }
    r.logSimpleLhs = logsumexp(r.logInitial, simpleL);
    r.logSimpleRhs = simpleR;
    if (r.logInitial == kNegInf) {
        r.logRatio = kNegInf;
        r.logSimpleRatio = kNegInf;
        return r;
    }
    r.violation = r.logObservation == kNegInf || r.logSimpleRhs == kNegInf;
    r.logRatio = r.logInitial - r.logObservation;
    r.logSimpleRatio = r.logSimpleLhs - r.logSimpleRhs;
    return r;
}

std::vector<double> terminal_sample(std::uint64_t seed, std::uint64_t id, int N, int K) {
    return sine_series_nodes(sine_coefficients(seed, id, K), N);
}

void write_carleman_csv(const std::vector<CarlemanReport>& reports, const std::string& path) {
    std::string out = "sampleId,s,lambda,lhs,rhsSource,rhsControl,ratio,logScale\n";
    for (const auto& r : reports)
        out += join_csv({std::to_string(r.sampleId), format_double(r.s), format_double(r.lambda), format_double(r.lhs),
                         format_double(r.rhsSource), format_double(r.rhsControl), format_double(r.ratio),
                         format_double(r.logScale)});
    write_text_file(path, out);
}

}  // namespace dgc
