#include "dgc/weights.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "dgc/io.hpp"

namespace dgc {

namespace {

double poly(const std::array<double, 6>& c, double s, int deriv) {
    double v = 0.0;
    for (int i = 5; i >= deriv; --i) {
        double f = 1.0;
        for (int k = 0; k < deriv; ++k) f *= (i - k);
        v = v * s + c[i] * f;
    }
    return v;
}

}  // namespace

PsiPoint PsiProfile::eval(double x) const {
    require(x >= 0.0 && x <= 1.0, ErrorKind::Domain, "Psi evaluated outside [0,1]");
    const double al = alpha_;
    PsiPoint p;
    if (x < ap_ || x >= bp_) {
        const double sgn = x < ap_ ? 1.0 : -1.0;
        const double x1 = al == 0.0 ? x : std::pow(x, 1.0 - al);  // x^{1-alpha}
        const double x2 = x * x1;                                   // x^{2-alpha}
        p.a = al == 0.0 ? 1.0 : std::pow(x, al);
        if (x < ap_) {
            p.psi = x2 / (2.0 - al);
        } else {
            p.psi = -(x2 - std::pow(bp_, 2.0 - al)) / (2.0 - al);
        }
        p.d1 = sgn * x1;
        p.d2 = (x == 0.0 && al > 0.0) ? std::numeric_limits<double>::infinity() : sgn * (1.0 - al) * x1 / x;
        if (x == 0.0 && al == 0.0) p.d2 = sgn;
        p.g = sgn * x;
        p.g1 = sgn;
        p.g2 = 0.0;
        p.q1 = (2.0 - al) * x1;
        p.daD1 = sgn * al;
        p.d2g = (1.0 - al) * x1;
        return p;
    }
    const double L = bp_ - ap_;
    const double s = (x - ap_) / L;
    p.psi = poly(coef_, s, 0);
    p.d1 = poly(coef_, s, 1) / L;
    p.d2 = poly(coef_, s, 2) / (L * L);
    const double d3 = poly(coef_, s, 3) / (L * L * L);
    const double a = std::pow(x, al);
    const double a1 = al * std::pow(x, al - 1.0);
    const double a2 = al * (al - 1.0) * std::pow(x, al - 2.0);
    p.a = a;
    p.g = a * p.d1;
    p.g1 = a1 * p.d1 + a * p.d2;
    p.g2 = a2 * p.d1 + 2.0 * a1 * p.d2 + a * d3;
    p.q1 = a1 * p.d1 * p.d1 + 2.0 * a * p.d1 * p.d2;
    p.daD1 = a1 * p.d1;
    p.d2g = p.d2 * p.g;
    return p;
}

PsiProfile build_psi(const DegeneracySpec& spec, const SubdomainSpec& sub, const SpaceGrid& grid) {
    validate(spec);
    const double al = spec.alpha;
    const double ap = sub.omegaPrime.lo;
    const double bp = sub.omegaPrime.hi;
    require(0.0 < ap && ap < bp && bp < 1.0, ErrorKind::Contract, "omega_prime must satisfy 0 < a' < b' < 1");
    auto on_grid = [&](double x) { return std::abs(x * grid.N - std::round(x * grid.N)) < 1e-9; };
    require(on_grid(ap) && on_grid(bp), ErrorKind::Contract, "alpha' and beta' must be grid nodes");

    PsiProfile P;
    P.alpha_ = al;
    P.ap_ = ap;
    P.bp_ = bp;

    const double L = bp - ap;
    const double v0 = std::pow(ap, 2.0 - al) / (2.0 - al);
    const double d0 = std::pow(ap, 1.0 - al);
    const double s0 = (1.0 - al) * std::pow(ap, -al);
    const double v1 = 0.0;
    const double d1 = -std::pow(bp, 1.0 - al);
    const double s1 = -(1.0 - al) * std::pow(bp, -al);
    std::array<double, 6> c{};
    c[0] = v0;
    c[1] = L * d0;
    c[2] = L * L * s0 / 2.0;
    const double r0 = v1 - c[0] - c[1] - c[2];
    const double r1 = L * d1 - c[1] - 2.0 * c[2];
    const double r2 = L * L * s1 - 2.0 * c[2];
    c[3] = 10.0 * r0 - 4.0 * r1 + 0.5 * r2;
    c[4] = -15.0 * r0 + 7.0 * r1 - r2;
    c[5] = 6.0 * r0 - 3.0 * r1 + 0.5 * r2;
    P.coef_ = c;

    // Continuum extremes: dense scan, then golden-section refinement around the best sample.
    const int dense = 20000;
    double bestX = 0.0, bestV = -1e300, worstV = 1e300;
    for (int i = 0; i <= dense; ++i) {
        double x = static_cast<double>(i) / dense;
        double v = P.value(x);
        if (v > bestV) {
            bestV = v;
            bestX = x;
        }
        worstV = std::min(worstV, v);
    }
    double lo = std::max(0.0, bestX - 1.0 / dense), hi = std::min(1.0, bestX + 1.0 / dense);
    const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
    for (int it = 0; it < 100; ++it) {
        double m1 = hi - gr * (hi - lo), m2 = lo + gr * (hi - lo);
        if (P.value(m1) < P.value(m2)) lo = m1; else hi = m2;
    }
    P.argMax_ = 0.5 * (lo + hi);
    P.psiMax_ = std::max(bestV, P.value(P.argMax_));
    P.psiMin_ = std::min(worstV, P.value(1.0));
    P.psiInf_ = std::max(std::abs(P.psiMax_), std::abs(P.psiMin_));

    const double endScale = std::max(std::abs(v0), std::abs(P.value(1.0)));
    if (P.psiInf_ > 10.0 * endScale) {
        std::ostringstream os;
        os << "ill-conditioned blend on [alpha', beta']: |Psi| reaches " << P.psiInf_
           << " against end values " << endScale;
        fail(ErrorKind::Numerical, os.str());
    }

    P.values_.resize(grid.nodes());
    P.deriv_.resize(grid.nodes());
    for (int j = 0; j <= grid.N; ++j) {
        PsiPoint q = P.eval(grid.x(j));
        P.values_[j] = q.psi;
        P.deriv_[j] = q.d1;
        P.nodalInf_ = std::max(P.nodalInf_, std::abs(q.psi));
    }
    return P;
}

double theta_weight(double t, double T) {
    require(t > 0.0 && t < T, ErrorKind::Domain, "singular weight evaluated at t outside (0,T)");
    double q = t * (T - t);
    double q2 = q * q;
    return 1.0 / (q2 * q2);
}

double theta_weight_dt(double t, double T) {
    double q = t * (T - t);
    return -4.0 * (T - 2.0 * t) * theta_weight(t, T) / q;
}

double theta_weight_dtt(double t, double T) {
    double q = t * (T - t);
    double th = theta_weight(t, T);
    double d = T - 2.0 * t;
    return 20.0 * d * d * th / (q * q) + 8.0 * th / q;
}

double m_weight(double t, double T) {
    require(t >= 0.0 && t <= T, ErrorKind::Domain, "m(t) evaluated outside [0,T]");
    double q = t <= 0.5 * T ? 0.25 * T * T : t * (T - t);
    double q2 = q * q;
    return q2 * q2;
}

std::vector<int> clipped_levels(const TimeGrid& tg) {
    require(tg.clipDelta > 0.0 && tg.clipDelta < 0.5 * tg.T, ErrorKind::Config,
            "clip window must satisfy 0 < clipDelta < T/2");
    std::vector<int> ks;
    const double eps = 1e-12 * tg.T;
    for (int k = 0; k <= tg.M; ++k) {
        double t = tg.t(k);
        if (t >= tg.clipDelta - eps && t <= tg.T - tg.clipDelta + eps) ks.push_back(k);
    }
    return ks;
}

Instationary build_instationary(const TimeGrid& tg) {
    Instationary w;
    for (int k : clipped_levels(tg)) {
        double t = tg.t(k);
        w.t.push_back(t);
        w.theta.push_back(theta_weight(t, tg.T));
        w.m.push_back(m_weight(t, tg.T));
        w.tau.push_back(1.0 / w.m.back());
    }
    return w;
}

WeightModel::WeightModel(PsiProfile psi, WeightParams params, TimeGrid tg)
    : psi_(std::move(psi)), params_(params), tg_(tg) {
    require(params_.lambda > 0.0 && params_.s > 0.0, ErrorKind::Contract, "lambda and s must be positive");
    const double P = psi_.psiInf();
    logE_ = 3.0 * params_.lambda * P;
    require(logE_ < 700.0, ErrorKind::Numerical, "e^{3 lambda |Psi|} overflows; lambda too large");
    E_ = std::exp(logE_);
    etaMax_ = std::exp(params_.lambda * (P + psi_.psiMax()));
    etaMin_ = std::exp(params_.lambda * (P + psi_.psiMin()));
}

double WeightModel::logEta(double x) const { return params_.lambda * (psi_.psiInf() + psi_.value(x)); }
double WeightModel::eta(double x) const { return std::exp(logEta(x)); }

WeightFields assemble_fields(const PsiProfile& psi, const WeightParams& params, const SpaceGrid& grid,
                             const TimeGrid& tg) {
    WeightFields f;
    f.model = WeightModel(psi, params, tg);
    f.space = grid;
    f.time = tg;
    const WeightModel& W = f.model;
    const double s = params.s;

    f.level = clipped_levels(tg);
    Instationary inst = build_instationary(tg);
    f.t = inst.t;
    f.theta = inst.theta;
    f.m = inst.m;
    f.tau = inst.tau;

    const int R = static_cast<int>(f.level.size());
    const int J = grid.nodes();
    f.eta.resize(J);
    std::vector<double> logEta(J);
    for (int j = 0; j < J; ++j) {
        logEta[j] = W.logEta(grid.x(j));
        f.eta[j] = std::exp(logEta[j]);
    }
    f.logSigma = Field(R, J);
    f.phiW = Field(R, J);
    f.logZeta = Field(R, J);
    f.A = Field(R, J);
    f.Astar.resize(R);
    f.Ahat.resize(R);
    f.logZetaStar.resize(R);
    f.logZetaHat.resize(R);
    f.logRho0.resize(R);
    f.logRho1.resize(R);
    f.logRho2.resize(R);
    f.logRhoHat.resize(R);
    f.logDomination.fill(-std::numeric_limits<double>::infinity());

    for (int r = 0; r < R; ++r) {
        const double t = f.t[r];
        const double lth = std::log(f.theta[r]);
        const double lta = std::log(f.tau[r]);
        for (int j = 0; j < J; ++j) {
            f.logSigma(r, j) = lth + logEta[j];
            f.logZeta(r, j) = lta + logEta[j];
            f.phiW(r, j) = f.theta[r] * (f.eta[j] - W.E());
            f.A(r, j) = f.tau[r] * (f.eta[j] - W.E());
            for (int n = 0; n <= 8; ++n) {
                double lc = 2.0 * s * (f.phiW(r, j) - f.A(r, j)) + n * (lth - lta);
                f.logDomination[n] = std::max(f.logDomination[n], lc);
            }
        }
        f.Astar[r] = W.Astar(t);
        f.Ahat[r] = W.Ahat(t);
        f.logZetaStar[r] = W.logZetaStar(t);
        f.logZetaHat[r] = W.logZetaHat(t);
        f.logRho0[r] = W.logRho0(t);
        f.logRho1[r] = W.logRho1(t);
        f.logRho2[r] = W.logRho2(t);
        f.logRhoHat[r] = W.logRhoHat(t);
    }
    f.zeta0 = W.etaMax() / W.etaMin();
    for (double v : f.phiW.raw())
        require(std::isfinite(v), ErrorKind::Numerical, "overflow while assembling weight fields");
    return f;
}

double ordering_margin(double lambda, double psiInf, double psiMax, double psiMin) {
    return 1.0 + 2.0 * std::exp(lambda * (psiMin - 2.0 * psiInf)) - 3.0 * std::exp(lambda * (psiMax - 2.0 * psiInf));
}

double min_lambda_for_ordering(double psiInf, double psiMax, double psiMin) {
    require(psiInf > 0.0, ErrorKind::Numerical, "degenerate Psi profile: |Psi|_inf = 0");
    auto g = [&](double l) { return ordering_margin(l, psiInf, psiMax, psiMin); };
    double hi = 1e-3 / psiInf;
    while (g(hi) <= 0.0) {
        hi *= 2.0;
        require(hi < 1e6, ErrorKind::Numerical, "ordering threshold not found");
    }
    double lo = 0.0;
    while (hi - lo > 1e-7) {
        double mid = 0.5 * (lo + hi);
        if (g(mid) > 0.0) hi = mid; else lo = mid;
    }
    for (double f : {1.0, 1.5, 2.0, 4.0, 10.0})
        require(g(hi * f) > 0.0, ErrorKind::Invariant, "ordering margin not monotone beyond threshold");
    return hi;
}

double min_lambda_for_ordering(const PsiProfile& psi) {
    return min_lambda_for_ordering(psi.psiInf(), psi.psiMax(), psi.psiMin());
}

bool WeightInvariantReport::ok() const {
    return maxRhoHatErr <= 1e-12 && maxZeta0Spread <= 1e-12 && orderingHolds && phiNegative && ANegative &&
           etaAtLeastOne && sigmaLowerBound && mLowerBound && maxSigmaZetaDiffLateHalf <= 1e-12 && rhoChain &&
           boundaryLayersMonotone;
}

WeightInvariantReport check_weight_invariants(const WeightFields& f) {
    WeightInvariantReport rep;
    const double T = f.time.T;
    const double sigmaFloor = std::pow(4.0 / (T * T), 4);
    const int R = static_cast<int>(f.t.size());
    const int J = f.space.nodes();
    const double s = f.model.s();
    double z0min = 1e300, z0max = -1e300;
    for (int r = 0; r < R; ++r) {
        const double t = f.t[r];
        // Stored logs against their exponent and zeta* parts, then the identity on those parts.
        const double base = -s * f.Astar[r];
        const double lz = f.logZetaStar[r];
        const double scale = std::abs(base) + 4.0 * std::abs(lz);
        double drift = std::max({std::abs(f.logRho0[r] - (base - 2.0 * lz)), std::abs(f.logRho1[r] - (base - 4.0 * lz)),
                                 std::abs(f.logRhoHat[r] - (base - 3.0 * lz))});
        if (drift > 1e-12 * scale) rep.maxRhoHatErr = std::max(rep.maxRhoHatErr, drift / scale);
        double gap = (2.0 * base - (base + base)) + (2.0 * (-3.0 * lz) - ((-4.0 * lz) + (-2.0 * lz)));
        rep.maxRhoHatErr = std::max(rep.maxRhoHatErr, std::abs(std::expm1(gap)));
        double z0 = std::exp(f.logZetaStar[r] - f.logZetaHat[r]);
        z0min = std::min(z0min, z0);
        z0max = std::max(z0max, z0);
        if (!(3.0 * f.Astar[r] < 2.0 * f.Ahat[r] && 2.0 * f.Ahat[r] < 0.0)) rep.orderingHolds = false;
        if (!(f.m[r] >= std::pow(t * (T - t), 4) * (1.0 - 1e-14))) rep.mLowerBound = false;
        if (f.logZetaHat[r] >= 0.0) {
            bool chain = f.logRho1[r] <= f.logRhoHat[r] && f.logRhoHat[r] <= f.logRho0[r] &&
                         f.logRho0[r] <= f.logRho2[r];
            if (!chain) rep.rhoChain = false;
        }
        for (int j = 0; j < J; ++j) {
            if (!(f.phiW(r, j) < 0.0)) rep.phiNegative = false;
            if (!(f.A(r, j) < 0.0)) rep.ANegative = false;
            if (!(f.eta[j] >= 1.0)) rep.etaAtLeastOne = false;
            if (!(std::exp(f.logSigma(r, j)) >= sigmaFloor * (1.0 - 1e-14))) rep.sigmaLowerBound = false;
            if (t >= 0.5 * T) {
                double d = std::abs(std::expm1(f.logSigma(r, j) - f.logZeta(r, j)));
                rep.maxSigmaZetaDiffLateHalf = std::max(rep.maxSigmaZetaDiffLateHalf, d);
            }
        }
    }
    if (R > 0) rep.maxZeta0Spread = (z0max - z0min) / z0min;

    // log(e^{2 s phi} sigma^n) must increase away from both ends of the clipped grid.
    const int layer = std::min(5, R / 2);
    for (int n = 0; n <= 8 && layer >= 2; ++n) {
        for (int j = 0; j < J; ++j) {
            auto lw = [&](int r) { return 2.0 * s * f.phiW(r, j) + n * f.logSigma(r, j); };
            for (int r = 0; r + 1 < layer; ++r) {
                if (!(lw(r) < lw(r + 1))) rep.boundaryLayersMonotone = false;
                if (!(lw(R - 1 - r) < lw(R - 2 - r))) rep.boundaryLayersMonotone = false;
            }
        }
    }
    return rep;
}

void dump_weights(const WeightFields& f, const std::string& path) {
    std::string out = "t,x,log_sigma,log_zeta,phi_w,A,A_star,A_hat,log_rho0,log_rho1,log_rho2\n";
    const int R = static_cast<int>(f.t.size());
    const int J = f.logSigma.cols();
    for (int r = 0; r < R; ++r) {
        for (int j = 0; j < J; ++j) {
            out += join_csv({format_double(f.t[r]), format_double(f.space.x(j)), format_double(f.logSigma(r, j)),
                             format_double(f.logZeta(r, j)), format_double(f.phiW(r, j)), format_double(f.A(r, j)),
                             format_double(f.Astar[r]), format_double(f.Ahat[r]), format_double(f.logRho0[r]),
                             format_double(f.logRho1[r]), format_double(f.logRho2[r])});
        }
    }
    write_text_file(path, out);
}

}  // namespace dgc
