#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "dgc/common.hpp"
#include "dgc/core_domain.hpp"

namespace dgc {

// Values of Psi and of the products that stay regular at x = 0.
struct PsiPoint {
    double psi = 0.0;
    double d1 = 0.0;     // Psi'
    double d2 = 0.0;     // Psi'' (singular at 0 when alpha > 0)
    double g = 0.0;      // a Psi'
    double g1 = 0.0;     // (a Psi')'
    double g2 = 0.0;     // (a Psi')''
    double q1 = 0.0;     // (a Psi'^2)'
    double daD1 = 0.0;   // a' Psi'
    double d2g = 0.0;    // Psi'' a Psi'
    double a = 0.0;
};

class PsiProfile {
public:
    PsiProfile() = default;

    PsiPoint eval(double x) const;
    double value(double x) const { return eval(x).psi; }

    double alpha() const { return alpha_; }
    double alphaPrime() const { return ap_; }
    double betaPrime() const { return bp_; }

    // Continuum extremes (dense sampling plus refinement).
    double psiInf() const { return psiInf_; }
    double psiMax() const { return psiMax_; }
    double psiMin() const { return psiMin_; }
    double argMax() const { return argMax_; }
    // max_j |Psi(x_j)| on the construction grid.
    double nodalPsiInf() const { return nodalInf_; }

    const std::vector<double>& values() const { return values_; }
    const std::vector<double>& derivative() const { return deriv_; }
    const std::array<double, 6>& joinData() const { return coef_; }

private:
    friend PsiProfile build_psi(const DegeneracySpec&, const SubdomainSpec&, const SpaceGrid&);

    double alpha_ = 0.5;
    double ap_ = 0.65;
    double bp_ = 0.85;
    std::array<double, 6> coef_{};  // blend polynomial in s = (x - ap)/(bp - ap)
    double psiInf_ = 0.0, psiMax_ = 0.0, psiMin_ = 0.0, argMax_ = 0.0, nodalInf_ = 0.0;
    std::vector<double> values_, deriv_;
};

// sub must already be snapped; alpha' and beta' are taken from sub.omegaPrime.
PsiProfile build_psi(const DegeneracySpec& spec, const SubdomainSpec& sub, const SpaceGrid& grid);

struct WeightParams {
    double lambda = 1.0;
    double s = 1.0;
};

struct Instationary {
    std::vector<double> t, theta, m, tau;
};

double theta_weight(double t, double T);
double theta_weight_dt(double t, double T);
double theta_weight_dtt(double t, double T);
double m_weight(double t, double T);

// Clipped nodes t_k in [clipDelta, T - clipDelta].
std::vector<int> clipped_levels(const TimeGrid& tg);
Instationary build_instationary(const TimeGrid& tg);

// Closed-form evaluation of every weight at arbitrary points.
class WeightModel {
public:
    WeightModel() = default;
    WeightModel(PsiProfile psi, WeightParams params, TimeGrid tg);

    const PsiProfile& psi() const { return psi_; }
    const WeightParams& params() const { return params_; }
    const TimeGrid& time() const { return tg_; }
    double lambda() const { return params_.lambda; }
    double s() const { return params_.s; }

    double logE() const { return logE_; }          // 3 lambda |Psi|_inf
    double E() const { return E_; }
    double etaMax() const { return etaMax_; }      // e^{2 lambda |Psi|_inf}
    double etaMin() const { return etaMin_; }

    double eta(double x) const;
    double logEta(double x) const;
    double theta(double t) const { return theta_weight(t, tg_.T); }
    double tau(double t) const { return 1.0 / m_weight(t, tg_.T); }

    double phi(double x, double t) const { return theta(t) * (eta(x) - E_); }
    double A(double x, double t) const { return tau(t) * (eta(x) - E_); }
    double Astar(double t) const { return tau(t) * (etaMax_ - E_); }
    double Ahat(double t) const { return tau(t) * (etaMin_ - E_); }
    double logZetaStar(double t) const { return std::log(tau(t)) + std::log(etaMax_); }
    double logZetaHat(double t) const { return std::log(tau(t)) + std::log(etaMin_); }
    double logRho0(double t) const { return -s() * Astar(t) - 2.0 * logZetaStar(t); }
    double logRho1(double t) const { return -s() * Astar(t) - 4.0 * logZetaStar(t); }
    double logRho2(double t) const { return -1.5 * s() * Astar(t) - logZetaHat(t); }
    double logRhoHat(double t) const { return -s() * Astar(t) - 3.0 * logZetaStar(t); }

    // Upper bounds used as log shifts: max of phi over Q and of A over Q.
    double phiRef() const { return theta_weight(0.5 * tg_.T, tg_.T) * (etaMax_ - E_); }
    double ARef() const { return 1.0 / m_weight(0.0, tg_.T) * (etaMax_ - E_); }

private:
    PsiProfile psi_;
    WeightParams params_;
    TimeGrid tg_;
    double logE_ = 0.0, E_ = 1.0, etaMax_ = 1.0, etaMin_ = 1.0;
};

struct WeightFields {
    WeightModel model;
    SpaceGrid space;
    TimeGrid time;
    std::vector<int> level;        // clipped time levels, one per row
    std::vector<double> t;
    std::vector<double> theta, m, tau;
    std::vector<double> eta;       // per space node
    Field logSigma, phiW, logZeta, A;
    std::vector<double> Astar, Ahat, logZetaStar, logZetaHat;
    std::vector<double> logRho0, logRho1, logRho2, logRhoHat;
    double zeta0 = 1.0;
    std::array<double, 9> logDomination{};  // log C_n, n = 0..8
};

WeightFields assemble_fields(const PsiProfile& psi, const WeightParams& params, const SpaceGrid& grid,
                             const TimeGrid& tg);

// g(lambda) = 1 + 2 e^{lambda (psiMin - 2 P)} - 3 e^{lambda (psiMax - 2 P)}; ordering holds iff g > 0.
double ordering_margin(double lambda, double psiInf, double psiMax, double psiMin);
double min_lambda_for_ordering(double psiInf, double psiMax, double psiMin);
double min_lambda_for_ordering(const PsiProfile& psi);

struct WeightInvariantReport {
    double maxRhoHatErr = 0.0;     // |rhoHat^2 - rho1 rho0| / (rho1 rho0)
    double maxZeta0Spread = 0.0;   // relative spread of zeta*/zetahat in t
    bool orderingHolds = true;     // 3A* < 2Ahat < 0
    bool phiNegative = true;
    bool ANegative = true;
    bool etaAtLeastOne = true;
    bool sigmaLowerBound = true;   // sigma >= (4/T^2)^4
    bool mLowerBound = true;       // m >= t^4 (T-t)^4
    double maxSigmaZetaDiffLateHalf = 0.0;
    bool rhoChain = true;          // rho1 <= rhoHat <= rho0 <= rho2 where zetahat >= 1
    bool boundaryLayersMonotone = true;
    bool ok() const;
};

WeightInvariantReport check_weight_invariants(const WeightFields& f);

void dump_weights(const WeightFields& f, const std::string& path);

}  // namespace dgc
