#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dgc/common.hpp"
#include "dgc/pde_solver.hpp"
#include "dgc/weights.hpp"

namespace dgc {

// value * e^{logScale}. Weighted integrals live far outside double range, so they travel in this form.
struct Scaled {
    double value = 0.0;
    double logScale = 0.0;

    double log_abs() const;  // -inf for zero
    Scaled operator*(double c) const { return {value * c, logScale}; }
};

Scaled operator+(const Scaled& a, const Scaled& b);
Scaled operator-(const Scaled& a, const Scaled& b);
// a / b as a plain double; inf or nan when it does not fit.
double ratio(const Scaled& a, const Scaled& b);
double log_ratio(const Scaled& a, const Scaled& b);

// Sub-cell Gauss quadrature. Each grid cell is split refine x refine times with a 3-point rule per sub-cell.
// Cells whose weight exponent is bounded below (region max - cutoff) are skipped.
struct QuadratureSpec {
    int refine = 8;
    double cutoff = 200.0;
};

enum class WeightKind { None, Phi, A, AStar };

struct NodeSpan {
    int lo = 0, hi = 0;  // node indices, lo < hi
};

// Data available at one quadrature point.
struct QuadPoint {
    double x = 0.0, t = 0.0, w = 0.0;  // w = quadrature weight
    int j = 0, k = 0;                  // cell indices
    double xi = 0.0, et = 0.0;         // local coordinates in [0,1]
    const PsiPoint* psi = nullptr;
    double da = 0.0;  // a'(x)
    double eta = 1.0;
    double theta = 0.0, dtheta = 0.0, ddtheta = 0.0, tau = 0.0;
    double b = 0.0, bdot = 0.0;
};

class Quadrature {
public:
    // Uses b(t) and omega from p; p and f must share grids.
    Quadrature(const WeightFields& f, const Problem& p, QuadratureSpec q = {});

    const WeightFields& fields() const { return *f_; }
    double s() const { return f_->model.s(); }
    double lambda() const { return f_->model.lambda(); }

    // Integral of e^{2s W} * g over xr x tr; tr given as level indices.
    Scaled integrate(WeightKind kind, NodeSpan xr, NodeSpan tr, const std::function<double(const QuadPoint&)>& g) const;
    Scaled integrate(WeightKind kind, NodeSpan xr, const std::function<double(const QuadPoint&)>& g) const;

    // Integral in t along x = 1 of e^{2s phi(1,t)} g(t).
    Scaled integrate_right_edge(const std::function<double(const QuadPoint&)>& g) const;

    NodeSpan all_x() const { return {0, f_->space.N}; }
    NodeSpan all_t() const { return {0, f_->time.M}; }
    NodeSpan omega() const { return omega_; }

private:
    struct XNode {
        double x, w, xi, eta, da;
        PsiPoint psi;
    };
    struct TNode {
        double t, w, et, theta, dtheta, ddtheta, tau, b, bdot;
        bool phiValid, aValid;
    };
    double exponent(WeightKind kind, const XNode& xn, const TNode& tn) const;
    double cell_bound(WeightKind kind, int j, int k) const;

    const WeightFields* f_;
    QuadratureSpec q_;
    int per_ = 0;  // points per cell per direction
    std::vector<std::vector<XNode>> xs_;
    std::vector<std::vector<TNode>> ts_;
    std::vector<double> etaCellMax_;
    std::vector<double> thetaCellMin_, tauCellMin_;
    XNode right_;
    NodeSpan omega_;
};

// Smooth sample with analytic derivatives; v must vanish at x = 0 and x = 1.
struct SampleValue {
    double v = 0.0, vx = 0.0, vxx = 0.0, vt = 0.0;
};
using SmoothSample = std::function<SampleValue(double x, double t)>;

// sin(pi x) sin(pi t / T)
SmoothSample product_sine_sample(double T);
// sum c_kl sin(k pi x) sin(l pi t / T), k <= 4, l <= 2, c_kl ~ U(-1,1)/k^2 from stream (seed, id).
SmoothSample random_smooth_sample(std::uint64_t seed, std::uint64_t id, double T);

Scaled functional_I(const Field& traj, const Quadrature& q);
Scaled functional_I(const Field& traj, const Quadrature& q, NodeSpan tr);
Scaled functional_Gamma0(const AdjointPair& pair, const Quadrature& q);
Scaled functional_Gamma0(const AdjointPair& pair, const Quadrature& q, NodeSpan tr);

// Both sides of the integration-by-parts identity for w = e^{s phi} v.
struct LemmaA1Terms {
    Scaled lhs;                 // <L+ w, L- w>
    std::array<Scaled, 7> terms;
    Scaled boundary;            // -s int [a^2 b^2 phi_x w_x^2] at x = 1
    Scaled rhs;
    double residual = 0.0;      // |lhs - rhs| / max(|lhs|, |rhs|)
};
LemmaA1Terms lemma_a1_terms(const SmoothSample& v, const Quadrature& q);
double lemma_a1_residual(const SmoothSample& v, const Quadrature& q);

enum class LemmaId { A2, A2_1, A2_2, A3, A4, A5, A6, A7, A8, A9, A10 };
LemmaId parse_lemma_id(const std::string& name);
std::string lemma_name(LemmaId id);

struct TermCheck {
    LemmaId id = LemmaId::A2;
    Scaled lhs, rhs;          // the two sides compared
    double fitted = 0.0;      // smallest constant making the inequality hold for this sample
    bool signHolds = true;    // sign-definite claims (A4 leading term, A5 boundary term)
};
TermCheck term_inequality_check(LemmaId id, const SmoothSample& v, const Quadrature& q);

struct CarlemanReport {
    int sampleId = 0;
    double s = 0.0, lambda = 0.0;
    double lhs = 0.0, rhsSource = 0.0, rhsControl = 0.0;  // mantissas at a common logScale
    double logScale = 0.0;
    double ratio = 0.0;
    bool violation = false;
};

CarlemanReport make_report(int sampleId, const Quadrature& q, const Scaled& lhs, const Scaled& src, const Scaled& ctl);

// Backward solve of w_t + b(a w_x)_x + d1 sqrt(a) w_x - b11 w = h from w(T) = wT, with couplings removed.
Field solve_single_backward(const Problem& p, const std::vector<double>& wT, const Field& h);

CarlemanReport carleman_ratio_single(const Problem& p, const Quadrature& q, const std::vector<double>& wT,
                                     const Field& h, int sampleId = 0);
CarlemanReport carleman_ratio_system(const Problem& p, const Quadrature& q, const std::vector<double>& phiT,
                                     const Field& F1, const Field& F2, int sampleId = 0);
CarlemanReport gamma0_ratio(const Problem& p, const Quadrature& q, const std::vector<double>& phiT,
                            const Field& F1, const Field& F2, int sampleId = 0);

// Observability quotients kept in log form; their magnitudes exceed double range.
struct ObservabilityReport {
    int sampleId = 0;
    double logInitial = 0.0;       // log(|phi(0)|^2 + |psi(0)|^2)
    double logObservation = 0.0;   // log of int_omega e^{2sA} (s lambda zeta)^8 phi^2
    double logRatio = 0.0;
    double logSimpleLhs = 0.0;     // log(|phi(0)|^2 + int rho2^-2 (phi^2 + psi^2))
    double logSimpleRhs = 0.0;     // log of int_omega rho1^-2 phi^2
    double logSimpleRatio = 0.0;
    bool violation = false;
};
ObservabilityReport observability_ratio(const Problem& p, const Quadrature& q, const std::vector<double>& phiT,
                                        int sampleId = 0);

// Sine-series terminal data with 1/k^2 decay.
std::vector<double> terminal_sample(std::uint64_t seed, std::uint64_t id, int N, int K = 10);

void write_carleman_csv(const std::vector<CarlemanReport>& reports, const std::string& path);

}  // namespace dgc
