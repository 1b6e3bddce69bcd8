#pragma once

#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dgc/pde_solver.hpp"
#include "dgc/weights.hpp"

namespace dgc {

enum class Preconditioner { BlockCholesky, Jacobi };

struct ControlParams {
    double cgTol = 1e-10;
    int cgMaxIter = 2000;
    int stagnationWindow = 200;  // iterations allowed without a 10x residual drop
    Preconditioner precond = Preconditioner::BlockCholesky;
    // Each form weight is clamped below at e^{-weightLogFloor} times its own maximum.
    double weightLogFloor = 40.0;
    bool constrainPsi0 = true;
};

struct ControlData {
    std::vector<double> u0, v0;
    Field H1, H2;  // empty means zero
};

// rho^{-2} weights of the bilinear form per time level, sharing one normalization.
// The true weight is W * e^{-logNorm}; index 0 is unused.
struct FormWeights {
    std::vector<double> W0, W1;
    double logNorm = 0.0;
    std::vector<double> logRho0, logRho1, logRho2;  // raw, per level; level 0 and M copy the nearest clipped level
    int flooredLevels = 0;
};

FormWeights make_form_weights(const Problem& p, const WeightFields& f, double weightLogFloor);

// Unknown layout: levels k = 1..M of the adjoint pair, interior nodes only, u block then v block.
class LaxMilgramSystem {
public:
    LaxMilgramSystem(const Problem& p, const WeightFields& f, const ControlData& d, const ControlParams& cp = {});

    const Problem& problem() const { return p_; }
    const FormWeights& weights() const { return w_; }
    const ControlParams& params() const { return cp_; }
    const ControlData& data() const { return d_; }
    int interior() const { return p_.space.N - 1; }
    int level_size() const { return 2 * interior(); }
    Eigen::Index size() const { return static_cast<Eigen::Index>(p_.time.M) * level_size(); }

    const Eigen::VectorXd& rhs() const { return rhs_; }
    Eigen::VectorXd apply(const Eigen::VectorXd& x) const;
    double form(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const;
    Eigen::VectorXd diagonal() const;

    // Discrete adjoint residual D x per level (row k, k = 1..M), as (phi, psi) fields.
    StatePair residual_levels(const Eigen::VectorXd& x) const;
    AdjointPair to_fields(const Eigen::VectorXd& x) const;
    Eigen::VectorXd from_fields(const Field& phi, const Field& psi) const;  // rows k-1 hold level k
    void project(Eigen::VectorXd& x) const;  // zeroes psi at level 1 when constrained

    const BlockOperator& op(int k) const { return ops_[k]; }

private:
    Eigen::VectorXd apply_dt(const StatePair& G) const;  // D^T G

    Problem p_;
    ControlData d_;
    ControlParams cp_;
    FormWeights w_;
    std::vector<BlockOperator> ops_;
    Eigen::VectorXd rhs_;
};

// The form matrix is block tridiagonal in time; this is its exact block Cholesky factorization,
// eliminated from both ends toward the last level of largest state weight.
// Projected unknowns get identity rows.
class BlockCholeskySolver {
public:
    explicit BlockCholeskySolver(const LaxMilgramSystem& sys);
    ~BlockCholeskySolver();
    Eigen::VectorXd solve(const Eigen::VectorXd& r) const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

struct CgReport {
    int iterations = 0;
    double residual = 0.0;  // relative, Euclidean
    bool converged = false;
};

struct ControlResult {
    Field h;                       // control, rows = levels, zero off omega
    Field u, v;                    // controlled trajectories (row 0 holds the initial data used)
    double finalNormU = 0.0, finalNormV = 0.0;  // closed loop from the given data
    double initNormU = 0.0, initNormV = 0.0;
    double closedLoopMismatch = 0.0;            // closed loop from row 0 vs (u, v), relative max
    // Weighted norms in log form with the weights the discrete form enforces.
    double logWeightedU = 0.0, logWeightedV = 0.0, logWeightedH = 0.0, logKappa0 = 0.0;
    double logEstimate = 0.0;      // log of (sum of weighted norms) / kappa0
    bool estimateViolation = false;
    CgReport cg;
    double energyGap = 0.0;        // |b(p,p) - l(p)| / |l(p)|, Lax-Milgram only
    std::string method;
    double epsilon = 0.0;
};

ControlResult solve_control_lax_milgram(const LaxMilgramSystem& sys);

struct HUMConfig {
    double epsilon = 1e-8;
    double cgTol = 1e-10;
    int cgMaxIter = 2000;
};

ControlResult solve_control_hum_penalized(const Problem& p, const WeightFields& f, const ControlData& d,
                                          const HUMConfig& cfg, double weightLogFloor = 40.0);

// Max relative residual of the transposition identity over random adjoint sources.
double verify_transposition(const Problem& p, const ControlResult& r, const ControlData& d, int nSamples,
                            std::uint64_t seed = 1);

// Fills the weighted-norm fields of r and returns logEstimate.
double verify_weighted_estimate(const Problem& p, const FormWeights& w, const ControlData& d, ControlResult& r);

// log of sum over levels 1..M of dt h chi W1^{-1} h^2 e^{logNorm}: the squared omega-restricted rho1-weighted
// control norm.
double log_weighted_control_norm(const Problem& p, const FormWeights& w, const Field& h);

std::string control_summary_json(const ControlResult& r);
void write_control_csv(const Problem& p, const ControlResult& r, const std::string& path);

}  // namespace dgc
