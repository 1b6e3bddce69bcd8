#include "dgc/control.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/Sparse>
#include <json.hpp>

#include "dgc/io.hpp"
#include "dgc/rng.hpp"

namespace dgc {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double logsumexp(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double safe_log(double x) { return x > 0.0 ? std::log(x) : kNegInf; }

double l2(std::span<const double> u, const SpaceGrid& g) { return std::sqrt(l2_norm_sq(u, g)); }

Level zero_level(int J) { return Level(J, Vec2{0.0, 0.0}); }

}  // namespace

FormWeights make_form_weights(const Problem& p, const WeightFields& f, double weightLogFloor) {
    const int M = p.time.M;
    require(f.time.M == M && f.space.N == p.space.N, ErrorKind::Contract, "weights and problem grids differ");
    require(!f.level.empty(), ErrorKind::Contract, "no clipped levels");
    require(weightLogFloor > 0.0, ErrorKind::Config, "weight log floor must be positive");
    FormWeights w;
    w.logRho0.assign(M + 1, 0.0);
    w.logRho1.assign(M + 1, 0.0);
    w.logRho2.assign(M + 1, 0.0);
    std::vector<bool> clipped(M + 1, false);
    for (std::size_t i = 0; i < f.level.size(); ++i) {
        int k = f.level[i];
        w.logRho0[k] = f.logRho0[i];
        w.logRho1[k] = f.logRho1[i];
        w.logRho2[k] = f.logRho2[i];
        clipped[k] = true;
    }
    // Unclipped ends copy the nearest clipped level; the floor below decides level M anyway.
    const int first = f.level.front(), last = f.level.back();
    for (int k = 0; k <= M; ++k) {
        if (clipped[k]) continue;
        int src = k < first ? first : last;
        w.logRho0[k] = w.logRho0[src];
        w.logRho1[k] = w.logRho1[src];
        w.logRho2[k] = w.logRho2[src];
    }
    double minRho1 = std::numeric_limits<double>::infinity();
    for (int k = 1; k <= M; ++k) minRho1 = std::min(minRho1, w.logRho1[k]);
    w.logNorm = 2.0 * minRho1;

    std::vector<double> l0(M + 1), l1(M + 1);
    double max0 = kNegInf, max1 = kNegInf;
    for (int k = 1; k <= M; ++k) {
        l0[k] = -2.0 * w.logRho0[k] + w.logNorm;
        l1[k] = -2.0 * w.logRho1[k] + w.logNorm;
        max0 = std::max(max0, l0[k]);
        max1 = std::max(max1, l1[k]);
    }
    w.W0.assign(M + 1, 0.0);
    w.W1.assign(M + 1, 0.0);
    for (int k = 1; k <= M; ++k) {
        bool fl = !clipped[k] || l0[k] < max0 - weightLogFloor || l1[k] < max1 - weightLogFloor;
        double a = clipped[k] ? std::max(l0[k], max0 - weightLogFloor) : max0 - weightLogFloor;
        double b = clipped[k] ? std::max(l1[k], max1 - weightLogFloor) : max1 - weightLogFloor;
        w.W0[k] = std::exp(a);
        w.W1[k] = std::exp(b);
        if (fl) ++w.flooredLevels;
    }
    return w;
}

// ---------------------------------------------------------------------------

namespace {

struct Indexer {
    int N;
    int n() const { return 2 * (N - 1); }
    Eigen::Index at(int k, int c, int j) const {
        return static_cast<Eigen::Index>(k - 1) * n() + c * (N - 1) + (j - 1);
    }
    Level get(const Eigen::VectorXd& x, int k) const {
        Level l = zero_level(N + 1);
        for (int j = 1; j < N; ++j) {
            l[j][0] = x[at(k, 0, j)];
            l[j][1] = x[at(k, 1, j)];
        }
        return l;
    }
    void add(Eigen::VectorXd& x, int k, const Level& l, double c = 1.0) const {
        for (int j = 1; j < N; ++j) {
            x[at(k, 0, j)] += c * l[j][0];
            x[at(k, 1, j)] += c * l[j][1];
        }
    }
};

void check_data(const Problem& p, const ControlData& d) {
    const int J = p.space.nodes();
    auto vec = [&](const std::vector<double>& u, const char* name) {
        if (u.empty()) return;
        require(static_cast<int>(u.size()) == J, ErrorKind::Contract, std::string(name) + " must have N+1 values");
        for (double x : u) require(std::isfinite(x), ErrorKind::Domain, std::string(name) + " is not finite");
    };
    vec(d.u0, "u0");
    vec(d.v0, "v0");
    for (const Field* f : {&d.H1, &d.H2}) {
        if (f->empty()) continue;
        require(static_cast<int>(f->rows()) == p.time.levels() && static_cast<int>(f->cols()) == J,
                ErrorKind::Contract, "source must be (M+1) x (N+1)");
    }
}

}  // namespace

LaxMilgramSystem::LaxMilgramSystem(const Problem& p, const WeightFields& f, const ControlData& d,
                                   const ControlParams& cp)
    : p_(p), d_(d), cp_(cp) {
    require(p.space.N >= 3, ErrorKind::Contract, "need at least two interior nodes");
    require(!cp.constrainPsi0 || p.solver.theta == 1.0, ErrorKind::Config,
            "the psi(0) = 0 constraint is implemented for theta = 1 only");
    require(cp.cgTol > 0.0 && cp.cgMaxIter > 0 && cp.stagnationWindow > 0, ErrorKind::Config, "invalid CG settings");
    check_data(p, d);
    w_ = make_form_weights(p, f, cp.weightLogFloor);
    // rho2 H must be finite on the clipped grid.
    for (int c = 0; c < 2; ++c) {
        const Field& H = c == 0 ? d.H1 : d.H2;
        if (H.empty()) continue;
        for (const int k : f.level)
            for (std::size_t j = 0; j < H.cols(); ++j) {
                double v = H(k, j);
                require(std::isfinite(v) && (v == 0.0 || std::isfinite(std::log(std::abs(v)) + w_.logRho2[k])),
                        ErrorKind::Domain, "rho2 H is not finite on the clipped grid");
            }
    }
    ops_.reserve(p.time.M + 1);
    for (int k = 0; k <= p.time.M; ++k) ops_.push_back(assemble_block_operator(p, k));

    const int N = p.space.N, M = p.time.M;
    const double dt = p.time.dt(), h = p.space.h(), th = p.solver.theta;
    Indexer ix{N};
    rhs_ = Eigen::VectorXd::Zero(size());
    Level y0 = zero_level(N + 1);
    for (int j = 1; j < N; ++j) {
        y0[j][0] = d.u0.empty() ? 0.0 : d.u0[j];
        y0[j][1] = d.v0.empty() ? 0.0 : d.v0[j];
    }
    if (th < 1.0) {
        Level Ly = ops_[0].apply(y0);
        for (int j = 1; j < N; ++j)
            for (int c = 0; c < 2; ++c) y0[j][c] -= dt * (1.0 - th) * Ly[j][c];
    }
    ix.add(rhs_, 1, y0, h);
    for (int k = 1; k <= M; ++k)
        for (int j = 1; j < N; ++j) {
            if (!d.H1.empty()) rhs_[ix.at(k, 0, j)] += dt * h * d.H1(k, j);
            if (!d.H2.empty()) rhs_[ix.at(k, 1, j)] += dt * h * d.H2(k, j);
        }
    project(rhs_);
}

void LaxMilgramSystem::project(Eigen::VectorXd& x) const {
    if (!cp_.constrainPsi0) return;
    Indexer ix{p_.space.N};
    for (int j = 1; j < p_.space.N; ++j) x[ix.at(1, 1, j)] = 0.0;
}

StatePair LaxMilgramSystem::residual_levels(const Eigen::VectorXd& x) const {
    const int N = p_.space.N, M = p_.time.M;
    const double dt = p_.time.dt(), th = p_.solver.theta;
    Indexer ix{N};
    StatePair F{Field(M + 1, N + 1), Field(M + 1, N + 1)};
    Level next = zero_level(N + 1);
    for (int k = M; k >= 1; --k) {
        Level cur = ix.get(x, k);
        Level a = ops_[k].apply_transpose(cur);
        Level b = (th < 1.0 && k < M) ? ops_[k].apply_transpose(next) : Level();
        for (int j = 1; j < N; ++j)
            for (int c = 0; c < 2; ++c) {
                double v = cur[j][c] / dt + th * a[j][c] - next[j][c] / dt;
                if (!b.empty()) v += (1.0 - th) * b[j][c];
                (c == 0 ? F.u : F.v)(k, j) = v;
            }
        next = std::move(cur);
    }
    return F;
}

Eigen::VectorXd LaxMilgramSystem::apply_dt(const StatePair& G) const {
    const int N = p_.space.N, M = p_.time.M;
    const double dt = p_.time.dt(), th = p_.solver.theta;
    Indexer ix{N};
    Eigen::VectorXd out = Eigen::VectorXd::Zero(size());
    for (int k = 1; k <= M; ++k) {
        Level g = zero_level(N + 1);
        for (int j = 1; j < N; ++j) g[j] = {G.u(k, j), G.v(k, j)};
        Level Lg = ops_[k].apply(g);
        Level here = zero_level(N + 1), after = zero_level(N + 1);
        for (int j = 1; j < N; ++j)
            for (int c = 0; c < 2; ++c) {
                here[j][c] = g[j][c] / dt + th * Lg[j][c];
                after[j][c] = -g[j][c] / dt + (1.0 - th) * Lg[j][c];
            }
        ix.add(out, k, here);
        if (k < M) ix.add(out, k + 1, after);
    }
    return out;
}

Eigen::VectorXd LaxMilgramSystem::apply(const Eigen::VectorXd& x) const {
    const int N = p_.space.N, M = p_.time.M;
    const double dt = p_.time.dt(), h = p_.space.h();
    StatePair F = residual_levels(x);
    for (int k = 1; k <= M; ++k)
        for (int j = 1; j < N; ++j) {
            F.u(k, j) *= dt * h * w_.W0[k];
            F.v(k, j) *= dt * h * w_.W0[k];
        }
    Eigen::VectorXd out = apply_dt(F);
    Indexer ix{N};
    for (int k = 1; k <= M; ++k)
        for (int j = 1; j < N; ++j)
            if (p_.chi[j] > 0.0) out[ix.at(k, 0, j)] += dt * h * w_.W1[k] * p_.chi[j] * x[ix.at(k, 0, j)];
    project(out);
    return out;
}

double LaxMilgramSystem::form(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const { return x.dot(apply(y)); }

Eigen::VectorXd LaxMilgramSystem::diagonal() const {
    const int N = p_.space.N, M = p_.time.M;
    const double dt = p_.time.dt(), h = p_.space.h(), th = p_.solver.theta;
    Indexer ix{N};
    Eigen::VectorXd dg = Eigen::VectorXd::Zero(size());
    // Squared norm of row (j, c) of (shift I + s L).
    auto row_sq = [&](const BlockOperator& L, int j, int c, double shift, double s) {
        double sum = 0.0;
        auto add = [&](const Mat2& m, bool self) {
            for (int e = 0; e < 2; ++e) {
                double v = s * m[2 * c + e] + (self && e == c ? shift : 0.0);
                sum += v * v;
            }
        };
        if (j > 1) add(L.lower[j], false);
        add(L.diag[j], true);
        if (j + 1 < N) add(L.upper[j], false);
        return sum;
    };
    for (int k = 1; k <= M; ++k)
        for (int j = 1; j < N; ++j)
            for (int c = 0; c < 2; ++c) {
                double v = dt * h * w_.W0[k] * row_sq(ops_[k], j, c, 1.0 / dt, th);
                if (k >= 2) v += dt * h * w_.W0[k - 1] * row_sq(ops_[k - 1], j, c, -1.0 / dt, 1.0 - th);
                if (c == 0) v += dt * h * w_.W1[k] * p_.chi[j];
                dg[ix.at(k, c, j)] = v;
            }
    if (cp_.constrainPsi0)
        for (int j = 1; j < N; ++j) dg[ix.at(1, 1, j)] = 1.0;
    return dg;
}

AdjointPair LaxMilgramSystem::to_fields(const Eigen::VectorXd& x) const {
    const int N = p_.space.N, M = p_.time.M;
    Indexer ix{N};
    AdjointPair z{Field(M + 1, N + 1), Field(M + 1, N + 1), {}, {}};
    for (int k = 1; k <= M; ++k)
        for (int j = 1; j < N; ++j) {
            z.phi(k - 1, j) = x[ix.at(k, 0, j)];
            z.psi(k - 1, j) = x[ix.at(k, 1, j)];
        }
    return z;
}

Eigen::VectorXd LaxMilgramSystem::from_fields(const Field& phi, const Field& psi) const {
    const int N = p_.space.N, M = p_.time.M;
    Indexer ix{N};
    Eigen::VectorXd x = Eigen::VectorXd::Zero(size());
    for (int k = 1; k <= M; ++k)
        for (int j = 1; j < N; ++j) {
            x[ix.at(k, 0, j)] = phi(k - 1, j);
            x[ix.at(k, 1, j)] = psi(k - 1, j);
        }
    return x;
}

// ---------------------------------------------------------------------------

namespace {

using SpMat = Eigen::SparseMatrix<double>;

// (shift I + s L) on interior nodes, u block then v block.
SpMat shifted_matrix(const BlockOperator& L, int N, double shift, double s) {
    const int n = 2 * (N - 1);
    std::vector<Eigen::Triplet<double>> t;
    auto put = [&](int j, int jj, const Mat2& m) {
        for (int c = 0; c < 2; ++c)
            for (int e = 0; e < 2; ++e)
                if (m[2 * c + e] != 0.0) t.emplace_back(c * (N - 1) + j - 1, e * (N - 1) + jj - 1, s * m[2 * c + e]);
    };
    for (int j = 1; j < N; ++j) {
        if (j > 1) put(j, j - 1, L.lower[j]);
        put(j, j, L.diag[j]);
        if (j + 1 < N) put(j, j + 1, L.upper[j]);
    }
    for (int i = 0; i < n; ++i) t.emplace_back(i, i, shift);
    SpMat A(n, n);
    A.setFromTriplets(t.begin(), t.end());
    return A;
}

}  // namespace

struct BlockCholeskySolver::Impl {
    int M = 0, n = 0, peak = 1;
    // Levels below the peak are eliminated forward, levels above it backward.
    std::vector<Eigen::LLT<Eigen::MatrixXd>> S;  // pivot blocks, index 1..M
    std::vector<SpMat> U;                        // B_{k,k+1}, index 1..M-1
};

BlockCholeskySolver::BlockCholeskySolver(const LaxMilgramSystem& sys) : impl_(std::make_unique<Impl>()) {
    Impl& I = *impl_;
    const Problem& p = sys.problem();
    const FormWeights& w = sys.weights();
    const int N = p.space.N, M = p.time.M, n = sys.level_size();
    const double dt = p.time.dt(), hx = p.space.h(), th = p.solver.theta;
    I.M = M;
    I.n = n;
    I.S.resize(M + 1);
    I.U.resize(M + 1);
    const bool con = sys.params().constrainPsi0;
    // F^k = Mk^T p^k - Ek1^T p^{k+1}: Mk = I/dt + theta L_k, Ek1 = I/dt - (1-theta) L_k.
    std::vector<SpMat> Mk(M + 1), Ek1(M + 1);
    for (int k = 1; k <= M; ++k) {
        Mk[k] = shifted_matrix(sys.op(k), N, 1.0 / dt, th);
        Ek1[k] = shifted_matrix(sys.op(k), N, 1.0 / dt, -(1.0 - th));
    }
    auto cw = [&](int k) { return dt * hx * w.W0[k]; };
    for (int k = 1; k <= M; ++k)
        if (w.W0[k] >= w.W0[I.peak]) I.peak = k;
    for (int k = 1; k < M; ++k) I.U[k] = -cw(k) * SpMat(Mk[k] * SpMat(Ek1[k].transpose()));
    if (con && M > 1) {
        for (int i = N - 1; i < n; ++i) I.U[1].row(i) *= 0.0;
        I.U[1].prune(0.0);
    }
    auto diag_block = [&](int k) {
        SpMat d = cw(k) * SpMat(Mk[k] * SpMat(Mk[k].transpose()));
        if (k >= 2) d += cw(k - 1) * SpMat(Ek1[k - 1] * SpMat(Ek1[k - 1].transpose()));
        Eigen::MatrixXd B(d);
        for (int j = 1; j < N; ++j) B(j - 1, j - 1) += dt * hx * w.W1[k] * p.chi[j];
        if (k == 1 && con)
            for (int i = N - 1; i < n; ++i) {
                B.row(i).setZero();
                B.col(i).setZero();
                B(i, i) = 1.0;
            }
        return B;
    };
    auto factor = [&](int k, const Eigen::MatrixXd& B) {
        I.S[k].compute(B);
        require(I.S[k].info() == Eigen::Success, ErrorKind::Numerical,
                "block Cholesky factorization lost positivity at level " + std::to_string(k) +
                    "; the form is too ill-conditioned, lower the weight log floor");
    };
    Eigen::MatrixXd carry;  // Schur update passed to the next level
    for (int k = 1; k < I.peak; ++k) {
        Eigen::MatrixXd B = diag_block(k);
        if (k >= 2) B -= carry;
        factor(k, B);
        carry = SpMat(I.U[k].transpose()) * I.S[k].solve(Eigen::MatrixXd(I.U[k]));
    }
    Eigen::MatrixXd fromLeft = I.peak > 1 ? carry : Eigen::MatrixXd();
    for (int k = M; k > I.peak; --k) {
        Eigen::MatrixXd B = diag_block(k);
        if (k < M) B -= carry;
        factor(k, B);
        Eigen::MatrixXd Ut = Eigen::MatrixXd(SpMat(I.U[k - 1].transpose()));
        carry = I.U[k - 1] * I.S[k].solve(Ut);
    }
    Eigen::MatrixXd B = diag_block(I.peak);
    if (I.peak > 1) B -= fromLeft;
    if (I.peak < M) B -= carry;
    factor(I.peak, B);
}

BlockCholeskySolver::~BlockCholeskySolver() = default;

Eigen::VectorXd BlockCholeskySolver::solve(const Eigen::VectorXd& r) const {
    const Impl& I = *impl_;
    const int M = I.M, n = I.n, kp = I.peak;
    auto seg = [&](Eigen::VectorXd& v, int k) { return v.segment(static_cast<Eigen::Index>(k - 1) * n, n); };
    Eigen::VectorXd y = r;
    for (int k = 1; k < kp; ++k) seg(y, k + 1) -= I.U[k].transpose() * I.S[k].solve(Eigen::VectorXd(seg(y, k)));
    for (int k = M; k > kp; --k) seg(y, k - 1) -= I.U[k - 1] * I.S[k].solve(Eigen::VectorXd(seg(y, k)));
    Eigen::VectorXd x(r.size());
    seg(x, kp) = I.S[kp].solve(Eigen::VectorXd(seg(y, kp)));
    for (int k = kp - 1; k >= 1; --k)
        seg(x, k) = I.S[k].solve(Eigen::VectorXd(seg(y, k) - I.U[k] * Eigen::VectorXd(seg(x, k + 1))));
    for (int k = kp + 1; k <= M; ++k)
        seg(x, k) = I.S[k].solve(Eigen::VectorXd(seg(y, k) - I.U[k - 1].transpose() * Eigen::VectorXd(seg(x, k - 1))));
    return x;
}

// ---------------------------------------------------------------------------

namespace {

template <class Op, class Prec>
Eigen::VectorXd pcg(const Op& A, const Prec& P, const Eigen::VectorXd& b, double tol, int maxIter, int window,
                    CgReport& rep, const char* what) {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(b.size());
    rep = {};
    const double bn = b.norm();
    if (bn == 0.0) {
        rep.converged = true;
        return x;
    }
    Eigen::VectorXd r = b, z = P(r), d = z;
    double rz = r.dot(z);
    std::vector<double> hist{1.0};
    for (int it = 1; it <= maxIter; ++it) {
        Eigen::VectorXd Ad = A(d);
        double dAd = d.dot(Ad);
        if (!(dAd > 0.0) || !std::isfinite(dAd)) {
            std::ostringstream os;
            os << what << ": CG lost positivity at iteration " << it << " (d'Ad = " << dAd
               << ", residual " << hist.back() << ")";
            fail(ErrorKind::Numerical, os.str());
        }
        double alpha = rz / dAd;
        x += alpha * d;
        r -= alpha * Ad;
        double rel = r.norm() / bn;
        hist.push_back(rel);
        rep.iterations = it;
        rep.residual = rel;
        if (!std::isfinite(rel) || rel > 1e3) {
            std::ostringstream os;
            os << what << ": CG diverged at iteration " << it << " (residual " << rel << ")";
            fail(ErrorKind::Numerical, os.str());
        }
        if (rel <= tol) {
            rep.converged = true;
            return x;
        }
        if (it >= window && rel > 0.1 * hist[it - window]) {
            std::ostringstream os;
            os << what << ": CG stagnated, no 10x residual drop over " << window << " iterations (iteration " << it
               << ", residual " << rel << ", residual " << window << " iterations earlier " << hist[it - window] << ")";
            fail(ErrorKind::Numerical, os.str());
        }
        z = P(r);
        double rzNew = r.dot(z);
        d = z + (rzNew / rz) * d;
        rz = rzNew;
    }
    std::ostringstream os;
    os << what << ": CG reached " << maxIter << " iterations at residual " << rep.residual;
    fail(ErrorKind::Numerical, os.str());
}

StatePair closed_loop(const Problem& p, const std::vector<double>& u0, const std::vector<double>& v0, const Field& h,
                      const ControlData& d) {
    ForwardData fd;
    fd.u0 = u0;
    fd.v0 = v0;
    fd.h = h;
    fd.H1 = d.H1;
    fd.H2 = d.H2;
    return solve_forward(p, fd);
}

double max_rel_diff(const Field& a, const Field& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.raw().size(); ++i) {
        num = std::max(num, std::abs(a.raw()[i] - b.raw()[i]));
        den = std::max(den, std::abs(a.raw()[i]));
    }
    return den > 0.0 ? num / den : num;
}

void fill_norms(const Problem& p, const ControlData& d, const StatePair& physical, ControlResult& r) {
    const int M = p.time.M;
    std::vector<double> z(p.space.nodes(), 0.0);
    r.initNormU = l2(d.u0.empty() ? z : d.u0, p.space);
    r.initNormV = l2(d.v0.empty() ? z : d.v0, p.space);
    r.finalNormU = l2(physical.u.row(M), p.space);
    r.finalNormV = l2(physical.v.row(M), p.space);
}

}  // namespace

double log_weighted_control_norm(const Problem& p, const FormWeights& w, const Field& h) {
    double s = 0.0;
    const double dt = p.time.dt(), hx = p.space.h();
    for (int k = 1; k < p.time.M; ++k)
        for (int j = 1; j < p.space.N; ++j)
            if (p.chi[j] > 0.0) s += dt * hx * p.chi[j] * h(k, j) * h(k, j) / w.W1[k];
    return safe_log(s) + w.logNorm;
}

double verify_weighted_estimate(const Problem& p, const FormWeights& w, const ControlData& d, ControlResult& r) {
    const double dt = p.time.dt(), hx = p.space.h();
    double su = 0.0, sv = 0.0;
    for (int k = 1; k < p.time.M; ++k) {
        double a = 0.0, b = 0.0;
        for (int j = 1; j < p.space.N; ++j) {
            a += r.u(k, j) * r.u(k, j);
            b += r.v(k, j) * r.v(k, j);
        }
        su += dt * hx * a / w.W0[k];
        sv += dt * hx * b / w.W0[k];
    }
    r.logWeightedU = safe_log(su) + w.logNorm;
    r.logWeightedV = safe_log(sv) + w.logNorm;
    r.logWeightedH = log_weighted_control_norm(p, w, r.h);
    std::vector<double> z(p.space.nodes(), 0.0);
    double k0 = safe_log(l2_norm_sq(d.u0.empty() ? z : d.u0, p.space));
    for (const Field* H : {&d.H1, &d.H2}) {
        if (H->empty()) continue;
        for (int k = 1; k < p.time.M; ++k) {
            double s = 0.0;
            for (int j = 1; j < p.space.N; ++j) s += (*H)(k, j) * (*H)(k, j);
            if (s > 0.0) k0 = logsumexp(k0, std::log(dt * hx * s) + 2.0 * w.logRho2[k]);
        }
    }
    r.logKappa0 = k0;
    double num = logsumexp(logsumexp(r.logWeightedU, r.logWeightedV), r.logWeightedH);
    r.estimateViolation = false;
    if (k0 == kNegInf) {
        r.estimateViolation = num != kNegInf;
        r.logEstimate = num == kNegInf ? kNegInf : std::numeric_limits<double>::infinity();
    } else {
        r.logEstimate = num - k0;
    }
    return r.logEstimate;
}

ControlResult solve_control_lax_milgram(const LaxMilgramSystem& sys) {
    const Problem& p = sys.problem();
    const FormWeights& w = sys.weights();
    const ControlData& d = sys.data();
    const ControlParams& cp = sys.params();
    const int N = p.space.N, M = p.time.M;
    const double dt = p.time.dt(), hx = p.space.h();

    ControlResult res;
    res.method = "lax-milgram";
    auto op = [&](const Eigen::VectorXd& v) { return sys.apply(v); };
    Eigen::VectorXd x;
    if (cp.precond == Preconditioner::BlockCholesky) {
        BlockCholeskySolver rs(sys);
        x = pcg(op, [&](const Eigen::VectorXd& v) { return rs.solve(v); }, sys.rhs(), cp.cgTol, cp.cgMaxIter,
                cp.stagnationWindow, res.cg, "Lax-Milgram solve");
    } else {
        Eigen::VectorXd inv = sys.diagonal().cwiseInverse();
        x = pcg(op, [&](const Eigen::VectorXd& v) { return Eigen::VectorXd(inv.cwiseProduct(v)); }, sys.rhs(),
                cp.cgTol, cp.cgMaxIter, cp.stagnationWindow, res.cg, "Lax-Milgram solve");
    }
    double ell = sys.rhs().dot(x), bxx = sys.form(x, x);
    res.energyGap = ell != 0.0 ? std::abs(bxx - ell) / std::abs(ell) : std::abs(bxx);

    // u = rho0^{-2} L1*(p), v = rho0^{-2} L2*(p), h = -rho1^{-2} p on omega.
    StatePair F = sys.residual_levels(x);
    res.u = Field(M + 1, N + 1);
    res.v = Field(M + 1, N + 1);
    res.h = Field(M + 1, N + 1);
    for (int k = 1; k <= M; ++k)
        for (int j = 1; j < N; ++j) {
            res.u(k, j) = w.W0[k] * F.u(k, j);
            res.v(k, j) = w.W0[k] * F.v(k, j);
        }
    AdjointPair z = sys.to_fields(x);
    for (int k = 1; k <= M; ++k)
        for (int j = 1; j < N; ++j)
            if (p.chi[j] > 0.0) res.h(k, j) = -w.W1[k] * z.phi(k - 1, j);
    for (int j = 0; j <= N; ++j) {
        res.u(0, j) = d.u0.empty() ? 0.0 : d.u0[j];
        res.v(0, j) = d.v0.empty() ? 0.0 : d.v0[j];
    }
    if (cp.constrainPsi0) {
        // The unconstrained psi(0) row of the optimality system yields the initial v the form selects.
        // Level-1 psi row of D^T (dt h W0 D p) minus the level-1 source.
        Level g = zero_level(N + 1);
        for (int j = 1; j < N; ++j) g[j] = {dt * hx * res.u(1, j), dt * hx * res.v(1, j)};
        Level Lg = sys.op(1).apply(g);
        for (int j = 1; j < N; ++j) {
            double src = d.H2.empty() ? 0.0 : dt * hx * d.H2(1, j);
            res.v(0, j) = (g[j][1] / dt + Lg[j][1] - src) / hx;
        }
    }
    std::vector<double> u0r(res.u.row(0).begin(), res.u.row(0).end()), v0r(res.v.row(0).begin(), res.v.row(0).end());
    StatePair own = closed_loop(p, u0r, v0r, res.h, d);
    res.closedLoopMismatch = std::max(max_rel_diff(res.u, own.u), max_rel_diff(res.v, own.v));
    StatePair phys = closed_loop(p, d.u0, d.v0, res.h, d);
    fill_norms(p, d, phys, res);
    verify_weighted_estimate(p, w, d, res);
    return res;
}

ControlResult solve_control_hum_penalized(const Problem& p, const WeightFields& f, const ControlData& d,
                                          const HUMConfig& cfg, double weightLogFloor) {
    require(cfg.epsilon > 0.0, ErrorKind::Config, "HUM penalization epsilon must be positive");
    require(cfg.cgTol > 0.0 && cfg.cgMaxIter > 0, ErrorKind::Config, "invalid CG settings");
    check_data(p, d);
    const int N = p.space.N, M = p.time.M;
    FormWeights w = make_form_weights(p, f, weightLogFloor);
    const std::vector<double> zeroT(N + 1, 0.0);

    auto control_from = [&](const std::vector<double>& phiT, double sign) {
        AdjointPair z = solve_adjoint(p, phiT, zeroT, Field(), Field());
        Field h(M + 1, N + 1);
        for (int k = 1; k <= M; ++k)
            for (int j = 1; j < N; ++j)
                if (p.chi[j] > 0.0) h(k, j) = sign * w.W1[k] * z.phi(k - 1, j);
        return h;
    };
    auto to_nodes = [&](const Eigen::VectorXd& v) {
        std::vector<double> out(N + 1, 0.0);
        for (int j = 1; j < N; ++j) out[j] = v[j - 1];
        return out;
    };
    auto terminal_u = [&](const StatePair& y) {
        Eigen::VectorXd out(N - 1);
        for (int j = 1; j < N; ++j) out[j - 1] = y.u(M, j);
        return out;
    };
    auto Lambda = [&](const Eigen::VectorXd& x) {
        ForwardData fd;
        fd.h = control_from(to_nodes(x), 1.0);
        return Eigen::VectorXd(terminal_u(solve_forward(p, fd)) + cfg.epsilon * x);
    };
    ForwardData free;
    free.u0 = d.u0;
    free.v0 = d.v0;
    free.H1 = d.H1;
    free.H2 = d.H2;
    Eigen::VectorXd b = terminal_u(solve_forward(p, free));

    ControlResult res;
    res.method = "hum";
    res.epsilon = cfg.epsilon;
    Eigen::VectorXd phiT;
    try {
        phiT = pcg(Lambda, [](const Eigen::VectorXd& v) { return v; }, b, cfg.cgTol, cfg.cgMaxIter, cfg.cgMaxIter + 1,
                   res.cg, "HUM solve");
    } catch (const Error& e) {
        // Spectrum diagnostics: Rayleigh quotients of the first sine modes.
        std::ostringstream os;
        os << e.what() << "; epsilon " << cfg.epsilon << "; Rayleigh quotients of sine modes 1..3:";
        for (int m = 1; m <= 3; ++m) {
            Eigen::VectorXd s(N - 1);
            for (int j = 1; j < N; ++j) s[j - 1] = std::sin(m * std::numbers::pi * j / N);
            os << ' ' << s.dot(Lambda(s)) / s.squaredNorm();
        }
        fail(ErrorKind::Numerical, os.str());
    }
    res.h = control_from(to_nodes(phiT), -1.0);
    StatePair y = closed_loop(p, d.u0, d.v0, res.h, d);
    res.u = y.u;
    res.v = y.v;
    fill_norms(p, d, y, res);
    verify_weighted_estimate(p, w, d, res);
    return res;
}

double verify_transposition(const Problem& p, const ControlResult& r, const ControlData& d, int nSamples,
                            std::uint64_t seed) {
    const int N = p.space.N, M = p.time.M;
    std::vector<double> u0(r.u.row(0).begin(), r.u.row(0).end()), v0(r.v.row(0).begin(), r.v.row(0).end());
    const std::vector<double> zero(N + 1, 0.0);
    double worst = 0.0;
    for (int s = 0; s < nSamples; ++s) {
        SplitMix64 rng(seed, static_cast<std::uint64_t>(s));
        Field B1(M + 1, N + 1), B2(M + 1, N + 1);
        for (int k = 1; k <= M; ++k)
            for (int j = 1; j < N; ++j) {
                B1(k, j) = rng.uniform(-1.0, 1.0);
                B2(k, j) = rng.uniform(-1.0, 1.0);
            }
        AdjointPair z = solve_adjoint(p, zero, zero, B1, B2);
        double lhs = pair_levels(p, B1, r.u) + pair_levels(p, B2, r.v);
        double rhs = inner(u0, z.phiInit, p.space) + inner(v0, z.psiInit, p.space) + pair_steps(p, r.h, z.phi, true) +
                     pair_steps(p, d.H1, z.phi) + pair_steps(p, d.H2, z.psi);
        double scale = std::max(std::abs(lhs), std::abs(rhs));
        worst = std::max(worst, scale > 0.0 ? std::abs(lhs - rhs) / scale : 0.0);
    }
    return worst;
}

std::string control_summary_json(const ControlResult& r) {
    auto num = [](double v) -> nlohmann::json {
        if (std::isfinite(v)) return v;
        return v > 0 ? "inf" : (v < 0 ? "-inf" : "nan");
    };
    nlohmann::json j;
    j["method"] = r.method;
    if (r.method == "hum") j["epsilon"] = r.epsilon;
    j["finalNormU"] = num(r.finalNormU);
    j["finalNormV"] = num(r.finalNormV);
    j["initNormU"] = num(r.initNormU);
    j["initNormV"] = num(r.initNormV);
    j["closedLoopMismatch"] = num(r.closedLoopMismatch);
    j["logWeightedU"] = num(r.logWeightedU);
    j["logWeightedV"] = num(r.logWeightedV);
    j["logWeightedH"] = num(r.logWeightedH);
    j["logKappa0"] = num(r.logKappa0);
    j["logEstimate"] = num(r.logEstimate);
    j["estimateViolation"] = r.estimateViolation;
    j["cgIterations"] = r.cg.iterations;
    j["cgResidual"] = num(r.cg.residual);
    j["energyGap"] = num(r.energyGap);
    return j.dump(2);
}

void write_control_csv(const Problem& p, const ControlResult& r, const std::string& path) {
    std::string out = "t,x,h\n";
    for (int k = 0; k <= p.time.M; ++k)
        for (int j = 0; j <= p.space.N; ++j)
            if (p.chi[j] > 0.0)
                out += join_csv({format_double(p.time.t(k)), format_double(p.space.x(j)), format_double(r.h(k, j))});
    write_text_file(path, out);
}

}  // namespace dgc
