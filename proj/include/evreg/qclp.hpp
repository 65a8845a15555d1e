#pragma once

#include <limits>

#include <Eigen/Cholesky>
#include <Eigen/SVD>

#include "common.hpp"

namespace evreg {

// maximize cᵀx subject to ‖S_j x + d_j‖₂ ≤ eps_j for every j,
// optionally ‖x‖∞ ≤ box
struct QclpConstraint {
    Mat s;
    Vec d;
    double eps = 1.0;
};

struct QclpProblem {
    Vec c;
    std::vector<QclpConstraint> constraints;
    double box = 0.0;  // 0 disables the bound

    void validate() const {
        if (c.size() == 0) throw config_error("qclp: empty objective");
        if (constraints.empty()) throw config_error("qclp: no constraints");
        for (const auto& k : constraints) {
            if (k.eps <= 0.0) throw config_error("qclp: radius must be positive");
            if (k.s.cols() != c.size() || k.s.rows() != k.d.size())
                throw config_error("qclp: constraint dimensions inconsistent");
        }
        if (box < 0.0) throw config_error("qclp: negative box bound");
    }
};

enum class QclpStatus { optimal, infeasible, unbounded, iteration_limit };

struct QclpSolution {
    QclpStatus status = QclpStatus::iteration_limit;
    Vec x;
    double objective = 0.0;
    double max_violation = 0.0;  // max_j (‖S_j x + d_j‖ − eps_j), clipped at 0
    int newton_iterations = 0;
};

struct FeasibilityResult {
    bool feasible = false;
    Vec witness;
    double certificate = 0.0;  // max-violation at the best point found when infeasible
};

namespace detail {

// convex quadratic G(y) = yᵀ A y + bᵀ y + c0 ≤ 0, A stored as PSD dense
struct QuadConstraint {
    Mat a;
    Vec b;
    double c0 = 0.0;

    double eval(const Vec& y) const { return y.dot(a * y) + b.dot(y) + c0; }
    Vec grad(const Vec& y) const { return 2.0 * (a * y) + b; }
};

// Minimize t·fᵀy − Σ log(−G_j(y)) with damped Newton from a strictly
// feasible start. Returns the iterate; `iters` accumulates Newton steps.
inline Vec barrier_newton(const std::vector<QuadConstraint>& cons, const Vec& f, Vec y,
                          double t, int& iters, int max_iters) {
    const int n = int(y.size());
    for (int it = 0; it < max_iters; ++it) {
        Vec grad = t * f;
        Mat hess = Mat::Zero(n, n);
        for (const auto& g : cons) {
            double val = g.eval(y);
            Vec gg = g.grad(y);
            grad += gg / (-val);
            hess += gg * gg.transpose() / (val * val) + 2.0 * g.a / (-val);
        }
        // fall back to a ridge if the Hessian is numerically singular
        Vec step;
        double ridge = 0.0;
        for (;;) {
            Eigen::LDLT<Mat> ldlt(ridge == 0.0 ? hess : Mat(hess + ridge * Mat::Identity(n, n)));
            step = ldlt.solve(-grad);
            if (ldlt.info() == Eigen::Success && step.allFinite()) break;
            ridge = ridge == 0.0 ? 1e-10 : ridge * 100.0;
            if (ridge > 1e6) throw numeric_error("qclp: Newton system unsolvable");
        }
        double decrement = -grad.dot(step);
        ++iters;
        if (decrement / 2.0 < 1e-12) return y;

        // backtracking line search, keeping every constraint strictly negative
        double alpha = 1.0;
        auto value = [&](const Vec& yy) {
            double v = t * f.dot(yy);
            for (const auto& g : cons) {
                double gv = g.eval(yy);
                if (gv >= 0.0) return std::numeric_limits<double>::infinity();
                v -= std::log(-gv);
            }
            return v;
        };
        double f0 = value(y);
        for (int ls = 0; ls < 60; ++ls) {
            Vec cand = y + alpha * step;
            if (value(cand) <= f0 - 1e-4 * alpha * decrement) {
                y = cand;
                break;
            }
            alpha *= 0.5;
            if (ls == 59) return y;  // stalled
        }
    }
    return y;
}

inline std::vector<QuadConstraint> ball_constraints(const QclpProblem& p) {
    std::vector<QuadConstraint> cons;
    const int n = int(p.c.size());
    for (const auto& k : p.constraints) {
        QuadConstraint g;
        g.a = k.s.transpose() * k.s;
        g.b = 2.0 * k.s.transpose() * k.d;
        g.c0 = k.d.squaredNorm() - k.eps * k.eps;
        cons.push_back(std::move(g));
    }
    if (p.box > 0.0) {
        for (int i = 0; i < n; ++i) {
            QuadConstraint g;
            g.a = Mat::Zero(n, n);
            g.a(i, i) = 1.0;
            g.b = Vec::Zero(n);
            g.c0 = -p.box * p.box;
            cons.push_back(std::move(g));
        }
    }
    return cons;
}

inline double max_violation(const QclpProblem& p, const Vec& x) {
    double worst = 0.0;
    for (const auto& k : p.constraints)
        worst = std::max(worst, (k.s * x + k.d).norm() - k.eps);
    if (p.box > 0.0) worst = std::max(worst, x.cwiseAbs().maxCoeff() - p.box);
    return std::max(worst, 0.0);
}

}  // namespace detail

// Phase-I: minimize the worst squared-constraint excess. Returns a strictly
// interior witness when one exists, otherwise the residual excess (in norm
// units) of the best point found.
inline FeasibilityResult qclp_feasible(const QclpProblem& p, double tol = 1e-8) {
    p.validate();
    const int n = int(p.c.size());
    auto base = detail::ball_constraints(p);

    // epigraph variables y = (x, s): each G_j(x) − s ≤ 0
    std::vector<detail::QuadConstraint> cons;
    for (const auto& g : base) {
        detail::QuadConstraint e;
        e.a = Mat::Zero(n + 1, n + 1);
        e.a.topLeftCorner(n, n) = g.a;
        e.b = Vec::Zero(n + 1);
        e.b.head(n) = g.b;
        e.b(n) = -1.0;
        e.c0 = g.c0;
        cons.push_back(std::move(e));
    }
    Vec f = Vec::Zero(n + 1);
    f(n) = 1.0;

    Vec y = Vec::Zero(n + 1);
    double worst = -std::numeric_limits<double>::infinity();
    for (const auto& g : base) worst = std::max(worst, g.eval(Vec::Zero(n)));
    y(n) = worst + std::max(1.0, 0.1 * std::abs(worst));

    int iters = 0;
    double t = 1.0;
    const double mu = 20.0;
    const int m = int(cons.size());
    while (double(m) / t > std::min(tol, 1e-9)) {
        y = detail::barrier_newton(cons, f, y, t, iters, 200);
        t *= mu;
        if (iters > 20000) break;
    }

    FeasibilityResult out;
    out.witness = y.head(n);
    double excess = detail::max_violation(p, out.witness);
    // s converges to the true minimum of the squared excess; negative means
    // a strictly interior point exists
    out.feasible = y(n) < -std::min(tol, 1e-9) || excess <= 0.0;
    out.certificate = out.feasible ? 0.0 : excess;
    return out;
}

inline QclpSolution qclp_solve(const QclpProblem& p, double tol = 1e-8) {
    p.validate();
    const int n = int(p.c.size());
    QclpSolution sol;
    sol.x = Vec::Zero(n);

    auto phase1 = qclp_feasible(p, tol);
    if (!phase1.feasible) {
        sol.status = QclpStatus::infeasible;
        sol.x = phase1.witness;
        sol.max_violation = phase1.certificate;
        sol.objective = 0.0;
        return sol;
    }

    // recession direction: joint null space of every S_j with cᵀu > 0
    if (p.box <= 0.0) {
        int rows = 0;
        for (const auto& k : p.constraints) rows += int(k.s.rows());
        Mat stack(rows, n);
        int at = 0;
        for (const auto& k : p.constraints) {
            stack.middleRows(at, k.s.rows()) = k.s;
            at += int(k.s.rows());
        }
        Eigen::JacobiSVD<Mat> svd(stack, Eigen::ComputeFullV);
        double thresh = 1e-10 * std::max(1.0, svd.singularValues()(0));
        int rank = 0;
        for (int i = 0; i < svd.singularValues().size(); ++i)
            if (svd.singularValues()(i) > thresh) ++rank;
        if (rank < n) {
            Mat nullspace = svd.matrixV().rightCols(n - rank);
            if ((nullspace.transpose() * p.c).norm() > 1e-10 * std::max(1.0, p.c.norm())) {
                sol.status = QclpStatus::unbounded;
                sol.x = phase1.witness;
                sol.objective = std::numeric_limits<double>::infinity();
                return sol;
            }
        }
    }

    auto cons = detail::ball_constraints(p);
    Vec f = -p.c;  // maximize
    Vec y = phase1.witness;

    // make sure the start is strictly interior; back off toward zero if the
    // phase-I witness leans on a boundary
    for (int k = 0; k < 60; ++k) {
        bool interior = true;
        for (const auto& g : cons)
            if (g.eval(y) >= -1e-14) interior = false;
        if (interior) break;
        y *= 0.5;
    }
    for (const auto& g : cons)
        if (g.eval(y) >= 0.0) {
            sol.status = QclpStatus::infeasible;  // degenerate sliver, no interior
            sol.x = phase1.witness;
            sol.max_violation = detail::max_violation(p, phase1.witness);
            return sol;
        }

    int iters = 0;
    double t = 1.0;
    const double mu = 20.0;
    const int m = int(cons.size());
    bool hit_limit = false;
    while (double(m) / t > std::min(tol, 1e-9) * std::max(1.0, p.c.norm())) {
        y = detail::barrier_newton(cons, f, y, t, iters, 200);
        t *= mu;
        if (iters > 20000) {
            hit_limit = true;
            break;
        }
    }

    sol.x = y;
    sol.objective = p.c.dot(y);
    sol.max_violation = detail::max_violation(p, y);
    sol.status = hit_limit ? QclpStatus::iteration_limit : QclpStatus::optimal;
    sol.newton_iterations = iters;
    return sol;
}

}  // namespace evreg
