#pragma once

#include "hypersfda/common.hpp"

#include <limits>

namespace hypersfda {

// Reconstruction affinity of an anchor from its neighbours:
//
//   minimise  || sum_j a_j n_j - x ||^2 + alpha * ||a||_2   subject to a >= 0
//
// Solved by projected (proximal) gradient with fixed step 1/L, where L bounds
// the Lipschitz constant of the smooth part. The nonnegativity projection and
// the unsquared norm share a closed-form prox: clip to the orthant, then
// shrink the whole vector toward zero by alpha/L.

struct NnlsOptions {
    int max_iter = 2000;
    double step_tol = 1e-8;  // stop once the gradient-mapping step is this small
    double kkt_tol = 1e-6;   // converged flag requires this KKT residual
    bool accelerate = true;  // Nesterov momentum with adaptive restart
};

struct AffinitySolution {
    Vector coef;
    double objective = 0.0;
    double kkt_residual = 0.0;
    int iterations = 0;
    bool converged = false;
};

/// Objective value for coefficients `a`. Rows of `neighbors` are the neighbour features.
inline double affinity_objective(const Vector& anchor, const Matrix& neighbors, double alpha, const Vector& a) {
    const Vector r = neighbors.transpose() * a - anchor;
    return r.squaredNorm() + alpha * a.norm();
}

/// Largest violation of the first-order optimality conditions. At a = 0 the
/// norm's subdifferential is the whole alpha-ball, so the best element is used.
inline double affinity_kkt_residual(const Matrix& gram, const Vector& rhs, double alpha, const Vector& a) {
    const Vector smooth = 2.0 * (gram * a - rhs);
    const double nrm = a.norm();
    if (nrm == 0.0) {
        const double pull = smooth.cwiseMin(0.0).norm();
        return std::max(0.0, pull - alpha);
    }
    const Vector g = smooth + (alpha / nrm) * a;
    double worst = 0.0;
    for (Index j = 0; j < a.size(); ++j) worst = std::max(worst, a(j) > 0.0 ? std::abs(g(j)) : std::max(0.0, -g(j)));
    return worst;
}

namespace detail {

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
inline double power_iteration(const Matrix& sym, int iters = 200) {
    const Index m = sym.rows();
    if (m == 0) return 0.0;
    Vector v = Vector::Ones(m) / std::sqrt(static_cast<double>(m));
    double lambda = 0.0;
    for (int it = 0; it < iters; ++it) {
        Vector w = sym * v;
        const double nrm = w.norm();
        if (nrm == 0.0) return 0.0;
        const double next = v.dot(w);
        v = w / nrm;
        if (std::abs(next - lambda) <= 1e-12 * std::max(1.0, std::abs(next))) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    // Power iteration approaches from below, so pad it; Gershgorin is a hard upper bound.
    double gersh = 0.0;
    for (Index i = 0; i < m; ++i) gersh = std::max(gersh, sym.row(i).cwiseAbs().sum());
    return std::min(gersh, lambda * 1.01);
}

inline Vector prox_nonneg_norm(const Vector& v, double threshold) {
    Vector p = v.cwiseMax(0.0);
    const double nrm = p.norm();
    if (nrm <= threshold) return Vector::Zero(v.size());
    return p * (1.0 - threshold / nrm);
}

}  // namespace detail

inline AffinitySolution solve_affinity(const Vector& anchor, const Matrix& neighbors, double alpha, const NnlsOptions& opts = {}) {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be finite and >= 0");
    if (neighbors.cols() != anchor.size()) throw ShapeError("neighbour features and anchor differ in dimension");
    if (!anchor.allFinite() || !neighbors.allFinite()) throw NumericError("non-finite input to affinity solve");

    const Index m = neighbors.rows();
    const Matrix gram = neighbors * neighbors.transpose();
    const Vector rhs = neighbors * anchor;
    const double lipschitz = 2.0 * detail::power_iteration(gram) + 1e-12;

    AffinitySolution sol;
    Vector a = Vector::Zero(m);
    if (m == 0) {
        sol.coef = a;
        sol.objective = anchor.squaredNorm();
        sol.converged = true;
        return sol;
    }

    const double step = 1.0 / lipschitz;
    Vector y = a;
    double t = 1.0;
    int it = 0;
    for (; it < opts.max_iter; ++it) {
        const Vector grad = 2.0 * (gram * y - rhs);
        Vector next = detail::prox_nonneg_norm(y - step * grad, alpha * step);
        const double mapping = (y - next).norm() / step;
        if (opts.accelerate) {
            // Restart when the momentum direction opposes the gradient-mapping step.
            if ((y - next).dot(next - a) > 0.0) {
                t = 1.0;
                y = next;
            } else {
                const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
                y = next + ((t - 1.0) / t_next) * (next - a);
                t = t_next;
            }
        } else {
            y = next;
        }
        a = std::move(next);
        if (mapping < opts.step_tol) {
            ++it;
            break;
        }
    }
    sol.coef = a;
    sol.iterations = it;
    sol.objective = affinity_objective(anchor, neighbors, alpha, a);
    sol.kkt_residual = affinity_kkt_residual(gram, rhs, alpha, a);
    sol.converged = sol.kkt_residual <= opts.kkt_tol;
    return sol;
}

}  // namespace hypersfda
