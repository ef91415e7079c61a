#pragma once

#include "hypersfda/common.hpp"

#include <Eigen/Sparse>

namespace hypersfda {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::ColMajor>;

struct PcaOptions {
    double tol = 1e-8;   // relative Ritz residual for the retained components
    int max_iter = 1000;
    Index oversample = 8;  // extra block columns to speed up subspace iteration
    int check_every = 5;   // iterations between Rayleigh-Ritz convergence checks
};

struct PcaResult {
    Matrix projected;      // n x m', centred rows in component coordinates
    Matrix components;     // m x m', orthonormal columns
    Vector eigenvalues;    // m', descending
    double total_variance = 0.0;
    int iterations = 0;
    bool converged = false;

    double retained_variance_ratio() const { return total_variance > 0.0 ? eigenvalues.sum() / total_variance : 1.0; }
};

namespace detail {

/// Applies the row covariance (X - 1 mu^T)^T (X - 1 mu^T) / (n - 1) without forming it.
struct CovarianceOperator {
    const SparseMatrix& x;
    Eigen::RowVectorXd mean;
    double scale;

    CovarianceOperator(const SparseMatrix& data) : x(data) {
        mean = Eigen::RowVectorXd::Zero(data.cols());
        for (Index j = 0; j < data.outerSize(); ++j)
            for (SparseMatrix::InnerIterator it(data, j); it; ++it) mean(j) += it.value();
        mean /= static_cast<double>(data.rows());
        scale = 1.0 / static_cast<double>(std::max<Index>(1, data.rows() - 1));
    }

    Eigen::MatrixXd centred_times(const Eigen::MatrixXd& q) const {
        Eigen::MatrixXd y = x * q;
        y.rowwise() -= mean * q;
        return y;
    }

    Eigen::MatrixXd apply(const Eigen::MatrixXd& q) const {
        const Eigen::MatrixXd y = centred_times(q);
        Eigen::MatrixXd out = Eigen::MatrixXd(x.transpose() * y);
        out -= mean.transpose() * y.colwise().sum();
        return out * scale;
    }

    double trace() const {
        // sum_j var(column j) = (||X||_F^2 - n ||mu||^2) / (n - 1)
        return (x.squaredNorm() - static_cast<double>(x.rows()) * mean.squaredNorm()) * scale;
    }
};

inline Eigen::MatrixXd householder_orthonormalize(const Eigen::MatrixXd& y) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(y);
    return qr.householderQ() * Eigen::MatrixXd::Identity(y.rows(), y.cols());
}

/// Cholesky-QR applied twice, falling back to Householder when the block is
/// numerically rank deficient.
inline Eigen::MatrixXd orthonormalize(const Eigen::MatrixXd& y) {
    Eigen::MatrixXd q = y;
    for (int pass = 0; pass < 2; ++pass) {
        Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(q.cols(), q.cols());
        gram.selfadjointView<Eigen::Lower>().rankUpdate(q.transpose());
        Eigen::LLT<Eigen::MatrixXd> llt(gram.selfadjointView<Eigen::Lower>());
        if (llt.info() != Eigen::Success) return householder_orthonormalize(y);
        const Eigen::MatrixXd r = llt.matrixU();
        if (r.diagonal().minCoeff() <= 1e-10 * r.diagonal().maxCoeff()) return householder_orthonormalize(y);
        q = r.triangularView<Eigen::Upper>().solve<Eigen::OnTheRight>(q);
    }
    return q;
}

}  // namespace detail

/// Principal components of the rows of `data` by orthogonal (subspace)
/// iteration with Rayleigh-Ritz extraction. Deterministic for a given seed.
/// Each component's largest-magnitude coordinate is made positive.
inline PcaResult pca_rows(const SparseMatrix& data, Index m_prime, std::uint64_t seed, const PcaOptions& opts = {}) {
    const Index n = data.rows(), m = data.cols();
    if (m_prime < 1 || m_prime >= n) throw ConfigError("compressed width must satisfy 1 <= m' < n (got m'=" + std::to_string(m_prime) + ", n=" + std::to_string(n) + ")");
    if (m_prime > m) throw ConfigError("compressed width exceeds the number of columns");

    detail::CovarianceOperator cov(data);
    const Index block = std::min<Index>(m, m_prime + opts.oversample);

    Rng rng(seed, 0x706361ULL);
    Eigen::MatrixXd q(m, block);
    for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < block; ++j) q(i, j) = rng.normal();
    q = detail::householder_orthonormalize(q);

    PcaResult res;
    res.total_variance = cov.trace();
    Eigen::MatrixXd ritz_vectors;
    Eigen::VectorXd ritz_values;
    int it = 0;
    bool converged = false;
    while (true) {
        Eigen::MatrixXd cq = cov.apply(q);
        ++it;
        // Rayleigh-Ritz and the residual test are the expensive part; run them periodically.
        const bool check = block == m || it % opts.check_every == 0 || it >= opts.max_iter;
        if (!check) {
            q = detail::orthonormalize(cq);
            continue;
        }
        Eigen::MatrixXd t = q.transpose() * cq;
        t = 0.5 * (t + t.transpose());
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(t);
        // Eigen sorts ascending; flip to descending.
        const Eigen::VectorXd vals = eig.eigenvalues().reverse();
        const Eigen::MatrixXd vecs = eig.eigenvectors().rowwise().reverse();
        ritz_vectors = q * vecs;
        ritz_values = vals;
        const Eigen::MatrixXd c_ritz = cq * vecs;
        const double top = std::max(std::abs(vals(0)), 1e-300);
        double worst = 0.0;
        for (Index j = 0; j < m_prime; ++j) worst = std::max(worst, (c_ritz.col(j) - vals(j) * ritz_vectors.col(j)).norm() / top);
        if (worst <= opts.tol || block == m) {
            converged = true;
            break;
        }
        if (it >= opts.max_iter) break;
        q = detail::orthonormalize(c_ritz);
    }

    Eigen::MatrixXd comps = ritz_vectors.leftCols(m_prime);
    for (Index j = 0; j < m_prime; ++j) {
        Index arg = 0;
        for (Index i = 1; i < m; ++i)
            if (std::abs(comps(i, j)) > std::abs(comps(arg, j))) arg = i;
        if (comps(arg, j) < 0.0) comps.col(j) = -comps.col(j);
    }
    res.components = comps;
    res.eigenvalues = ritz_values.head(m_prime).cwiseMax(0.0);
    res.projected = cov.centred_times(comps);
    res.iterations = it;
    res.converged = converged;
    return res;
}

inline PcaResult pca_rows(const Matrix& data, Index m_prime, std::uint64_t seed, const PcaOptions& opts = {}) {
    SparseMatrix sp = data.sparseView();
    return pca_rows(sp, m_prime, seed, opts);
}

}  // namespace hypersfda
