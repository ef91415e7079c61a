#pragma once

#include "hypersfda/common.hpp"

#include <span>
#include <vector>

namespace hypersfda {

/// ||p_i - p_j|| / sqrt(2), clamped to [0, 1]. sqrt(2) is the largest
/// distance between two points of the probability simplex.
inline double prediction_distance(const Eigen::Ref<const Vector>& p, const Eigen::Ref<const Vector>& q) {
    return std::clamp((p - q).norm() / std::sqrt(2.0), 0.0, 1.0);
}

/// Attention weight 1 - d^gamma.
inline double relation_weight(double distance, double gamma) { return 1.0 - std::pow(distance, gamma); }

/// lambda = (1 + 10 iter / max_iter)^(-beta).
inline double lambda_schedule(std::int64_t iter, std::int64_t max_iter, double beta) {
    if (max_iter <= 0) throw ConfigError("max_iter must be positive for the lambda schedule");
    if (iter < 0 || iter > max_iter) throw ConfigError("iteration outside [0, max_iter]");
    if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
    return std::pow(1.0 + 10.0 * static_cast<double>(iter) / static_cast<double>(max_iter), -beta);
}

struct RelationTerm {
    double pull = 0.0;  // -sum_j w_ij p_i.p_j
    double push = 0.0;  // lambda sum_k w_ik p_i.p_k
    Vector grad;        // d(pull + push) / d p_i

    double value() const { return pull + push; }
};

/// Relation loss with the weights supplied. Rows of `close` / `background`
/// are the (constant) predictions of the close and background sets.
inline RelationTerm relation_loss_with_weights(const Vector& p, const Matrix& close, const Vector& close_w, const Matrix& background,
                                               const Vector& background_w, double lambda) {
    if (close.rows() == 0) throw ValidationError("close set A_i must not be empty");
    if (close.rows() != close_w.size() || background.rows() != background_w.size()) throw ShapeError("weights do not match neighbour rows");
    RelationTerm t;
    // Gradient is linear in the neighbour rows: -sum w_j p_j + lambda sum w_k p_k.
    Vector pull_dir = close.transpose() * close_w;
    t.pull = -p.dot(pull_dir);
    t.grad = -pull_dir;
    if (background.rows() > 0) {
        Vector push_dir = background.transpose() * background_w;
        t.push = lambda * p.dot(push_dir);
        t.grad += lambda * push_dir;
    }
    return t;
}

inline Vector relation_weights(const Vector& p, const Matrix& others, double gamma) {
    Vector w(others.rows());
    for (Index j = 0; j < others.rows(); ++j) w(j) = relation_weight(prediction_distance(p, others.row(j).transpose()), gamma);
    return w;
}

/// Adaptive relation loss for one anchor: pulls toward the close set and
/// pushes from the background, each neighbour weighted by 1 - d^gamma.
/// Weights and neighbour predictions are constants for the gradient.
inline RelationTerm adaptive_loss(const Vector& p, const Matrix& close, const Matrix& background, double gamma, double lambda) {
    if (!(gamma > 0.0)) throw ConfigError("gamma must be positive");
    if (close.rows() == 0) throw ValidationError("close set A_i must not be empty");
    return relation_loss_with_weights(p, close, relation_weights(p, close, gamma), background, relation_weights(p, background, gamma), lambda);
}

/// Exponential moving average of each sample's predictions; starts at zero.
struct EmaState {
    Matrix q;                                    // n x C
    std::vector<std::int64_t> last_update_iter;  // -1 until first update

    static EmaState zeros(Index n, Index classes) {
        return {Matrix::Zero(n, classes), std::vector<std::int64_t>(static_cast<std::size_t>(n), -1)};
    }

    friend bool operator==(const EmaState& a, const EmaState& b) {
        return a.q.rows() == b.q.rows() && a.q.cols() == b.q.cols() && a.q == b.q && a.last_update_iter == b.last_update_iter;
    }
};

/// q <- delta q + (1 - delta) p for one row.
inline void ema_update(EmaState& state, Index sample, const Eigen::Ref<const Vector>& p, double delta, std::int64_t iter = 0) {
    if (!(delta >= 0.0 && delta < 1.0)) throw ConfigError("delta must lie in [0, 1)");
    if (sample < 0 || sample >= state.q.rows()) throw ShapeError("EMA sample index out of range");
    if (p.size() != state.q.cols()) throw ShapeError("EMA prediction width mismatch");
    state.q.row(sample) = delta * state.q.row(sample) + (1.0 - delta) * p.transpose();
    state.last_update_iter[static_cast<std::size_t>(sample)] = iter;
}

inline constexpr double kProbabilityFloor = 1e-12;

struct KlTerm {
    double value = 0.0;
    Vector grad;  // d KL / d p
};

/// KL(q || p) = sum_c q_c log(q_c / p_c) with q a constant; p floored at 1e-12.
/// q need not be normalised (it starts at zero), so the value may be negative.
inline KlTerm kl_regularizer(const Eigen::Ref<const Vector>& q, const Eigen::Ref<const Vector>& p) {
    if (q.size() != p.size()) throw ShapeError("KL arguments differ in length");
    KlTerm t;
    t.grad = Vector::Zero(p.size());
    for (Index c = 0; c < p.size(); ++c) {
        if (q(c) == 0.0) continue;
        const double pc = std::max(p(c), kProbabilityFloor);
        t.value += q(c) * std::log(q(c) / pc);
        t.grad(c) = -q(c) / pc;
    }
    return t;
}

struct LossBreakdown {
    double l_ada_pull = 0.0;
    double l_ada_push = 0.0;
    double l_reg = 0.0;
    double total = 0.0;
    double lambda_used = 0.0;
};

/// L = L_ada + eta * L_reg, summed over the batch.
inline LossBreakdown total_loss(std::span<const RelationTerm> ada, std::span<const KlTerm> reg, double eta, double lambda = 0.0) {
    if (ada.size() != reg.size()) throw ShapeError("loss terms are not aligned");
    LossBreakdown b;
    b.lambda_used = lambda;
    for (const auto& t : ada) {
        b.l_ada_pull += t.pull;
        b.l_ada_push += t.push;
    }
    for (const auto& t : reg) b.l_reg += t.value;
    b.total = b.l_ada_pull + b.l_ada_push + eta * b.l_reg;
    return b;
}

// ---------------------------------------------------------------------------
// Batch objective. Everything the gradient treats as constant is gathered in
// BatchConstants first; evaluate_batch then is a function of the live
// predictions only, which is what finite differences check.

struct BatchConstants {
    std::vector<Matrix> close;            // per batch row: predictions of A_i
    std::vector<Vector> close_weights;
    std::vector<Matrix> background;       // per batch row: predictions of B_i
    std::vector<Vector> background_weights;
    Matrix q;                             // EMA rows for the batch (already updated)
    double lambda = 1.0;
    double eta = 2.0;
};

struct BatchObjective {
    LossBreakdown loss;
    Matrix upstream;  // dL / dP_batch, one row per batch sample
};

/// Builds B_i = batch \ ({i} u A_i) from detached live predictions and A_i from the memory bank.
/// `batch` holds sample indices, `live` the matching prediction rows.
template <class CloseLookup>
inline BatchConstants prepare_batch(std::span<const Index> batch, const Matrix& live, const Matrix& bank_predictions,
                                    CloseLookup&& close_of, const Matrix& q_rows, double gamma, double lambda, double eta) {
    const Index b = static_cast<Index>(batch.size());
    if (live.rows() != b || q_rows.rows() != b) throw ShapeError("batch rows misaligned");
    BatchConstants c;
    c.lambda = lambda;
    c.eta = eta;
    c.q = q_rows;
    c.close.resize(batch.size());
    c.close_weights.resize(batch.size());
    c.background.resize(batch.size());
    c.background_weights.resize(batch.size());
    for (Index r = 0; r < b; ++r) {
        const Index i = batch[static_cast<std::size_t>(r)];
        std::span<const Index> close = close_of(i);
        Matrix cm(static_cast<Index>(close.size()), live.cols());
        for (std::size_t j = 0; j < close.size(); ++j) cm.row(static_cast<Index>(j)) = bank_predictions.row(close[j]);
        std::vector<Index> bg;
        for (Index s = 0; s < b; ++s) {
            const Index k = batch[static_cast<std::size_t>(s)];
            if (k == i || std::find(close.begin(), close.end(), k) != close.end()) continue;
            bg.push_back(s);
        }
        Matrix bm(static_cast<Index>(bg.size()), live.cols());
        for (std::size_t j = 0; j < bg.size(); ++j) bm.row(static_cast<Index>(j)) = live.row(bg[j]);
        const Vector p = live.row(r).transpose();
        c.close_weights[static_cast<std::size_t>(r)] = relation_weights(p, cm, gamma);
        c.background_weights[static_cast<std::size_t>(r)] = relation_weights(p, bm, gamma);
        c.close[static_cast<std::size_t>(r)] = std::move(cm);
        c.background[static_cast<std::size_t>(r)] = std::move(bm);
    }
    return c;
}

inline BatchObjective evaluate_batch(const BatchConstants& c, const Matrix& live) {
    const Index b = live.rows();
    if (static_cast<Index>(c.close.size()) != b) throw ShapeError("batch constants do not match live predictions");
    std::vector<RelationTerm> ada;
    std::vector<KlTerm> reg;
    ada.reserve(static_cast<std::size_t>(b));
    reg.reserve(static_cast<std::size_t>(b));
    BatchObjective out;
    out.upstream.resize(b, live.cols());
    for (Index r = 0; r < b; ++r) {
        const auto ur = static_cast<std::size_t>(r);
        const Vector p = live.row(r).transpose();
        ada.push_back(relation_loss_with_weights(p, c.close[ur], c.close_weights[ur], c.background[ur], c.background_weights[ur], c.lambda));
        reg.push_back(kl_regularizer(c.q.row(r).transpose(), p));
        out.upstream.row(r) = (ada.back().grad + c.eta * reg.back().grad).transpose();
    }
    out.loss = total_loss(ada, reg, c.eta, c.lambda);
    return out;
}

}  // namespace hypersfda
