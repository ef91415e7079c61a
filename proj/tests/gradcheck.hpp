#pragma once

// Random end-to-end gradient cases: model -> predictions -> batch objective,
// with the stop-gradient quantities frozen so finite differences see the
// same function the analytic gradient differentiates.

#include "hypersfda/model.hpp"
#include "hypersfda/objective.hpp"
#include "oracles.hpp"

#include <algorithm>
#include <vector>

namespace gradcheck {

using namespace hypersfda;

struct CaseResult {
    double rel_error = 0.0;
    Index d = 0, dz = 0, classes = 0, batch = 0;
};

inline Matrix random_softmax(Rng& rng, Index n, Index c) {
    Matrix p(n, c);
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < c; ++j) p(i, j) = std::exp(1.5 * rng.normal());
        p.row(i) /= p.row(i).sum();
    }
    return p;
}

inline CaseResult run_case(std::uint64_t seed) {
    Rng rng(seed, 0x67726164ULL);
    CaseResult out;
    out.d = 1 + static_cast<Index>(rng.below(6));
    out.dz = 1 + static_cast<Index>(rng.below(6));
    out.classes = 2 + static_cast<Index>(rng.below(5));
    out.batch = 2 + static_cast<Index>(rng.below(7));
    const Index pool = out.batch + 2 + static_cast<Index>(rng.below(6));
    const Index h = 1 + static_cast<Index>(rng.below(3));

    // Model with every ReLU unit safely away from its kink on this batch.
    AdaptModel m;
    Matrix xb;
    for (int attempt = 0;; ++attempt) {
        m = make_model(out.d, out.dz, out.classes, seed + 7919ULL * static_cast<std::uint64_t>(attempt));
        for (Index i = 0; i < m.w_f.size(); ++i) m.w_f.data()[i] = rng.normal();
        for (Index i = 0; i < m.w_g.size(); ++i) m.w_g.data()[i] = rng.normal();
        xb.resize(out.batch, out.d);
        for (Index i = 0; i < xb.size(); ++i) xb.data()[i] = rng.normal();
        const ForwardResult fw = forward(m, xb);
        if (fw.pre.cwiseAbs().minCoeff() > 1e-3 && fw.features.squaredNorm() > 0.0) break;
    }

    // Batch occupies pool rows [0, batch); close sets are drawn from the pool
    // until each anchor keeps at least one background sample.
    std::vector<Index> batch(static_cast<std::size_t>(out.batch));
    for (Index r = 0; r < out.batch; ++r) batch[static_cast<std::size_t>(r)] = r;
    std::vector<Index> members;
    for (Index i = 0; i < out.batch; ++i) {
        while (true) {
            std::vector<Index> cand;
            for (Index j = 0; j < pool; ++j)
                if (j != i) cand.push_back(j);
            rng.shuffle(cand.begin(), cand.end());
            cand.resize(static_cast<std::size_t>(h));
            Index background = 0;
            for (Index s = 0; s < out.batch; ++s)
                if (s != i && std::find(cand.begin(), cand.end(), s) == cand.end()) ++background;
            if (background > 0) {
                members.insert(members.end(), cand.begin(), cand.end());
                break;
            }
        }
    }
    const Matrix bank = random_softmax(rng, pool, out.classes);
    Matrix q(out.batch, out.classes);
    for (Index i = 0; i < q.size(); ++i) q.data()[i] = rng.uniform(0.0, 1.0);
    const double lambda = rng.uniform(0.1, 1.0);
    const double eta = rng.uniform(0.5, 3.0);

    const ForwardResult fw = forward(m, xb);
    auto close_of = [&](Index i) { return std::span<const Index>(members.data() + i * h, static_cast<std::size_t>(h)); };
    const BatchConstants consts = prepare_batch(std::span<const Index>(batch), fw.probs, bank, close_of, q, 7.0, lambda, eta);
    const BatchObjective obj = evaluate_batch(consts, fw.probs);
    const GradientSet analytic = backward(m, xb, obj.upstream);
    const GradientSet numeric =
        oracle::numeric_gradient(m, [&](const AdaptModel& mm) { return evaluate_batch(consts, forward(mm, xb).probs).loss.total; });
    out.rel_error = oracle::relative_error(analytic, numeric);
    return out;
}

}  // namespace gradcheck
