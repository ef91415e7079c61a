#pragma once

#include "hypersfda/common.hpp"
#include "hypersfda/nnls.hpp"
#include "hypersfda/pca.hpp"

#include <span>
#include <string>
#include <vector>

namespace hypersfda {

/// One anchor plus its k-1 nearest neighbours. `affinity` holds the anchor
/// coefficient first, then one entry per neighbour in the same order.
struct Hyperedge {
    Index anchor = 0;
    std::vector<Index> neighbors;
    Vector affinity;
    bool converged = true;  // affinity solve met its KKT tolerance

    Index degree() const { return 1 + static_cast<Index>(neighbors.size()); }
};

/// W_s({v_i}) for every node.
struct SelfLoopSet {
    Vector values;
};

/// Node-by-hyperedge relation matrix, one hyperedge per node (column j = edge anchored at j).
struct RelationMatrix {
    SparseMatrix h;

    Index nodes() const { return h.rows(); }
    Index edges() const { return h.cols(); }
};

/// Close set A_i for every node, stored row-major with stride h.
struct ClusterAssignment {
    Index h = 0;
    std::vector<Index> members;

    Index nodes() const { return h == 0 ? 0 : static_cast<Index>(members.size()) / h; }
    std::span<const Index> close(Index i) const { return {members.data() + i * h, static_cast<std::size_t>(h)}; }

    friend bool operator==(const ClusterAssignment&, const ClusterAssignment&) = default;
};

using NeighborLists = std::vector<std::vector<Index>>;

namespace detail {

/// Best `count` candidates by score (higher first), ties broken by lower index, `self` excluded.
inline std::vector<Index> top_by_score(const Vector& score, Index self, Index count, bool higher_is_better) {
    std::vector<Index> idx;
    idx.reserve(static_cast<std::size_t>(score.size()));
    for (Index j = 0; j < score.size(); ++j)
        if (j != self) idx.push_back(j);
    auto better = [&](Index a, Index b) {
        if (score(a) != score(b)) return higher_is_better ? score(a) > score(b) : score(a) < score(b);
        return a < b;
    };
    std::partial_sort(idx.begin(), idx.begin() + count, idx.end(), better);
    idx.resize(static_cast<std::size_t>(count));
    return idx;
}

/// Cosine KNN where zero rows are allowed (they score 0 against everything).
inline NeighborLists cosine_knn_unchecked(const Matrix& features, Index count) {
    const Index n = features.rows();
    Matrix unit = features;
    for (Index i = 0; i < n; ++i) {
        const double nrm = unit.row(i).norm();
        if (nrm > 0.0) unit.row(i) /= nrm;
    }
    NeighborLists out(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        const Vector sims = unit * unit.row(i).transpose();
        out[static_cast<std::size_t>(i)] = top_by_score(sims, i, count, true);
    }
    return out;
}

}  // namespace detail

/// For each row, the `k_minus_1` other rows with the highest cosine
/// similarity, most similar first, ties to the lower index.
inline NeighborLists cosine_knn(const Matrix& features, Index k_minus_1) {
    const Index n = features.rows();
    if (k_minus_1 < 1) throw ConfigError("neighbour count must be >= 1");
    if (n <= k_minus_1)
        throw ConfigError("need more than " + std::to_string(k_minus_1) + " samples for that many neighbours (got " + std::to_string(n) + ")");
    for (Index i = 0; i < n; ++i)
        if (features.row(i).squaredNorm() == 0.0) throw ValidationError("feature row " + std::to_string(i) + " has zero norm");
    return detail::cosine_knn_unchecked(features, k_minus_1);
}

/// One hyperedge per node: KNN membership plus NNLS reconstruction affinity {1} u a_i.
inline std::vector<Hyperedge> build_hyperedges(const Matrix& features, Index k, double alpha, const NnlsOptions& opts = {}) {
    if (k <= 2) throw ConfigError("hyperedge degree k must exceed 2 (got " + std::to_string(k) + ")");
    const NeighborLists knn = cosine_knn(features, k - 1);
    const Index n = features.rows();
    std::vector<Hyperedge> edges(static_cast<std::size_t>(n));
    Matrix nb(k - 1, features.cols());
    for (Index i = 0; i < n; ++i) {
        auto& e = edges[static_cast<std::size_t>(i)];
        e.anchor = i;
        e.neighbors = knn[static_cast<std::size_t>(i)];
        for (Index j = 0; j < k - 1; ++j) nb.row(j) = features.row(e.neighbors[static_cast<std::size_t>(j)]);
        const AffinitySolution sol = solve_affinity(features.row(i).transpose(), nb, alpha, opts);
        e.affinity.resize(k);
        e.affinity(0) = 1.0;
        e.affinity.tail(k - 1) = sol.coef;
        e.converged = sol.converged;
    }
    return edges;
}

/// Mean prediction over the hyperedge's non-anchor members.
inline Vector neighbor_mean_prediction(const Hyperedge& edge, const Matrix& predictions) {
    if (edge.neighbors.size() < 2) throw ConfigError("hyperedge must have at least two neighbours");
    Vector mean = Vector::Zero(predictions.cols());
    for (Index j : edge.neighbors) {
        if (j < 0 || j >= predictions.rows()) throw ShapeError("hyperedge member outside prediction matrix");
        mean += predictions.row(j).transpose();
    }
    return mean / static_cast<double>(edge.neighbors.size());
}

/// Shannon entropy divided by log|C|; 0 log 0 = 0.
inline double normalized_entropy(const Vector& p) {
    if (p.size() < 2) throw ValidationError("normalized entropy needs at least two classes");
    double sum = 0.0;
    for (Index c = 0; c < p.size(); ++c) {
        if (!(p(c) >= 0.0) || !std::isfinite(p(c))) throw ValidationError("probability vector has a negative or non-finite entry");
        sum += p(c);
    }
    if (std::abs(sum - 1.0) > 1e-6) throw ValidationError("probability vector sums to " + std::to_string(sum));
    double h = 0.0;
    for (Index c = 0; c < p.size(); ++c)
        if (p(c) > 0.0) h -= p(c) * std::log(p(c));
    return std::clamp(h / std::log(static_cast<double>(p.size())), 0.0, 1.0);
}

/// W_s({v_i}) = exp(phi(mean neighbour prediction)), in [1, e].
inline SelfLoopSet self_loop_affinities(const std::vector<Hyperedge>& edges, const Matrix& predictions) {
    SelfLoopSet s;
    s.values.resize(static_cast<Index>(edges.size()));
    for (std::size_t i = 0; i < edges.size(); ++i) {
        if (edges[i].anchor != static_cast<Index>(i)) throw ShapeError("hyperedges must be ordered by anchor index");
        s.values(static_cast<Index>(i)) = std::exp(normalized_entropy(neighbor_mean_prediction(edges[i], predictions)));
    }
    return s;
}

/// Adds each member's self-loop affinity to its entry in the hyperedge affinity.
inline std::vector<Hyperedge> merge_self_loops(std::vector<Hyperedge> edges, const SelfLoopSet& loops) {
    for (auto& e : edges) {
        e.affinity(0) += loops.values(e.anchor);
        for (std::size_t j = 0; j < e.neighbors.size(); ++j) e.affinity(static_cast<Index>(j) + 1) += loops.values(e.neighbors[j]);
    }
    return edges;
}

/// H(v_i, e_j) = affinity of v_i within e_j, zero for non-members.
inline RelationMatrix build_relation_matrix(const std::vector<Hyperedge>& edges) {
    const Index n = static_cast<Index>(edges.size());
    std::vector<Eigen::Triplet<double>> trips;
    for (const auto& e : edges) {
        trips.emplace_back(e.anchor, e.anchor, e.affinity(0));
        for (std::size_t j = 0; j < e.neighbors.size(); ++j) trips.emplace_back(e.neighbors[j], e.anchor, e.affinity(static_cast<Index>(j) + 1));
    }
    RelationMatrix r;
    r.h.resize(n, n);
    r.h.setFromTriplets(trips.begin(), trips.end());
    return r;
}

inline Index default_compressed_width(Index n) { return std::min<Index>(64, n - 1); }

/// PCA projection of the rows of H onto `m_prime` components.
inline Matrix compress_rows(const RelationMatrix& rel, Index m_prime, std::uint64_t seed, const PcaOptions& opts = {}) {
    if (m_prime >= rel.nodes()) throw ConfigError("m' must be smaller than the node count");
    return pca_rows(rel.h, m_prime, seed, opts).projected;
}

/// A_i = the h rows nearest to row i in Euclidean distance (self excluded, ties to lower index).
inline ClusterAssignment cluster_high_order(const Matrix& compressed, Index h) {
    const Index n = compressed.rows();
    if (h < 1 || h >= n) throw ConfigError("cluster size h must satisfy 1 <= h < n (got h=" + std::to_string(h) + ", n=" + std::to_string(n) + ")");
    ClusterAssignment out;
    out.h = h;
    out.members.reserve(static_cast<std::size_t>(n * h));
    for (Index i = 0; i < n; ++i) {
        const Vector dist = (compressed.rowwise() - compressed.row(i)).rowwise().squaredNorm();
        const auto best = detail::top_by_score(dist, i, h, false);
        out.members.insert(out.members.end(), best.begin(), best.end());
    }
    return out;
}

/// Pairwise fallback used for ablation: A_i = h nearest by feature cosine.
inline ClusterAssignment cluster_pairwise(const Matrix& features, Index h) {
    const Index n = features.rows();
    if (h < 1 || h >= n) throw ConfigError("cluster size h must satisfy 1 <= h < n");
    const NeighborLists knn = detail::cosine_knn_unchecked(features, h);
    ClusterAssignment out;
    out.h = h;
    for (const auto& row : knn) out.members.insert(out.members.end(), row.begin(), row.end());
    return out;
}

struct HypergraphOptions {
    Index k = 6;
    double alpha = 2.0;
    Index h = 3;
    Index m_prime = 0;  // 0 picks min(64, n-1)
    bool self_loops = true;
    std::uint64_t seed = 0;
    NnlsOptions nnls;
    PcaOptions pca;
};

/// Everything a refresh produces, kept for inspection and tests.
struct Hypergraph {
    std::vector<Hyperedge> edges;  // pre-merge affinities
    SelfLoopSet self_loops;        // empty when self loops are disabled
    std::vector<Hyperedge> merged;
    RelationMatrix relation;
    Matrix compressed;
    ClusterAssignment clusters;
};

/// KNN -> NNLS affinities -> self loops -> H -> PCA -> top-h clusters.
inline Hypergraph build_hypergraph(const Matrix& features, const Matrix& predictions, const HypergraphOptions& opts) {
    if (features.rows() != predictions.rows()) throw ShapeError("features and predictions disagree on sample count");
    Hypergraph g;
    g.edges = build_hyperedges(features, opts.k, opts.alpha, opts.nnls);
    if (opts.self_loops) {
        g.self_loops = self_loop_affinities(g.edges, predictions);
        g.merged = merge_self_loops(g.edges, g.self_loops);
    } else {
        g.merged = g.edges;
    }
    g.relation = build_relation_matrix(g.merged);
    const Index width = opts.m_prime > 0 ? opts.m_prime : default_compressed_width(features.rows());
    g.compressed = compress_rows(g.relation, width, opts.seed, opts.pca);
    g.clusters = cluster_high_order(g.compressed, opts.h);
    return g;
}

}  // namespace hypersfda
