#pragma once

#include "hypersfda/binary_io.hpp"
#include "hypersfda/dataset.hpp"
#include "hypersfda/hypergraph.hpp"
#include "hypersfda/model.hpp"
#include "hypersfda/objective.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace hypersfda {

/// Every knob of an adaptation run. Defaults follow the published setup
/// (k=6, T_in=50, alpha=2, h=3, gamma=7, delta=0.8, eta=2, batch 64, lr 1e-3,
/// momentum 0.9); the remaining fields are artifact choices.
struct AdaptConfig {
    int k = 6;
    int t_in = 50;
    double alpha = 2.0;
    int h = 3;
    double gamma = 7.0;
    double delta = 0.8;
    double eta = 2.0;
    double beta = 0.25;
    int batch_size = 64;
    double lr = 1e-3;
    double momentum = 0.9;
    int epochs = 30;
    int m_prime = 0;  // 0 selects min(64, n-1)
    std::uint64_t seed = 0;
    bool open_set = false;
    bool self_loops = true;  // ablation: drop entropy self loops
    bool high_order = true;  // ablation: false clusters by plain feature cosine
    int eval_every = 0;      // 0 evaluates at the start of each epoch

    void validate(Index n) const {
        if (k <= 2) throw ConfigError("k must exceed 2 (got " + std::to_string(k) + ")");
        if (t_in < 1) throw ConfigError("t_in must be >= 1");
        if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
        if (h < 1 || h >= n) throw ConfigError("h must satisfy 1 <= h < n (got h=" + std::to_string(h) + ", n=" + std::to_string(n) + ")");
        if (k > n) throw ConfigError("k must not exceed the number of target samples");
        if (!(gamma > 0.0)) throw ConfigError("gamma must be positive");
        if (!(delta >= 0.0 && delta < 1.0)) throw ConfigError("delta must lie in [0, 1)");
        if (!(eta >= 0.0)) throw ConfigError("eta must be >= 0");
        if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("lr must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (m_prime < 0 || (m_prime > 0 && m_prime >= n)) throw ConfigError("m_prime must be 0 (auto) or in [1, n)");
        if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
    }

    friend bool operator==(const AdaptConfig&, const AdaptConfig&) = default;
};

/// Cached features and predictions of every training sample.
struct MemoryBank {
    Matrix features;     // n x d_z
    Matrix predictions;  // n x C
    std::int64_t refreshed_at = -1;

    friend bool operator==(const MemoryBank& a, const MemoryBank& b) {
        return a.features.rows() == b.features.rows() && a.features.cols() == b.features.cols() && a.features == b.features &&
               a.predictions.rows() == b.predictions.rows() && a.predictions.cols() == b.predictions.cols() && a.predictions == b.predictions &&
               a.refreshed_at == b.refreshed_at;
    }
};

struct OpenSetStats {
    std::size_t known = 0;
    std::size_t unknown = 0;
};

struct MetricsRecord {
    std::int64_t iter = 0;
    std::optional<LossBreakdown> loss;
    std::optional<double> acc;
    std::optional<double> neighbor_agreement;
    std::vector<double> misleading_ratio;  // per class; empty when not evaluated
    std::optional<OpenSetStats> open_set;
    bool final = false;
};

/// Complete mutable state of an adaptation run; enough to resume bit-exactly.
struct TrainingState {
    AdaptModel model;
    GradientSet velocity;
    EmaState ema;
    MemoryBank bank;
    ClusterAssignment clusters;
    std::int64_t iter = 0;           // next iteration to execute
    std::vector<Index> train_indices;  // target rows used for training (all, or the open-set known part)
    std::size_t unknown_count = 0;
};

// ---------------------------------------------------------------------------
// Evaluation

/// Accuracy plus neighbourhood diagnostics. Neighbours are found by cosine
/// similarity of adapter features: fresh ones, or the bank's when given.
inline MetricsRecord evaluate(const AdaptModel& model, const EmbeddingDataset& ds, Index h, const MemoryBank* bank = nullptr) {
    if (!ds.labeled()) throw ConfigError("evaluation requires a labeled dataset");
    if (ds.dim() != model.input_dim()) throw ShapeError("dataset dimension does not match model input");
    const Index n = ds.size();
    const auto& labels = *ds.labels;
    const ForwardResult fw = forward(model, ds.features);

    MetricsRecord rec;
    rec.acc = accuracy(fw.probs, labels);
    if (n < 2) return rec;

    const Matrix& feats = bank ? bank->features : fw.features;
    const Matrix& preds = bank ? bank->predictions : fw.probs;
    if (feats.rows() != n) throw ShapeError("memory bank does not match dataset size");
    const Index hh = std::clamp<Index>(h, 1, n - 1);
    const NeighborLists nn = detail::cosine_knn_unchecked(feats, hh);

    std::vector<int> predicted(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) predicted[static_cast<std::size_t>(i)] = argmax_row(preds.row(i));

    const int classes = ds.class_count;
    std::vector<std::size_t> class_total(static_cast<std::size_t>(classes), 0), class_misled(static_cast<std::size_t>(classes), 0);
    double agreement = 0.0;
    for (Index i = 0; i < n; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        const int y = labels[ui];
        std::size_t good = 0;
        for (Index j : nn[ui]) good += predicted[static_cast<std::size_t>(j)] == y;
        agreement += static_cast<double>(good) / static_cast<double>(hh);
        ++class_total[static_cast<std::size_t>(y)];
        if (predicted[static_cast<std::size_t>(nn[ui].front())] != y) ++class_misled[static_cast<std::size_t>(y)];
    }
    rec.neighbor_agreement = agreement / static_cast<double>(n);
    rec.misleading_ratio.resize(static_cast<std::size_t>(classes));
    for (int c = 0; c < classes; ++c) {
        const auto uc = static_cast<std::size_t>(c);
        rec.misleading_ratio[uc] = class_total[uc] ? static_cast<double>(class_misled[uc]) / static_cast<double>(class_total[uc]) : 0.0;
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Open-set split

struct OpenSetSplit {
    std::vector<Index> known;
    std::vector<Index> unknown;
};

/// 1-D two-means on normalised prediction entropy, seeded at the minimum and
/// maximum entropy. The higher-entropy cluster is unknown. Equal entropies
/// leave every sample known.
inline OpenSetSplit open_set_split(const Matrix& predictions) {
    const Index n = predictions.rows();
    if (n < 2) throw ConfigError("open-set split needs at least two samples");
    std::vector<double> ent(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) ent[static_cast<std::size_t>(i)] = normalized_entropy(predictions.row(i).transpose());
    const auto [lo_it, hi_it] = std::minmax_element(ent.begin(), ent.end());
    double lo = *lo_it, hi = *hi_it;

    OpenSetSplit out;
    if (lo == hi) {
        out.known.resize(static_cast<std::size_t>(n));
        std::iota(out.known.begin(), out.known.end(), Index{0});
        return out;
    }
    std::vector<char> high(static_cast<std::size_t>(n), 0);
    for (int it = 0; it < 1000; ++it) {
        bool changed = false;
        double sum_lo = 0.0, sum_hi = 0.0;
        std::size_t cnt_lo = 0, cnt_hi = 0;
        for (std::size_t i = 0; i < ent.size(); ++i) {
            // Ties go to the known (low) cluster.
            const char h = std::abs(ent[i] - hi) < std::abs(ent[i] - lo) ? 1 : 0;
            if (h != high[i]) changed = true;
            high[i] = h;
            if (h) {
                sum_hi += ent[i];
                ++cnt_hi;
            } else {
                sum_lo += ent[i];
                ++cnt_lo;
            }
        }
        if (cnt_lo) lo = sum_lo / static_cast<double>(cnt_lo);
        if (cnt_hi) hi = sum_hi / static_cast<double>(cnt_hi);
        if (!changed && it > 0) break;
    }
    for (Index i = 0; i < n; ++i) (high[static_cast<std::size_t>(i)] ? out.unknown : out.known).push_back(i);
    return out;
}

// ---------------------------------------------------------------------------
// Refresh

struct RefreshResult {
    std::optional<Hypergraph> graph;  // absent for the pairwise ablation
    MemoryBank bank;
    ClusterAssignment clusters;
};

/// Cosine similarity is undefined for all-zero ReLU outputs; such rows are
/// given the all-ones direction before KNN so the refresh can proceed.
inline Matrix knn_safe_features(const Matrix& z) {
    Matrix out = z;
    for (Index i = 0; i < out.rows(); ++i)
        if (out.row(i).squaredNorm() == 0.0) out.row(i).setOnes();
    return out;
}

/// Full forward pass over the training rows, then hypergraph construction
/// and high-order clustering.
inline RefreshResult refresh_hypergraph(const AdaptModel& model, const Matrix& target_features, const AdaptConfig& cfg, std::int64_t iter = 0) {
    cfg.validate(target_features.rows());
    const ForwardResult fw = forward(model, target_features);
    RefreshResult r;
    r.bank.features = fw.features;
    r.bank.predictions = fw.probs;
    r.bank.refreshed_at = iter;
    const Matrix feats = knn_safe_features(fw.features);
    if (cfg.high_order) {
        HypergraphOptions opts;
        opts.k = cfg.k;
        opts.alpha = cfg.alpha;
        opts.h = cfg.h;
        opts.m_prime = cfg.m_prime;
        opts.self_loops = cfg.self_loops;
        opts.seed = cfg.seed;
        r.graph = build_hypergraph(feats, fw.probs, opts);
        r.clusters = r.graph->clusters;
    } else {
        r.clusters = cluster_pairwise(feats, cfg.h);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Training loop

/// Thrown when the loss goes non-finite. Carries the state before the bad step.
struct TrainingAborted : NumericError {
    TrainingState last_good;
    TrainingAborted(const std::string& what, TrainingState state) : NumericError(what), last_good(std::move(state)) {}
};

struct AdaptHooks {
    /// Called after every iteration with the post-step state and the batch (training-row indices).
    std::function<void(const TrainingState&, std::span<const Index>)> on_iteration;
    /// Called once per record as soon as it is produced.
    std::function<void(const MetricsRecord&)> on_record;
    const TrainingState* resume = nullptr;
    std::optional<std::int64_t> stop_at;  // stop before executing this iteration
};

struct AdaptResult {
    AdaptModel model;
    std::vector<MetricsRecord> metrics;
    std::optional<MetricsRecord> final_metrics;
    TrainingState state;
    std::int64_t max_iter = 0;
};

inline std::int64_t iterations_per_epoch(Index n, int batch_size) { return (n + batch_size - 1) / batch_size; }

/// Seeded shuffle of [0, n) for one epoch. Pure in (seed, epoch).
inline std::vector<Index> epoch_order(std::uint64_t seed, std::int64_t epoch, Index n) {
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    Rng rng(seed, 0x65706f6368ULL + static_cast<std::uint64_t>(epoch));
    rng.shuffle(order.begin(), order.end());
    return order;
}

inline TrainingState initial_state(const AdaptModel& model, const EmbeddingDataset& target, const AdaptConfig& cfg) {
    TrainingState s;
    s.model = model;
    s.velocity = GradientSet::zeros_like(model);
    if (cfg.open_set) {
        const auto split = open_set_split(forward(model, target.features).probs);
        s.train_indices = split.known;
        s.unknown_count = split.unknown.size();
    } else {
        s.train_indices.resize(static_cast<std::size_t>(target.size()));
        std::iota(s.train_indices.begin(), s.train_indices.end(), Index{0});
    }
    s.ema = EmaState::zeros(static_cast<Index>(s.train_indices.size()), model.class_count());
    return s;
}

/// Source-free adaptation on an unlabeled target set. Labels, when present,
/// only feed the metrics.
inline AdaptResult adapt(const AdaptModel& model, const EmbeddingDataset& target, const AdaptConfig& cfg, const AdaptHooks& hooks = {}) {
    if (target.dim() != model.input_dim())
        throw ShapeError("target dimension " + std::to_string(target.dim()) + " does not match model input " + std::to_string(model.input_dim()));
    if (target.class_count != model.class_count()) throw ShapeError("target class count does not match model");

    TrainingState state = hooks.resume ? *hooks.resume : initial_state(model, target, cfg);
    const Index n = static_cast<Index>(state.train_indices.size());
    cfg.validate(n);
    const EmbeddingDataset train = target.subset(state.train_indices);
    const std::int64_t per_epoch = iterations_per_epoch(n, cfg.batch_size);
    const std::int64_t max_iter = static_cast<std::int64_t>(cfg.epochs) * per_epoch;

    AdaptResult result;
    result.max_iter = max_iter;
    std::optional<OpenSetStats> open_stats;
    if (cfg.open_set) open_stats = OpenSetStats{state.train_indices.size(), state.unknown_count};

    auto emit = [&](MetricsRecord rec) {
        if (hooks.on_record) hooks.on_record(rec);
        result.metrics.push_back(std::move(rec));
    };

    const std::int64_t end = hooks.stop_at ? std::min(*hooks.stop_at, max_iter) : max_iter;
    std::vector<Index> order;
    std::int64_t order_epoch = -1;
    for (std::int64_t t = state.iter; t < end; ++t) {
        const std::int64_t epoch = t / per_epoch, slot = t % per_epoch;
        if (epoch != order_epoch) {
            order = epoch_order(cfg.seed, epoch, n);
            order_epoch = epoch;
        }
        if (t % cfg.t_in == 0) {
            RefreshResult r = refresh_hypergraph(state.model, train.features, cfg, t);
            state.bank = std::move(r.bank);
            state.clusters = std::move(r.clusters);
        }

        MetricsRecord rec;
        rec.iter = t;
        rec.open_set = open_stats;
        const bool due = cfg.eval_every > 0 ? t % cfg.eval_every == 0 : slot == 0;
        if (due && train.labeled()) {
            MetricsRecord ev = evaluate(state.model, train, cfg.h);
            rec.acc = ev.acc;
            rec.neighbor_agreement = ev.neighbor_agreement;
            rec.misleading_ratio = std::move(ev.misleading_ratio);
        }

        const Index start = slot * cfg.batch_size;
        const Index len = std::min<Index>(cfg.batch_size, n - start);
        std::vector<Index> batch(order.begin() + start, order.begin() + start + len);
        Matrix xb(len, train.dim());
        for (Index r = 0; r < len; ++r) xb.row(r) = train.features.row(batch[static_cast<std::size_t>(r)]);

        TrainingState before = state;
        const ForwardResult fw = forward(state.model, xb);
        Matrix q_rows(len, fw.probs.cols());
        for (Index r = 0; r < len; ++r) {
            const Index i = batch[static_cast<std::size_t>(r)];
            ema_update(state.ema, i, fw.probs.row(r).transpose(), cfg.delta, t);
            q_rows.row(r) = state.ema.q.row(i);
        }
        const double lambda = lambda_schedule(t, std::max<std::int64_t>(max_iter, 1), cfg.beta);
        const BatchConstants consts = prepare_batch(
            std::span<const Index>(batch), fw.probs, state.bank.predictions, [&](Index i) { return state.clusters.close(i); }, q_rows, cfg.gamma,
            lambda, cfg.eta);
        const BatchObjective obj = evaluate_batch(consts, fw.probs);
        if (!std::isfinite(obj.loss.total) || !obj.upstream.allFinite())
            throw TrainingAborted("non-finite loss at iteration " + std::to_string(t), std::move(before));

        const GradientSet grads = backward(state.model, xb, obj.upstream, &fw);
        try {
            sgd_step(state.model, grads, cfg.lr, cfg.momentum, state.velocity);
        } catch (const NumericError& e) {
            throw TrainingAborted(std::string(e.what()) + " at iteration " + std::to_string(t), std::move(before));
        }

        const ForwardResult after = forward(state.model, xb);
        for (Index r = 0; r < len; ++r) {
            const Index i = batch[static_cast<std::size_t>(r)];
            state.bank.features.row(i) = after.features.row(r);
            state.bank.predictions.row(i) = after.probs.row(r);
        }
        state.iter = t + 1;
        rec.loss = obj.loss;
        emit(std::move(rec));
        if (hooks.on_iteration) hooks.on_iteration(state, batch);
    }

    if (state.iter >= max_iter && max_iter > 0 && train.labeled()) {
        MetricsRecord fin = evaluate(state.model, train, cfg.h);
        fin.iter = max_iter;
        fin.final = true;
        fin.open_set = open_stats;
        result.final_metrics = fin;
        emit(std::move(fin));
    }
    result.model = state.model;
    result.state = std::move(state);
    return result;
}

// ---------------------------------------------------------------------------
// Training checkpoint: the model checkpoint followed by a "TRST" section with
// velocity, EMA, bank, clusters and the open-set partition.

inline constexpr std::uint16_t kStateVersion = 1;

inline void write_training_state(std::ostream& out, const TrainingState& s) {
    write_model(out, s.model);
    bin::put_magic(out, "TRST");
    bin::put_u16(out, kStateVersion);
    bin::put_u64(out, static_cast<std::uint64_t>(s.iter));
    bin::put_tensor(out, s.velocity.w_f);
    bin::put_tensor(out, s.velocity.b_f.transpose());
    bin::put_tensor(out, s.velocity.w_g);
    bin::put_tensor(out, s.velocity.b_g.transpose());

    bin::put_u32(out, static_cast<std::uint32_t>(s.train_indices.size()));
    for (Index i : s.train_indices) bin::put_u32(out, static_cast<std::uint32_t>(i));
    bin::put_u64(out, s.unknown_count);

    bin::put_u32(out, static_cast<std::uint32_t>(s.ema.q.rows()));
    bin::put_tensor(out, s.ema.q);
    for (auto stamp : s.ema.last_update_iter) bin::put_u64(out, static_cast<std::uint64_t>(stamp));

    bin::put_u32(out, static_cast<std::uint32_t>(s.bank.features.rows()));
    bin::put_u64(out, static_cast<std::uint64_t>(s.bank.refreshed_at));
    bin::put_tensor(out, s.bank.features);
    bin::put_tensor(out, s.bank.predictions);

    bin::put_u32(out, static_cast<std::uint32_t>(s.clusters.h));
    bin::put_u32(out, static_cast<std::uint32_t>(s.clusters.members.size()));
    for (Index i : s.clusters.members) bin::put_u32(out, static_cast<std::uint32_t>(i));
}

inline TrainingState read_training_state(std::istream& in) {
    TrainingState s;
    s.model = read_model(in);
    bin::expect_magic(in, "TRST", "training state");
    const auto version = bin::get_u16(in, "state version");
    if (version != kStateVersion) throw ParseError("unsupported training state version " + std::to_string(version));
    s.iter = static_cast<std::int64_t>(bin::get_u64(in, "iteration"));
    s.velocity = GradientSet::zeros_like(s.model);
    bin::get_tensor(in, s.velocity.w_f, "velocity");
    Eigen::Map<Eigen::RowVectorXd> vbf(s.velocity.b_f.data(), s.velocity.b_f.size());
    bin::get_tensor(in, vbf, "velocity");
    bin::get_tensor(in, s.velocity.w_g, "velocity");
    Eigen::Map<Eigen::RowVectorXd> vbg(s.velocity.b_g.data(), s.velocity.b_g.size());
    bin::get_tensor(in, vbg, "velocity");

    const auto n_train = bin::get_u32(in, "train index count");
    s.train_indices.resize(n_train);
    for (auto& i : s.train_indices) i = bin::get_u32(in, "train index");
    s.unknown_count = bin::get_u64(in, "unknown count");

    const Index classes = s.model.class_count();
    const auto n_ema = bin::get_u32(in, "EMA rows");
    if (n_ema != n_train) throw ParseError("EMA rows do not match training set size");
    s.ema = EmaState::zeros(n_ema, classes);
    bin::get_tensor(in, s.ema.q, "EMA");
    for (auto& stamp : s.ema.last_update_iter) stamp = static_cast<std::int64_t>(bin::get_u64(in, "EMA stamp"));

    const auto n_bank = bin::get_u32(in, "bank rows");
    s.bank.refreshed_at = static_cast<std::int64_t>(bin::get_u64(in, "bank stamp"));
    s.bank.features.resize(n_bank, s.model.feature_dim());
    s.bank.predictions.resize(n_bank, classes);
    bin::get_tensor(in, s.bank.features, "bank features");
    bin::get_tensor(in, s.bank.predictions, "bank predictions");

    s.clusters.h = bin::get_u32(in, "cluster size");
    const auto n_members = bin::get_u32(in, "cluster member count");
    if (s.clusters.h > 0 && n_members != static_cast<std::uint64_t>(s.clusters.h) * n_bank) throw ParseError("cluster table size mismatch");
    s.clusters.members.resize(n_members);
    for (auto& i : s.clusters.members) {
        i = bin::get_u32(in, "cluster member");
        if (i >= static_cast<Index>(n_train)) throw ParseError("cluster member index out of range");
    }
    if (in.peek() != std::char_traits<char>::eof()) throw ParseError("trailing bytes after training state");
    return s;
}

inline void save_training_state(const TrainingState& s, const std::filesystem::path& path) {
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
        write_training_state(out, s);
        if (!out) throw std::runtime_error("failed writing '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline TrainingState load_training_state(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open training state '" + path.string() + "'");
    return read_training_state(in);
}

}  // namespace hypersfda
