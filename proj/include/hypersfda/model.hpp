#pragma once

#include "hypersfda/binary_io.hpp"
#include "hypersfda/common.hpp"
#include "hypersfda/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

namespace hypersfda {

/// Classifier O = g(f(x)): an affine + ReLU adapter f followed by an affine
/// classifier g with softmax. Row-vector convention: z = relu(x W_f + b_f).
struct AdaptModel {
    Matrix w_f;  // d x d_z
    Vector b_f;  // d_z
    Matrix w_g;  // d_z x C
    Vector b_g;  // C

    Index input_dim() const { return w_f.rows(); }
    Index feature_dim() const { return w_f.cols(); }
    Index class_count() const { return w_g.cols(); }

    bool finite() const { return w_f.allFinite() && b_f.allFinite() && w_g.allFinite() && b_g.allFinite(); }

    friend bool operator==(const AdaptModel& a, const AdaptModel& b) {
        auto same = [](const auto& x, const auto& y) { return x.rows() == y.rows() && x.cols() == y.cols() && x == y; };
        return same(a.w_f, b.w_f) && same(a.b_f, b.b_f) && same(a.w_g, b.w_g) && same(a.b_g, b.b_g);
    }
};

/// One buffer per AdaptModel tensor. Doubles as the momentum velocity.
struct GradientSet {
    Matrix w_f;
    Vector b_f;
    Matrix w_g;
    Vector b_g;

    static GradientSet zeros_like(const AdaptModel& m) {
        return {Matrix::Zero(m.w_f.rows(), m.w_f.cols()), Vector::Zero(m.b_f.size()), Matrix::Zero(m.w_g.rows(), m.w_g.cols()),
                Vector::Zero(m.b_g.size())};
    }

    void set_zero() {
        w_f.setZero();
        b_f.setZero();
        w_g.setZero();
        b_g.setZero();
    }

    GradientSet& operator+=(const GradientSet& o) {
        w_f += o.w_f;
        b_f += o.b_f;
        w_g += o.w_g;
        b_g += o.b_g;
        return *this;
    }
};

/// Output of a batched forward pass. Pre-activations are kept for backward.
struct ForwardResult {
    Matrix pre;       // n x d_z, before ReLU
    Matrix features;  // n x d_z
    Matrix probs;     // n x C
};

/// Row-wise softmax with max-logit subtraction.
inline Matrix softmax_rows(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        p.row(i) = (logits.row(i).array() - mx).exp();
        p.row(i) /= p.row(i).sum();
    }
    return p;
}

inline AdaptModel make_model(Index input_dim, Index feature_dim, Index class_count, std::uint64_t seed) {
    if (input_dim < 1 || feature_dim < 1 || class_count < 2) throw ConfigError("model dimensions must be positive with at least 2 classes");
    Rng rng(seed, 0x6d6f64656cULL);
    AdaptModel m;
    m.w_f = Matrix::Identity(input_dim, feature_dim);
    for (Index i = 0; i < input_dim; ++i)
        for (Index j = 0; j < feature_dim; ++j) m.w_f(i, j) += rng.uniform(-0.01, 0.01);
    const double sf = 1.0 / std::sqrt(static_cast<double>(input_dim));
    const double sg = 1.0 / std::sqrt(static_cast<double>(feature_dim));
    m.b_f.resize(feature_dim);
    for (Index j = 0; j < feature_dim; ++j) m.b_f(j) = rng.uniform(-sf, sf);
    m.w_g.resize(feature_dim, class_count);
    for (Index i = 0; i < feature_dim; ++i)
        for (Index c = 0; c < class_count; ++c) m.w_g(i, c) = rng.uniform(-sg, sg);
    m.b_g.resize(class_count);
    for (Index c = 0; c < class_count; ++c) m.b_g(c) = rng.uniform(-sg, sg);
    return m;
}

inline ForwardResult forward(const AdaptModel& m, const Matrix& x) {
    if (x.cols() != m.input_dim())
        throw ShapeError("input has " + std::to_string(x.cols()) + " columns, model expects " + std::to_string(m.input_dim()));
    ForwardResult r;
    r.pre = x * m.w_f;
    r.pre.rowwise() += m.b_f.transpose();
    r.features = r.pre.cwiseMax(0.0);
    Matrix logits = r.features * m.w_g;
    logits.rowwise() += m.b_g.transpose();
    r.probs = softmax_rows(logits);
    return r;
}

/// Single sample: returns (z, p).
inline std::pair<Vector, Vector> forward_sample(const AdaptModel& m, const Vector& x) {
    Matrix row = x.transpose();
    auto r = forward(m, row);
    return {r.features.row(0).transpose(), r.probs.row(0).transpose()};
}

/// Gradients given dL/dlogits for every batch row.
inline GradientSet backward_from_logits(const AdaptModel& m, const Matrix& x, const ForwardResult& fw,
                                        const Matrix& dlogits) {
    GradientSet g;
    g.w_g = fw.features.transpose() * dlogits;
    g.b_g = dlogits.colwise().sum().transpose();
    Matrix dz = dlogits * m.w_g.transpose();
    // ReLU subgradient at exactly 0 is taken as 0.
    Matrix dpre = (fw.pre.array() > 0.0).select(dz.array(), 0.0).matrix();
    g.w_f = x.transpose() * dpre;
    g.b_f = dpre.colwise().sum().transpose();
    return g;
}

/// Gradients of a loss given its derivative with respect to each output
/// probability row. The softmax Jacobian diag(p) - p p^T is applied row-wise.
inline GradientSet backward(const AdaptModel& m, const Matrix& x, const Matrix& upstream,
                            const ForwardResult* cached = nullptr) {
    if (x.cols() != m.input_dim()) throw ShapeError("backward: input width does not match model");
    if (upstream.rows() != x.rows() || upstream.cols() != m.class_count())
        throw ShapeError("backward: upstream is " + std::to_string(upstream.rows()) + "x" + std::to_string(upstream.cols()) + ", expected " +
                         std::to_string(x.rows()) + "x" + std::to_string(m.class_count()));
    ForwardResult local;
    if (!cached) local = forward(m, x);
    const ForwardResult& fw = cached ? *cached : local;
    Matrix dlogits(upstream.rows(), upstream.cols());
    for (Index i = 0; i < upstream.rows(); ++i) {
        const double dot = fw.probs.row(i).dot(upstream.row(i));
        dlogits.row(i) = fw.probs.row(i).array() * (upstream.row(i).array() - dot);
    }
    return backward_from_logits(m, x, fw, dlogits);
}

/// v <- momentum * v + grad; theta <- theta - lr * v.
inline void sgd_step(AdaptModel& m, const GradientSet& grads, double lr, double momentum, GradientSet& velocity) {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!grads.w_f.allFinite()) throw NumericError("non-finite gradient in tensor w_f");
    if (!grads.b_f.allFinite()) throw NumericError("non-finite gradient in tensor b_f");
    if (!grads.w_g.allFinite()) throw NumericError("non-finite gradient in tensor w_g");
    if (!grads.b_g.allFinite()) throw NumericError("non-finite gradient in tensor b_g");
    velocity.w_f = momentum * velocity.w_f + grads.w_f;
    velocity.b_f = momentum * velocity.b_f + grads.b_f;
    velocity.w_g = momentum * velocity.w_g + grads.w_g;
    velocity.b_g = momentum * velocity.b_g + grads.b_g;
    m.w_f -= lr * velocity.w_f;
    m.b_f -= lr * velocity.b_f;
    m.w_g -= lr * velocity.w_g;
    m.b_g -= lr * velocity.b_g;
    if (!m.finite()) throw NumericError("model parameters became non-finite after update");
}

/// Top-1 predicted class; ties go to the lower class index.
inline int argmax_row(const Eigen::Ref<const Eigen::RowVectorXd>& p) {
    int best = 0;
    for (Index c = 1; c < p.size(); ++c)
        if (p(c) > p(best)) best = static_cast<int>(c);
    return best;
}

inline double accuracy(const Matrix& probs, const std::vector<int>& labels) {
    if (labels.empty()) return 0.0;
    std::size_t hits = 0;
    for (Index i = 0; i < probs.rows(); ++i) hits += argmax_row(probs.row(i)) == labels[static_cast<std::size_t>(i)];
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

struct PretrainConfig {
    int epochs = 30;
    double lr = 0.05;
    double momentum = 0.9;
    int batch_size = 64;
    double label_smoothing = 0.1;
    std::uint64_t seed = 0;
};

struct PretrainResult {
    AdaptModel model;
    double source_accuracy = 0.0;
};

/// Supervised source training: mean label-smoothed cross-entropy per batch,
/// minimised with momentum SGD over seeded shuffles.
inline PretrainResult pretrain_source(AdaptModel model, const EmbeddingDataset& source, const PretrainConfig& cfg) {
    if (!source.labeled()) throw ConfigError("source pretraining requires a labeled dataset");
    if (source.dim() != model.input_dim()) throw ShapeError("source dimension does not match model input");
    if (source.class_count != model.class_count()) throw ShapeError("source class count does not match model");
    if (cfg.epochs < 0 || cfg.batch_size < 1) throw ConfigError("epochs must be >= 0 and batch_size >= 1");
    if (cfg.label_smoothing < 0.0 || cfg.label_smoothing >= 1.0) throw ConfigError("label_smoothing must lie in [0, 1)");

    const Index n = source.size();
    const Index classes = model.class_count();
    const auto& labels = *source.labels;
    GradientSet velocity = GradientSet::zeros_like(model);
    std::vector<Index> order(static_cast<std::size_t>(n));

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), Index{0});
        Rng rng(cfg.seed, 0x70726574ULL + static_cast<std::uint64_t>(epoch));
        rng.shuffle(order.begin(), order.end());
        for (Index start = 0; start < n; start += cfg.batch_size) {
            const Index len = std::min<Index>(cfg.batch_size, n - start);
            Matrix xb(len, source.dim());
            for (Index r = 0; r < len; ++r) xb.row(r) = source.features.row(order[static_cast<std::size_t>(start + r)]);
            ForwardResult fw = forward(model, xb);
            Matrix dlogits = fw.probs;
            const double off = cfg.label_smoothing / static_cast<double>(classes);
            for (Index r = 0; r < len; ++r) {
                const int y = labels[static_cast<std::size_t>(order[static_cast<std::size_t>(start + r)])];
                dlogits.row(r).array() -= off;
                dlogits(r, y) -= 1.0 - cfg.label_smoothing;
            }
            dlogits /= static_cast<double>(len);
            GradientSet g = backward_from_logits(model, xb, fw, dlogits);
            sgd_step(model, g, cfg.lr, cfg.momentum, velocity);
        }
    }
    PretrainResult out{std::move(model), 0.0};
    out.source_accuracy = accuracy(forward(out.model, source.features).probs, labels);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint: "HSFD", u16 version, u32 d, d_z, C, then w_f, b_f, w_g, b_g as
// row-major little-endian f64.

inline constexpr std::uint16_t kCheckpointVersion = 1;

inline void write_model(std::ostream& out, const AdaptModel& m) {
    bin::put_magic(out, "HSFD");
    bin::put_u16(out, kCheckpointVersion);
    bin::put_u32(out, static_cast<std::uint32_t>(m.input_dim()));
    bin::put_u32(out, static_cast<std::uint32_t>(m.feature_dim()));
    bin::put_u32(out, static_cast<std::uint32_t>(m.class_count()));
    bin::put_tensor(out, m.w_f);
    bin::put_tensor(out, m.b_f.transpose());
    bin::put_tensor(out, m.w_g);
    bin::put_tensor(out, m.b_g.transpose());
}

inline AdaptModel read_model(std::istream& in) {
    bin::expect_magic(in, "HSFD", "model checkpoint");
    const auto version = bin::get_u16(in, "checkpoint version");
    if (version != kCheckpointVersion)
        throw ParseError("unsupported checkpoint version " + std::to_string(version) + " (expected " + std::to_string(kCheckpointVersion) + ")");
    const auto d = bin::get_u32(in, "input dim");
    const auto dz = bin::get_u32(in, "feature dim");
    const auto c = bin::get_u32(in, "class count");
    if (d == 0 || dz == 0 || c < 2 || d > (1u << 20) || dz > (1u << 20) || c > (1u << 20)) throw ParseError("implausible checkpoint dimensions");
    AdaptModel m;
    m.w_f.resize(d, dz);
    m.b_f.resize(dz);
    m.w_g.resize(dz, c);
    m.b_g.resize(c);
    bin::get_tensor(in, m.w_f, "w_f");
    Eigen::Map<Eigen::RowVectorXd> bf(m.b_f.data(), dz);
    bin::get_tensor(in, bf, "b_f");
    bin::get_tensor(in, m.w_g, "w_g");
    Eigen::Map<Eigen::RowVectorXd> bg(m.b_g.data(), c);
    bin::get_tensor(in, bg, "b_g");
    return m;
}

inline void save_model(const AdaptModel& m, const std::filesystem::path& path) {
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
        write_model(out, m);
        if (!out) throw std::runtime_error("failed writing '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline AdaptModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open checkpoint '" + path.string() + "'");
    return read_model(in);
}

}  // namespace hypersfda
