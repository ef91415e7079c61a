#pragma once

#include "hypersfda/common.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace hypersfda {

/// A set of embedding vectors from one domain. Labels on a target set are
/// only ever read by evaluation code.
struct EmbeddingDataset {
    Matrix features;                         // n x d
    std::optional<std::vector<int>> labels;  // n entries in [0, class_count)
    std::string domain_tag = "source";
    int class_count = 0;

    Index size() const { return features.rows(); }
    Index dim() const { return features.cols(); }
    bool labeled() const { return labels.has_value(); }

    void validate() const {
        if (features.rows() < 1 || features.cols() < 1) throw ValidationError("dataset must have at least one sample and one feature");
        if (class_count < 1) throw ValidationError("class_count must be positive");
        if (!features.allFinite()) throw ValidationError("dataset contains non-finite feature values");
        if (labels) {
            if (static_cast<Index>(labels->size()) != features.rows()) throw ValidationError("label count does not match sample count");
            for (std::size_t i = 0; i < labels->size(); ++i) {
                const int y = (*labels)[i];
                if (y < 0 || y >= class_count)
                    throw ValidationError("label " + std::to_string(y) + " of sample " + std::to_string(i) + " outside [0, " +
                                          std::to_string(class_count) + ")");
            }
        }
    }

    /// Rows selected by index, labels carried along.
    EmbeddingDataset subset(const std::vector<Index>& rows) const {
        EmbeddingDataset out;
        out.domain_tag = domain_tag;
        out.class_count = class_count;
        out.features.resize(static_cast<Index>(rows.size()), dim());
        if (labels) out.labels.emplace();
        for (std::size_t r = 0; r < rows.size(); ++r) {
            out.features.row(static_cast<Index>(r)) = features.row(rows[r]);
            if (labels) out.labels->push_back((*labels)[static_cast<std::size_t>(rows[r])]);
        }
        return out;
    }

    friend bool operator==(const EmbeddingDataset& a, const EmbeddingDataset& b) {
        return a.features.rows() == b.features.rows() && a.features.cols() == b.features.cols() && a.features == b.features &&
               a.labels == b.labels && a.domain_tag == b.domain_tag && a.class_count == b.class_count;
    }
};

/// Describes how the target domain departs from the source.
struct ShiftSpec {
    double rotation_angle = 0.0;  // radians
    std::vector<double> translation;  // empty means zero
    double noise_sigma = 0.0;
    std::optional<std::vector<double>> class_prior_drift;
    std::uint64_t seed = 0;

    void validate(int class_count, Index dim) const {
        if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ConfigError("noise_sigma must be a finite value >= 0");
        if (!std::isfinite(rotation_angle)) throw ConfigError("rotation_angle must be finite");
        if (!translation.empty() && static_cast<Index>(translation.size()) != dim)
            throw ConfigError("translation has length " + std::to_string(translation.size()) + ", expected " + std::to_string(dim));
        if (class_prior_drift) {
            if (static_cast<int>(class_prior_drift->size()) != class_count)
                throw ConfigError("class_prior_drift must have one weight per class");
            double total = 0.0;
            for (double w : *class_prior_drift) {
                if (!(w >= 0.0)) throw ConfigError("class_prior_drift weights must be nonnegative");
                total += w;
            }
            if (std::abs(total - 1.0) > 1e-9) throw ConfigError("class_prior_drift weights must sum to 1");
        }
    }
};

struct GaussianOptions {
    double sigma = 1.0;       // within-class standard deviation
    double separation = 4.0;  // pairwise distance between class means, in units of sigma
};

struct MoonOptions {
    Index dim = 8;
    double noise = 0.1;  // in the 2D moon plane, before lifting
};

namespace detail {

inline int draw_label(Rng& rng, Index i, int class_count, const std::optional<std::vector<double>>& weights) {
    if (!weights) return static_cast<int>(i % class_count);
    const double u = rng.uniform();
    double acc = 0.0;
    for (int c = 0; c < class_count; ++c) {
        acc += (*weights)[static_cast<std::size_t>(c)];
        if (u < acc) return c;
    }
    return class_count - 1;
}

/// Regular simplex with `count` vertices, centred at the origin, unit pairwise distance,
/// living in R^(count-1).
inline Matrix unit_simplex(int count) {
    // Centred standard basis of R^count has pairwise distance sqrt(2); an
    // orthonormal basis of the sum-zero hyperplane brings it down to count-1 coords.
    Matrix basis = Matrix::Identity(count, count);
    basis.rowwise() -= basis.colwise().mean();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(basis), Eigen::ComputeThinV);
    Eigen::MatrixXd v = svd.matrixV().leftCols(count - 1);
    Matrix out = basis * v;
    return out / std::sqrt(2.0);
}

inline Eigen::MatrixXd random_orthogonal(Rng& rng, Index n) {
    Eigen::MatrixXd g(n, n);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) g(i, j) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    // Fix the sign ambiguity so the result depends only on g.
    Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Index j = 0; j < n; ++j)
        if (r(j, j) < 0) q.col(j) = -q.col(j);
    return q;
}

inline void rotate_plane(Eigen::Ref<Eigen::RowVectorXd> x, double angle, double cx = 0.0, double cy = 0.0) {
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = x(0) - cx, v = x(1) - cy;
    x(0) = cx + c * u - s * v;
    x(1) = cy + s * u + c * v;
}

inline void check_counts(Index n_source, Index n_target, Index minimum) {
    if (n_source < minimum || n_target < minimum)
        throw ConfigError("sample counts must be at least " + std::to_string(minimum) + " (got source=" + std::to_string(n_source) +
                          ", target=" + std::to_string(n_target) + ")");
}

}  // namespace detail

/// Labeled Gaussian mixture for the source domain and a rotated, translated,
/// noisier copy for the target. Means sit on a regular simplex spanning the
/// leading class_count-1 coordinates, randomly oriented within that subspace.
inline std::pair<EmbeddingDataset, EmbeddingDataset> gen_gaussian_domains(int class_count, Index dim, Index n_source, Index n_target,
                                                                          const ShiftSpec& shift, std::uint64_t seed,
                                                                          const GaussianOptions& opts = {}) {
    if (class_count < 2) throw ConfigError("class_count must be at least 2 (got " + std::to_string(class_count) + ")");
    if (dim < 2) throw ConfigError("dim must be at least 2 (got " + std::to_string(dim) + ")");
    detail::check_counts(n_source, n_target, class_count);
    shift.validate(class_count, dim);
    if (!(opts.sigma > 0.0) || !(opts.separation > 0.0)) throw ConfigError("sigma and separation must be positive");

    Rng rng(seed, 0);
    Matrix means = Matrix::Zero(class_count, dim);
    const Index span = class_count - 1;
    if (span <= dim) {
        Matrix simplex = detail::unit_simplex(class_count);
        Eigen::MatrixXd rot = detail::random_orthogonal(rng, span);
        means.leftCols(span) = simplex * rot;
    } else {
        for (int c = 0; c < class_count; ++c) {
            for (Index j = 0; j < dim; ++j) means(c, j) = rng.normal();
            means.row(c).normalize();
        }
        means /= std::sqrt(2.0);
    }
    means *= opts.separation * opts.sigma;

    EmbeddingDataset source;
    source.domain_tag = "source";
    source.class_count = class_count;
    source.features.resize(n_source, dim);
    source.labels.emplace(static_cast<std::size_t>(n_source));
    Rng src_rng(seed, 1);
    for (Index i = 0; i < n_source; ++i) {
        const int y = detail::draw_label(src_rng, i, class_count, std::nullopt);
        (*source.labels)[static_cast<std::size_t>(i)] = y;
        for (Index j = 0; j < dim; ++j) source.features(i, j) = means(y, j) + opts.sigma * src_rng.normal();
    }

    Matrix shifted = means;
    for (int c = 0; c < class_count; ++c) {
        Eigen::RowVectorXd row = shifted.row(c);
        detail::rotate_plane(row, shift.rotation_angle);
        if (!shift.translation.empty())
            for (Index j = 0; j < dim; ++j) row(j) += shift.translation[static_cast<std::size_t>(j)];
        shifted.row(c) = row;
    }

    EmbeddingDataset target;
    target.domain_tag = "target";
    target.class_count = class_count;
    target.features.resize(n_target, dim);
    target.labels.emplace(static_cast<std::size_t>(n_target));
    Rng tgt_rng(seed, 2 + (shift.seed << 1));
    for (Index i = 0; i < n_target; ++i) {
        const int y = detail::draw_label(tgt_rng, i, class_count, shift.class_prior_drift);
        (*target.labels)[static_cast<std::size_t>(i)] = y;
        for (Index j = 0; j < dim; ++j) {
            double v = shifted(y, j) + opts.sigma * tgt_rng.normal();
            if (shift.noise_sigma > 0.0) v += shift.noise_sigma * tgt_rng.normal();
            target.features(i, j) = v;
        }
    }
    return {std::move(source), std::move(target)};
}

/// Two interleaved half circles, lifted from the plane into `opts.dim`
/// dimensions by a seeded affine map. The target is rotated in the moon plane
/// about the centre of the pair, then translated and perturbed in the lifted space.
inline std::pair<EmbeddingDataset, EmbeddingDataset> gen_two_moons_domains(Index n_source, Index n_target, const ShiftSpec& shift,
                                                                           std::uint64_t seed, const MoonOptions& opts = {}) {
    detail::check_counts(n_source, n_target, 2);
    if (opts.dim < 2) throw ConfigError("dim must be at least 2 (got " + std::to_string(opts.dim) + ")");
    shift.validate(2, opts.dim);

    Rng rng(seed, 0);
    Eigen::MatrixXd lift(2, opts.dim);
    for (Index i = 0; i < 2; ++i)
        for (Index j = 0; j < opts.dim; ++j) lift(i, j) = rng.normal();
    Eigen::RowVectorXd offset(opts.dim);
    for (Index j = 0; j < opts.dim; ++j) offset(j) = 0.5 * rng.normal();

    auto sample = [&](Rng& r, Index i, const ShiftSpec* sh, EmbeddingDataset& out) {
        const int y = detail::draw_label(r, i, 2, sh ? sh->class_prior_drift : std::nullopt);
        const double t = M_PI * r.uniform();
        Eigen::RowVectorXd p(2);
        if (y == 0) {
            p << std::cos(t), std::sin(t);
        } else {
            p << 1.0 - std::cos(t), 0.5 - std::sin(t);
        }
        p(0) += opts.noise * r.normal();
        p(1) += opts.noise * r.normal();
        if (sh) detail::rotate_plane(p, sh->rotation_angle, 0.5, 0.25);
        Eigen::RowVectorXd x = p * lift + offset;
        if (sh) {
            if (!sh->translation.empty())
                for (Index j = 0; j < opts.dim; ++j) x(j) += sh->translation[static_cast<std::size_t>(j)];
            if (sh->noise_sigma > 0.0)
                for (Index j = 0; j < opts.dim; ++j) x(j) += sh->noise_sigma * r.normal();
        }
        out.features.row(i) = x;
        (*out.labels)[static_cast<std::size_t>(i)] = y;
    };

    EmbeddingDataset source;
    source.domain_tag = "source";
    source.class_count = 2;
    source.features.resize(n_source, opts.dim);
    source.labels.emplace(static_cast<std::size_t>(n_source));
    Rng src_rng(seed, 1);
    for (Index i = 0; i < n_source; ++i) sample(src_rng, i, nullptr, source);

    EmbeddingDataset target;
    target.domain_tag = "target";
    target.class_count = 2;
    target.features.resize(n_target, opts.dim);
    target.labels.emplace(static_cast<std::size_t>(n_target));
    Rng tgt_rng(seed, 2 + (shift.seed << 1));
    for (Index i = 0; i < n_target; ++i) sample(tgt_rng, i, &shift, target);
    return {std::move(source), std::move(target)};
}

// ---------------------------------------------------------------------------
// CSV file format
//
//   #hypersfda-embeddings v1 dim=<d> classes=<C> labeled=<0|1> domain=<tag>
//   <label-or-dash>,<f_1>,...,<f_d>
//
// Floats are written in shortest round-trip form, so save/load is bit exact.

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string line_error(const std::string& path, std::size_t line, const std::string& what) {
    return path + ":" + std::to_string(line) + ": " + what;
}

}  // namespace detail

inline void write_dataset(std::ostream& out, const EmbeddingDataset& ds) {
    ds.validate();
    out << "#hypersfda-embeddings v1 dim=" << ds.dim() << " classes=" << ds.class_count << " labeled=" << (ds.labeled() ? 1 : 0)
        << " domain=" << ds.domain_tag << '\n';
    std::string line;
    for (Index i = 0; i < ds.size(); ++i) {
        line.clear();
        if (ds.labels)
            line += std::to_string((*ds.labels)[static_cast<std::size_t>(i)]);
        else
            line += '-';
        for (Index j = 0; j < ds.dim(); ++j) {
            line += ',';
            line += detail::format_double(ds.features(i, j));
        }
        line += '\n';
        out << line;
    }
}

inline EmbeddingDataset read_dataset(std::istream& in, const std::string& name = "<stream>") {
    std::string header;
    if (!std::getline(in, header)) throw ParseError(detail::line_error(name, 1, "missing header"));
    if (!header.empty() && header.back() == '\r') header.pop_back();

    std::istringstream hs(header);
    std::string magic, version;
    hs >> magic >> version;
    if (magic != "#hypersfda-embeddings") throw ParseError(detail::line_error(name, 1, "bad magic '" + magic + "'"));
    if (version != "v1") throw ParseError(detail::line_error(name, 1, "unsupported version '" + version + "'"));

    long long dim = -1, classes = -1, labeled = -1;
    std::string domain;
    bool have_domain = false;
    std::string field;
    while (hs >> field) {
        const auto eq = field.find('=');
        if (eq == std::string::npos) throw ParseError(detail::line_error(name, 1, "malformed header field '" + field + "'"));
        const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
        auto as_int = [&](long long& dst) {
            auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), dst);
            if (ec != std::errc() || ptr != value.data() + value.size())
                throw ParseError(detail::line_error(name, 1, "header field '" + key + "' is not an integer"));
        };
        if (key == "dim")
            as_int(dim);
        else if (key == "classes")
            as_int(classes);
        else if (key == "labeled")
            as_int(labeled);
        else if (key == "domain") {
            domain = value;
            have_domain = true;
        } else
            throw ParseError(detail::line_error(name, 1, "unknown header field '" + key + "'"));
    }
    if (dim < 1 || classes < 1 || (labeled != 0 && labeled != 1) || !have_domain)
        throw ParseError(detail::line_error(name, 1, "header must declare dim>=1, classes>=1, labeled=0|1 and domain"));

    EmbeddingDataset ds;
    ds.class_count = static_cast<int>(classes);
    ds.domain_tag = domain;
    if (labeled) ds.labels.emplace();

    std::vector<double> values;
    std::string line;
    std::size_t lineno = 1;
    Index rows = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::string_view rest(line);
        auto next_cell = [&]() -> std::string_view {
            const auto comma = rest.find(',');
            std::string_view cell = rest.substr(0, comma);
            rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
            return cell;
        };
        const bool more_after_label = rest.find(',') != std::string_view::npos;
        std::string_view label_cell = next_cell();
        if (labeled) {
            long long y = 0;
            auto [ptr, ec] = std::from_chars(label_cell.data(), label_cell.data() + label_cell.size(), y);
            if (ec != std::errc() || ptr != label_cell.data() + label_cell.size())
                throw ParseError(detail::line_error(name, lineno, "invalid label '" + std::string(label_cell) + "'"));
            if (y < 0 || y >= classes)
                throw ValidationError(detail::line_error(name, lineno, "label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")"));
            ds.labels->push_back(static_cast<int>(y));
        } else if (label_cell != "-") {
            throw ParseError(detail::line_error(name, lineno, "expected '-' label in unlabeled file"));
        }
        long long count = 0;
        if (more_after_label) {
            while (true) {
                const bool last = rest.find(',') == std::string_view::npos;
                std::string_view cell = next_cell();
                double v = 0.0;
                auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
                if (ec != std::errc() || ptr != cell.data() + cell.size())
                    throw ParseError(detail::line_error(name, lineno, "invalid number '" + std::string(cell) + "'"));
                if (!std::isfinite(v)) throw ParseError(detail::line_error(name, lineno, "non-finite value"));
                values.push_back(v);
                ++count;
                if (last) break;
            }
        }
        if (count != dim)
            throw ParseError(detail::line_error(name, lineno, "row has " + std::to_string(count) + " values, header declares dim=" + std::to_string(dim)));
        ++rows;
    }
    if (rows < 1) throw ParseError(detail::line_error(name, lineno, "no samples"));
    ds.features = Eigen::Map<Matrix>(values.data(), rows, static_cast<Index>(dim));
    ds.validate();
    return ds;
}

inline void save_dataset(const EmbeddingDataset& ds, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    write_dataset(out, ds);
    if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

inline EmbeddingDataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open dataset '" + path.string() + "'");
    return read_dataset(in, path.string());
}

}  // namespace hypersfda
