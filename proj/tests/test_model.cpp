#include "hypersfda/model.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <sstream>

using namespace hypersfda;

namespace {

Matrix random_matrix(Rng& rng, Index r, Index c, double scale = 1.0) {
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
    return m;
}

}  // namespace

TEST(Model, ForwardProducesDistributionsAndReluFeatures) {
    Rng rng(1);
    const AdaptModel m = make_model(5, 7, 3, 2);
    const Matrix x = random_matrix(rng, 9, 5);
    const ForwardResult fw = forward(m, x);
    EXPECT_EQ(fw.features.rows(), 9);
    EXPECT_EQ(fw.features.cols(), 7);
    EXPECT_GE(fw.features.minCoeff(), 0.0);
    for (Index i = 0; i < 9; ++i) EXPECT_NEAR(fw.probs.row(i).sum(), 1.0, 1e-12);
    EXPECT_THROW(forward(m, random_matrix(rng, 2, 4)), ShapeError);
}

TEST(Model, SoftmaxSurvivesHugeLogits) {
    Matrix logits(1, 3);
    logits << 1000.0, 999.0, -1000.0;
    const Matrix p = softmax_rows(logits);
    EXPECT_TRUE(p.allFinite());
    EXPECT_NEAR(p(0, 0), 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
}

TEST(Model, BackwardMatchesFiniteDifferences) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Index d = 1 + static_cast<Index>(rng.below(6)), dz = 1 + static_cast<Index>(rng.below(6)), c = 2 + static_cast<Index>(rng.below(5));
        AdaptModel m = make_model(d, dz, c, 10 + trial);
        m.w_f = random_matrix(rng, d, dz);
        const Matrix x = random_matrix(rng, 1 + static_cast<Index>(rng.below(6)), d);
        const Matrix up = random_matrix(rng, x.rows(), c);
        // L = <upstream, P>
        auto loss = [&](const AdaptModel& mm) { return forward(mm, x).probs.cwiseProduct(up).sum(); };
        const GradientSet analytic = backward(m, x, up);
        const GradientSet numeric = oracle::numeric_gradient(m, loss);
        EXPECT_LT(oracle::relative_error(analytic, numeric), 1e-6) << "trial " << trial;
    }
}

TEST(Model, SgdStepAppliesMomentum) {
    AdaptModel m = make_model(2, 2, 2, 0);
    const AdaptModel start = m;
    GradientSet g = GradientSet::zeros_like(m);
    g.b_g.setConstant(1.0);
    GradientSet v = GradientSet::zeros_like(m);
    sgd_step(m, g, 0.1, 0.5, v);
    sgd_step(m, g, 0.1, 0.5, v);
    // v1 = 1, v2 = 1.5 -> total move 0.1 * 2.5
    EXPECT_NEAR(m.b_g(0), start.b_g(0) - 0.25, 1e-15);
    EXPECT_TRUE(m.w_f == start.w_f);
}

TEST(Model, SgdRejectsNonFiniteGradientNamingTensor) {
    AdaptModel m = make_model(2, 2, 2, 0);
    GradientSet g = GradientSet::zeros_like(m);
    GradientSet v = GradientSet::zeros_like(m);
    g.w_g(1, 0) = std::nan("");
    try {
        sgd_step(m, g, 0.1, 0.9, v);
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("w_g"), std::string::npos);
    }
}

TEST(Model, PretrainingLearnsTheSource) {
    ShiftSpec shift;
    auto [src, tgt] = gen_gaussian_domains(4, 8, 400, 10, shift, 1);
    PretrainConfig cfg;
    cfg.epochs = 20;
    const auto res = pretrain_source(make_model(8, 8, 4, 1), src, cfg);
    EXPECT_GT(res.source_accuracy, 0.9);
    const auto again = pretrain_source(make_model(8, 8, 4, 1), src, cfg);
    EXPECT_TRUE(res.model == again.model);
}

TEST(Model, ArgmaxBreaksTiesLow) {
    Eigen::RowVectorXd p(3);
    p << 0.4, 0.4, 0.2;
    EXPECT_EQ(argmax_row(p), 0);
}

TEST(Checkpoint, RoundTripAndLayout) {
    const AdaptModel m = make_model(3, 4, 2, 5);
    std::stringstream buf;
    write_model(buf, m);
    const std::string bytes = buf.str();
    ASSERT_EQ(bytes.size(), 4u + 2u + 12u + 8u * (3 * 4 + 4 + 4 * 2 + 2));
    EXPECT_EQ(bytes.substr(0, 4), "HSFD");
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1u);  // version, little endian
    EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 0u);
    EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 3u);  // d
    double first = 0.0;
    std::memcpy(&first, bytes.data() + 18, 8);
    EXPECT_EQ(first, m.w_f(0, 0));
    double second = 0.0;
    std::memcpy(&second, bytes.data() + 26, 8);
    EXPECT_EQ(second, m.w_f(0, 1));  // row-major
    std::stringstream in(bytes);
    EXPECT_TRUE(read_model(in) == m);
}

TEST(Checkpoint, RejectsCorruptFiles) {
    const AdaptModel m = make_model(3, 4, 2, 5);
    std::stringstream buf;
    write_model(buf, m);
    std::string bytes = buf.str();
    std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
    EXPECT_THROW(read_model(truncated), ParseError);
    std::string wrong = bytes;
    wrong[0] = 'X';
    std::stringstream magic(wrong);
    EXPECT_THROW(read_model(magic), ParseError);
    std::string ver = bytes;
    ver[4] = 9;
    std::stringstream version(ver);
    EXPECT_THROW(read_model(version), ParseError);
}

TEST(Checkpoint, FileSaveLoad) {
    const auto path = std::filesystem::temp_directory_path() / "hypersfda_model_test.bin";
    const AdaptModel m = make_model(6, 3, 3, 8);
    save_model(m, path);
    EXPECT_TRUE(load_model(path) == m);
    EXPECT_FALSE(std::filesystem::exists(path.string() + ".tmp"));
    std::filesystem::remove(path);
}
