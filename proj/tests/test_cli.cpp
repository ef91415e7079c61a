#include "hypersfda/hypersfda.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

namespace fs = std::filesystem;
using namespace hypersfda;

namespace {

struct CliRun {
    int code = -1;
    std::string out, err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class Cli : public ::testing::Test {
protected:
    fs::path dir;

    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir = fs::temp_directory_path() / (std::string("hypersfda_cli_") + info->name());
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }

    CliRun run(const std::string& args) const {
        const fs::path o = dir / "stdout.txt", e = dir / "stderr.txt";
        const std::string cmd = std::string("\"") + HYPERSFDA_CLI + "\" " + args + " >\"" + o.string() + "\" 2>\"" + e.string() + "\"";
        const int status = std::system(cmd.c_str());
        return CliRun{WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(o), slurp(e)};
    }

    std::string p(const std::string& rel) const { return (dir / rel).string(); }

    void gen(const std::string& sub, const std::string& extra = "") const {
        const CliRun r = run("gen --kind gaussian --classes 3 --dim 6 --n-source 150 --n-target 120 --rotate-deg 30 --noise 0.5 --seed 7 --out " + p(sub) + " " + extra);
        ASSERT_EQ(r.code, 0) << r.err;
    }

    void pretrain(const std::string& data, const std::string& sub) const {
        const CliRun r = run("pretrain --source " + p(data + "/source.csv") + " --epochs 10 --out " + p(sub) + " --quiet");
        ASSERT_EQ(r.code, 0) << r.err;
    }
};

}  // namespace

TEST_F(Cli, GenWritesMatchingFilesDeterministically) {
    gen("a");
    gen("b");
    const EmbeddingDataset s = load_dataset(p("a/source.csv")), t = load_dataset(p("a/target.csv"));
    EXPECT_EQ(s.dim(), 6);
    EXPECT_EQ(t.dim(), 6);
    EXPECT_EQ(s.class_count, t.class_count);
    EXPECT_EQ(slurp(p("a/source.csv")), slurp(p("b/source.csv")));
    EXPECT_EQ(slurp(p("a/target.csv")), slurp(p("b/target.csv")));
    const json m = json::parse(slurp(p("a/manifest.json")));
    EXPECT_EQ(m["command"], "gen");
    EXPECT_EQ(m["params"]["classes"], 3);
    EXPECT_EQ(m["status"], "ok");
}

TEST_F(Cli, GenFromManifestReproduces) {
    gen("a");
    const CliRun r = run("--config " + p("a/manifest.json") + " gen --out " + p("b"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(slurp(p("a/target.csv")), slurp(p("b/target.csv")));
}

TEST_F(Cli, GenRejectsBadArguments) {
    CliRun r = run("gen --classes 1 --out " + p("x"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("at least 2"), std::string::npos) << r.err;
    r = run("gen --kind spirals --out " + p("x"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("spirals"), std::string::npos);
    r = run("gen --no-such-flag");
    EXPECT_EQ(r.code, 2);
    r = run("");
    EXPECT_EQ(r.code, 2);
}

TEST_F(Cli, GenTwoMoons) {
    const CliRun r = run("gen --kind two-moons --dim 4 --n-source 50 --n-target 40 --out " + p("m"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(load_dataset(p("m/source.csv")).class_count, 2);
}

TEST_F(Cli, HelpListsDefaults) {
    const CliRun r = run("adapt --help");
    EXPECT_EQ(r.code, 0);
    for (const char* flag : {"--k", "--t-in", "--alpha", "--h", "--gamma", "--delta", "--eta", "--batch-size", "--lr", "--open-set"})
        EXPECT_NE(r.out.find(flag), std::string::npos) << flag;
    EXPECT_NE(r.out.find("0.001"), std::string::npos);
    const CliRun top = run("--help");
    EXPECT_EQ(top.code, 0);
    for (const char* flag : {"--seed", "--config", "--out", "--quiet"}) EXPECT_NE(top.out.find(flag), std::string::npos) << flag;
}

TEST_F(Cli, PretrainReachesHighAccuracyAndEvalAgrees) {
    ASSERT_EQ(run("gen --classes 4 --dim 16 --separation 8 --n-source 400 --n-target 50 --out " + p("d")).code, 0);
    const CliRun r = run("pretrain --source " + p("d/source.csv") + " --out " + p("m"));
    ASSERT_EQ(r.code, 0) << r.err;
    const double acc = json::parse(r.out)["source_accuracy"].get<double>();
    EXPECT_GE(acc, 0.99);
    const CliRun e1 = run("eval --checkpoint " + p("m/model.ckpt") + " --data " + p("d/source.csv"));
    const CliRun e2 = run("eval --checkpoint " + p("m/model.ckpt") + " --data " + p("d/source.csv"));
    ASSERT_EQ(e1.code, 0) << e1.err;
    EXPECT_EQ(json::parse(e1.out)["acc"].get<double>(), acc);
    EXPECT_EQ(e1.out, e2.out);
}

TEST_F(Cli, PretrainZeroEpochsKeepsInitialisation) {
    gen("d");
    const CliRun r = run("--seed 5 pretrain --source " + p("d/source.csv") + " --epochs 0 --out " + p("m"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(load_model(p("m/model.ckpt")) == make_model(6, 6, 3, 5));
}

TEST_F(Cli, PretrainErrors) {
    CliRun r = run("pretrain --source " + p("missing.csv") + " --out " + p("m"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("missing.csv"), std::string::npos);
    gen("d");
    EmbeddingDataset t = load_dataset(p("d/target.csv"));
    t.labels.reset();
    save_dataset(t, p("unlabeled.csv"));
    r = run("pretrain --source " + p("unlabeled.csv") + " --out " + p("m"));
    EXPECT_EQ(r.code, 2);
}

TEST_F(Cli, EvalErrors) {
    gen("d");
    pretrain("d", "m");
    std::ofstream(p("bad.ckpt")) << "not a checkpoint";
    EXPECT_EQ(run("eval --checkpoint " + p("bad.ckpt") + " --data " + p("d/source.csv")).code, 2);
    EmbeddingDataset t = load_dataset(p("d/target.csv"));
    t.labels.reset();
    save_dataset(t, p("unlabeled.csv"));
    EXPECT_EQ(run("eval --checkpoint " + p("m/model.ckpt") + " --data " + p("unlabeled.csv")).code, 2);
}

TEST_F(Cli, AdaptIsDeterministicAndRecordsDefaults) {
    gen("d");
    pretrain("d", "m");
    const std::string common = " adapt --checkpoint " + p("m/model.ckpt") + " --target " + p("d/target.csv") + " --epochs 2 --batch-size 32 --quiet";
    ASSERT_EQ(run("--seed 1 --out " + p("r1") + common).code, 0);
    ASSERT_EQ(run("--seed 1 --out " + p("r2") + common).code, 0);
    EXPECT_EQ(slurp(p("r1/metrics.jsonl")), slurp(p("r2/metrics.jsonl")));
    EXPECT_EQ(slurp(p("r1/adapted.ckpt")), slurp(p("r2/adapted.ckpt")));
    EXPECT_EQ(slurp(p("r1/state.ckpt")), slurp(p("r2/state.ckpt")));

    const json m = json::parse(slurp(p("r1/manifest.json")));
    const json& c = m["params"];
    EXPECT_EQ(c["k"], 6);
    EXPECT_EQ(c["t_in"], 50);
    EXPECT_EQ(c["h"], 3);
    EXPECT_EQ(c["gamma"], 7.0);
    EXPECT_EQ(c["delta"], 0.8);
    EXPECT_EQ(c["eta"], 2.0);
    EXPECT_EQ(c["alpha"], 2.0);
    EXPECT_EQ(c["lr"], 1e-3);
    EXPECT_EQ(c["momentum"], 0.9);
    EXPECT_EQ(c["seed"], 1);
    EXPECT_EQ(c["epochs"], 2);

    // Re-running from the manifest alone reproduces the run.
    ASSERT_EQ(run("--config " + p("r1/manifest.json") + " --out " + p("r3") + " adapt --quiet").code, 0);
    EXPECT_EQ(slurp(p("r1/metrics.jsonl")), slurp(p("r3/metrics.jsonl")));
    EXPECT_EQ(slurp(p("r1/adapted.ckpt")), slurp(p("r3/adapted.ckpt")));
}

TEST_F(Cli, ConfigFileWithFlagOverride) {
    gen("d");
    pretrain("d", "m");
    std::ofstream(p("cfg.json")) << R"({"epochs": 1, "k": 5, "batch_size": 40})";
    const CliRun r = run("--config " + p("cfg.json") + " --out " + p("r") + " adapt --checkpoint " + p("m/model.ckpt") + " --target " +
                      p("d/target.csv") + " --k 4 --quiet");
    ASSERT_EQ(r.code, 0) << r.err;
    const json c = json::parse(slurp(p("r/manifest.json")))["params"];
    EXPECT_EQ(c["k"], 4);
    EXPECT_EQ(c["epochs"], 1);
    EXPECT_EQ(c["batch_size"], 40);
    std::ofstream(p("bad.json")) << R"({"kay": 5})";
    EXPECT_EQ(run("--config " + p("bad.json") + " adapt --checkpoint " + p("m/model.ckpt") + " --target " + p("d/target.csv")).code, 2);
}

TEST_F(Cli, AdaptResumeMatchesUninterrupted) {
    gen("d");
    pretrain("d", "m");
    const std::string common = " adapt --checkpoint " + p("m/model.ckpt") + " --target " + p("d/target.csv") + " --epochs 2 --batch-size 32 --t-in 3 --quiet";
    ASSERT_EQ(run("--out " + p("full") + common).code, 0);
    ASSERT_EQ(run("--out " + p("part") + common + " --stop-at 5").code, 0);
    EXPECT_EQ(json::parse(slurp(p("part/manifest.json")))["status"], "stopped");
    ASSERT_EQ(run("--out " + p("part") + common + " --resume " + p("part/state.ckpt")).code, 0);
    EXPECT_EQ(slurp(p("full/metrics.jsonl")), slurp(p("part/metrics.jsonl")));
    EXPECT_EQ(slurp(p("full/adapted.ckpt")), slurp(p("part/adapted.ckpt")));
}

TEST_F(Cli, AdaptRejectsDimensionMismatch) {
    gen("d");
    pretrain("d", "m");
    ASSERT_EQ(run("gen --classes 3 --dim 5 --n-source 20 --n-target 20 --out " + p("e")).code, 0);
    const CliRun r = run("adapt --checkpoint " + p("m/model.ckpt") + " --target " + p("e/target.csv") + " --out " + p("r"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("dim"), std::string::npos);
}

TEST_F(Cli, AdaptOpenSetRecordsSplit) {
    gen("d");
    pretrain("d", "m");
    const CliRun r = run("--out " + p("r") + " adapt --checkpoint " + p("m/model.ckpt") + " --target " + p("d/target.csv") + " --epochs 1 --open-set --quiet");
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream lines(slurp(p("r/metrics.jsonl")));
    std::string first;
    std::getline(lines, first);
    const json j = json::parse(first);
    ASSERT_TRUE(j.contains("open_set"));
    EXPECT_EQ(j["open_set"]["known"].get<int>() + j["open_set"]["unknown"].get<int>(), 120);
}

TEST_F(Cli, AdaptImprovesOnTheBenchmark) {
    ASSERT_EQ(run("--seed 1 gen --classes 4 --dim 16 --rotate-deg 30 --noise 1.0 --shift-seed 1 --out " + p("d")).code, 0);
    ASSERT_EQ(run("--seed 1 pretrain --source " + p("d/source.csv") + " --out " + p("m")).code, 0);
    const CliRun r = run("--seed 1 --out " + p("r") + " adapt --checkpoint " + p("m/model.ckpt") + " --target " + p("d/target.csv") + " --quiet");
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream lines(slurp(p("r/metrics.jsonl")));
    std::string line, first, last;
    while (std::getline(lines, line)) {
        if (first.empty()) first = line;
        last = line;
    }
    const json a = json::parse(first), b = json::parse(last);
    ASSERT_TRUE(b.value("final", false));
    EXPECT_GT(b["acc"].get<double>(), a["acc"].get<double>());
}
