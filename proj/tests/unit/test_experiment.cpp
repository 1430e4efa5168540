#include "proxbin/checkpoint.hpp"
#include "proxbin/errors.hpp"
#include "proxbin/experiment.hpp"
#include "proxbin/packing.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <json.hpp>

namespace proxbin {
namespace {

ExperimentConfig small_config(const std::filesystem::path& out, const std::string& algorithm) {
    ExperimentConfig c;
    c.algorithm = algorithm;
    c.out = out;
    c.epochs = 2;
    c.data.blobs_train = 400;
    c.data.blobs_test = 200;
    c.model.hidden = {16, 16};
    return c;
}

TEST(Config, ParsesSectionsAndDefaults) {
    const ExperimentConfig c = parse_config(R"(
algorithm = "bnn++"
epochs = 3
[data]
blobs_classes = 3
[model]
hidden = [32, 8]
[schedule]
eta = 0.1
mu0 = 4
)");
    EXPECT_EQ(c.algorithm, "bnn++");
    EXPECT_EQ(c.epochs, 3u);
    EXPECT_EQ(c.data.blobs_classes, 3u);
    EXPECT_EQ(c.model.hidden, (std::vector<std::size_t>{32, 8}));
    EXPECT_EQ(c.schedule.eta, 0.1);
    EXPECT_EQ(c.schedule.mu0, 4.0);
    EXPECT_EQ(c.batch_size, 64u);
}

TEST(Config, UnknownKeyRejected) {
    EXPECT_THROW(parse_config("algoritm = \"bc\""), ConfigError);
    EXPECT_THROW(parse_config("[schedule]\nlearning_rate = 0.1"), ConfigError);
}

TEST(Config, WrongTypeRejected) { EXPECT_THROW(parse_config("epochs = \"five\""), ConfigError); }

TEST(Config, SyntaxErrorIsConfigError) { EXPECT_THROW(parse_config("epochs = = 3"), ConfigError); }

TEST(Config, InvalidCombinations) {
    EXPECT_THROW(parse_config("algorithm = \"sgd\""), ConfigError);
    EXPECT_THROW(parse_config("task_mode = \"BWAA\"\nactivations = false"), ConfigError);
    EXPECT_THROW(parse_config("algorithm = \"fp\"\ntask_mode = \"BWA\""), ConfigError);
    EXPECT_THROW(parse_config("algorithm = \"pq\"\npair = \"bc\""), ConfigError);
    EXPECT_THROW(parse_config("pipeline = \"fine-tune\""), ConfigError);
    EXPECT_THROW(parse_config("[data]\nkind = \"idx\""), ConfigError);
    EXPECT_THROW(parse_config("[model]\npreset = \"custom\""), ConfigError);
}

TEST(Config, EchoRoundTrip) {
    ExperimentConfig c;
    c.algorithm = "pc";
    c.pair = "bnn+";
    c.seed = 99;
    c.schedule.clip_norm = 3.5;
    c.schedule.rho_end = 2.0;
    c.model.input_mean = {0.5};
    c.model.input_std = {0.25};
    LayerSpec l;
    l.kind = LayerKind::linear;
    l.in = 16;
    l.out = 4;
    c.model.preset = "custom";
    c.model.layers = {l};
    const std::string text = echo_config(c);
    const ExperimentConfig back = parse_config(text);
    EXPECT_EQ(echo_config(back), text);
    EXPECT_EQ(back.pair, c.pair);
    EXPECT_EQ(back.schedule.clip_norm, 3.5);
    EXPECT_FALSE(back.schedule.mu0.has_value());
    EXPECT_NE(text.find("# mu0 unset"), std::string::npos);
}

TEST(Metrics, HeaderAndRowFormat) {
    EXPECT_EQ(metrics_header().substr(0, 7), "schema,");
    MetricsRow r;
    r.phase = "train";
    r.epoch = 2;
    r.step = 10;
    r.train_loss = 0.5;
    EXPECT_EQ(format_metrics_row(r), "1,train,2,10,0.5,0,0,0,0,0,0,0");
}

TEST(RunExperiment, FullPrecisionLearnsBlobs) {
    testing::TempDir dir("fp");
    ExperimentConfig c = small_config(dir.path(), "fp");
    c.epochs = 5;
    const RunResult r = run_experiment(c);
    ASSERT_FALSE(r.diverged) << r.message;
    EXPECT_GT(r.final_test_acc, 0.95);
    for (const char* f : {"metrics.csv", "timing.csv", "config.toml", "status.json", "model.ckpt", "model.ckpt.json"})
        EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
    EXPECT_FALSE(std::filesystem::exists(dir / "model.bqw"));
}

TEST(RunExperiment, BinaryConnectEqualsUnrampedBnnPlusPlusWithSignPair) {
    testing::TempDir a("bc"), b("bnnpp");
    const RunResult ra = run_experiment(small_config(a.path(), "bc"));
    ExperimentConfig cb = small_config(b.path(), "bnn++");
    cb.pair = "bc";
    cb.schedule.mu_ramp = false;
    const RunResult rb = run_experiment(cb);
    ASSERT_FALSE(ra.diverged);
    ASSERT_FALSE(rb.diverged);
    EXPECT_EQ(testing::slurp(a / "metrics.csv"), testing::slurp(b / "metrics.csv"));
}

TEST(RunExperiment, DeterministicUnderSeed) {
    testing::TempDir a("det1"), b("det2");
    run_experiment(small_config(a.path(), "pc"));
    run_experiment(small_config(b.path(), "pc"));
    EXPECT_EQ(testing::slurp(a / "metrics.csv"), testing::slurp(b / "metrics.csv"));
    EXPECT_EQ(testing::slurp(a / "model.bqw"), testing::slurp(b / "model.bqw"));
}

TEST(RunExperiment, BnnPlusPlusExportIsFullyBinary) {
    testing::TempDir dir("export");
    const RunResult r = run_experiment(small_config(dir.path(), "bnn++"));
    ASSERT_FALSE(r.rows.empty());
    EXPECT_EQ(r.rows.back().phase, "export");
    EXPECT_EQ(r.rows.back().fraction_binary, 1.0);
    EXPECT_EQ(r.rows.back().mu, 30.0);
    EXPECT_EQ(read_bqw(dir / "model.bqw").size(), 1u);
}

TEST(RunExperiment, EveryAlgorithmRuns) {
    for (const std::string& algorithm : algorithm_names()) {
        testing::TempDir dir("zoo");
        ExperimentConfig c = small_config(dir.path(), algorithm);
        c.epochs = 1;
        const RunResult r = run_experiment(c);
        ASSERT_FALSE(r.diverged) << algorithm << ": " << r.message;
        for (const MetricsRow& row : r.rows) {
            EXPECT_GE(row.fraction_binary, 0.0);
            EXPECT_LE(row.fraction_binary, 1.0);
        }
        if (is_binarizing(algorithm)) {
            EXPECT_EQ(r.rows.back().fraction_binary, 1.0) << algorithm;
        }
    }
}

TEST(RunExperiment, RampsReachEndpoints) {
    testing::TempDir dir("ramp");
    const RunResult r = run_experiment(small_config(dir.path(), "pc"));
    EXPECT_EQ(r.rows.back().rho, 10.0);
}

TEST(RunExperiment, BwaaReportsOverflow) {
    testing::TempDir dir("bwaa");
    ExperimentConfig c = small_config(dir.path(), "bc");
    c.task_mode = "BWAA";
    const RunResult r = run_experiment(c);
    ASSERT_FALSE(r.diverged) << r.message;
    ASSERT_FALSE(r.overflow.empty());
    for (const LayerOverflow& o : r.overflow) {
        EXPECT_GE(o.rate, 0.0);
        EXPECT_LE(o.rate, 1.0);
    }
    EXPECT_TRUE(std::filesystem::exists(dir / "overflow.csv"));
}

TEST(RunExperiment, FineTuneFromCheckpoint) {
    testing::TempDir pre("pre"), fine("fine");
    ExperimentConfig c = small_config(pre.path(), "fp");
    run_experiment(c);
    ExperimentConfig f = small_config(fine.path(), "bnn++");
    f.pipeline = "fine-tune";
    f.checkpoint = pre / "model.ckpt";
    f.epochs = 1;
    const RunResult r = run_experiment(f);
    ASSERT_FALSE(r.diverged);
    EXPECT_GT(r.final_test_acc, 0.9);

    ExperimentConfig bad = f;
    bad.out = fine / "bad";
    bad.model.hidden = {8, 8};
    EXPECT_THROW(run_experiment(bad), ConfigError);
}

TEST(RunExperiment, DivergenceRecordsLastGoodEpoch) {
    testing::TempDir dir("div");
    ExperimentConfig c = small_config(dir.path(), "fp");
    c.schedule.eta = 1e300;
    const RunResult r = run_experiment(c);
    EXPECT_TRUE(r.diverged);
    const nlohmann::json status = nlohmann::json::parse(testing::slurp(dir / "status.json"));
    EXPECT_EQ(status["status"], "diverged");
    EXPECT_EQ(status["last_good_epoch"], r.last_good_epoch);
}

} // namespace
} // namespace proxbin
