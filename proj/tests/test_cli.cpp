#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "vgp/backbone.hpp"
#include "vgp/cli.hpp"
#include "vgp/config.hpp"
#include "vgp/rng.hpp"

using namespace vgp;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string tiny_config_text() {
    return R"([model]
image = 16
channels = 1
patch = 8
d = 12
d_ff = 16
blocks = 2
k = 3

[prompt]
m = 2
r = 4
alpha = 0.2
beta = 0.2

[train]
lr = 0.01
weight_decay = 0.05
epochs = 2
batch_size = 8
seed = 7
classes = 2
train_samples = 12
val_samples = 8

[paths]
data_dir = data
checkpoint_dir = checkpoints
report_dir = reports
)";
}

fs::path fresh_dir(const std::string& stem) {
    fs::path p = fs::temp_directory_path() / stem;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string write_config(const fs::path& dir, const std::string& text) {
    const fs::path path = dir / "run.cfg";
    std::ofstream os(path);
    os << text;
    return path.string();
}

std::string slurp(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Config, DefaultTextParses) {
    RunConfig cfg = parse_run_config(default_config_text());
    EXPECT_EQ(cfg.prompt_r, 32u);
    EXPECT_DOUBLE_EQ(cfg.alpha, 0.2);
    EXPECT_EQ(cfg.train.schedule, "cosine");
}

TEST(Config, UnknownKeyRejectedByName) {
    std::string text = tiny_config_text();
    text += "\n[model]\nwobble = 3\n";
    try {
        parse_run_config(text);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("model.wobble"), std::string::npos);
    }
}

TEST(Config, AlphaOutOfRangeNamesField) {
    std::string text = tiny_config_text();
    const auto pos = text.find("alpha = 0.2");
    text.replace(pos, 11, "alpha = 1.5");
    try {
        parse_run_config(text);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("alpha"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("[0, 1]"), std::string::npos);
    }
}

TEST(Config, FuzzedInvalidConfigsNeverSlipThrough) {
    Rng rng(99);
    const std::vector<std::string> poisons = {
        "[model]\nd = 0\n",
        "[model]\nk = 0\n",
        "[model]\npatch = 5\n",  // 16 % 5 != 0
        "[model]\nmystery = 1\n",
        "[prompt]\nr = 12\n",    // r must stay below d = 12
        "[prompt]\nr = 40\n",
        "[prompt]\nalpha = -0.3\n",
        "[prompt]\nbeta = 2\n",
        "[prompt]\ngamma = 0.5\n",
        "[train]\nlr = 0\n",
        "[train]\nlr = -1\n",
        "[train]\nepochs = 0\n",
        "[train]\nbatch_size = 0\n",
        "[train]\nschedule = linear\n",
        "[train]\nweight_decay = -0.05\n",
        "[train]\nclasses = 1\n",
        "[sparkle]\nx = 1\n",
        "no_equals_sign_here\n",
        "[paths]\ndata_dir =\n",
        "[train]\nepochs = banana\n",
    };
    std::size_t rejected = 0, trials = 0;
    for (int i = 0; i < 100; ++i) {
        std::string text = tiny_config_text();
        text += "\n" + poisons[rng.integer(poisons.size())];
        ++trials;
        try {
            parse_run_config(text);
        } catch (const ConfigError& e) {
            EXPECT_GT(std::string(e.what()).size(), 10u);
            ++rejected;
        }
    }
    EXPECT_EQ(rejected, trials);  // zero silent acceptances
}

TEST(Cli, TrainSyntheticOneEpochWritesOneMetricsRecord) {
    const fs::path dir = fresh_dir("vgp_cli_train1");
    const std::string cfg = write_config(dir, tiny_config_text());
    int code = run_cli({"train", "--config", cfg, "--synthetic", "--epochs", "1", "--out",
                        dir.string()});
    EXPECT_EQ(code, 0);
    const std::string metrics = slurp(dir / "reports" / "metrics.jsonl");
    std::size_t lines = 0;
    for (char c : metrics)
        if (c == '\n') ++lines;
    EXPECT_EQ(lines, 1u);
    json rec = json::parse(metrics.substr(0, metrics.find('\n')));
    EXPECT_EQ(rec.at("epoch").get<int>(), 0);
    EXPECT_TRUE(rec.contains("lr"));
    EXPECT_TRUE(rec.contains("train_loss"));
    EXPECT_TRUE(rec.contains("train_acc"));
    EXPECT_TRUE(rec.contains("val_acc"));
    fs::remove_all(dir);
}

TEST(Cli, InvalidConfigExitsTwo) {
    const fs::path dir = fresh_dir("vgp_cli_badcfg");
    std::string text = tiny_config_text();
    const auto pos = text.find("alpha = 0.2");
    text.replace(pos, 11, "alpha = 1.5");
    const std::string cfg = write_config(dir, text);
    EXPECT_EQ(run_cli({"train", "--config", cfg, "--synthetic", "--out", dir.string()}), 2);
    fs::remove_all(dir);
}

TEST(Cli, SeededRunsProduceByteIdenticalMetrics) {
    const fs::path dir_a = fresh_dir("vgp_cli_det_a");
    const fs::path dir_b = fresh_dir("vgp_cli_det_b");
    const std::string cfg_a = write_config(dir_a, tiny_config_text());
    const std::string cfg_b = write_config(dir_b, tiny_config_text());
    ASSERT_EQ(run_cli({"train", "--config", cfg_a, "--synthetic", "--seed", "7", "--out",
                       dir_a.string()}),
              0);
    ASSERT_EQ(run_cli({"train", "--config", cfg_b, "--synthetic", "--seed", "7", "--out",
                       dir_b.string()}),
              0);
    EXPECT_EQ(slurp(dir_a / "reports" / "metrics.jsonl"),
              slurp(dir_b / "reports" / "metrics.jsonl"));
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST(Cli, EvalReadsBackCheckpoint) {
    const fs::path dir = fresh_dir("vgp_cli_eval");
    const std::string cfg = write_config(dir, tiny_config_text());
    ASSERT_EQ(run_cli({"train", "--config", cfg, "--synthetic", "--epochs", "1", "--out",
                       dir.string()}),
              0);
    ::testing::internal::CaptureStdout();
    int code = run_cli({"eval", "--config", cfg, "--checkpoint",
                        (dir / "checkpoints").string(), "--synthetic", "--dump-features",
                        (dir / "features").string()});
    const std::string out = ::testing::internal::GetCapturedStdout();
    EXPECT_EQ(code, 0);
    json rec = json::parse(out);
    EXPECT_GE(rec.at("accuracy").get<double>(), 0.0);
    EXPECT_LE(rec.at("accuracy").get<double>(), 1.0);
    // --dump-features wrote one VGPT matrix per layer
    Tensor layer0 = read_vgpt((dir / "features" / "features_layer0.vgpt").string());
    EXPECT_EQ(layer0.cols(), 12u);
    EXPECT_TRUE(fs::exists(dir / "features" / "features_layer1.vgpt"));
    fs::remove_all(dir);
}

TEST(Cli, AnalyzeRankOneBackboneReportsRankOne) {
    const fs::path dir = fresh_dir("vgp_cli_analyze");
    const std::string cfg = write_config(dir, tiny_config_text());

    // hand-build a checkpoint whose features stay rank-1 at every layer:
    // rank-1 embedder, residual-only blocks
    RunConfig run = load_run_config(cfg);
    Rng rng(5);
    BackboneParams params = BackboneParams::random(run.model, rng);
    {
        const std::size_t pvec = run.model.patch_vec(), d = run.model.d;
        std::vector<double> rank1(pvec * d);
        std::vector<double> u(pvec), v(d);
        for (auto& x : u) x = rng.normal();
        for (auto& x : v) x = rng.normal();
        for (std::size_t i = 0; i < pvec; ++i)
            for (std::size_t j = 0; j < d; ++j) rank1[i * d + j] = u[i] * v[j];
        params.embedder = Tensor::from({pvec, d}, std::move(rank1));
        for (auto& b : params.blocks) {
            b.w_update = Tensor::zeros({d, d});
            b.w2 = Tensor::zeros({run.model.d_ff, d});
        }
    }
    save_backbone((dir / "checkpoints" / "backbone").string(), params, run.model);
    write_vgpt((dir / "checkpoints" / "head.vgpt").string(),
               Tensor::zeros({run.model.d, 2}));

    int code = run_cli({"analyze", "--config", cfg, "--checkpoint",
                        (dir / "checkpoints").string(), "--synthetic", "--report-out",
                        (dir / "analysis").string()});
    ASSERT_EQ(code, 0);
    json report = json::parse(slurp(dir / "analysis" / "rank_report.json"));
    EXPECT_DOUBLE_EQ(report.at("epsilon").get<double>(), 0.25);
    EXPECT_EQ(report.at("mode").get<std::string>(), "relative");
    EXPECT_EQ(report.at("reference").at("CUB").get<int>(), 50);
    EXPECT_EQ(report.at("reference").at("Flowers").get<int>(), 60);
    EXPECT_EQ(report.at("reference").at("feature_dim").get<int>(), 768);
    EXPECT_EQ(report.at("layers")[0].at("est_rank").get<int>(), 1);
    EXPECT_TRUE(fs::exists(dir / "analysis" / "coeff_hist_layer0.csv"));
    EXPECT_TRUE(fs::exists(dir / "analysis" / "rgb_layer0.vgpt"));
    EXPECT_TRUE(fs::exists(dir / "analysis" / "topology_sample0.json"));
    fs::remove_all(dir);
}

TEST(Cli, AnalyzeCenterSubsetRestrictsRows) {
    const fs::path dir = fresh_dir("vgp_cli_analyze_center");
    const std::string cfg = write_config(dir, tiny_config_text());
    ASSERT_EQ(run_cli({"train", "--config", cfg, "--synthetic", "--epochs", "1", "--out",
                       dir.string()}),
              0);
    int code = run_cli({"analyze", "--config", cfg, "--checkpoint",
                        (dir / "checkpoints").string(), "--synthetic", "--samples", "2",
                        "--center", "0", "--report-out", (dir / "analysis").string()});
    ASSERT_EQ(code, 0);
    // k = 3 neighbors + the center itself, over 2 pooled samples
    Tensor feats = read_vgpt((dir / "analysis" / "features_layer0.vgpt").string());
    EXPECT_EQ(feats.rows(), 2u * 4u);
    EXPECT_EQ(feats.cols(), 12u);
    fs::remove_all(dir);
}

TEST(Cli, AnalyzeDimMismatchExitsTwo) {
    const fs::path dir = fresh_dir("vgp_cli_analyze_bad");
    const std::string cfg = write_config(dir, tiny_config_text());
    RunConfig run = load_run_config(cfg);
    Rng rng(6);
    BackboneConfig other = run.model;
    other.d = 10;  // differs from config's 12
    BackboneParams params = BackboneParams::random(other, rng);
    save_backbone((dir / "checkpoints" / "backbone").string(), params, other);
    int code = run_cli({"analyze", "--config", cfg, "--checkpoint",
                        (dir / "checkpoints").string(), "--synthetic"});
    EXPECT_EQ(code, 2);
    fs::remove_all(dir);
}

TEST(Cli, ReportRendersPaperReferenceRowAndCsv) {
    const fs::path dir = fresh_dir("vgp_cli_report");
    // minimal params file with hand numbers: 2x reduction, 2x flops
    json pj = {{"vgp",
                {{"total_params", 1000},
                 {"trainable_params", 100},
                 {"frozen_params", 900},
                 {"reduction_pct", 90.0},
                 {"approx_flops_forward", 3000}}},
               {"full_ft",
                {{"total_params", 1000},
                 {"trainable_params", 1000},
                 {"frozen_params", 0},
                 {"reduction_pct", 0.0},
                 {"approx_flops_forward", 2000}}}};
    const fs::path params = dir / "param_report.json";
    std::ofstream(params) << pj.dump();
    ::testing::internal::CaptureStdout();
    int code = run_cli({"report", "--params", params.string(), "--csv",
                        (dir / "table.csv").string()});
    const std::string table = ::testing::internal::GetCapturedStdout();
    EXPECT_EQ(code, 0);
    EXPECT_NE(table.find("48.68M"), std::string::npos);
    EXPECT_NE(table.find("2.61M"), std::string::npos);
    EXPECT_NE(table.find("-94.6%"), std::string::npos);
    EXPECT_NE(table.find("+3.1%"), std::string::npos);
    EXPECT_NE(table.find("-90.0%"), std::string::npos);
    EXPECT_NE(table.find("+50.0%"), std::string::npos);
    const std::string csv = slurp(dir / "table.csv");
    EXPECT_NE(csv.find("vgp_vig_m_reported,2610000,-94.6"), std::string::npos);
    fs::remove_all(dir);
}

TEST(Cli, ReportIdenticalTotalsShowZeroReduction) {
    const fs::path dir = fresh_dir("vgp_cli_report0");
    json pj = {{"vgp",
                {{"total_params", 500},
                 {"trainable_params", 500},
                 {"frozen_params", 0},
                 {"reduction_pct", 0.0},
                 {"approx_flops_forward", 2000}}},
               {"full_ft",
                {{"total_params", 500},
                 {"trainable_params", 500},
                 {"frozen_params", 0},
                 {"reduction_pct", 0.0},
                 {"approx_flops_forward", 2000}}}};
    const fs::path params = dir / "param_report.json";
    std::ofstream(params) << pj.dump();
    ::testing::internal::CaptureStdout();
    int code = run_cli({"report", "--params", params.string()});
    const std::string table = ::testing::internal::GetCapturedStdout();
    EXPECT_EQ(code, 0);
    EXPECT_NE(table.find("0.0%"), std::string::npos);
    EXPECT_EQ(table.find("-0.0%"), std::string::npos);
    fs::remove_all(dir);
}

TEST(Cli, ReportMissingFileExitsTwo) {
    EXPECT_EQ(run_cli({"report", "--params", "/nonexistent/params.json"}), 2);
}

TEST(Cli, GenDataWritesLoadableDataset) {
    const fs::path dir = fresh_dir("vgp_cli_gendata");
    int code = run_cli({"gen-data", "--out", dir.string(), "--train", "6", "--val", "4",
                        "--seed", "3", "--image", "16"});
    ASSERT_EQ(code, 0);
    Dataset train = load_dataset((dir / "train").string());
    Dataset val = load_dataset((dir / "val").string());
    EXPECT_EQ(train.images.size(), 6u);
    EXPECT_EQ(val.images.size(), 4u);
    EXPECT_EQ(train.images[0].shape(), (Shape{16, 16, 1}));
    fs::remove_all(dir);
}

TEST(Cli, UnknownSubcommandExitsTwo) {
    EXPECT_EQ(run_cli({"frobnicate"}), 2);
}

TEST(Cli, DivergentTrainingExitsThree) {
    const fs::path dir = fresh_dir("vgp_cli_nan");
    std::string text = tiny_config_text();
    const auto pos = text.find("lr = 0.01");
    text.replace(pos, 9, "lr = 1e30");  // blows up within a couple of steps
    const std::string cfg = write_config(dir, text);
    EXPECT_EQ(run_cli({"train", "--config", cfg, "--synthetic", "--out", dir.string()}), 3);
    fs::remove_all(dir);
}

TEST(Cli, VerifyCleanBuildReportsSixSuites) {
    ::testing::internal::CaptureStdout();
    int code = run_cli({"verify", "--seeds", "6"});
    const std::string out = ::testing::internal::GetCapturedStdout();
    EXPECT_EQ(code, 0);
    std::size_t passes = 0;
    for (std::size_t pos = out.find("[PASS]"); pos != std::string::npos;
         pos = out.find("[PASS]", pos + 1))
        ++passes;
    EXPECT_EQ(passes, 6u);
    EXPECT_NE(out.find("verification OK (6 suites)"), std::string::npos);
}

TEST(Cli, VerifyPlantedEdgeFaultFailsDualPathSuite) {
    ::testing::internal::CaptureStdout();
    int code = run_cli({"verify", "--seeds", "6", "--mutate-edge-path"});
    const std::string out = ::testing::internal::GetCapturedStdout();
    EXPECT_EQ(code, 1);
    EXPECT_NE(out.find("[FAIL] dual-path-equivalence"), std::string::npos);
}
