#include <gtest/gtest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "hardnoise/pipeline.hpp"

using namespace hardnoise;
namespace fs = std::filesystem;

namespace {

nlohmann::json small_config() {
    return nlohmann::json::parse(R"({
        "seed": 5,
        "grid": {"levels": 5, "classes_per_cell": 1, "per_class_count": 64, "input_dim": 8},
        "hardness": {"type": "imbalance"},
        "noise": {"delta": 0.4},
        "train": {"hidden": [16], "feature_dim": 8, "epochs": 6, "batch_size": 32, "learning_rate": 0.05},
        "methods": ["2d-GMM_acc-SCD"]
    })");
}

fs::path scratch_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("hardnoise_test_" + std::to_string(getpid())) / name;
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

class PipelineRun : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        auto j = small_config();
        j["methods"] = "comparison";
        j["eval"] = {{"retrain", {{"methods", {"2d-GMM_acc-SCD"}}, {"seeds", {1}}}}};
        cfg_ = new PipelineConfig(config_from_json(j));
        dir_ = new fs::path(scratch_dir("shared"));
        run_pipeline(*cfg_, *dir_);
    }
    static void TearDownTestSuite() {
        fs::remove_all(dir_->parent_path());
        delete cfg_;
        delete dir_;
    }
    static PipelineConfig* cfg_;
    static fs::path* dir_;
};

PipelineConfig* PipelineRun::cfg_ = nullptr;
fs::path* PipelineRun::dir_ = nullptr;

}  // namespace

TEST(Config, DefaultsAndRoundTrip) {
    const auto c = config_from_json(small_config());
    EXPECT_EQ(c.grid.levels, 5);
    EXPECT_EQ(c.hardness.type, HardnessType::imbalance);
    EXPECT_EQ(c.methods, std::vector<std::string>{"2d-GMM_acc-SCD"});
    EXPECT_EQ(seed_plan(c).retrain.size(), 3u);
    const auto back = config_from_json(config_to_json(c));
    EXPECT_EQ(config_to_json(back), config_to_json(c));
    EXPECT_EQ(config_digest(back), config_digest(c));
    EXPECT_EQ(config_from_json(nlohmann::json::object()).methods, comparison_method_names());
}

TEST(Config, SeedsDeriveFromRunSeed) {
    auto a = config_from_json(small_config());
    auto b = a;
    b.seed = 6;
    const auto pa = seed_plan(a), pb = seed_plan(b);
    EXPECT_NE(pa.grid, pb.grid);
    EXPECT_NE(pa.train, pb.train);
    EXPECT_NE(pa.grid, pa.noise);
    EXPECT_NE(config_digest(a), config_digest(b));
}

TEST(Config, Rejections) {
    auto bad = [](auto edit) {
        auto j = small_config();
        edit(j);
        return j;
    };
    EXPECT_THROW(config_from_json(bad([](auto& j) { j["hardness"]["type"] = "cosmic"; })), ConfigError);
    EXPECT_THROW(config_from_json(bad([](auto& j) { j["noise"]["delta"] = 1.5; })), ConfigError);
    EXPECT_THROW(config_from_json(bad([](auto& j) { j["colour"] = 1; })), ConfigError);
    EXPECT_THROW(config_from_json(bad([](auto& j) { j["grid"]["levles"] = 5; })), ConfigError);
    EXPECT_THROW(config_from_json(bad([](auto& j) { j["methods"] = {"no-such-method"}; })), UnknownMethodError);
    EXPECT_THROW(config_from_json(bad([](auto& j) { j["methods"] = nlohmann::json::array(); })), ConfigError);
    EXPECT_THROW(config_from_json(bad([](auto& j) { j["grid"]["levels"] = "five"; })), ConfigError);
    EXPECT_THROW(config_from_json(bad([](auto& j) { j["eval"] = {{"h_threshold", 5}}; })), ConfigError);
    EXPECT_THROW(config_from_json(bad([](auto& j) {
                     j["hardness"] = {{"type", "boundary"}, {"eps_by_h", {0.0, 0.1, 0.2}}};
                 })),
                 ConfigError);
    EXPECT_THROW(config_from_json(bad([](auto& j) {
                     j["hardness"] = {{"type", "boundary"}, {"eps_by_h", {0.0, 0.3, 0.2, 0.4, 0.5}}};
                 })),
                 ConfigError);
}

TEST(Config, LoadFromFile) {
    const auto dir = scratch_dir("config");
    fs::create_directories(dir);
    std::ofstream(dir / "ok.json") << small_config().dump();
    std::ofstream(dir / "broken.json") << "{\"seed\": ";
    EXPECT_EQ(load_config(dir / "ok.json").seed, 5u);
    EXPECT_THROW(load_config(dir / "broken.json"), ConfigError);
    fs::remove_all(dir);
}

TEST(Pipeline, MinimalConfigGivesOneMethodRow) {
    const auto cfg = config_from_json(small_config());
    const auto dir = scratch_dir("minimal");
    run_pipeline(cfg, dir);
    const auto csv = slurp(dir / "report/report.csv");
    EXPECT_EQ(line_count(csv), 3u);  // header, baseline, one method
    EXPECT_NE(csv.find("\nOriginal dataset,"), std::string::npos);
    EXPECT_NE(csv.find("\n2d-GMM_acc-SCD,"), std::string::npos);
    fs::remove_all(dir);
}

TEST_F(PipelineRun, ComparisonMethodsGiveEightRows) {
    const auto csv = slurp(*dir_ / "report/report.csv");
    EXPECT_EQ(line_count(csv), 9u);
    for (const auto& m : comparison_method_names()) EXPECT_NE(csv.find("\n" + m + ","), std::string::npos) << m;
}

TEST_F(PipelineRun, ArtifactsAndManifest) {
    for (const char* f : {"config.json", "manifest.json", "data/train.csv", "data/test.json", "train/traces.csv",
                          "train/snapshot_mid.csv", "train/snapshot_end.csv", "train/model.json",
                          "metrics/metrics.csv", "partition/2d-GMM_acc-SCD.csv", "eval/eval.csv",
                          "report/report.md", "report/cells.csv"})
        EXPECT_TRUE(fs::exists(*dir_ / f)) << f;
    EXPECT_FALSE(fs::exists(*dir_ / "oracle/model.json"));
    const auto m = RunManifest::from_json(nlohmann::json::parse(slurp(*dir_ / "manifest.json")));
    EXPECT_EQ(m.completed.size(), stage_names().size());
    EXPECT_FALSE(m.failed_stage.has_value());
    for (const auto& [rel, digest] : m.files) EXPECT_EQ(sha256_hex(slurp(*dir_ / rel)), digest) << rel;
    EXPECT_EQ(m.config_digest, config_digest(*cfg_));
}

TEST_F(PipelineRun, CellsHaveOneRowPerGridCell) {
    const auto cells = slurp(*dir_ / "report/cells.csv");
    EXPECT_EQ(line_count(cells), 1u + 25u);
}

TEST_F(PipelineRun, CsvAndMarkdownAgree) {
    const auto csv = io::parse_csv(slurp(*dir_ / "report/report.csv"));
    const auto md = slurp(*dir_ / "report/report.md");
    for (const auto& row : csv.rows) {
        std::string expect = "| " + row[csv.column("method")] + " | " + row[csv.column("clean_size")];
        for (const char* col : {"correct_label_fraction", "precision_n", "recall_n", "recall_h", "estimated_lnl"})
            expect += " | " + row[csv.column(col)];
        EXPECT_NE(md.find(expect), std::string::npos) << expect;
    }
}

TEST_F(PipelineRun, RetrainOnlyWhereConfigured) {
    const auto csv = io::parse_csv(slurp(*dir_ / "report/report.csv"));
    for (const auto& row : csv.rows) {
        const auto& m = row[csv.column("method")];
        const bool retrained = row[csv.column("test_accuracy_mean")] != "NA";
        EXPECT_EQ(retrained, m == "2d-GMM_acc-SCD" || m == "Original dataset") << m;
    }
}

TEST_F(PipelineRun, RerunWithoutForceIsNoOp) {
    const auto before = slurp(*dir_ / "manifest.json");
    const auto t = fs::last_write_time(*dir_ / "report/report.csv");
    run_pipeline(*cfg_, *dir_);
    EXPECT_EQ(fs::last_write_time(*dir_ / "report/report.csv"), t);
    const auto a = nlohmann::json::parse(before), b = nlohmann::json::parse(slurp(*dir_ / "manifest.json"));
    EXPECT_EQ(a["files"], b["files"]);
    EXPECT_EQ(a["stages"], b["stages"]);
}

TEST_F(PipelineRun, SingleStageRerunReproducesArtifacts) {
    const auto report = slurp(*dir_ / "report/report.csv");
    RunOptions o;
    o.stage = "report";
    o.force = true;
    run_pipeline(*cfg_, *dir_, o);
    EXPECT_EQ(slurp(*dir_ / "report/report.csv"), report);
}

TEST(Pipeline, IdenticalRunsAreByteIdentical) {
    const auto cfg = config_from_json(small_config());
    const auto a = scratch_dir("det_a"), b = scratch_dir("det_b");
    run_pipeline(cfg, a);
    run_pipeline(cfg, b);
    for (const char* f : {"data/train.csv", "train/traces.csv", "metrics/metrics.csv", "eval/eval.csv",
                          "report/report.csv", "report/cells.csv"})
        EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Pipeline, TamperedArtifactIsDetected) {
    const auto cfg = config_from_json(small_config());
    const auto dir = scratch_dir("tamper");
    RunOptions gen;
    gen.stage = "gen";
    run_pipeline(cfg, dir, gen);
    std::ofstream(dir / "data/train.csv", std::ios::app) << "999999,0,0,0,0,,0\n";
    RunOptions train;
    train.stage = "train";
    try {
        run_pipeline(cfg, dir, train);
        FAIL() << "expected a stage error";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "train");
        EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
    }
    const auto m = RunManifest::from_json(nlohmann::json::parse(slurp(dir / "manifest.json")));
    EXPECT_EQ(m.failed_stage, "train");
    EXPECT_EQ(m.completed.count("train"), 0u);
    fs::remove_all(dir);
}

TEST(Pipeline, MissingPrerequisite) {
    const auto cfg = config_from_json(small_config());
    const auto dir = scratch_dir("prereq");
    RunOptions o;
    o.stage = "eval";
    try {
        run_pipeline(cfg, dir, o);
        FAIL() << "expected a stage error";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "eval");
        EXPECT_NE(std::string(e.what()).find("gen"), std::string::npos);
    }
    o.stage = "bogus";
    EXPECT_THROW(run_pipeline(cfg, dir, o), ConfigError);
    fs::remove_all(dir);
}

TEST(Pipeline, ChangedConfigNeedsForce) {
    auto cfg = config_from_json(small_config());
    const auto dir = scratch_dir("changed");
    RunOptions gen;
    gen.stage = "gen";
    run_pipeline(cfg, dir, gen);
    cfg.noise.delta = 0.2;
    EXPECT_THROW(run_pipeline(cfg, dir, gen), ConfigError);
    gen.force = true;
    EXPECT_NO_THROW(run_pipeline(cfg, dir, gen));
    const auto m = RunManifest::from_json(nlohmann::json::parse(slurp(dir / "manifest.json")));
    EXPECT_EQ(m.config_digest, config_digest(cfg));
    EXPECT_EQ(m.completed.count("gen"), 1u);
    fs::remove_all(dir);
}

TEST(Pipeline, BoundaryRunPersistsOracle) {
    auto j = small_config();
    j["hardness"] = {{"type", "boundary"}, {"eps_max", 0.5}};
    j["oracle"] = {{"epochs", 4}};
    const auto cfg = config_from_json(j);
    EXPECT_EQ(cfg.oracle.hidden, cfg.model.hidden);
    const auto dir = scratch_dir("boundary");
    RunOptions gen;
    gen.stage = "gen";
    run_pipeline(cfg, dir, gen);
    EXPECT_TRUE(fs::exists(dir / "oracle/model.json"));
    fs::remove_all(dir);
}
