// hardnoise: run the hardness/noise separation experiment as composable stages.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "hardnoise/pipeline.hpp"

namespace fs = std::filesystem;
using namespace hardnoise;

namespace {

struct Options {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    bool force = false;
    std::string stage;
    std::string format = "markdown";
};

// --config wins; otherwise an existing run directory supplies its own config.json.
PipelineConfig resolve_config(const Options& o) {
    PipelineConfig cfg;
    if (!o.config.empty())
        cfg = load_config(o.config);
    else if (!o.out.empty() && fs::exists(fs::path(o.out) / "config.json"))
        cfg = load_config(fs::path(o.out) / "config.json");
    else
        throw ConfigError("no configuration: pass --config, or --out pointing at an existing run directory");
    if (o.seed) {
        cfg.seed = *o.seed;
        cfg.eval.retrain.seeds.clear();  // re-derive from the new run seed
    }
    return cfg;
}

fs::path run_dir(const Options& o, const PipelineConfig& cfg) {
    return o.out.empty() ? default_run_dir(cfg) : fs::path(o.out);
}

int execute(const Options& o, std::optional<std::string> stage) {
    const auto cfg = resolve_config(o);
    const auto dir = run_dir(o, cfg);
    RunOptions ro;
    ro.force = o.force;
    ro.stage = std::move(stage);
    run_pipeline(cfg, dir, ro);
    std::cout << dir.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Separate hard samples from noisy labels on synthetic hardness grids"};
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
        sub->add_option("--out", o.out, "Run directory (default: $HARDNOISE_RUNS_DIR or ./runs, named by config digest)");
        sub->add_option("--seed", o.seed, "Override the configured run seed");
        sub->add_flag("--force", o.force, "Redo completed stages and accept a changed configuration");
    };

    auto* run = app.add_subcommand("run", "Run every stage (or just --stage) end to end");
    common(run);
    run->add_option("--stage", o.stage, "Run only this stage")
        ->check(CLI::IsMember({"gen", "train", "metrics", "partition", "eval", "report"}));

    const std::pair<const char*, const char*> stages[] = {
        {"gen", "Generate the grid, apply the hardness transform and inject label noise"},
        {"train", "Train the classifier and record per-sample training dynamics"},
        {"metrics", "Compute the per-sample detection metrics"},
        {"partition", "Split the training set into estimated clean and noisy subsets per method"},
        {"eval", "Score every partition and retrain on the estimated clean subsets"},
    };
    std::map<CLI::App*, std::string> stage_of;
    for (const auto& [name, help] : stages) {
        auto* sub = app.add_subcommand(name, help);
        common(sub);
        stage_of[sub] = name;
    }
    auto* report = app.add_subcommand("report", "Render the method table and per-cell aggregates");
    common(report);
    report->add_option("--format", o.format, "What to print: markdown, csv or cells")
        ->check(CLI::IsMember({"markdown", "csv", "cells"}));

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return execute(o, o.stage.empty() ? std::nullopt : std::optional(o.stage));
        if (report->parsed()) {
            const auto cfg = resolve_config(o);
            const auto dir = run_dir(o, cfg);
            RunOptions ro;
            ro.force = o.force;
            ro.stage = "report";
            run_pipeline(cfg, dir, ro);
            const char* file = o.format == "csv" ? "report/report.csv"
                               : o.format == "cells" ? "report/cells.csv"
                                                     : "report/report.md";
            std::cout << io::read_file(dir / file);
            return 0;
        }
        for (const auto& [sub, name] : stage_of)
            if (sub->parsed()) return execute(o, name);
    } catch (const StageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
