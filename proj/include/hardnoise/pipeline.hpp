#pragma once

// End-to-end experiment orchestration: a JSON run configuration, the
// in-memory stage functions, and the on-disk run directory with its manifest.

#include <array>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "hardnoise/dataset.hpp"
#include "hardnoise/errors.hpp"
#include "hardnoise/eval.hpp"
#include "hardnoise/io.hpp"
#include "hardnoise/metrics.hpp"
#include "hardnoise/mixture.hpp"
#include "hardnoise/nn.hpp"
#include "hardnoise/partition.hpp"
#include "hardnoise/transforms.hpp"

namespace hardnoise {

// ---- configuration -----------------------------------------------------------

enum class HardnessType { none, imbalance, diversification, boundary };

inline std::string to_string(HardnessType t) {
    switch (t) {
        case HardnessType::none: return "none";
        case HardnessType::imbalance: return "imbalance";
        case HardnessType::diversification: return "diversification";
        case HardnessType::boundary: return "boundary";
    }
    return "none";
}

inline HardnessType hardness_from_string(const std::string& s) {
    if (s == "none") return HardnessType::none;
    if (s == "imbalance") return HardnessType::imbalance;
    if (s == "diversification") return HardnessType::diversification;
    if (s == "boundary") return HardnessType::boundary;
    throw ConfigError("config: unknown hardness type '" + s + "'");
}

struct HardnessConfig {
    HardnessType type = HardnessType::imbalance;
    double jitter_std = 0.1;          // diversification copies
    std::vector<double> eps_by_h;     // boundary; empty selects linear(L, eps_max)
    double eps_max = 1.0;

    EpsSchedule schedule(int levels) const {
        return eps_by_h.empty() ? EpsSchedule::linear(levels, eps_max) : EpsSchedule{eps_by_h};
    }
};

/// Architecture plus optimizer settings for one classifier.
struct NetConfig {
    std::vector<int> hidden{32};
    int feature_dim = 16;
    TrainConfig train;
};

struct RetrainConfig {
    std::vector<std::uint64_t> seeds;   // empty selects three seeds derived from the run seed
    std::vector<std::string> methods;   // catalog names; empty disables retraining
};

struct EvalConfig {
    int h_threshold = 4;
    GmmConfig gmm;
    RetrainConfig retrain;
};

struct PipelineConfig {
    std::uint64_t seed = 0;
    GridSpec grid;
    HardnessConfig hardness;
    NoiseSpec noise;
    NetConfig model;
    NetConfig oracle;
    MetricOptions metrics;
    std::vector<std::string> methods;
    EvalConfig eval;

    void validate() const {
        grid.validate();
        noise.validate();
        model.train.validate();
        if (hardness.type == HardnessType::boundary) {
            oracle.train.validate();
            hardness.schedule(grid.levels).validate(grid.levels);
        }
        if (hardness.type == HardnessType::diversification && !(hardness.jitter_std >= 0.0))
            throw ConfigError("config: jitter_std must be >= 0");
        if (methods.empty()) throw ConfigError("config: no partition methods configured");
        for (const auto& m : methods) find_method(m);
        for (const auto& m : eval.retrain.methods) find_method(m);
        eval.gmm.validate();
        if (eval.h_threshold < 0 || eval.h_threshold >= grid.levels)
            throw ConfigError("config: h_threshold must lie in [0, levels)");
        if (!(metrics.acd.tau >= 0.0 && metrics.acd.tau <= 1.0)) throw ConfigError("config: tau must lie in [0, 1]");
    }
};

/// Stream seeds for every random component, all derived from the run seed.
struct SeedPlan {
    std::uint64_t grid, hardness, noise, model_init, train, oracle_init, oracle_train, gmm;
    std::vector<std::uint64_t> retrain;
};

inline SeedPlan seed_plan(const PipelineConfig& cfg) {
    const auto s = cfg.seed;
    SeedPlan p{derive_seed(s, 1), derive_seed(s, 2), derive_seed(s, 3), derive_seed(s, 4),
               derive_seed(s, 5), derive_seed(s, 6), derive_seed(s, 7), derive_seed(s, 8), {}};
    p.retrain = cfg.eval.retrain.seeds;
    if (p.retrain.empty())
        for (std::uint64_t i = 0; i < 3; ++i) p.retrain.push_back(derive_seed(s, 100 + i));
    return p;
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
    if (!j.is_object()) throw ConfigError("config: section '" + where + "' must be an object");
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* allowed : keys) ok = ok || k == allowed;
        if (!ok) throw ConfigError("config: unknown key '" + k + "' in section '" + where + "'");
    }
}

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void read_net(const nlohmann::json& j, NetConfig& n, const std::string& where) {
    reject_unknown(j,
                   {"hidden", "feature_dim", "epochs", "batch_size", "learning_rate", "momentum", "weight_decay"},
                   where);
    read_opt(j, "hidden", n.hidden);
    read_opt(j, "feature_dim", n.feature_dim);
    read_opt(j, "epochs", n.train.epochs);
    read_opt(j, "batch_size", n.train.batch_size);
    read_opt(j, "learning_rate", n.train.learning_rate);
    read_opt(j, "momentum", n.train.momentum);
    read_opt(j, "weight_decay", n.train.weight_decay);
}

inline nlohmann::json net_json(const NetConfig& n) {
    return {{"hidden", n.hidden},
            {"feature_dim", n.feature_dim},
            {"epochs", n.train.epochs},
            {"batch_size", n.train.batch_size},
            {"learning_rate", n.train.learning_rate},
            {"momentum", n.train.momentum},
            {"weight_decay", n.train.weight_decay}};
}

inline std::vector<std::string> expand_methods(const nlohmann::json& j) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "comparison") return comparison_method_names();
        if (s == "all") {
            std::vector<std::string> out;
            for (const auto& m : builtin_methods()) out.push_back(m.name);
            return out;
        }
        throw ConfigError("config: methods must be a list, \"comparison\" or \"all\"");
    }
    return j.get<std::vector<std::string>>();
}

}  // namespace detail

/// Parses a run configuration; missing keys keep their defaults, unknown keys are rejected.
inline PipelineConfig config_from_json(const nlohmann::json& j) {
    using detail::read_opt;
    PipelineConfig c;
    c.methods = comparison_method_names();
    try {
        detail::reject_unknown(j, {"seed", "grid", "hardness", "noise", "train", "oracle", "metrics", "methods", "eval"},
                               "top level");
        read_opt(j, "seed", c.seed);
        if (j.contains("grid")) {
            const auto& g = j.at("grid");
            detail::reject_unknown(g,
                                   {"levels", "classes_per_cell", "per_class_count", "input_dim", "cluster_std",
                                    "center_separation", "test_per_class"},
                                   "grid");
            read_opt(g, "levels", c.grid.levels);
            read_opt(g, "classes_per_cell", c.grid.classes_per_cell);
            read_opt(g, "per_class_count", c.grid.per_class_count);
            read_opt(g, "input_dim", c.grid.input_dim);
            read_opt(g, "cluster_std", c.grid.cluster_std);
            read_opt(g, "center_separation", c.grid.center_separation);
            read_opt(g, "test_per_class", c.grid.test_per_class);
        }
        if (j.contains("hardness")) {
            const auto& h = j.at("hardness");
            detail::reject_unknown(h, {"type", "jitter_std", "eps_max", "eps_by_h"}, "hardness");
            if (h.contains("type")) c.hardness.type = hardness_from_string(h.at("type").get<std::string>());
            read_opt(h, "jitter_std", c.hardness.jitter_std);
            read_opt(h, "eps_max", c.hardness.eps_max);
            read_opt(h, "eps_by_h", c.hardness.eps_by_h);
        }
        if (j.contains("noise")) {
            detail::reject_unknown(j.at("noise"), {"delta"}, "noise");
            read_opt(j.at("noise"), "delta", c.noise.delta);
        }
        if (j.contains("train")) detail::read_net(j.at("train"), c.model, "train");
        c.oracle = c.model;
        if (j.contains("oracle")) detail::read_net(j.at("oracle"), c.oracle, "oracle");
        if (j.contains("metrics")) {
            const auto& m = j.at("metrics");
            detail::reject_unknown(m, {"aum", "tau"}, "metrics");
            if (m.contains("aum")) {
                const auto a = m.at("aum").get<std::string>();
                if (a == "assigned_margin")
                    c.metrics.aum = AumVariant::assigned_margin;
                else if (a == "predicted_margin")
                    c.metrics.aum = AumVariant::predicted_margin;
                else
                    throw ConfigError("config: unknown aum variant '" + a + "'");
            }
            read_opt(m, "tau", c.metrics.acd.tau);
        }
        if (j.contains("methods")) c.methods = detail::expand_methods(j.at("methods"));
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            detail::reject_unknown(e, {"h_threshold", "gmm", "retrain"}, "eval");
            read_opt(e, "h_threshold", c.eval.h_threshold);
            if (e.contains("gmm")) {
                const auto& g = e.at("gmm");
                detail::reject_unknown(g, {"max_iter", "tol", "cov_floor", "restarts"}, "eval.gmm");
                read_opt(g, "max_iter", c.eval.gmm.max_iter);
                read_opt(g, "tol", c.eval.gmm.tol);
                read_opt(g, "cov_floor", c.eval.gmm.cov_floor);
                read_opt(g, "restarts", c.eval.gmm.restarts);
            }
            if (e.contains("retrain")) {
                const auto& r = e.at("retrain");
                detail::reject_unknown(r, {"seeds", "methods"}, "eval.retrain");
                read_opt(r, "seeds", c.eval.retrain.seeds);
                if (r.contains("methods")) c.eval.retrain.methods = detail::expand_methods(r.at("methods"));
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.metrics.scd.tau = c.metrics.acd.tau;
    c.validate();
    return c;
}

/// Fully resolved configuration (every default spelled out).
inline nlohmann::json config_to_json(const PipelineConfig& c) {
    nlohmann::json hardness{{"type", to_string(c.hardness.type)}};
    if (c.hardness.type == HardnessType::diversification) hardness["jitter_std"] = c.hardness.jitter_std;
    if (c.hardness.type == HardnessType::boundary) hardness["eps_by_h"] = c.hardness.schedule(c.grid.levels).eps_by_h;
    nlohmann::json j{
        {"seed", c.seed},
        {"grid",
         {{"levels", c.grid.levels},
          {"classes_per_cell", c.grid.classes_per_cell},
          {"per_class_count", c.grid.per_class_count},
          {"input_dim", c.grid.input_dim},
          {"cluster_std", c.grid.cluster_std},
          {"center_separation", c.grid.center_separation},
          {"test_per_class", c.grid.test_count()}}},
        {"hardness", hardness},
        {"noise", {{"delta", c.noise.delta}}},
        {"train", detail::net_json(c.model)},
        {"metrics",
         {{"aum", c.metrics.aum == AumVariant::assigned_margin ? "assigned_margin" : "predicted_margin"},
          {"tau", c.metrics.acd.tau}}},
        {"methods", c.methods},
        {"eval",
         {{"h_threshold", c.eval.h_threshold},
          {"gmm",
           {{"max_iter", c.eval.gmm.max_iter},
            {"tol", c.eval.gmm.tol},
            {"cov_floor", c.eval.gmm.cov_floor},
            {"restarts", c.eval.gmm.restarts}}},
          {"retrain", {{"seeds", seed_plan(c).retrain}, {"methods", c.eval.retrain.methods}}}}}};
    if (c.hardness.type == HardnessType::boundary) j["oracle"] = detail::net_json(c.oracle);
    return j;
}

// ---- in-memory stages ----------------------------------------------------------

struct GeneratedData {
    Dataset base_train;   // clean, balanced
    Dataset train;        // hardness transform + label noise
    Dataset test;         // clean, balanced
    std::optional<Model> oracle;
};

inline Model fresh_model(const NetConfig& net, const GridSpec& grid, std::uint64_t seed) {
    return init_model(grid.input_dim, net.hidden, net.feature_dim, grid.num_classes(), seed);
}

/// Trains the boundary oracle on the clean base data.
inline Model train_oracle(const PipelineConfig& cfg, const Dataset& base_train) {
    const auto seeds = seed_plan(cfg);
    TrainConfig tc = cfg.oracle.train;
    tc.seed = seeds.oracle_train;
    return train(fresh_model(cfg.oracle, cfg.grid, seeds.oracle_init), base_train, tc);
}

inline Dataset apply_hardness(const PipelineConfig& cfg, const Dataset& base_train, const Model* oracle) {
    const auto seeds = seed_plan(cfg);
    switch (cfg.hardness.type) {
        case HardnessType::none: return base_train;
        case HardnessType::imbalance: return apply_imbalance(base_train, seeds.hardness);
        case HardnessType::diversification:
            return apply_diversification(base_train, cfg.hardness.jitter_std, seeds.hardness);
        case HardnessType::boundary:
            if (!oracle) throw ConfigError("boundary hardness needs an oracle model");
            return apply_boundary_shift(base_train, *oracle, cfg.hardness.schedule(cfg.grid.levels));
    }
    return base_train;
}

inline GeneratedData generate_data(const PipelineConfig& cfg) {
    const auto seeds = seed_plan(cfg);
    GridSpec grid = cfg.grid;
    grid.seed = seeds.grid;
    auto base = generate_base(grid);
    GeneratedData out;
    if (cfg.hardness.type == HardnessType::boundary) out.oracle = train_oracle(cfg, base.train);
    Dataset hard = apply_hardness(cfg, base.train, out.oracle ? &*out.oracle : nullptr);
    NoiseSpec noise = cfg.noise;
    noise.seed = seeds.noise;
    out.train = inject_label_noise(hard, noise);
    out.base_train = std::move(base.train);
    out.test = std::move(base.test);
    return out;
}

inline TrainResult train_main(const PipelineConfig& cfg, const Dataset& train_set) {
    const auto seeds = seed_plan(cfg);
    TrainConfig tc = cfg.model.train;
    tc.seed = seeds.train;
    return train_with_tracing(fresh_model(cfg.model, cfg.grid, seeds.model_init), train_set, tc);
}

inline GmmConfig gmm_config(const PipelineConfig& cfg) {
    GmmConfig g = cfg.eval.gmm;
    g.seed = seed_plan(cfg).gmm;
    return g;
}

inline std::vector<Partition> partition_all(const PipelineConfig& cfg, const MetricTable& table,
                                            const TraceStore& traces) {
    std::vector<Partition> out;
    for (const auto& name : cfg.methods) out.push_back(run_method(find_method(name), table, &traces, gmm_config(cfg)));
    return out;
}

/// One EvalReport per partition, preceded by the "Original dataset" row. Methods
/// listed under eval.retrain get test accuracy/loss of models retrained on their
/// clean subset; the baseline row then holds the unfiltered-training result.
inline std::vector<EvalReport> evaluate_all(const PipelineConfig& cfg, const Dataset& train_set,
                                            const Dataset& test_set, const std::vector<Partition>& partitions) {
    const auto gt = ground_truth_partition(train_set, cfg.eval.h_threshold);
    const auto seeds = seed_plan(cfg);
    const ModelShape shape{cfg.model.hidden, cfg.model.feature_dim};
    auto wants_retrain = [&](const std::string& name) {
        for (const auto& m : cfg.eval.retrain.methods)
            if (find_method(m).name == name) return true;
        return false;
    };

    std::vector<EvalReport> rows;
    rows.push_back(original_dataset_report(train_set));
    if (!cfg.eval.retrain.methods.empty()) {
        Partition all;
        all.method = rows[0].method;
        for (const auto& s : train_set.samples) all.clean.insert(s.id);
        rows[0].retrain = retrain_on_subset(train_set, all, shape, cfg.model.train, test_set, seeds.retrain);
    }
    for (const auto& p : partitions) {
        auto r = score_partition(p, gt, train_set);
        if (wants_retrain(p.method) && !p.clean.empty())
            r.retrain = retrain_on_subset(train_set, p, shape, cfg.model.train, test_set, seeds.retrain);
        rows.push_back(std::move(r));
    }
    return rows;
}

// ---- per-cell aggregates and validity statistics ------------------------------

struct CellStats {
    int h = 0, n = 0;
    std::size_t count = 0;
    double loss = 0, confidence = 0, scd = 0, acd = 0, acc = 0;
};

/// Cell (h, n) means over the train samples; always L*L rows in (h, n) order.
inline std::vector<CellStats> cell_aggregates(const Dataset& ds, const MetricTable& t) {
    const int L = ds.levels;
    std::vector<CellStats> cells(static_cast<std::size_t>(L) * L);
    for (int h = 0; h < L; ++h)
        for (int n = 0; n < L; ++n) {
            cells[h * L + n].h = h;
            cells[h * L + n].n = n;
        }
    const auto index = ds.index_by_id();
    for (std::size_t i = 0; i < t.size(); ++i) {
        const auto& s = ds.samples[index.at(t.ids[i])];
        auto& c = cells[s.h * L + s.n];
        ++c.count;
        c.loss += t.loss_end[i];
        c.confidence += t.confidence_end[i];
        c.scd += t.scd[i];
        c.acd += t.acd[i];
        c.acc += t.acc_over_training[i];
    }
    for (auto& c : cells) {
        if (c.count == 0) continue;
        const double k = static_cast<double>(c.count);
        c.loss /= k;
        c.confidence /= k;
        c.scd /= k;
        c.acd /= k;
        c.acc /= k;
    }
    return cells;
}

struct GroupTrend {
    std::vector<double> group_means;   // one per hardness level
    AnovaResult anova;
    double spearman = 0.0;             // group means vs level
};

struct HardnessValidity {
    GroupTrend loss, confidence;
};

/// End-of-training loss and confidence grouped by h over the correctly labeled
/// samples: one-way ANOVA and the Spearman trend of the group means.
inline HardnessValidity hardness_validity(const Dataset& ds, const MetricTable& t) {
    const auto index = ds.index_by_id();
    const int L = ds.levels;
    std::vector<double> loss, conf;
    std::vector<int> group;
    std::vector<double> sum_l(L, 0.0), sum_c(L, 0.0), cnt(L, 0.0);
    for (std::size_t i = 0; i < t.size(); ++i) {
        const auto& s = ds.samples[index.at(t.ids[i])];
        if (s.y_assigned != s.y_true) continue;
        loss.push_back(t.loss_end[i]);
        conf.push_back(t.confidence_end[i]);
        group.push_back(s.h);
        sum_l[s.h] += t.loss_end[i];
        sum_c[s.h] += t.confidence_end[i];
        cnt[s.h] += 1.0;
    }
    HardnessValidity v;
    std::vector<double> levels;
    for (int h = 0; h < L; ++h) {
        if (cnt[h] == 0.0) continue;
        levels.push_back(h);
        v.loss.group_means.push_back(sum_l[h] / cnt[h]);
        v.confidence.group_means.push_back(sum_c[h] / cnt[h]);
    }
    v.loss.anova = anova_f(loss, group);
    v.confidence.anova = anova_f(conf, group);
    v.loss.spearman = spearman_rho(levels, v.loss.group_means);
    v.confidence.spearman = spearman_rho(levels, v.confidence.group_means);
    return v;
}

struct CellCorrelations {
    double scd_n = 0, scd_h = 0, acd_n = 0, acd_h = 0;
};

/// Spearman correlations of the cell-mean SCD and ACD with n and with h.
inline CellCorrelations cell_correlations(std::span<const CellStats> cells) {
    std::vector<double> h, n, scd, acd;
    for (const auto& c : cells) {
        if (c.count == 0) continue;
        h.push_back(c.h);
        n.push_back(c.n);
        scd.push_back(c.scd);
        acd.push_back(c.acd);
    }
    return {spearman_rho(scd, n), spearman_rho(scd, h), spearman_rho(acd, n), spearman_rho(acd, h)};
}

// ---- report rendering -----------------------------------------------------------

inline std::string cells_csv(std::span<const CellStats> cells, HardnessType type) {
    std::string out = "hardness,h,n,count,loss,confidence,scd,acd,acc_over_training\n";
    for (const auto& c : cells)
        out += to_string(type) + ',' + std::to_string(c.h) + ',' + std::to_string(c.n) + ',' +
               std::to_string(c.count) + ',' + io::format_double(c.loss) + ',' + io::format_double(c.confidence) +
               ',' + io::format_double(c.scd) + ',' + io::format_double(c.acd) + ',' + io::format_double(c.acc) +
               '\n';
    return out;
}

/// The method table with every number at four significant digits; the same
/// strings feed report.md so both renderings agree exactly.
inline std::string report_csv(std::span<const EvalReport> rows) {
    std::string out =
        "method,clean_size,correct_label_fraction,precision_n,recall_n,recall_h,estimated_lnl,"
        "test_accuracy_mean,test_accuracy_std,test_loss_mean,test_loss_std\n";
    for (const auto& r : rows) {
        out += r.method + ',' + std::to_string(r.clean_size) + ',' + format_sig4(r.correct_label_fraction) + ',' +
               format_sig4(r.precision_n) + ',' + format_sig4(r.recall_n) + ',' + format_sig4(r.recall_h) + ',' +
               format_sig4(r.estimated_lnl);
        if (r.retrain)
            out += ',' + format_sig4(r.retrain->mean_accuracy) + ',' + format_sig4(r.retrain->std_accuracy) + ',' +
                   format_sig4(r.retrain->mean_loss) + ',' + format_sig4(r.retrain->std_loss);
        else
            out += ",NA,NA,NA,NA";
        out += '\n';
    }
    return out;
}

inline std::string report_markdown(const PipelineConfig& cfg, std::span<const EvalReport> rows,
                                   const std::optional<HardnessValidity>& validity,
                                   const std::optional<CellCorrelations>& corr) {
    std::string out = "# Partition report\n\n";
    out += "Hardness: " + to_string(cfg.hardness.type) + ", delta = " + format_sig4(cfg.noise.delta) +
           ", seed = " + std::to_string(cfg.seed) + "\n\n";
    out += eval_reports_markdown(rows);
    if (validity) {
        auto line = [](const char* what, const GroupTrend& g) {
            std::string s = std::string("| ") + what + " | ";
            for (std::size_t i = 0; i < g.group_means.size(); ++i) s += (i ? " / " : "") + format_sig4(g.group_means[i]);
            return s + " | " + format_sig4(g.anova.f) + " | " + format_sig4(g.anova.p_value) + " | " +
                   format_sig4(g.spearman) + " |\n";
        };
        out += "\n## Hardness validity (correctly labeled samples, grouped by h)\n\n";
        out += "| Metric | Group means (h = 0..L-1) | ANOVA F | p-value | Spearman vs h |\n|---|---|---|---|---|\n";
        out += line("Loss", validity->loss);
        out += line("Confidence", validity->confidence);
    }
    if (corr) {
        out += "\n## Cell-mean correlations (Spearman over the L x L grid)\n\n";
        out += "| Metric | vs n | vs h |\n|---|---|---|\n";
        out += "| SCD | " + format_sig4(corr->scd_n) + " | " + format_sig4(corr->scd_h) + " |\n";
        out += "| ACD | " + format_sig4(corr->acd_n) + " | " + format_sig4(corr->acd_h) + " |\n";
    }
    return out;
}

// ---- run directory ----------------------------------------------------------------

inline std::string sha256_hex(const std::string& data) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256 failed");
    std::ostringstream ss;
    for (unsigned int i = 0; i < len; ++i) ss << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return ss.str();
}

inline const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names{"gen", "train", "metrics", "partition", "eval", "report"};
    return names;
}

/// A failure inside one pipeline stage; what() is prefixed with the stage name.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& what)
        : std::runtime_error("stage '" + stage + "': " + what), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

struct RunManifest {
    std::string run_id;
    std::string config_digest;
    nlohmann::json seeds;
    std::map<std::string, std::string> completed;  // stage -> completion timestamp
    std::map<std::string, std::string> files;      // relative path -> sha256
    std::string created, updated;
    std::optional<std::string> failed_stage, error;

    nlohmann::json to_json() const {
        nlohmann::json stages = nlohmann::json::object();
        for (const auto& s : stage_names()) {
            nlohmann::json e{{"complete", completed.count(s) > 0}};
            if (completed.count(s)) e["completed_at"] = completed.at(s);
            stages[s] = e;
        }
        nlohmann::json j{{"run_id", run_id},   {"config_digest", config_digest}, {"seeds", seeds},
                         {"stages", stages},   {"files", files},                 {"created", created},
                         {"updated", updated}};
        if (failed_stage) j["failed"] = {{"stage", *failed_stage}, {"error", error.value_or("")}};
        return j;
    }

    static RunManifest from_json(const nlohmann::json& j) {
        RunManifest m;
        m.run_id = j.at("run_id").get<std::string>();
        m.config_digest = j.at("config_digest").get<std::string>();
        m.seeds = j.at("seeds");
        for (const auto& [stage, e] : j.at("stages").items())
            if (e.at("complete").get<bool>()) m.completed[stage] = e.at("completed_at").get<std::string>();
        m.files = j.at("files").get<std::map<std::string, std::string>>();
        m.created = j.at("created").get<std::string>();
        m.updated = j.at("updated").get<std::string>();
        if (j.contains("failed")) {
            m.failed_stage = j.at("failed").at("stage").get<std::string>();
            m.error = j.at("failed").at("error").get<std::string>();
        }
        return m;
    }
};

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline std::string config_digest(const PipelineConfig& cfg) { return sha256_hex(config_to_json(cfg).dump()); }

/// Default run directory: $HARDNOISE_RUNS_DIR (or ./runs) / run-<digest prefix>.
inline std::filesystem::path default_run_dir(const PipelineConfig& cfg) {
    const char* root = std::getenv("HARDNOISE_RUNS_DIR");
    const std::filesystem::path base = root && *root ? root : "runs";
    return base / ("run-" + config_digest(cfg).substr(0, 12));
}

/// The run directory: artifacts, checksums and stage bookkeeping.
class RunDirectory {
public:
    RunDirectory(std::filesystem::path dir, const PipelineConfig& cfg, bool force) : dir_(std::move(dir)), cfg_(cfg) {
        const auto digest = config_digest(cfg);
        const auto mpath = dir_ / "manifest.json";
        if (std::filesystem::exists(mpath)) {
            manifest_ = RunManifest::from_json(nlohmann::json::parse(io::read_file(mpath)));
            if (manifest_.config_digest != digest) {
                if (!force)
                    throw ConfigError("run directory " + dir_.string() +
                                      " holds a run with a different configuration (use --force to overwrite)");
                manifest_.completed.clear();
                manifest_.files.clear();
            }
        } else {
            manifest_.created = utc_timestamp();
        }
        manifest_.run_id = "run-" + digest.substr(0, 12);
        manifest_.config_digest = digest;
        const auto seeds = seed_plan(cfg);
        manifest_.seeds = {{"run", cfg.seed},
                           {"grid", seeds.grid},
                           {"hardness", seeds.hardness},
                           {"noise", seeds.noise},
                           {"model_init", seeds.model_init},
                           {"train", seeds.train},
                           {"oracle_init", seeds.oracle_init},
                           {"oracle_train", seeds.oracle_train},
                           {"gmm", seeds.gmm},
                           {"retrain", seeds.retrain}};
        write("config.json", config_to_json(cfg).dump(2) + "\n");
        save_manifest();
    }

    const std::filesystem::path& path() const { return dir_; }
    const RunManifest& manifest() const { return manifest_; }
    bool complete(const std::string& stage) const { return manifest_.completed.count(stage) > 0; }

    /// Atomically writes an artifact and records its checksum.
    void write(const std::string& rel, const std::string& content) {
        io::write_file_atomic(dir_ / rel, content);
        manifest_.files[rel] = sha256_hex(content);
    }

    /// Reads an artifact after verifying it against the manifest checksum.
    std::string read(const std::string& rel) const {
        auto it = manifest_.files.find(rel);
        if (it == manifest_.files.end()) throw ConfigError("artifact " + rel + " is not recorded in the manifest");
        auto content = io::read_file(dir_ / rel);
        if (sha256_hex(content) != it->second) throw ConfigError("checksum mismatch for " + rel);
        return content;
    }

    nlohmann::json read_json(const std::string& rel) const { return nlohmann::json::parse(read(rel)); }

    void mark_complete(const std::string& stage) {
        manifest_.completed[stage] = utc_timestamp();
        if (manifest_.failed_stage == stage) manifest_.failed_stage.reset(), manifest_.error.reset();
        save_manifest();
    }

    /// Clears the completion flag of `stage` and of every later stage.
    void invalidate_from(const std::string& stage) {
        bool after = false;
        for (const auto& s : stage_names()) {
            after = after || s == stage;
            if (after) manifest_.completed.erase(s);
        }
        save_manifest();
    }

    void mark_failed(const std::string& stage, const std::string& error) {
        manifest_.failed_stage = stage;
        manifest_.error = error;
        save_manifest();
    }

    void save_manifest() {
        manifest_.updated = utc_timestamp();
        io::write_file_atomic(dir_ / "manifest.json", manifest_.to_json().dump(2) + "\n");
    }

    // Typed loaders shared by the stages.
    Dataset dataset(const std::string& stem) const {
        return dataset_from_text(read(stem + ".json"), read(stem + ".csv"));
    }

    void save_dataset(const std::string& stem, const Dataset& ds) {
        write(stem + ".json", dataset_manifest(ds).dump(2) + "\n");
        write(stem + ".csv", dataset_csv(ds));
    }

private:
    std::filesystem::path dir_;
    PipelineConfig cfg_;
    RunManifest manifest_;
};

// ---- stages over a run directory ------------------------------------------------

namespace detail {

inline void stage_gen(RunDirectory& run, const PipelineConfig& cfg) {
    auto data = generate_data(cfg);
    if (data.oracle) run.write("oracle/model.json", model_to_json(*data.oracle).dump() + "\n");
    run.save_dataset("data/train", data.train);
    run.save_dataset("data/test", data.test);
}

inline void stage_train(RunDirectory& run, const PipelineConfig& cfg) {
    auto train_set = run.dataset("data/train");
    auto result = train_main(cfg, train_set);
    const auto tmp = run.path() / "train";
    save_traces(result.traces, tmp);
    for (const char* f : {"traces.csv", "snapshot_mid.csv", "snapshot_end.csv", "traces.json"})
        run.write(std::string("train/") + f, io::read_file(tmp / f));
    run.write("train/model.json", model_to_json(result.model).dump() + "\n");
}

inline TraceStore load_run_traces(const RunDirectory& run) {
    for (const char* f : {"traces.csv", "snapshot_mid.csv", "snapshot_end.csv", "traces.json"})
        run.read(std::string("train/") + f);  // checksum verification
    return load_traces(run.path() / "train");
}

inline void stage_metrics(RunDirectory& run, const PipelineConfig& cfg) {
    auto traces = load_run_traces(run);
    auto table = compute_metrics(traces, cfg.metrics);
    run.write("metrics/metrics.csv", metric_table_csv(table));
    run.write("metrics/metrics.json", metric_table_sidecar(table, cfg.metrics).dump(2) + "\n");
}

inline MetricTable load_run_metrics(const RunDirectory& run) {
    return metric_table_from_text(run.read("metrics/metrics.csv"), run.read_json("metrics/metrics.json"));
}

inline std::string method_file(const std::string& name) { return "partition/" + name; }

inline void stage_partition(RunDirectory& run, const PipelineConfig& cfg) {
    auto traces = load_run_traces(run);
    auto table = load_run_metrics(run);
    for (const auto& p : partition_all(cfg, table, traces)) {
        run.write(method_file(p.method) + ".csv", partition_csv(p));
        run.write(method_file(p.method) + ".json", partition_json(p).dump(2) + "\n");
    }
}

inline std::vector<Partition> load_run_partitions(const RunDirectory& run, const PipelineConfig& cfg) {
    std::vector<Partition> out;
    for (const auto& name : cfg.methods) {
        const auto stem = method_file(find_method(name).name);
        out.push_back(partition_from_text(run.read(stem + ".csv"), run.read_json(stem + ".json")));
    }
    return out;
}

inline void stage_eval(RunDirectory& run, const PipelineConfig& cfg) {
    auto train_set = run.dataset("data/train");
    auto test_set = run.dataset("data/test");
    auto rows = evaluate_all(cfg, train_set, test_set, load_run_partitions(run, cfg));
    run.write("eval/eval.csv", eval_reports_csv(rows));
}

inline std::vector<EvalReport> eval_rows_from_csv(const std::string& csv) {
    auto t = io::parse_csv(csv);
    auto opt = [&](const std::vector<std::string>& row, const char* col) -> std::optional<double> {
        const auto& v = row[t.column(col)];
        if (v == "NA") return std::nullopt;
        return io::parse_double(v);
    };
    std::vector<EvalReport> rows;
    for (const auto& row : t.rows) {
        EvalReport r;
        r.method = row[t.column("method")];
        r.clean_size = static_cast<std::size_t>(io::parse_int(row[t.column("clean_size")]));
        r.total_size = static_cast<std::size_t>(io::parse_int(row[t.column("total_size")]));
        r.correct_label_fraction = opt(row, "correct_label_fraction");
        r.precision_n = opt(row, "precision_n");
        r.recall_n = opt(row, "recall_n");
        r.recall_h = opt(row, "recall_h");
        r.estimated_lnl = io::parse_double(row[t.column("estimated_lnl")]);
        if (auto acc = opt(row, "test_accuracy_mean")) {
            RetrainResult rr;
            rr.mean_accuracy = *acc;
            rr.std_accuracy = opt(row, "test_accuracy_std").value_or(0.0);
            rr.mean_loss = opt(row, "test_loss_mean").value_or(0.0);
            rr.std_loss = opt(row, "test_loss_std").value_or(0.0);
            r.retrain = rr;
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

inline void stage_report(RunDirectory& run, const PipelineConfig& cfg) {
    auto rows = eval_rows_from_csv(run.read("eval/eval.csv"));
    auto train_set = run.dataset("data/train");
    auto table = load_run_metrics(run);
    auto cells = cell_aggregates(train_set, table);
    std::optional<HardnessValidity> validity;
    std::optional<CellCorrelations> corr;
    try {
        validity = hardness_validity(train_set, table);
    } catch (const std::exception&) {
        // single hardness level or constant values: the section is omitted
    }
    try {
        corr = cell_correlations(cells);
    } catch (const std::exception&) {
    }
    run.write("report/report.csv", report_csv(rows));
    run.write("report/report.md", report_markdown(cfg, rows, validity, corr));
    run.write("report/cells.csv", cells_csv(cells, cfg.hardness.type));
}

}  // namespace detail

struct RunOptions {
    bool force = false;
    std::optional<std::string> stage;  // run just this stage
};

/// Runs the pipeline (or a single stage) in `dir`. Completed stages are skipped
/// unless forced; a failing stage is recorded in the manifest and rethrown as
/// StageError.
inline std::filesystem::path run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& dir,
                                          const RunOptions& opt = {}) {
    using Fn = void (*)(RunDirectory&, const PipelineConfig&);
    const std::map<std::string, Fn> fns{{"gen", detail::stage_gen},         {"train", detail::stage_train},
                                        {"metrics", detail::stage_metrics}, {"partition", detail::stage_partition},
                                        {"eval", detail::stage_eval},       {"report", detail::stage_report}};
    if (opt.stage && !fns.count(*opt.stage)) throw ConfigError("unknown stage '" + *opt.stage + "'");

    RunDirectory run(dir, cfg, opt.force);
    const auto& names = stage_names();
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto& s = names[i];
        if (opt.stage && s != *opt.stage) continue;
        if (run.complete(s) && !opt.force) continue;
        for (std::size_t j = 0; j < i; ++j)
            if (!run.complete(names[j]))
                throw StageError(s, "prerequisite stage '" + names[j] + "' has not completed");
        run.invalidate_from(s);
        try {
            fns.at(s)(run, cfg);
        } catch (const std::exception& e) {
            run.mark_failed(s, e.what());
            throw StageError(s, e.what());
        }
        run.mark_complete(s);
    }
    return run.path();
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

}  // namespace hardnoise
