#pragma once

// Partition scoring against the easy/hard/noisy ground truth, the validity
// statistics (one-way ANOVA, Spearman rank correlation) and the
// retrain-on-filtered-subset harness.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/special_functions/beta.hpp>

#include "hardnoise/dataset.hpp"
#include "hardnoise/errors.hpp"
#include "hardnoise/io.hpp"
#include "hardnoise/nn.hpp"
#include "hardnoise/partition.hpp"
#include "hardnoise/transforms.hpp"

namespace hardnoise {

struct RetrainResult {
    std::vector<double> accuracies, losses;  // one entry per seed
    double mean_accuracy = 0.0, std_accuracy = 0.0;
    double mean_loss = 0.0, std_loss = 0.0;
};

struct EvalReport {
    std::string method;
    std::size_t clean_size = 0;
    std::size_t total_size = 0;
    std::optional<double> correct_label_fraction;  // of the estimated clean subset
    std::optional<double> precision_n, recall_n, recall_h;
    double estimated_lnl = 0.0;                    // 1 - |clean| / |S|
    std::optional<RetrainResult> retrain;
};

inline std::optional<double> ratio(std::size_t num, std::size_t den) {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
}

inline EvalReport score_partition(const Partition& p, const GroundTruthPartition& gt, const Dataset& ds) {
    const auto index = ds.index_by_id();
    if (p.clean.size() + p.noisy.size() != ds.size())
        throw ConfigError("score: partition covers " + std::to_string(p.clean.size() + p.noisy.size()) +
                          " ids, dataset has " + std::to_string(ds.size()));
    for (const auto* subset : {&p.clean, &p.noisy})
        for (auto id : *subset)
            if (!index.count(id)) throw ConfigError("score: partition id " + std::to_string(id) + " not in dataset");
    for (auto id : p.noisy)
        if (p.clean.count(id)) throw ConfigError("score: id " + std::to_string(id) + " is both clean and noisy");

    std::size_t clean_correct = 0, caught_noisy = 0, kept_hard = 0;
    for (auto id : p.clean) {
        const auto& s = ds.samples[index.at(id)];
        if (s.y_assigned == s.y_true) ++clean_correct;
        if (gt.hard.count(id)) ++kept_hard;
    }
    for (auto id : p.noisy)
        if (gt.noisy.count(id)) ++caught_noisy;

    EvalReport r;
    r.method = p.method;
    r.clean_size = p.clean.size();
    r.total_size = ds.size();
    r.correct_label_fraction = ratio(clean_correct, p.clean.size());
    r.precision_n = ratio(caught_noisy, p.noisy.size());
    r.recall_n = ratio(caught_noisy, gt.noisy.size());
    r.recall_h = ratio(kept_hard, gt.hard.size());
    r.estimated_lnl = 1.0 - static_cast<double>(p.clean.size()) / static_cast<double>(ds.size());
    return r;
}

/// Baseline row: the whole dataset kept as clean.
inline EvalReport original_dataset_report(const Dataset& ds) {
    EvalReport r;
    r.method = "Original dataset";
    r.clean_size = r.total_size = ds.size();
    std::size_t correct = 0;
    for (const auto& s : ds.samples)
        if (s.y_assigned == s.y_true) ++correct;
    r.correct_label_fraction = ratio(correct, ds.size());
    r.estimated_lnl = 0.0;
    return r;
}

// ---- statistics -------------------------------------------------------------

struct AnovaResult {
    double f = 0.0;
    int df_between = 0;
    int df_within = 0;
    double p_value = 1.0;
};

/// Upper tail of the F(d1, d2) distribution.
inline double f_survival(double f, double d1, double d2) {
    if (std::isinf(f)) return 0.0;
    if (f <= 0.0) return 1.0;
    return boost::math::ibeta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f));
}

inline AnovaResult anova_f(std::span<const double> values, std::span<const int> groups) {
    if (values.size() != groups.size()) throw ConfigError("anova: values and groups differ in length");
    std::map<int, std::pair<double, std::size_t>> acc;  // sum, count
    double total = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto& a = acc[groups[i]];
        a.first += values[i];
        ++a.second;
        total += values[i];
    }
    const std::size_t N = values.size(), g = acc.size();
    if (g < 2) throw ConfigError("anova: need at least two groups");
    if (N <= g) throw UndefinedStatisticError("anova: no within-group degrees of freedom");
    const double grand = total / static_cast<double>(N);
    double ssb = 0.0, ssw = 0.0;
    for (const auto& [grp, a] : acc) {
        const double mean = a.first / static_cast<double>(a.second);
        ssb += static_cast<double>(a.second) * (mean - grand) * (mean - grand);
    }
    for (std::size_t i = 0; i < N; ++i) {
        const auto& a = acc[groups[i]];
        const double mean = a.first / static_cast<double>(a.second);
        ssw += (values[i] - mean) * (values[i] - mean);
    }
    AnovaResult r;
    r.df_between = static_cast<int>(g - 1);
    r.df_within = static_cast<int>(N - g);
    if (ssw == 0.0) {
        if (ssb == 0.0) throw UndefinedStatisticError("anova: zero between- and within-group variance");
        r.f = std::numeric_limits<double>::infinity();
        r.p_value = 0.0;
        return r;
    }
    r.f = (ssb / r.df_between) / (ssw / r.df_within);
    r.p_value = f_survival(r.f, r.df_between, r.df_within);
    return r;
}

/// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> rank(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
        i = j + 1;
    }
    return rank;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) throw UndefinedStatisticError("correlation: zero variance");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline double spearman_rho(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size() || xs.size() < 2) throw ConfigError("spearman: need two equal-length lists of >= 2");
    auto rx = average_ranks(xs), ry = average_ranks(ys);
    return pearson(rx, ry);
}

// ---- retrain harness --------------------------------------------------------

struct ModelShape {
    std::vector<int> hidden{32};
    int feature_dim = 16;
};

inline double mean_of(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

/// Sample standard deviation (n - 1); zero for a single value.
inline double stddev_of(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double a : v) s += (a - m) * (a - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

/// Trains a fresh model per seed on the estimated clean subset (assigned
/// labels) and evaluates it on the clean test set.
inline RetrainResult retrain_on_subset(const Dataset& train_set, const Partition& p, const ModelShape& shape,
                                       TrainConfig cfg, const Dataset& test_set, std::span<const std::uint64_t> seeds) {
    if (p.clean.empty()) throw ConfigError("retrain: estimated clean subset is empty");
    if (seeds.empty()) throw ConfigError("retrain: no seeds");
    std::vector<SampleId> keep(p.clean.begin(), p.clean.end());
    const Dataset subset = train_set.subset(keep);
    if (subset.empty()) throw ConfigError("retrain: clean subset has no samples in the dataset");
    RetrainResult r;
    for (auto seed : seeds) {
        auto model = init_model(train_set.dim, shape.hidden, shape.feature_dim, train_set.num_classes,
                                derive_seed(seed, 0x1417));
        cfg.seed = derive_seed(seed, 0x5617);
        auto trained = train(std::move(model), subset, cfg);
        auto e = evaluate(trained, test_set);
        r.accuracies.push_back(e.accuracy);
        r.losses.push_back(e.mean_loss);
    }
    r.mean_accuracy = mean_of(r.accuracies);
    r.std_accuracy = stddev_of(r.accuracies);
    r.mean_loss = mean_of(r.losses);
    r.std_loss = stddev_of(r.losses);
    return r;
}

// ---- report rendering -------------------------------------------------------

/// Four significant digits, "NA" for undefined values.
inline std::string format_sig4(std::optional<double> v) {
    if (!v) return "NA";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4g", *v);
    return buf;
}

inline std::string optional_full(std::optional<double> v) { return v ? io::format_double(*v) : std::string("NA"); }

inline std::string eval_reports_csv(std::span<const EvalReport> rows) {
    std::string out =
        "method,clean_size,total_size,correct_label_fraction,precision_n,recall_n,recall_h,estimated_lnl,"
        "test_accuracy_mean,test_accuracy_std,test_loss_mean,test_loss_std\n";
    for (const auto& r : rows) {
        out += r.method + ',' + std::to_string(r.clean_size) + ',' + std::to_string(r.total_size) + ',' +
               optional_full(r.correct_label_fraction) + ',' + optional_full(r.precision_n) + ',' +
               optional_full(r.recall_n) + ',' + optional_full(r.recall_h) + ',' + io::format_double(r.estimated_lnl);
        if (r.retrain)
            out += ',' + io::format_double(r.retrain->mean_accuracy) + ',' + io::format_double(r.retrain->std_accuracy) +
                   ',' + io::format_double(r.retrain->mean_loss) + ',' + io::format_double(r.retrain->std_loss);
        else
            out += ",NA,NA,NA,NA";
        out += '\n';
    }
    return out;
}

inline std::string eval_reports_markdown(std::span<const EvalReport> rows) {
    std::string out =
        "| Method | \\|S̃_c\\| | Correct Label % of S̃_c | Precision_n | Recall_n | Recall_h | Estimated LNL | "
        "Test Accuracy | Test Loss |\n"
        "|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
        auto pm = [](double m, double s) { return format_sig4(m) + " ± " + format_sig4(s); };
        out += "| " + r.method + " | " + std::to_string(r.clean_size) + " | " + format_sig4(r.correct_label_fraction) +
               " | " + format_sig4(r.precision_n) + " | " + format_sig4(r.recall_n) + " | " + format_sig4(r.recall_h) +
               " | " + format_sig4(r.estimated_lnl) + " | " +
               (r.retrain ? pm(r.retrain->mean_accuracy, r.retrain->std_accuracy) : "NA") + " | " +
               (r.retrain ? pm(r.retrain->mean_loss, r.retrain->std_loss) : "NA") + " |\n";
    }
    return out;
}

}  // namespace hardnoise
