#pragma once

// Clean/noisy partitioners (median threshold, 1-D GMM, 2-D GMM with two or
// three clusters) and the catalog of named detection methods.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hardnoise/errors.hpp"
#include "hardnoise/io.hpp"
#include "hardnoise/metrics.hpp"
#include "hardnoise/mixture.hpp"

namespace hardnoise {

enum class Polarity { high_is_noisy, low_is_noisy };

inline double polarity_sign(Polarity p) { return p == Polarity::high_is_noisy ? 1.0 : -1.0; }

struct Partition {
    std::string method;
    std::set<SampleId> clean;
    std::set<SampleId> noisy;
    std::map<SampleId, int> cluster_labels;  // only for mixture-based partitions
    nlohmann::json parameters = nlohmann::json::object();
    std::vector<std::string> warnings;
};

struct ThresholdRule {
    std::optional<double> fixed;  // empty selects the median

    static ThresholdRule median() { return {}; }
};

inline double median_of(std::vector<double> v) {
    if (v.empty()) throw ConfigError("median of empty input");
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + mid, v.end());
    const double upper = v[mid];
    if (v.size() % 2 == 1) return upper;
    const double lower = *std::max_element(v.begin(), v.begin() + mid);
    return 0.5 * (lower + upper);
}

/// Values strictly beyond the threshold on the noisy side are flagged; ties stay clean.
inline Partition partition_threshold(std::span<const SampleId> ids, std::span<const double> values, Polarity polarity,
                                     ThresholdRule rule = ThresholdRule::median()) {
    if (ids.empty()) throw ConfigError("threshold partition: empty input");
    if (ids.size() != values.size()) throw ConfigError("threshold partition: ids and values differ in length");
    const double thr = rule.fixed ? *rule.fixed : median_of({values.begin(), values.end()});
    Partition p;
    p.method = "threshold";
    p.parameters = {{"threshold", thr},
                    {"rule", rule.fixed ? "fixed" : "median"},
                    {"polarity", polarity == Polarity::high_is_noisy ? "high" : "low"}};
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const bool noisy = polarity == Polarity::high_is_noisy ? values[i] > thr : values[i] < thr;
        (noisy ? p.noisy : p.clean).insert(ids[i]);
    }
    return p;
}

/// Two-component 1-D mixture; the component on the noisy side of the polarity
/// claims the samples for which it has strictly the largest responsibility.
inline Partition partition_gmm1d(std::span<const SampleId> ids, std::span<const double> values, Polarity polarity,
                                 GmmConfig cfg = {}) {
    if (ids.size() != values.size()) throw ConfigError("gmm1d partition: ids and values differ in length");
    cfg.k = 2;
    std::vector<Point> pts;
    for (double v : values) pts.push_back({v});
    GmmModel model;
    try {
        if (std::set<double>(values.begin(), values.end()).size() < 2)
            throw DegenerateDataError("gmm1d: fewer than two distinct values");
        model = fit_gmm(pts, cfg);
    } catch (const DegenerateDataError& e) {
        auto p = partition_threshold(ids, values, polarity);
        p.method = "gmm1d";
        p.warnings.push_back(std::string("degenerate fit, fell back to median threshold: ") + e.what());
        return p;
    }
    const double sign = polarity_sign(polarity);
    const int noisy_c = sign * model.means[1][0] > sign * model.means[0][0] ? 1 : 0;
    auto resp = responsibilities(model, pts);
    Partition p;
    p.method = "gmm1d";
    p.parameters = {{"polarity", polarity == Polarity::high_is_noisy ? "high" : "low"},
                    {"noisy_component", noisy_c},
                    {"gmm", gmm_to_json(model)}};
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const bool noisy = resp[i * 2 + noisy_c] > resp[i * 2 + (1 - noisy_c)];
        (noisy ? p.noisy : p.clean).insert(ids[i]);
        p.cluster_labels[ids[i]] = resp[i * 2 + 1] > resp[i * 2] ? 1 : 0;
    }
    return p;
}

/// k-component 2-D mixture on standardized (x, y). The noisy cluster is the one
/// whose polarity-signed standardized mean is largest, i.e. for accuracy (low
/// is noisy) against SCD (high is noisy) the top-left cluster.
inline Partition partition_gmm2d(std::span<const SampleId> ids, std::span<const double> xs, std::span<const double> ys,
                                 Polarity x_polarity, Polarity y_polarity, int clusters, GmmConfig cfg = {}) {
    if (ids.size() != xs.size() || ids.size() != ys.size())
        throw ConfigError("gmm2d partition: value streams differ in length");
    if (clusters < 2 || clusters > 3) throw ConfigError("gmm2d partition: clusters must be 2 or 3");
    cfg.k = clusters;
    std::vector<Point> pts;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (!std::isfinite(xs[i]) || !std::isfinite(ys[i])) throw ConfigError("gmm2d partition: non-finite value");
        pts.push_back({xs[i], ys[i]});
    }
    GmmModel model;
    try {
        model = fit_gmm(pts, cfg);
    } catch (const DegenerateDataError& e) {
        auto p = partition_threshold(ids, ys, y_polarity);
        p.method = "gmm2d";
        p.warnings.push_back(std::string("degenerate fit, fell back to median threshold on y: ") + e.what());
        return p;
    }
    const double sx = polarity_sign(x_polarity), sy = polarity_sign(y_polarity);
    int noisy_c = 0;
    double best = -std::numeric_limits<double>::infinity();
    std::vector<double> scores;
    for (int c = 0; c < clusters; ++c) {
        const double score = sx * model.means[c][0] + sy * model.means[c][1];
        scores.push_back(score);
        if (score > best) {
            best = score;
            noisy_c = c;
        }
    }
    auto resp = responsibilities(model, pts);
    Partition p;
    p.method = "gmm2d";
    p.parameters = {{"clusters", clusters},
                    {"x_polarity", x_polarity == Polarity::high_is_noisy ? "high" : "low"},
                    {"y_polarity", y_polarity == Polarity::high_is_noisy ? "high" : "low"},
                    {"noisy_cluster", noisy_c},
                    {"cluster_scores", scores},
                    {"gmm", gmm_to_json(model)}};
    for (std::size_t i = 0; i < ids.size(); ++i) {
        int label = 0;
        for (int c = 1; c < clusters; ++c)
            if (resp[i * clusters + c] > resp[i * clusters + label]) label = c;
        p.cluster_labels[ids[i]] = label;
        (label == noisy_c ? p.noisy : p.clean).insert(ids[i]);
    }
    return p;
}

// ---- method catalog ---------------------------------------------------------

enum class MethodKind { threshold, gmm1d, gmm2d };

/// One input stream of a method: a MetricTable column, or a centroid distance
/// recomputed from the traces under a specific variant.
struct MetricRef {
    std::string column;
    Polarity polarity = Polarity::high_is_noisy;
    std::optional<CentroidVariant> centroid;
};

struct MethodSpec {
    std::string name;
    MethodKind kind = MethodKind::threshold;
    std::vector<MetricRef> metrics;
    int clusters = 2;
    std::string note;

    void validate() const {
        const std::size_t want = kind == MethodKind::gmm2d ? 2 : 1;
        if (metrics.size() != want) throw ConfigError("method " + name + ": wrong number of metrics");
        if (kind == MethodKind::gmm2d && (clusters < 2 || clusters > 3))
            throw ConfigError("method " + name + ": clusters must be 2 or 3");
    }
};

namespace detail {

inline MetricRef col(std::string c, Polarity p) { return {std::move(c), p, std::nullopt}; }

inline MetricRef centroid(CentroidVariant v) { return {"centroid", Polarity::high_is_noisy, v}; }

inline CentroidVariant acd_variant(SnapshotEpoch e, Distance d, CentroidRule r) { return {e, d, r, 0.5}; }

}  // namespace detail

/// The seven comparison methods followed by the eight centroid-distance/cluster ablations.
inline std::vector<MethodSpec> builtin_methods() {
    using detail::acd_variant;
    using detail::centroid;
    using detail::col;
    const auto high = Polarity::high_is_noisy, low = Polarity::low_is_noisy;
    const auto mid = SnapshotEpoch::mid, end = SnapshotEpoch::end;
    const auto cos = Distance::cosine, euc = Distance::euclidean;
    const auto adaptive = CentroidRule::adaptive, fixed = CentroidRule::fixed_static;
    const std::string jsd_note = "WJSD replaced by plain JSD (jsd-substituted)";

    std::vector<MethodSpec> m;
    m.push_back({"Thres_Loss", MethodKind::threshold, {col("loss", high)}, 2, ""});
    m.push_back({"Thres_acc-over-training", MethodKind::threshold, {col("acc", low)}, 2, ""});
    m.push_back({"Thres_AUM", MethodKind::threshold, {col("aum", low)}, 2, ""});
    m.push_back({"1d-GMM_Loss", MethodKind::gmm1d, {col("loss", high)}, 2, ""});
    m.push_back({"1d-GMM_AUL", MethodKind::gmm1d, {col("aul", high)}, 2, ""});
    m.push_back({"2d-GMM_WJSD-ACD", MethodKind::gmm2d, {col("jsd", high), col("acd", high)}, 2, jsd_note});
    m.push_back({"2d-GMM_acc-SCD", MethodKind::gmm2d, {col("acc", low), col("scd", high)}, 3, ""});

    auto ablation = [&](std::string name, int clusters, CentroidVariant v) {
        m.push_back({std::move(name), MethodKind::gmm2d, {col("jsd", high), centroid(v)}, clusters, jsd_note});
    };
    ablation("2d-GMM_WJSD-ACD_mid", 2, acd_variant(mid, cos, adaptive));
    ablation("2d-GMM_WJSD-ACD_mid-norm", 2, acd_variant(mid, euc, adaptive));
    ablation("2d-GMM_WJSD-ACD_mid-static", 2, acd_variant(mid, cos, fixed));
    ablation("2d-GMM-3clusters_WJSD-ACD", 3, acd_variant(end, cos, adaptive));
    ablation("2d-GMM-3clusters_WJSD-ACD_mid", 3, acd_variant(mid, cos, adaptive));
    ablation("2d-GMM-3clusters_WJSD-ACD_mid-norm", 3, acd_variant(mid, euc, adaptive));
    ablation("2d-GMM-3clusters_WJSD-ACD_mid-static", 3, acd_variant(mid, cos, fixed));
    m.push_back({"2d-GMM-3clusters_acc-ACD", MethodKind::gmm2d, {col("acc", low), col("acd", high)}, 3, ""});
    return m;
}

/// Names of the seven comparison methods, in table order.
inline std::vector<std::string> comparison_method_names() {
    return {"Thres_Loss",  "Thres_acc-over-training", "Thres_AUM",     "1d-GMM_Loss",
            "1d-GMM_AUL",  "2d-GMM_WJSD-ACD",         "2d-GMM_acc-SCD"};
}

/// Looks up a catalog method; "JSD" is accepted wherever the catalog says "WJSD".
inline MethodSpec find_method(const std::string& name) {
    auto all = builtin_methods();
    for (const auto& m : all)
        if (m.name == name) return m;
    std::string alias = name;
    if (auto pos = alias.find("_JSD-"); pos != std::string::npos) {
        alias.replace(pos, 5, "_WJSD-");
        for (const auto& m : all)
            if (m.name == alias) return m;
    }
    throw UnknownMethodError(name);
}

inline std::vector<double> resolve_metric(const MetricRef& ref, const MetricTable& table, const TraceStore* traces) {
    if (!ref.centroid) return table.column(ref.column);
    if (!traces) throw ConfigError("metric '" + ref.column + "' needs the training traces");
    return centroid_distance(*traces, *ref.centroid).distance;
}

inline nlohmann::json metric_ref_json(const MetricRef& r) {
    nlohmann::json j{{"metric", r.column}, {"polarity", r.polarity == Polarity::high_is_noisy ? "high" : "low"}};
    if (r.centroid) j["centroid_variant"] = to_json(*r.centroid);
    return j;
}

inline Partition run_method(const MethodSpec& spec, const MetricTable& table, const TraceStore* traces,
                            const GmmConfig& gmm = {}) {
    spec.validate();
    Partition p;
    const auto& ids = table.ids;
    switch (spec.kind) {
        case MethodKind::threshold:
            p = partition_threshold(ids, resolve_metric(spec.metrics[0], table, traces), spec.metrics[0].polarity);
            break;
        case MethodKind::gmm1d:
            p = partition_gmm1d(ids, resolve_metric(spec.metrics[0], table, traces), spec.metrics[0].polarity, gmm);
            break;
        case MethodKind::gmm2d:
            p = partition_gmm2d(ids, resolve_metric(spec.metrics[0], table, traces),
                                resolve_metric(spec.metrics[1], table, traces), spec.metrics[0].polarity,
                                spec.metrics[1].polarity, spec.clusters, gmm);
            break;
    }
    p.method = spec.name;
    nlohmann::json metrics = nlohmann::json::array();
    for (const auto& r : spec.metrics) metrics.push_back(metric_ref_json(r));
    p.parameters["metrics"] = metrics;
    if (!spec.note.empty()) p.parameters["note"] = spec.note;
    return p;
}

// ---- serialization ---------------------------------------------------------

inline std::string partition_csv(const Partition& p) {
    std::vector<std::pair<SampleId, bool>> rows;
    for (auto id : p.clean) rows.emplace_back(id, false);
    for (auto id : p.noisy) rows.emplace_back(id, true);
    std::sort(rows.begin(), rows.end());
    std::string out = "id,subset,cluster_label\n";
    for (const auto& [id, noisy] : rows) {
        out += std::to_string(id) + ',' + (noisy ? "noisy" : "clean") + ',';
        if (auto it = p.cluster_labels.find(id); it != p.cluster_labels.end()) out += std::to_string(it->second);
        out += '\n';
    }
    return out;
}

inline nlohmann::json partition_json(const Partition& p) {
    return {{"method", p.method}, {"parameters", p.parameters}, {"warnings", p.warnings}};
}

inline Partition partition_from_text(const std::string& csv, const nlohmann::json& meta) {
    Partition p;
    p.method = meta.at("method").get<std::string>();
    p.parameters = meta.at("parameters");
    p.warnings = meta.at("warnings").get<std::vector<std::string>>();
    auto t = io::parse_csv(csv);
    const auto c_id = t.column("id"), c_sub = t.column("subset"), c_cl = t.column("cluster_label");
    for (const auto& row : t.rows) {
        const SampleId id = io::parse_int(row[c_id]);
        if (row[c_sub] == "noisy")
            p.noisy.insert(id);
        else if (row[c_sub] == "clean")
            p.clean.insert(id);
        else
            throw ConfigError("partition csv: bad subset '" + row[c_sub] + "'");
        if (!row[c_cl].empty()) p.cluster_labels[id] = static_cast<int>(io::parse_int(row[c_cl]));
    }
    return p;
}

}  // namespace hardnoise
