#pragma once

// Per-sample detection metrics computed from a TraceStore: end-of-training
// loss/confidence/JSD, trajectory metrics (first prediction epoch, accuracy
// over training, AUL, AUM) and the centroid-distance family (SCD, ACD and
// their ablation variants).

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hardnoise/errors.hpp"
#include "hardnoise/io.hpp"
#include "hardnoise/nn.hpp"

namespace hardnoise {

/// Jensen-Shannon divergence in nats between two distributions of equal length.
inline double jensen_shannon(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw ConfigError("jsd: length mismatch");
    double kl_p = 0.0, kl_q = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0.0) kl_p += p[i] * std::log(p[i] / m);
        if (q[i] > 0.0) kl_q += q[i] * std::log(q[i] / m);
    }
    return 0.5 * (kl_p + kl_q);
}

/// JSD between a distribution and the one-hot vector of class c depends only on p_c.
inline double jsd_to_onehot(double p_c) {
    p_c = std::clamp(p_c, 0.0, 1.0);
    const double ln2 = std::numbers::ln2;
    double kl_p = (1.0 - p_c) * ln2;
    if (p_c > 0.0) kl_p += p_c * std::log(2.0 * p_c / (1.0 + p_c));
    const double kl_onehot = std::log(2.0 / (1.0 + p_c));
    return std::max(0.0, 0.5 * (kl_p + kl_onehot));
}

enum class SnapshotEpoch { mid, end };
enum class Distance { euclidean, cosine };
enum class CentroidRule { fixed_static, adaptive };

struct CentroidVariant {
    SnapshotEpoch epoch = SnapshotEpoch::mid;
    Distance distance = Distance::euclidean;
    CentroidRule centroid = CentroidRule::fixed_static;
    double tau = 0.5;  // adaptive membership confidence threshold

    static CentroidVariant scd() { return {SnapshotEpoch::mid, Distance::euclidean, CentroidRule::fixed_static, 0.5}; }
    static CentroidVariant acd() { return {SnapshotEpoch::end, Distance::cosine, CentroidRule::adaptive, 0.5}; }

    friend bool operator==(const CentroidVariant&, const CentroidVariant&) = default;
};

inline nlohmann::json to_json(const CentroidVariant& v) {
    return {{"epoch", v.epoch == SnapshotEpoch::mid ? "mid" : "end"},
            {"distance", v.distance == Distance::euclidean ? "euclidean" : "cosine"},
            {"centroid", v.centroid == CentroidRule::fixed_static ? "static" : "adaptive"},
            {"tau", v.tau}};
}

struct CentroidResult {
    std::vector<double> distance;        // per sample
    std::vector<int> fallback_classes;   // adaptive classes that had no members and used the static centroid
};

/// Distance of each feature row to the centroid of its assigned class.
/// `preds` and `p_assigned` are the per-sample prediction and assigned-class
/// probability at the snapshot epoch; they only matter for adaptive centroids.
inline CentroidResult centroid_distance(std::span<const double> features, int feature_dim,
                                        std::span<const int> assigned, std::span<const int> preds,
                                        std::span<const double> p_assigned, const CentroidVariant& variant) {
    const std::size_t N = assigned.size();
    const std::size_t m = static_cast<std::size_t>(feature_dim);
    if (features.size() != N * m) throw ConfigError("centroid distance: feature matrix shape mismatch");
    if (variant.centroid == CentroidRule::adaptive && (preds.size() != N || p_assigned.size() != N))
        throw ConfigError("centroid distance: adaptive rule needs predictions and assigned-class probabilities");
    int K = 0;
    for (int a : assigned) K = std::max(K, a + 1);
    for (int p : preds) K = std::max(K, p + 1);

    auto row = [&](std::size_t i) { return features.subspan(i * m, m); };

    std::vector<double> static_sum(K * m, 0.0), adaptive_sum(K * m, 0.0);
    std::vector<std::size_t> static_count(K, 0), adaptive_count(K, 0);
    for (std::size_t i = 0; i < N; ++i) {
        auto f = row(i);
        const int c = assigned[i];
        ++static_count[c];
        for (std::size_t k = 0; k < m; ++k) static_sum[c * m + k] += f[k];
        if (variant.centroid == CentroidRule::adaptive) {
            int member_of = -1;
            if (preds[i] != c)
                member_of = preds[i];
            else if (p_assigned[i] >= variant.tau)
                member_of = c;
            // A sample predicted as its own class but with low confidence joins no centroid.
            if (member_of >= 0) {
                ++adaptive_count[member_of];
                for (std::size_t k = 0; k < m; ++k) adaptive_sum[member_of * m + k] += f[k];
            }
        }
    }

    CentroidResult out;
    std::vector<double> centroid(K * m, 0.0);
    for (int c = 0; c < K; ++c) {
        const bool use_adaptive = variant.centroid == CentroidRule::adaptive && adaptive_count[c] > 0;
        if (variant.centroid == CentroidRule::adaptive && adaptive_count[c] == 0 && static_count[c] > 0)
            out.fallback_classes.push_back(c);
        const auto& sum = use_adaptive ? adaptive_sum : static_sum;
        const std::size_t cnt = use_adaptive ? adaptive_count[c] : static_count[c];
        if (cnt == 0) continue;
        for (std::size_t k = 0; k < m; ++k) centroid[c * m + k] = sum[c * m + k] / static_cast<double>(cnt);
    }

    out.distance.resize(N);
    for (std::size_t i = 0; i < N; ++i) {
        auto f = row(i);
        const double* o = centroid.data() + assigned[i] * m;
        if (variant.distance == Distance::euclidean) {
            double s = 0.0;
            for (std::size_t k = 0; k < m; ++k) s += (f[k] - o[k]) * (f[k] - o[k]);
            out.distance[i] = std::sqrt(s);
        } else {
            double dot = 0.0, nf = 0.0, no = 0.0;
            for (std::size_t k = 0; k < m; ++k) {
                dot += f[k] * o[k];
                nf += f[k] * f[k];
                no += o[k] * o[k];
            }
            // A zero vector has no direction; treat it as orthogonal.
            const double cos = (nf > 0.0 && no > 0.0) ? dot / std::sqrt(nf * no) : 0.0;
            out.distance[i] = std::clamp(1.0 - cos, 0.0, 2.0);
        }
    }
    return out;
}

/// Centroid distance of a trace store, reading features and predictions at the variant's snapshot epoch.
inline CentroidResult centroid_distance(const TraceStore& tr, const CentroidVariant& variant) {
    const int epoch = variant.epoch == SnapshotEpoch::mid ? tr.mid_epoch : tr.epochs;
    const auto& feats = variant.epoch == SnapshotEpoch::mid ? tr.mid_features : tr.end_features;
    std::vector<int> preds(tr.num_samples);
    std::vector<double> p_assigned(tr.num_samples);
    for (int i = 0; i < tr.num_samples; ++i) {
        preds[i] = tr.at(epoch, i).pred;
        p_assigned[i] = tr.at(epoch, i).p_assigned;
    }
    return centroid_distance(feats, tr.feature_dim, tr.assigned, preds, p_assigned, variant);
}

enum class AumVariant { assigned_margin, predicted_margin };

struct EndOfTraining {
    std::vector<double> loss, confidence, jsd;
};

inline void check_traces(const TraceStore& tr) {
    if (tr.epochs < 1 || tr.records.size() != static_cast<std::size_t>(tr.epochs) * tr.num_samples)
        throw ConfigError("metrics: trace store does not cover epochs 1..T");
}

inline EndOfTraining end_of_training_metrics(const TraceStore& tr) {
    check_traces(tr);
    EndOfTraining out;
    for (int i = 0; i < tr.num_samples; ++i) {
        const auto& r = tr.at(tr.epochs, i);
        out.loss.push_back(r.loss);
        out.confidence.push_back(r.p_pred);
        out.jsd.push_back(jsd_to_onehot(r.p_assigned));
    }
    return out;
}

struct Trajectory {
    std::vector<std::optional<int>> first_pred_epoch;
    std::vector<double> acc_over_training, aul, aum;
};

inline Trajectory trajectory_metrics(const TraceStore& tr, AumVariant aum = AumVariant::assigned_margin) {
    check_traces(tr);
    Trajectory out;
    const double T = tr.epochs;
    for (int i = 0; i < tr.num_samples; ++i) {
        std::optional<int> first;
        int hits = 0;
        double aul = 0.0, margin = 0.0;
        for (int t = 1; t <= tr.epochs; ++t) {
            const auto& r = tr.at(t, i);
            if (r.pred == tr.assigned[i]) {
                ++hits;
                if (!first) first = t;
            }
            aul += r.loss;
            margin += aum == AumVariant::assigned_margin ? r.p_assigned - r.p_max_other : r.p_pred - r.p_runner_up;
        }
        out.first_pred_epoch.push_back(first);
        out.acc_over_training.push_back(hits / T);
        out.aul.push_back(aul);
        out.aum.push_back(margin / T);
    }
    return out;
}

struct MetricOptions {
    AumVariant aum = AumVariant::assigned_margin;
    CentroidVariant acd = CentroidVariant::acd();
    CentroidVariant scd = CentroidVariant::scd();
};

struct MetricTable {
    int epochs = 0;
    std::vector<SampleId> ids;
    std::vector<double> loss_end, confidence_end;
    std::vector<std::optional<int>> first_pred_epoch;
    std::vector<double> acc_over_training, aul, aum, jsd, acd, scd;
    std::vector<int> acd_fallback_classes;

    std::size_t size() const { return ids.size(); }

    /// first_pred_epoch with "never" encoded as T+1.
    std::vector<double> first_pred_numeric() const {
        std::vector<double> v;
        for (const auto& f : first_pred_epoch) v.push_back(f ? *f : epochs + 1);
        return v;
    }

    /// Column by name (loss, confidence, first_pred_epoch, acc, aul, aum, jsd, acd, scd).
    std::vector<double> column(const std::string& name) const {
        if (name == "loss") return loss_end;
        if (name == "confidence") return confidence_end;
        if (name == "first_pred_epoch") return first_pred_numeric();
        if (name == "acc") return acc_over_training;
        if (name == "aul") return aul;
        if (name == "aum") return aum;
        if (name == "jsd") return jsd;
        if (name == "acd") return acd;
        if (name == "scd") return scd;
        throw ConfigError("metric table: unknown column '" + name + "'");
    }
};

inline MetricTable compute_metrics(const TraceStore& tr, const MetricOptions& opt = {}) {
    auto end = end_of_training_metrics(tr);
    auto traj = trajectory_metrics(tr, opt.aum);
    auto acd = centroid_distance(tr, opt.acd);
    auto scd = centroid_distance(tr, opt.scd);
    MetricTable t;
    t.epochs = tr.epochs;
    t.ids = tr.ids;
    t.loss_end = std::move(end.loss);
    t.confidence_end = std::move(end.confidence);
    t.jsd = std::move(end.jsd);
    t.first_pred_epoch = std::move(traj.first_pred_epoch);
    t.acc_over_training = std::move(traj.acc_over_training);
    t.aul = std::move(traj.aul);
    t.aum = std::move(traj.aum);
    t.acd = std::move(acd.distance);
    t.acd_fallback_classes = std::move(acd.fallback_classes);
    t.scd = std::move(scd.distance);
    return t;
}

// ---- serialization ---------------------------------------------------------

inline std::string metric_table_csv(const MetricTable& t) {
    std::string out = "id,loss_end,confidence_end,first_pred_epoch,acc_over_training,aul,aum,jsd,acd,scd\n";
    for (std::size_t i = 0; i < t.size(); ++i) {
        out += std::to_string(t.ids[i]) + ',' + io::format_double(t.loss_end[i]) + ',' +
               io::format_double(t.confidence_end[i]) + ',' +
               (t.first_pred_epoch[i] ? std::to_string(*t.first_pred_epoch[i]) : std::string()) + ',' +
               io::format_double(t.acc_over_training[i]) + ',' + io::format_double(t.aul[i]) + ',' +
               io::format_double(t.aum[i]) + ',' + io::format_double(t.jsd[i]) + ',' + io::format_double(t.acd[i]) +
               ',' + io::format_double(t.scd[i]) + '\n';
    }
    return out;
}

inline nlohmann::json metric_table_sidecar(const MetricTable& t, const MetricOptions& opt) {
    return {{"epochs", t.epochs},
            {"aum", opt.aum == AumVariant::assigned_margin ? "assigned_margin" : "predicted_margin"},
            {"acd", to_json(opt.acd)},
            {"scd", to_json(opt.scd)},
            {"jsd_log_base", "e"},
            {"first_pred_epoch_never", "empty (numeric sentinel T+1)"},
            {"acd_fallback_classes", t.acd_fallback_classes}};
}

inline MetricTable metric_table_from_text(const std::string& csv, const nlohmann::json& sidecar) {
    MetricTable t;
    t.epochs = sidecar.at("epochs").get<int>();
    t.acd_fallback_classes = sidecar.at("acd_fallback_classes").get<std::vector<int>>();
    auto table = io::parse_csv(csv);
    for (const auto& row : table.rows) {
        t.ids.push_back(io::parse_int(row[table.column("id")]));
        t.loss_end.push_back(io::parse_double(row[table.column("loss_end")]));
        t.confidence_end.push_back(io::parse_double(row[table.column("confidence_end")]));
        const auto& fpe = row[table.column("first_pred_epoch")];
        t.first_pred_epoch.push_back(fpe.empty() ? std::nullopt
                                                 : std::optional<int>(static_cast<int>(io::parse_int(fpe))));
        t.acc_over_training.push_back(io::parse_double(row[table.column("acc_over_training")]));
        t.aul.push_back(io::parse_double(row[table.column("aul")]));
        t.aum.push_back(io::parse_double(row[table.column("aum")]));
        t.jsd.push_back(io::parse_double(row[table.column("jsd")]));
        t.acd.push_back(io::parse_double(row[table.column("acd")]));
        t.scd.push_back(io::parse_double(row[table.column("scd")]));
    }
    return t;
}

}  // namespace hardnoise
