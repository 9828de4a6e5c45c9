#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "hardnoise/partition.hpp"

using namespace hardnoise;

namespace {

std::vector<Point> two_component_1d(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    std::vector<Point> pts;
    for (std::size_t i = 0; i < n; ++i) pts.push_back({(i % 2 ? 6.0 : 0.0) + g(rng)});
    return pts;
}

std::vector<SampleId> iota_ids(std::size_t n, SampleId first = 0) {
    std::vector<SampleId> ids(n);
    std::iota(ids.begin(), ids.end(), first);
    return ids;
}

void expect_disjoint_cover(const Partition& p, std::span<const SampleId> ids) {
    EXPECT_EQ(p.clean.size() + p.noisy.size(), ids.size());
    for (auto id : ids) EXPECT_NE(p.clean.count(id), p.noisy.count(id)) << id;
}

// Three blobs in (acc, scd): clean (high, low), middle, noisy (low acc, high scd).
struct Blobs {
    std::vector<SampleId> ids;
    std::vector<double> acc, scd;
    std::vector<int> blob;
};

Blobs three_blobs(std::uint64_t seed, int per = 150) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 0.03);
    const double centers[3][2] = {{0.95, 0.5}, {0.6, 1.5}, {0.1, 3.0}};
    Blobs b;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < per; ++i) {
            b.ids.push_back(static_cast<SampleId>(b.ids.size()) + 10);
            b.acc.push_back(centers[c][0] + g(rng));
            b.scd.push_back(centers[c][1] + 5 * g(rng));
            b.blob.push_back(c);
        }
    return b;
}

std::set<SampleId> blob_ids(const Blobs& b, int c) {
    std::set<SampleId> s;
    for (std::size_t i = 0; i < b.ids.size(); ++i)
        if (b.blob[i] == c) s.insert(b.ids[i]);
    return s;
}

}  // namespace

TEST(Gmm, SingleComponentClosedForm) {
    const std::vector<Point> pts{{1, 2}, {3, 1}, {2, 5}, {6, 0}};
    GmmConfig cfg;
    cfg.k = 1;
    cfg.standardize = false;
    const auto m = fit_gmm(pts, cfg);
    EXPECT_EQ(m.iterations, 1);
    EXPECT_NEAR(m.means[0][0], 3.0, 1e-12);
    EXPECT_NEAR(m.means[0][1], 2.0, 1e-12);
    // population covariance
    EXPECT_NEAR(m.covariances[0][0], 3.5, 1e-12);
    EXPECT_NEAR(m.covariances[0][1], -2.25, 1e-12);
    EXPECT_NEAR(m.covariances[0][3], 3.5, 1e-12);
    for (double r : responsibilities(m, pts)) EXPECT_DOUBLE_EQ(r, 1.0);
}

TEST(Gmm, StandardizedModelReportsRawParameters) {
    const std::vector<Point> pts{{1, 2}, {3, 1}, {2, 5}, {6, 0}};
    GmmConfig cfg;
    cfg.k = 1;
    const auto m = fit_gmm(pts, cfg);
    EXPECT_NEAR(m.raw_mean(0)[0], 3.0, 1e-12);
    EXPECT_NEAR(m.raw_covariance(0)[1], -2.25, 1e-12);
}

TEST(Gmm, RecoversKnownMixture) {
    const auto pts = two_component_1d(5000, 11);
    const auto m = fit_gmm(pts, GmmConfig{});
    std::vector<double> mu{m.raw_mean(0)[0], m.raw_mean(1)[0]};
    std::vector<double> w = m.weights;
    if (mu[0] > mu[1]) {
        std::swap(mu[0], mu[1]);
        std::swap(w[0], w[1]);
    }
    EXPECT_NEAR(mu[0], 0.0, 0.1);
    EXPECT_NEAR(mu[1], 6.0, 0.1);
    EXPECT_NEAR(w[0], 0.5, 0.05);
    EXPECT_NEAR(m.raw_covariance(0)[0], 1.0, 0.1);
}

TEST(Gmm, LogLikelihoodMonotone) {
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto b = three_blobs(seed, 60);
        std::vector<Point> pts;
        for (std::size_t i = 0; i < b.ids.size(); ++i) pts.push_back({b.acc[i], b.scd[i]});
        GmmConfig cfg;
        cfg.k = 3;
        cfg.seed = seed;
        const auto m = fit_gmm(pts, cfg);
        for (std::size_t i = 1; i < m.ll_history.size(); ++i)
            EXPECT_GE(m.ll_history[i], m.ll_history[i - 1] - 1e-9);
    }
}

TEST(Gmm, Deterministic) {
    const auto pts = two_component_1d(400, 5);
    GmmConfig cfg;
    cfg.seed = 9;
    EXPECT_EQ(gmm_to_json(fit_gmm(pts, cfg)), gmm_to_json(fit_gmm(pts, cfg)));
}

TEST(Gmm, PermutationOnlyReordersComponents) {
    auto pts = two_component_1d(600, 3);
    const auto a = fit_gmm(pts, GmmConfig{});
    std::shuffle(pts.begin(), pts.end(), std::mt19937_64(4));
    const auto b = fit_gmm(pts, GmmConfig{});
    std::vector<double> ma{a.raw_mean(0)[0], a.raw_mean(1)[0]}, mb{b.raw_mean(0)[0], b.raw_mean(1)[0]};
    std::sort(ma.begin(), ma.end());
    std::sort(mb.begin(), mb.end());
    EXPECT_NEAR(ma[0], mb[0], 1e-6);
    EXPECT_NEAR(ma[1], mb[1], 1e-6);
    EXPECT_NEAR(a.log_likelihood, b.log_likelihood, 1e-6);
}

TEST(Gmm, CovarianceFloor) {
    // one component collapses onto repeated points
    std::vector<Point> pts(20, Point{0.0, 0.0});
    for (int i = 0; i < 20; ++i) pts.push_back({5.0 + 0.1 * i, 1.0 - 0.05 * i});
    GmmConfig cfg;
    cfg.cov_floor = 1e-3;
    const auto m = fit_gmm(pts, cfg);
    for (const auto& cov : m.covariances) {
        const double tr = cov[0] + cov[3], det = cov[0] * cov[3] - cov[1] * cov[2];
        const double lo = 0.5 * (tr - std::sqrt(std::max(0.0, tr * tr - 4 * det)));
        EXPECT_GE(lo, 1e-3 * (1 - 1e-9));
    }
}

TEST(Gmm, DegenerateInputs) {
    const std::vector<Point> same(5, Point{1.0});
    EXPECT_THROW(fit_gmm(same, GmmConfig{}), DegenerateDataError);
    const std::vector<Point> one{{1.0}};
    EXPECT_THROW(fit_gmm(one, GmmConfig{}), DegenerateDataError);
    const std::vector<Point> mixed{{1.0}, {1.0, 2.0}};
    EXPECT_THROW(fit_gmm(mixed, GmmConfig{}), ConfigError);
    GmmConfig bad;
    bad.tol = 0;
    EXPECT_THROW(fit_gmm(two_component_1d(10, 1), bad), ConfigError);
}

TEST(Gmm, ResponsibilitiesNormalized) {
    const auto b = three_blobs(7, 40);
    std::vector<Point> pts;
    for (std::size_t i = 0; i < b.ids.size(); ++i) pts.push_back({b.acc[i], b.scd[i]});
    GmmConfig cfg;
    cfg.k = 3;
    const auto m = fit_gmm(pts, cfg);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-3, 5);
    std::vector<Point> probe;
    for (int i = 0; i < 50; ++i) probe.push_back({u(rng), u(rng)});
    const auto r = responsibilities(m, probe);
    for (int i = 0; i < 50; ++i) {
        double s = 0.0;
        for (int c = 0; c < 3; ++c) {
            EXPECT_GE(r[i * 3 + c], 0.0);
            EXPECT_LE(r[i * 3 + c], 1.0);
            s += r[i * 3 + c];
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
    EXPECT_THROW(responsibilities(m, std::vector<Point>{{1.0}}), ConfigError);
}

TEST(Gmm, PointAtSeparatedMean) {
    const auto m = fit_gmm(two_component_1d(2000, 2), GmmConfig{});
    const auto r = responsibilities(m, std::vector<Point>{m.raw_mean(0)});
    EXPECT_GT(r[0], 0.99);
}

namespace {

GmmModel standard_normal_1d() {
    GmmModel m;
    m.k = 1;
    m.dim = 1;
    m.weights = {1.0};
    m.means = {{0.0}};
    m.covariances = {{1.0}};
    m.shift = {0.0};
    m.scale = {1.0};
    return m;
}

}  // namespace

TEST(Gmm, LogDensityAtMode) {
    const auto m = standard_normal_1d();
    EXPECT_NEAR(log_likelihood(m, std::vector<Point>{{0.0}}), -0.5 * std::log(2 * std::numbers::pi), 1e-15);
    const double one = log_likelihood(m, std::vector<Point>{{0.7}});
    EXPECT_DOUBLE_EQ(log_likelihood(m, std::vector<Point>{{0.7}, {0.7}}), 2 * one);
}

TEST(Gmm, LogLikelihoodMatchesNaiveSum) {
    const auto pts = two_component_1d(300, 8);
    const auto m = fit_gmm(pts, GmmConfig{});
    double naive = 0.0;
    for (const auto& p : pts) {
        double dens = 0.0;
        for (int c = 0; c < 2; ++c) {
            const double mu = m.raw_mean(c)[0], var = m.raw_covariance(c)[0];
            dens += m.weights[c] * std::exp(-0.5 * (p[0] - mu) * (p[0] - mu) / var) / std::sqrt(2 * std::numbers::pi * var);
        }
        naive += std::log(dens);
    }
    EXPECT_NEAR(log_likelihood(m, pts), naive, 1e-10 * std::abs(naive));
    EXPECT_NEAR(m.log_likelihood, naive, 1e-10 * std::abs(naive));
}

TEST(Gmm, JsonRoundTrip) {
    const auto m = fit_gmm(two_component_1d(200, 1), GmmConfig{});
    const auto back = gmm_from_json(nlohmann::json::parse(gmm_to_json(m).dump()));
    EXPECT_EQ(gmm_to_json(back), gmm_to_json(m));
    const auto pts = two_component_1d(10, 2);
    EXPECT_EQ(responsibilities(back, pts), responsibilities(m, pts));
}

TEST(Threshold, MedianSplit) {
    const std::vector<SampleId> ids{10, 11, 12, 13, 14};
    const std::vector<double> v{3, 1, 5, 2, 4};
    const auto p = partition_threshold(ids, v, Polarity::high_is_noisy);
    EXPECT_EQ(p.noisy, (std::set<SampleId>{12, 14}));
    EXPECT_EQ(p.clean, (std::set<SampleId>{10, 11, 13}));
    EXPECT_DOUBLE_EQ(p.parameters["threshold"].get<double>(), 3.0);
}

TEST(Threshold, TiesStayClean) {
    const std::vector<SampleId> ids{1, 2, 3};
    const std::vector<double> v{2, 2, 2};
    EXPECT_TRUE(partition_threshold(ids, v, Polarity::high_is_noisy).noisy.empty());
    EXPECT_TRUE(partition_threshold(ids, v, Polarity::low_is_noisy).noisy.empty());
}

TEST(Threshold, EvenCountMedianAndFixedRule) {
    const std::vector<SampleId> ids{1, 2, 3, 4};
    const std::vector<double> v{1, 2, 3, 4};
    EXPECT_DOUBLE_EQ(partition_threshold(ids, v, Polarity::high_is_noisy).parameters["threshold"].get<double>(), 2.5);
    ThresholdRule fixed;
    fixed.fixed = 3.0;
    EXPECT_EQ(partition_threshold(ids, v, Polarity::high_is_noisy, fixed).noisy, std::set<SampleId>{4});
}

TEST(Threshold, LowPolarityMirrorsNegation) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g;
    const auto ids = iota_ids(51);
    std::vector<double> v, neg;
    for (int i = 0; i < 51; ++i) {
        v.push_back(g(rng));
        neg.push_back(-v.back());
    }
    const auto a = partition_threshold(ids, v, Polarity::low_is_noisy);
    const auto b = partition_threshold(ids, neg, Polarity::high_is_noisy);
    EXPECT_EQ(a.noisy, b.noisy);
    EXPECT_EQ(a.clean, b.clean);
}

TEST(Threshold, MonotoneTransformInvariance) {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.01, 4.0);
    const auto ids = iota_ids(40, 100);
    std::vector<double> v, t;
    for (int i = 0; i < 40; ++i) {
        v.push_back(u(rng));
        t.push_back(std::exp(3 * v.back()) + 1);
    }
    for (auto pol : {Polarity::high_is_noisy, Polarity::low_is_noisy}) {
        const auto a = partition_threshold(ids, v, pol), b = partition_threshold(ids, t, pol);
        EXPECT_EQ(a.noisy, b.noisy);
        expect_disjoint_cover(a, ids);
    }
}

TEST(Threshold, Errors) {
    EXPECT_THROW(partition_threshold({}, {}, Polarity::high_is_noisy), ConfigError);
    const std::vector<SampleId> ids{1, 2};
    const std::vector<double> v{1.0};
    EXPECT_THROW(partition_threshold(ids, v, Polarity::high_is_noisy), ConfigError);
}

TEST(Gmm1d, BimodalLoss) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> g(0.0, 0.05);
    const auto ids = iota_ids(200);
    std::vector<double> v;
    for (int i = 0; i < 200; ++i) v.push_back((i < 140 ? 0.1 : 3.0) + g(rng));
    const auto p = partition_gmm1d(ids, v, Polarity::high_is_noisy);
    expect_disjoint_cover(p, ids);
    for (int i = 0; i < 200; ++i) EXPECT_EQ(p.noisy.count(i), i >= 140 ? 1u : 0u) << i;
    EXPECT_TRUE(p.warnings.empty());

    const auto flipped = partition_gmm1d(ids, v, Polarity::low_is_noisy);
    EXPECT_EQ(flipped.noisy, p.clean);
    EXPECT_EQ(flipped.clean, p.noisy);
}

TEST(Gmm1d, MatchesNearestMeanWhenSeparated) {
    const auto pts = two_component_1d(500, 13);
    const auto ids = iota_ids(pts.size());
    std::vector<double> v;
    for (const auto& p : pts) v.push_back(3.0 * p[0]);
    const auto part = partition_gmm1d(ids, v, Polarity::high_is_noisy);
    const auto model = gmm_from_json(part.parameters["gmm"]);
    const double lo = std::min(model.raw_mean(0)[0], model.raw_mean(1)[0]);
    const double hi = std::max(model.raw_mean(0)[0], model.raw_mean(1)[0]);
    int disagree = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const bool near_hi = std::abs(v[i] - hi) < std::abs(v[i] - lo);
        disagree += near_hi != static_cast<bool>(part.noisy.count(ids[i]));
    }
    EXPECT_LE(disagree, 2);  // only points straddling the midpoint may differ
}

TEST(Gmm1d, DegenerateFallsBackToMedian) {
    const auto ids = iota_ids(4);
    const std::vector<double> v{1, 1, 1, 1};
    const auto p = partition_gmm1d(ids, v, Polarity::high_is_noisy);
    EXPECT_EQ(p.warnings.size(), 1u);
    EXPECT_TRUE(p.noisy.empty());
    expect_disjoint_cover(p, ids);
}

TEST(Gmm2d, ThreeBlobsNoisyCornerIsNoisy) {
    const auto b = three_blobs(21);
    const auto p = partition_gmm2d(b.ids, b.acc, b.scd, Polarity::low_is_noisy, Polarity::high_is_noisy, 3);
    EXPECT_EQ(p.noisy, blob_ids(b, 2));
    expect_disjoint_cover(p, b.ids);
    EXPECT_EQ(p.cluster_labels.size(), b.ids.size());
}

TEST(Gmm2d, TwoClustersGiveOneNoisyCluster) {
    const auto b = three_blobs(22);
    const auto p = partition_gmm2d(b.ids, b.acc, b.scd, Polarity::low_is_noisy, Polarity::high_is_noisy, 2);
    expect_disjoint_cover(p, b.ids);
    const auto noisy_blob = blob_ids(b, 2);
    EXPECT_TRUE(std::includes(p.noisy.begin(), p.noisy.end(), noisy_blob.begin(), noisy_blob.end()));
    EXPECT_LT(p.noisy.size(), b.ids.size());
    const int noisy_label = p.parameters["noisy_cluster"].get<int>();
    for (auto id : p.noisy) EXPECT_EQ(p.cluster_labels.at(id), noisy_label);
}

TEST(Gmm2d, SwappingStreamsKeepsNoisySet) {
    const auto b = three_blobs(23);
    const auto a = partition_gmm2d(b.ids, b.acc, b.scd, Polarity::low_is_noisy, Polarity::high_is_noisy, 3);
    const auto s = partition_gmm2d(b.ids, b.scd, b.acc, Polarity::high_is_noisy, Polarity::low_is_noisy, 3);
    EXPECT_EQ(a.noisy, s.noisy);
}

TEST(Gmm2d, Errors) {
    const std::vector<SampleId> ids{1, 2, 3};
    const std::vector<double> x{1, 2, 3}, y{1, 2}, bad{1, NAN, 3};
    EXPECT_THROW(partition_gmm2d(ids, x, y, Polarity::low_is_noisy, Polarity::high_is_noisy, 2), ConfigError);
    EXPECT_THROW(partition_gmm2d(ids, x, x, Polarity::low_is_noisy, Polarity::high_is_noisy, 4), ConfigError);
    EXPECT_THROW(partition_gmm2d(ids, x, bad, Polarity::low_is_noisy, Polarity::high_is_noisy, 2), ConfigError);
    const std::vector<double> same{2, 2, 2};
    const auto p = partition_gmm2d(ids, same, same, Polarity::low_is_noisy, Polarity::high_is_noisy, 2);
    EXPECT_EQ(p.warnings.size(), 1u);
}

TEST(Catalog, MethodsAndPolarities) {
    const auto all = builtin_methods();
    EXPECT_EQ(all.size(), 15u);
    const auto acc_scd = find_method("2d-GMM_acc-SCD");
    EXPECT_EQ(acc_scd.kind, MethodKind::gmm2d);
    EXPECT_EQ(acc_scd.clusters, 3);
    EXPECT_EQ(acc_scd.metrics[0].polarity, Polarity::low_is_noisy);
    EXPECT_EQ(acc_scd.metrics[1].polarity, Polarity::high_is_noisy);
    EXPECT_EQ(find_method("Thres_AUM").metrics[0].polarity, Polarity::low_is_noisy);
    EXPECT_EQ(find_method("Thres_Loss").metrics[0].polarity, Polarity::high_is_noisy);
    EXPECT_EQ(find_method("2d-GMM_JSD-ACD").name, "2d-GMM_WJSD-ACD");
    EXPECT_THROW(find_method("no-such-method"), UnknownMethodError);
    for (const auto& name : comparison_method_names()) EXPECT_NO_THROW(find_method(name));
    std::set<std::string> names;
    for (const auto& m : all) names.insert(m.name);
    EXPECT_EQ(names.size(), all.size());
}

TEST(Catalog, AblationVariants) {
    const auto mid_norm = find_method("2d-GMM_WJSD-ACD_mid-norm");
    ASSERT_TRUE(mid_norm.metrics[1].centroid.has_value());
    EXPECT_EQ(mid_norm.metrics[1].centroid->epoch, SnapshotEpoch::mid);
    EXPECT_EQ(mid_norm.metrics[1].centroid->distance, Distance::euclidean);
    EXPECT_EQ(mid_norm.metrics[1].centroid->centroid, CentroidRule::adaptive);
    const auto stat = find_method("2d-GMM-3clusters_WJSD-ACD_mid-static");
    EXPECT_EQ(stat.clusters, 3);
    EXPECT_EQ(stat.metrics[1].centroid->centroid, CentroidRule::fixed_static);
}

TEST(RunMethod, ThresholdOnTableAndRoundTrip) {
    MetricTable t;
    t.epochs = 5;
    t.ids = {7, 8, 9, 10};
    t.loss_end = {0.1, 2.0, 0.3, 5.0};
    t.confidence_end = t.acc_over_training = t.aul = t.aum = t.jsd = t.acd = t.scd = {0, 0, 0, 0};
    t.first_pred_epoch = {1, 2, std::nullopt, 3};
    const auto p = run_method(find_method("Thres_Loss"), t, nullptr);
    EXPECT_EQ(p.method, "Thres_Loss");
    EXPECT_EQ(p.noisy, (std::set<SampleId>{8, 10}));
    const auto back = partition_from_text(partition_csv(p), partition_json(p));
    EXPECT_EQ(back.clean, p.clean);
    EXPECT_EQ(back.noisy, p.noisy);
    EXPECT_EQ(back.parameters, p.parameters);
    EXPECT_THROW(run_method(find_method("2d-GMM_WJSD-ACD_mid"), t, nullptr), ConfigError);
}
