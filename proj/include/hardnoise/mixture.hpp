#pragma once

// Gaussian mixtures in one or two dimensions fitted by expectation-maximization.
// Inputs are z-scored per dimension before fitting; the model keeps the
// transform so raw points can be scored directly.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hardnoise/dataset.hpp"
#include "hardnoise/errors.hpp"

namespace hardnoise {

using Point = std::vector<double>;

enum class GmmInit { farthest_point, random };

struct GmmConfig {
    int k = 2;
    int max_iter = 200;
    double tol = 1e-6;
    double cov_floor = 1e-6;
    GmmInit init = GmmInit::farthest_point;
    std::uint64_t seed = 0;
    int restarts = 3;
    bool standardize = true;

    void validate() const {
        if (k < 1) throw ConfigError("gmm: k must be >= 1");
        if (!(tol > 0.0)) throw ConfigError("gmm: tol must be > 0");
        if (max_iter < 1 || restarts < 1) throw ConfigError("gmm: max_iter and restarts must be >= 1");
        if (!(cov_floor > 0.0)) throw ConfigError("gmm: cov_floor must be > 0");
    }
};

/// Means and covariances live in standardized space: z = (x - shift) / scale.
struct GmmModel {
    int k = 0;
    int dim = 0;
    std::vector<double> weights;
    std::vector<Point> means;
    std::vector<std::vector<double>> covariances;  // dim x dim, row-major
    std::vector<double> shift, scale;
    double log_likelihood = 0.0;                    // of the fitted data, raw space
    int iterations = 0;
    std::vector<double> ll_history;                 // per EM round, standardized space

    Point standardize(std::span<const double> x) const {
        Point z(dim);
        for (int d = 0; d < dim; ++d) z[d] = (x[d] - shift[d]) / scale[d];
        return z;
    }

    Point raw_mean(int c) const {
        Point m(dim);
        for (int d = 0; d < dim; ++d) m[d] = means[c][d] * scale[d] + shift[d];
        return m;
    }

    std::vector<double> raw_covariance(int c) const {
        std::vector<double> cov(covariances[c]);
        for (int a = 0; a < dim; ++a)
            for (int b = 0; b < dim; ++b) cov[a * dim + b] *= scale[a] * scale[b];
        return cov;
    }
};

namespace detail {

// Symmetric covariance with eigenvalues clamped from below.
inline void floor_covariance(std::vector<double>& cov, int dim, double floor) {
    if (dim == 1) {
        cov[0] = std::max(cov[0], floor);
        return;
    }
    const double a = cov[0], b = 0.5 * (cov[1] + cov[2]), c = cov[3];
    const double mid = 0.5 * (a + c), rad = std::sqrt(0.25 * (a - c) * (a - c) + b * b);
    double l1 = mid + rad, l2 = mid - rad;
    if (l2 >= floor) {
        cov[1] = cov[2] = b;
        return;
    }
    // Eigenvector for l1.
    double vx, vy;
    if (std::abs(b) > 1e-300) {
        vx = l1 - c;
        vy = b;
    } else if (a >= c) {
        vx = 1.0;
        vy = 0.0;
    } else {
        vx = 0.0;
        vy = 1.0;
    }
    const double norm = std::hypot(vx, vy);
    vx /= norm;
    vy /= norm;
    l1 = std::max(l1, floor);
    l2 = std::max(l2, floor);
    cov[0] = l1 * vx * vx + l2 * vy * vy;
    cov[1] = cov[2] = (l1 - l2) * vx * vy;
    cov[3] = l1 * vy * vy + l2 * vx * vx;
}

struct GaussianTerms {
    std::vector<double> inv;
    double log_norm = 0.0;  // -0.5 * (dim*log(2pi) + log det)
};

inline GaussianTerms gaussian_terms(const std::vector<double>& cov, int dim) {
    GaussianTerms g;
    const double log2pi = std::log(2.0 * std::numbers::pi);
    if (dim == 1) {
        g.inv = {1.0 / cov[0]};
        g.log_norm = -0.5 * (log2pi + std::log(cov[0]));
        return g;
    }
    const double det = cov[0] * cov[3] - cov[1] * cov[2];
    g.inv = {cov[3] / det, -cov[1] / det, -cov[2] / det, cov[0] / det};
    g.log_norm = -0.5 * (2.0 * log2pi + std::log(det));
    return g;
}

inline double log_gaussian(std::span<const double> z, std::span<const double> mean, const GaussianTerms& g, int dim) {
    if (dim == 1) {
        const double d = z[0] - mean[0];
        return g.log_norm - 0.5 * d * d * g.inv[0];
    }
    const double dx = z[0] - mean[0], dy = z[1] - mean[1];
    const double q = dx * (g.inv[0] * dx + g.inv[1] * dy) + dy * (g.inv[2] * dx + g.inv[3] * dy);
    return g.log_norm - 0.5 * q;
}

inline double log_sum_exp(std::span<const double> v) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double a : v) mx = std::max(mx, a);
    if (!std::isfinite(mx)) return mx;
    double s = 0.0;
    for (double a : v) s += std::exp(a - mx);
    return mx + std::log(s);
}

inline int check_points(std::span<const Point> points) {
    if (points.empty()) throw ConfigError("gmm: no points");
    const int dim = static_cast<int>(points[0].size());
    if (dim < 1 || dim > 2) throw ConfigError("gmm: only 1-D and 2-D mixtures are supported");
    for (const auto& p : points) {
        if (static_cast<int>(p.size()) != dim) throw ConfigError("gmm: points have mixed dimensions");
        for (double v : p)
            if (!std::isfinite(v)) throw ConfigError("gmm: non-finite point");
    }
    return dim;
}

// Per-point log(w_c * N(z | mu_c, Sigma_c)), row-major N x k.
inline std::vector<double> weighted_log_densities(const GmmModel& m, std::span<const Point> z) {
    std::vector<GaussianTerms> terms;
    for (int c = 0; c < m.k; ++c) terms.push_back(gaussian_terms(m.covariances[c], m.dim));
    std::vector<double> out(z.size() * m.k);
    for (std::size_t i = 0; i < z.size(); ++i)
        for (int c = 0; c < m.k; ++c)
            out[i * m.k + c] = std::log(m.weights[c]) + log_gaussian(z[i], m.means[c], terms[c], m.dim);
    return out;
}

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t d = 0; d < a.size(); ++d) s += (a[d] - b[d]) * (a[d] - b[d]);
    return s;
}

// Weighted mean/covariance M-step for one component given responsibilities column.
inline void m_step_component(GmmModel& m, int c, std::span<const Point> z, std::span<const double> resp,
                             double cov_floor) {
    const int dim = m.dim;
    double nk = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) nk += resp[i * m.k + c];
    if (nk <= 1e-12) {
        m.weights[c] = 1e-300;
        return;
    }
    Point mean(dim, 0.0);
    for (std::size_t i = 0; i < z.size(); ++i)
        for (int d = 0; d < dim; ++d) mean[d] += resp[i * m.k + c] * z[i][d];
    for (double& v : mean) v /= nk;
    std::vector<double> cov(dim * dim, 0.0);
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double r = resp[i * m.k + c];
        for (int a = 0; a < dim; ++a)
            for (int b = 0; b < dim; ++b) cov[a * dim + b] += r * (z[i][a] - mean[a]) * (z[i][b] - mean[b]);
    }
    for (double& v : cov) v /= nk;
    floor_covariance(cov, dim, cov_floor);
    m.weights[c] = nk / static_cast<double>(z.size());
    m.means[c] = std::move(mean);
    m.covariances[c] = std::move(cov);
}

inline GmmModel initialise(std::span<const Point> z, int dim, const GmmConfig& cfg, std::uint64_t seed) {
    const std::size_t N = z.size();
    const int k = cfg.k;
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> centers;
    if (cfg.init == GmmInit::random) {
        std::vector<std::size_t> idx(N);
        for (std::size_t i = 0; i < N; ++i) idx[i] = i;
        std::shuffle(idx.begin(), idx.end(), rng);
        centers.assign(idx.begin(), idx.begin() + k);
    } else {
        std::uniform_int_distribution<std::size_t> pick(0, N - 1);
        centers.push_back(pick(rng));
        std::vector<double> best(N, std::numeric_limits<double>::infinity());
        while (static_cast<int>(centers.size()) < k) {
            std::size_t arg = 0;
            double far = -1.0;
            for (std::size_t i = 0; i < N; ++i) {
                best[i] = std::min(best[i], sq_dist(z[i], z[centers.back()]));
                if (best[i] > far) {
                    far = best[i];
                    arg = i;
                }
            }
            centers.push_back(arg);
        }
    }
    std::vector<Point> means;
    for (auto c : centers) means.push_back(z[c]);

    // A few hard-assignment refinement rounds.
    std::vector<int> label(N, 0);
    for (int round = 0; round < 5; ++round) {
        for (std::size_t i = 0; i < N; ++i) {
            double bd = std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) {
                double d = sq_dist(z[i], means[c]);
                if (d < bd) {
                    bd = d;
                    label[i] = c;
                }
            }
        }
        std::vector<Point> sums(k, Point(dim, 0.0));
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < N; ++i) {
            ++counts[label[i]];
            for (int d = 0; d < dim; ++d) sums[label[i]][d] += z[i][d];
        }
        for (int c = 0; c < k; ++c)
            if (counts[c] > 0)
                for (int d = 0; d < dim; ++d) means[c][d] = sums[c][d] / static_cast<double>(counts[c]);
    }

    GmmModel m;
    m.k = k;
    m.dim = dim;
    m.weights.assign(k, 1.0 / k);
    m.means = means;
    m.covariances.assign(k, std::vector<double>(dim * dim, 0.0));
    std::vector<double> resp(N * k, 0.0);
    for (std::size_t i = 0; i < N; ++i) resp[i * k + label[i]] = 1.0;
    for (int c = 0; c < k; ++c) {
        m_step_component(m, c, z, resp, cfg.cov_floor);
        if (m.weights[c] < 1e-200) {
            // Empty cluster: unit covariance at its seed point.
            m.weights[c] = 1.0 / static_cast<double>(N);
            m.covariances[c].assign(dim * dim, 0.0);
            for (int d = 0; d < dim; ++d) m.covariances[c][d * dim + d] = 1.0;
        }
    }
    double wsum = 0.0;
    for (double w : m.weights) wsum += w;
    for (double& w : m.weights) w /= wsum;
    return m;
}

inline GmmModel run_em(GmmModel m, std::span<const Point> z, const GmmConfig& cfg) {
    const std::size_t N = z.size();
    const int k = m.k;
    std::vector<double> resp(N * k);
    double prev = -std::numeric_limits<double>::infinity();
    m.ll_history.clear();
    m.iterations = 0;
    for (int iter = 0; iter < cfg.max_iter; ++iter) {
        auto logd = weighted_log_densities(m, z);
        double ll = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            std::span<const double> row(logd.data() + i * k, k);
            const double lse = log_sum_exp(row);
            ll += lse;
            for (int c = 0; c < k; ++c) resp[i * k + c] = std::exp(row[c] - lse);
        }
        m.ll_history.push_back(ll);
        if (iter > 0 && ll - prev < cfg.tol) break;
        prev = ll;
        for (int c = 0; c < k; ++c) m_step_component(m, c, z, resp, cfg.cov_floor);
        ++m.iterations;
    }
    return m;
}

}  // namespace detail

/// log of the mixture density summed over raw points (log-sum-exp per point).
inline double log_likelihood(const GmmModel& m, std::span<const Point> points) {
    double jac = 0.0;
    for (double s : m.scale) jac += std::log(s);
    double ll = 0.0;
    std::vector<Point> z;
    for (const auto& p : points) {
        if (static_cast<int>(p.size()) != m.dim) throw ConfigError("gmm: point dimension mismatch");
        z.push_back(m.standardize(p));
    }
    auto logd = detail::weighted_log_densities(m, z);
    for (std::size_t i = 0; i < z.size(); ++i)
        ll += detail::log_sum_exp(std::span<const double>(logd.data() + i * m.k, m.k)) - jac;
    return ll;
}

/// Posterior component probabilities, N x k row-major.
inline std::vector<double> responsibilities(const GmmModel& m, std::span<const Point> points) {
    std::vector<Point> z;
    for (const auto& p : points) {
        if (static_cast<int>(p.size()) != m.dim) throw ConfigError("gmm: point dimension mismatch");
        z.push_back(m.standardize(p));
    }
    auto logd = detail::weighted_log_densities(m, z);
    std::vector<double> out(logd.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        std::span<const double> row(logd.data() + i * m.k, m.k);
        const double lse = detail::log_sum_exp(row);
        for (int c = 0; c < m.k; ++c) out[i * m.k + c] = std::exp(row[c] - lse);
    }
    return out;
}

inline GmmModel fit_gmm(std::span<const Point> points, const GmmConfig& cfg) {
    cfg.validate();
    const int dim = detail::check_points(points);
    const std::size_t N = points.size();
    if (N < static_cast<std::size_t>(cfg.k))
        throw DegenerateDataError("gmm: " + std::to_string(N) + " points for " + std::to_string(cfg.k) + " components");

    std::vector<double> shift(dim, 0.0), scale(dim, 1.0);
    bool all_identical = true;
    for (const auto& p : points)
        if (p != points[0]) {
            all_identical = false;
            break;
        }
    if (all_identical && cfg.k > 1) throw DegenerateDataError("gmm: all points identical");
    if (cfg.standardize) {
        for (int d = 0; d < dim; ++d) {
            double mean = 0.0;
            for (const auto& p : points) mean += p[d];
            mean /= static_cast<double>(N);
            double var = 0.0;
            for (const auto& p : points) var += (p[d] - mean) * (p[d] - mean);
            var /= static_cast<double>(N);
            shift[d] = mean;
            scale[d] = var > 0.0 ? std::sqrt(var) : 1.0;
        }
    }
    std::vector<Point> z;
    z.reserve(N);
    for (const auto& p : points) {
        Point q(dim);
        for (int d = 0; d < dim; ++d) q[d] = (p[d] - shift[d]) / scale[d];
        z.push_back(std::move(q));
    }

    GmmModel best;
    bool have = false;
    const int restarts = cfg.k == 1 ? 1 : cfg.restarts;
    for (int r = 0; r < restarts; ++r) {
        auto init = detail::initialise(z, dim, cfg, derive_seed(cfg.seed, static_cast<std::uint64_t>(r)));
        auto fitted = detail::run_em(std::move(init), z, cfg);
        if (!have || fitted.ll_history.back() > best.ll_history.back()) {
            best = std::move(fitted);
            have = true;
        }
    }
    best.shift = shift;
    best.scale = scale;
    best.log_likelihood = log_likelihood(best, points);
    return best;
}

inline nlohmann::json gmm_to_json(const GmmModel& m) {
    return {{"k", m.k},
            {"dim", m.dim},
            {"weights", m.weights},
            {"means", m.means},
            {"covariances", m.covariances},
            {"standardization", {{"shift", m.shift}, {"scale", m.scale}}},
            {"log_likelihood", m.log_likelihood},
            {"iterations", m.iterations}};
}

inline GmmModel gmm_from_json(const nlohmann::json& j) {
    GmmModel m;
    m.k = j.at("k").get<int>();
    m.dim = j.at("dim").get<int>();
    m.weights = j.at("weights").get<std::vector<double>>();
    m.means = j.at("means").get<std::vector<Point>>();
    m.covariances = j.at("covariances").get<std::vector<std::vector<double>>>();
    m.shift = j.at("standardization").at("shift").get<std::vector<double>>();
    m.scale = j.at("standardization").at("scale").get<std::vector<double>>();
    m.log_likelihood = j.at("log_likelihood").get<double>();
    m.iterations = j.at("iterations").get<int>();
    return m;
}

}  // namespace hardnoise
