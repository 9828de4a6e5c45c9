#pragma once

// Hardness transforms (imbalance, diversification, boundary closeness), the
// stratified label-noise transform, and the easy/hard/noisy ground truth.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "hardnoise/dataset.hpp"
#include "hardnoise/errors.hpp"
#include "hardnoise/nn.hpp"

namespace hardnoise {

struct NoiseSpec {
    double delta = 0.4;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(delta >= 0.0 && delta <= 1.0)) throw ConfigError("noise: delta must lie in [0, 1]");
    }
};

/// Per-hardness FGSM step sizes, non-decreasing in h.
struct EpsSchedule {
    std::vector<double> eps_by_h;

    static EpsSchedule linear(int levels, double eps_max) {
        EpsSchedule s;
        for (int h = 0; h < levels; ++h) s.eps_by_h.push_back(levels > 1 ? eps_max * h / (levels - 1) : 0.0);
        return s;
    }

    void validate(int levels) const {
        if (static_cast<int>(eps_by_h.size()) != levels)
            throw ConfigError("eps schedule: expected " + std::to_string(levels) + " entries, got " +
                              std::to_string(eps_by_h.size()));
        for (std::size_t h = 0; h < eps_by_h.size(); ++h) {
            if (!(eps_by_h[h] >= 0.0)) throw ConfigError("eps schedule: entries must be non-negative");
            if (h > 0 && eps_by_h[h] < eps_by_h[h - 1]) throw ConfigError("eps schedule: must be non-decreasing");
        }
    }
};

struct GroundTruthPartition {
    std::set<SampleId> noisy;  // S_n: assigned label differs from the true one
    std::set<SampleId> hard;   // S_h: correctly labeled with h >= h_threshold
    std::set<SampleId> easy;   // S_e: everything else
    int h_threshold = 4;
};

namespace detail {

inline std::map<int, std::vector<std::size_t>> members_by_class(const Dataset& ds) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) by_class[ds.samples[i].y_true].push_back(i);
    return by_class;
}

// Seeded per-class choice of `count` member positions, returned in dataset order.
inline std::vector<std::size_t> choose(std::vector<std::size_t> members, std::size_t count, std::uint64_t seed,
                                       int cls) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(cls)));
    std::shuffle(members.begin(), members.end(), rng);
    members.resize(count);
    std::sort(members.begin(), members.end());
    return members;
}

}  // namespace detail

/// Keeps floor(X / 2^h) samples of each class with hardness h.
inline Dataset apply_imbalance(const Dataset& ds, std::uint64_t seed) {
    Dataset out = ds;
    out.samples.clear();
    std::vector<std::size_t> keep;
    for (const auto& [cls, members] : detail::members_by_class(ds)) {
        const int h = ds.class_cells[cls].h;
        const std::size_t count = members.size() >> h;
        if (count < 1)
            throw ConfigError("imbalance: class " + std::to_string(cls) + " would keep no samples at h=" +
                              std::to_string(h));
        auto chosen = detail::choose(members, count, seed, cls);
        keep.insert(keep.end(), chosen.begin(), chosen.end());
    }
    std::sort(keep.begin(), keep.end());
    for (auto i : keep) out.samples.push_back(ds.samples[i]);
    return out;
}

/// Keeps floor(X / 2^(L-1-h)) distinct samples per class and adds 2^(L-1-h)-1
/// jittered copies of each, so every class again has X samples.
inline Dataset apply_diversification(const Dataset& ds, double jitter_std, std::uint64_t seed) {
    if (!(jitter_std >= 0.0)) throw ConfigError("diversification: jitter_std must be >= 0");
    Dataset out = ds;
    out.samples.clear();
    SampleId next_id = 0;
    for (const auto& s : ds.samples) next_id = std::max(next_id, s.id + 1);

    std::mt19937_64 jitter_rng(derive_seed(seed, 0xD1F));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (const auto& [cls, members] : detail::members_by_class(ds)) {
        const int h = ds.class_cells[cls].h;
        const int shift = ds.levels - 1 - h;
        const std::size_t group = std::size_t{1} << shift;
        const std::size_t distinct = members.size() >> shift;
        if (distinct < 1)
            throw ConfigError("diversification: class " + std::to_string(cls) + " would keep no samples at h=" +
                              std::to_string(h));
        if (distinct * group != members.size())
            throw ConfigError("diversification: class size " + std::to_string(members.size()) +
                              " is not divisible by " + std::to_string(group));
        auto chosen = detail::choose(members, distinct, seed, cls);
        for (auto i : chosen) out.samples.push_back(ds.samples[i]);
        for (std::size_t a = 1; a < group; ++a)
            for (auto i : chosen) {
                Sample copy = ds.samples[i];
                copy.base_id = ds.samples[i].id;
                copy.id = next_id++;
                for (double& v : copy.x) v += jitter_std * normal(jitter_rng);
                out.samples.push_back(std::move(copy));
            }
    }
    return out;
}

inline int predict(const Model& m, std::span<const double> x) {
    auto r = forward(m, x);
    return static_cast<int>(std::max_element(r.probs.begin(), r.probs.end()) - r.probs.begin());
}

/// One signed-gradient step of size eps(h) away from the true class; samples
/// the oracle no longer assigns to their true class are dropped.
inline Dataset apply_boundary_shift(const Dataset& ds, const Model& oracle, const EpsSchedule& schedule) {
    if (oracle.input_dim != ds.dim) throw ConfigError("boundary shift: oracle input dimension does not match dataset");
    if (oracle.num_classes != ds.num_classes) throw ConfigError("boundary shift: oracle class count does not match dataset");
    schedule.validate(ds.levels);
    Dataset out = ds;
    out.samples.clear();
    for (const auto& s : ds.samples) {
        const double eps = schedule.eps_by_h[s.h];
        if (eps == 0.0) {
            out.samples.push_back(s);
            continue;
        }
        auto g = input_gradient(oracle, s.x, s.y_true);
        Sample moved = s;
        for (std::size_t k = 0; k < g.size(); ++k) {
            const double sign = g[k] > 0.0 ? 1.0 : (g[k] < 0.0 ? -1.0 : 0.0);
            moved.x[k] += eps * sign;
        }
        if (predict(oracle, moved.x) == s.y_true) out.samples.push_back(std::move(moved));
    }
    return out;
}

struct NoiseOutcome {
    Dataset dataset;
    std::vector<bool> redrawn;  // per sample, whether the label was redrawn
};

/// With probability delta*n/(L-1) a sample's label is redrawn uniformly from the
/// classes sharing its noisiness level (the redraw may return the true class).
inline NoiseOutcome inject_label_noise_traced(const Dataset& ds, const NoiseSpec& spec) {
    spec.validate();
    std::map<int, std::vector<int>> stratum;
    for (int c = 0; c < ds.num_classes; ++c) stratum[ds.class_cells[c].n].push_back(c);

    NoiseOutcome out{ds, std::vector<bool>(ds.size(), false)};
    std::mt19937_64 rng(derive_seed(spec.seed, 0x401));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t i = 0; i < out.dataset.samples.size(); ++i) {
        auto& s = out.dataset.samples[i];
        s.y_assigned = s.y_true;
        const double q = ds.levels > 1 ? spec.delta * s.n / (ds.levels - 1) : 0.0;
        if (unit(rng) < q) {
            const auto& classes = stratum.at(s.n);
            std::uniform_int_distribution<std::size_t> pick(0, classes.size() - 1);
            s.y_assigned = classes[pick(rng)];
            out.redrawn[i] = true;
        }
    }
    return out;
}

inline Dataset inject_label_noise(const Dataset& ds, const NoiseSpec& spec) {
    return inject_label_noise_traced(ds, spec).dataset;
}

inline GroundTruthPartition ground_truth_partition(const Dataset& ds, int h_threshold = 4) {
    GroundTruthPartition gt;
    gt.h_threshold = h_threshold;
    for (const auto& s : ds.samples) {
        if (s.y_assigned != s.y_true)
            gt.noisy.insert(s.id);
        else if (s.h >= h_threshold)
            gt.hard.insert(s.id);
        else
            gt.easy.insert(s.id);
    }
    return gt;
}

}  // namespace hardnoise
