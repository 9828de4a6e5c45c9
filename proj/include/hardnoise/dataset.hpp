#pragma once

// Synthetic base data: Gaussian blobs around class centers spread over a
// hypersphere, plus the class -> (hardness, noisiness) cell allocation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "hardnoise/errors.hpp"
#include "hardnoise/io.hpp"

namespace hardnoise {

using SampleId = std::int64_t;

/// splitmix64 finalizer; used to derive independent stream seeds from one run seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

struct Cell {
    int h = 0;
    int n = 0;
    friend bool operator==(const Cell&, const Cell&) = default;
};

struct Sample {
    SampleId id = 0;
    std::vector<double> x;
    int y_true = 0;
    int y_assigned = 0;
    int h = 0;
    int n = 0;
    std::optional<SampleId> base_id;

    friend bool operator==(const Sample&, const Sample&) = default;
};

enum class DatasetKind { train, test };

inline std::string to_string(DatasetKind k) { return k == DatasetKind::train ? "train" : "test"; }

struct GridSpec {
    int levels = 5;              // L
    int classes_per_cell = 2;    // P
    int per_class_count = 256;   // X
    int input_dim = 8;           // d
    double cluster_std = 1.0;    // sigma
    double center_separation = 6.0;  // nearest-center distance in units of sigma
    int test_per_class = 0;      // 0 selects max(X/4, 8)
    std::uint64_t seed = 0;

    int num_classes() const { return classes_per_cell * levels * levels; }
    int test_count() const { return test_per_class > 0 ? test_per_class : std::max(per_class_count / 4, 8); }

    void validate() const {
        if (levels < 1) throw ConfigError("grid: levels must be >= 1");
        if (classes_per_cell < 1) throw ConfigError("grid: classes_per_cell must be >= 1");
        if (input_dim < 1) throw ConfigError("grid: input_dim must be >= 1");
        if (!(cluster_std > 0.0)) throw ConfigError("grid: cluster_std must be > 0");
        if (!(center_separation > 0.0)) throw ConfigError("grid: center_separation must be > 0");
        if (test_per_class < 0) throw ConfigError("grid: test_per_class must be >= 0");
        if (per_class_count < 1 || per_class_count < (1 << (levels - 1)))
            throw ConfigError("grid: per_class_count must be >= 2^(levels-1)");
    }
};

struct Dataset {
    std::vector<Sample> samples;
    int num_classes = 0;  // K
    int dim = 0;          // d
    int levels = 0;       // L
    int classes_per_cell = 0;
    DatasetKind kind = DatasetKind::train;
    std::vector<Cell> class_cells;  // indexed by class

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }

    std::vector<int> class_counts() const {
        std::vector<int> counts(num_classes, 0);
        for (const auto& s : samples) ++counts[s.y_true];
        return counts;
    }

    std::unordered_map<SampleId, std::size_t> index_by_id() const {
        std::unordered_map<SampleId, std::size_t> idx;
        idx.reserve(samples.size());
        for (std::size_t i = 0; i < samples.size(); ++i) idx.emplace(samples[i].id, i);
        return idx;
    }

    std::vector<SampleId> ids() const {
        std::vector<SampleId> out;
        out.reserve(samples.size());
        for (const auto& s : samples) out.push_back(s.id);
        return out;
    }

    /// Copy carrying only the samples whose id is listed (order of `keep` is ignored).
    Dataset subset(std::span<const SampleId> keep) const {
        std::unordered_map<SampleId, bool> wanted;
        for (auto id : keep) wanted[id] = true;
        Dataset out = *this;
        out.samples.clear();
        for (const auto& s : samples)
            if (wanted.count(s.id)) out.samples.push_back(s);
        return out;
    }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Class number of the beta-th class in cell (h, n): P*(L*(L-1-n)+h)+beta.
inline int class_for_cell(Cell cell, int beta, int classes_per_cell, int levels) {
    return classes_per_cell * (levels * (levels - 1 - cell.n) + cell.h) + beta;
}

inline std::vector<Cell> allocate_cells(const GridSpec& spec) {
    spec.validate();
    const int L = spec.levels, P = spec.classes_per_cell;
    std::vector<Cell> cells(spec.num_classes());
    for (int n = 0; n < L; ++n)
        for (int h = 0; h < L; ++h)
            for (int beta = 0; beta < P; ++beta) cells[class_for_cell({h, n}, beta, P, L)] = {h, n};
    return cells;
}

namespace detail {

// Unit directions pushed apart by a few rounds of inverse-square repulsion.
inline std::vector<std::vector<double>> spread_directions(int count, int dim, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::vector<double>> u(count, std::vector<double>(dim));
    auto normalize = [](std::vector<double>& v) {
        double s = 0;
        for (double a : v) s += a * a;
        s = std::sqrt(s);
        if (s == 0) {
            v[0] = 1.0;
            return;
        }
        for (double& a : v) a /= s;
    };
    for (auto& v : u) {
        for (double& a : v) a = normal(rng);
        normalize(v);
    }
    if (count == 2) {
        u[1] = u[0];
        for (double& a : u[1]) a = -a;
        return u;
    }
    if (dim == 1) {
        for (int i = 0; i < count; ++i) u[i][0] = (i % 2 == 0) ? 1.0 : -1.0;
        return u;
    }
    std::vector<std::vector<double>> force(count, std::vector<double>(dim));
    for (int iter = 0; iter < 300; ++iter) {
        for (auto& f : force) std::fill(f.begin(), f.end(), 0.0);
        for (int i = 0; i < count; ++i)
            for (int j = i + 1; j < count; ++j) {
                double d2 = 0;
                for (int k = 0; k < dim; ++k) d2 += (u[i][k] - u[j][k]) * (u[i][k] - u[j][k]);
                d2 = std::max(d2, 1e-12);
                double w = 1.0 / (d2 * std::sqrt(d2));
                for (int k = 0; k < dim; ++k) {
                    double f = w * (u[i][k] - u[j][k]);
                    force[i][k] += f;
                    force[j][k] -= f;
                }
            }
        const double step = 0.02 / std::sqrt(static_cast<double>(count));
        for (int i = 0; i < count; ++i) {
            for (int k = 0; k < dim; ++k) u[i][k] += step * force[i][k];
            normalize(u[i]);
        }
    }
    return u;
}

}  // namespace detail

/// Class centers on a hypersphere scaled so the nearest pair is center_separation*sigma apart.
inline std::vector<std::vector<double>> class_centers(const GridSpec& spec) {
    spec.validate();
    const int K = spec.num_classes(), d = spec.input_dim;
    if (K == 1) return {std::vector<double>(d, 0.0)};
    std::mt19937_64 rng(derive_seed(spec.seed, 0xC3));
    auto u = detail::spread_directions(K, d, rng);
    double min_dist = std::numeric_limits<double>::infinity();
    for (int i = 0; i < K; ++i)
        for (int j = i + 1; j < K; ++j) {
            double d2 = 0;
            for (int k = 0; k < d; ++k) d2 += (u[i][k] - u[j][k]) * (u[i][k] - u[j][k]);
            min_dist = std::min(min_dist, std::sqrt(d2));
        }
    if (!(min_dist > 1e-9)) throw ConfigError("grid: cannot separate class centers in this dimension");
    const double radius = spec.center_separation * spec.cluster_std / min_dist;
    for (auto& v : u)
        for (double& a : v) a *= radius;
    return u;
}

struct BaseData {
    Dataset train;
    Dataset test;
};

inline BaseData generate_base(const GridSpec& spec) {
    spec.validate();
    const auto cells = allocate_cells(spec);
    const auto centers = class_centers(spec);
    const int K = spec.num_classes(), d = spec.input_dim;

    auto make = [&](DatasetKind kind, int per_class, std::uint64_t stream) {
        Dataset ds;
        ds.num_classes = K;
        ds.dim = d;
        ds.levels = spec.levels;
        ds.classes_per_cell = spec.classes_per_cell;
        ds.kind = kind;
        ds.class_cells = cells;
        ds.samples.reserve(static_cast<std::size_t>(K) * per_class);
        std::mt19937_64 rng(derive_seed(spec.seed, stream));
        std::normal_distribution<double> normal(0.0, spec.cluster_std);
        SampleId next = 0;
        for (int c = 0; c < K; ++c)
            for (int i = 0; i < per_class; ++i) {
                Sample s;
                s.id = next++;
                s.x.resize(d);
                for (int k = 0; k < d; ++k) s.x[k] = centers[c][k] + normal(rng);
                s.y_true = s.y_assigned = c;
                s.h = cells[c].h;
                s.n = cells[c].n;
                ds.samples.push_back(std::move(s));
            }
        return ds;
    };
    return {make(DatasetKind::train, spec.per_class_count, 1), make(DatasetKind::test, spec.test_count(), 2)};
}

// ---- serialization ---------------------------------------------------------

inline nlohmann::json dataset_manifest(const Dataset& ds) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : ds.class_cells) cells.push_back({c.h, c.n});
    return {{"K", ds.num_classes}, {"d", ds.dim},          {"L", ds.levels},
            {"P", ds.classes_per_cell}, {"kind", to_string(ds.kind)}, {"class_cells", cells}};
}

inline std::string dataset_csv(const Dataset& ds) {
    std::string out = "id,y_true,y_assigned,h,n,base_id";
    for (int k = 0; k < ds.dim; ++k) out += ",x_" + std::to_string(k);
    out += '\n';
    for (const auto& s : ds.samples) {
        out += std::to_string(s.id) + ',' + std::to_string(s.y_true) + ',' + std::to_string(s.y_assigned) + ',' +
               std::to_string(s.h) + ',' + std::to_string(s.n) + ',';
        if (s.base_id) out += std::to_string(*s.base_id);
        for (double v : s.x) {
            out += ',';
            out += io::format_double(v);
        }
        out += '\n';
    }
    return out;
}

inline Dataset dataset_from_text(const std::string& manifest_json, const std::string& csv) {
    auto m = nlohmann::json::parse(manifest_json);
    Dataset ds;
    ds.num_classes = m.at("K").get<int>();
    ds.dim = m.at("d").get<int>();
    ds.levels = m.at("L").get<int>();
    ds.classes_per_cell = m.at("P").get<int>();
    ds.kind = m.at("kind").get<std::string>() == "train" ? DatasetKind::train : DatasetKind::test;
    for (const auto& c : m.at("class_cells")) ds.class_cells.push_back({c.at(0).get<int>(), c.at(1).get<int>()});
    if (static_cast<int>(ds.class_cells.size()) != ds.num_classes)
        throw ConfigError("dataset manifest: class_cells size does not match K");

    auto table = io::parse_csv(csv);
    const auto c_id = table.column("id"), c_yt = table.column("y_true"), c_ya = table.column("y_assigned"),
               c_h = table.column("h"), c_n = table.column("n"), c_base = table.column("base_id");
    std::vector<std::size_t> c_x(ds.dim);
    for (int k = 0; k < ds.dim; ++k) c_x[k] = table.column("x_" + std::to_string(k));
    for (const auto& row : table.rows) {
        Sample s;
        s.id = io::parse_int(row[c_id]);
        s.y_true = static_cast<int>(io::parse_int(row[c_yt]));
        s.y_assigned = static_cast<int>(io::parse_int(row[c_ya]));
        s.h = static_cast<int>(io::parse_int(row[c_h]));
        s.n = static_cast<int>(io::parse_int(row[c_n]));
        if (!row[c_base].empty()) s.base_id = io::parse_int(row[c_base]);
        s.x.resize(ds.dim);
        for (int k = 0; k < ds.dim; ++k) s.x[k] = io::parse_double(row[c_x[k]]);
        if (s.y_true < 0 || s.y_true >= ds.num_classes || s.y_assigned < 0 || s.y_assigned >= ds.num_classes)
            throw ConfigError("dataset csv: label out of range for sample " + std::to_string(s.id));
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& stem) {
    auto json_path = stem;
    json_path += ".json";
    auto csv_path = stem;
    csv_path += ".csv";
    io::write_file_atomic(json_path, dataset_manifest(ds).dump(2) + "\n");
    io::write_file_atomic(csv_path, dataset_csv(ds));
}

inline Dataset load_dataset(const std::filesystem::path& stem) {
    auto json_path = stem;
    json_path += ".json";
    auto csv_path = stem;
    csv_path += ".csv";
    return dataset_from_text(io::read_file(json_path), io::read_file(csv_path));
}

}  // namespace hardnoise
