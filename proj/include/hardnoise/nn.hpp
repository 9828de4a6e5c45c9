#pragma once

// A small fully connected classifier (ReLU hidden layers, the last of which is
// the feature layer) trained with mini-batch SGD while recording the
// per-sample training dynamics every detection metric is computed from.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "hardnoise/dataset.hpp"
#include "hardnoise/errors.hpp"
#include "hardnoise/io.hpp"

namespace hardnoise {

struct DenseLayer {
    int in = 0;
    int out = 0;
    std::vector<double> w;  // out x in, row-major
    std::vector<double> b;  // out

    friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

struct Model {
    int input_dim = 0;
    int feature_dim = 0;
    int num_classes = 0;
    std::vector<DenseLayer> hidden;  // ReLU; the last one is the feature layer
    DenseLayer head;                 // features -> logits

    /// Every parameter array in a fixed order (hidden w, b ..., head w, b).
    std::vector<std::span<double>> parameter_blocks() {
        std::vector<std::span<double>> out;
        for (auto& l : hidden) {
            out.emplace_back(l.w);
            out.emplace_back(l.b);
        }
        out.emplace_back(head.w);
        out.emplace_back(head.b);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = head.w.size() + head.b.size();
        for (const auto& l : hidden) n += l.w.size() + l.b.size();
        return n;
    }

    /// Same architecture with every parameter set to zero (used as a gradient buffer).
    Model zeros_like() const {
        Model z = *this;
        for (auto blk : z.parameter_blocks()) std::fill(blk.begin(), blk.end(), 0.0);
        return z;
    }

    friend bool operator==(const Model&, const Model&) = default;
};

/// Kaiming-normal weights, zero biases. With no hidden layers the feature
/// vector is the input itself, so `feature_dim` must equal `input_dim`.
inline Model init_model(int input_dim, std::span<const int> hidden_sizes, int feature_dim, int num_classes,
                        std::uint64_t seed) {
    if (input_dim < 1 || feature_dim < 1 || num_classes < 1) throw ConfigError("model: widths must be positive");
    for (int h : hidden_sizes)
        if (h < 1) throw ConfigError("model: hidden widths must be positive");

    Model m;
    m.input_dim = input_dim;
    m.num_classes = num_classes;
    std::mt19937_64 rng(seed);
    auto make = [&](int in, int out) {
        DenseLayer l;
        l.in = in;
        l.out = out;
        l.w.resize(static_cast<std::size_t>(in) * out);
        l.b.assign(out, 0.0);
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / in));
        for (double& v : l.w) v = normal(rng);
        return l;
    };

    if (hidden_sizes.empty()) {
        if (feature_dim != input_dim)
            throw ConfigError("model: without hidden layers the feature layer is the input (feature_dim must equal input_dim)");
        m.feature_dim = input_dim;
    } else {
        int prev = input_dim;
        for (int h : hidden_sizes) {
            m.hidden.push_back(make(prev, h));
            prev = h;
        }
        m.hidden.push_back(make(prev, feature_dim));
        m.feature_dim = feature_dim;
    }
    m.head = make(m.feature_dim, num_classes);
    return m;
}

namespace detail {

inline void dense_forward(const DenseLayer& l, std::span<const double> in, std::span<double> out) {
    for (int o = 0; o < l.out; ++o) {
        const double* row = l.w.data() + static_cast<std::size_t>(o) * l.in;
        double s = l.b[o];
        for (int i = 0; i < l.in; ++i) s += row[i] * in[i];
        out[o] = s;
    }
}

inline void softmax_inplace(std::span<double> v) {
    double mx = *std::max_element(v.begin(), v.end());
    double sum = 0;
    for (double& a : v) {
        a = std::exp(a - mx);
        sum += a;
    }
    for (double& a : v) a /= sum;
}

}  // namespace detail

/// Reusable activation buffers for one sample.
class Workspace {
public:
    explicit Workspace(const Model& m) {
        acts_.resize(m.hidden.size() + 1);
        acts_[0].resize(m.input_dim);
        for (std::size_t l = 0; l < m.hidden.size(); ++l) acts_[l + 1].resize(m.hidden[l].out);
        logits_.resize(m.num_classes);
        probs_.resize(m.num_classes);
        delta_.resize(std::max(m.num_classes, max_width(m)));
        delta_next_.resize(delta_.size());
    }

    /// Runs the network; returns the log-sum-exp of the logits.
    double run(const Model& m, std::span<const double> x) {
        std::copy(x.begin(), x.end(), acts_[0].begin());
        for (std::size_t l = 0; l < m.hidden.size(); ++l) {
            detail::dense_forward(m.hidden[l], acts_[l], acts_[l + 1]);
            for (double& a : acts_[l + 1]) a = a > 0.0 ? a : 0.0;
        }
        detail::dense_forward(m.head, acts_.back(), logits_);
        double mx = *std::max_element(logits_.begin(), logits_.end());
        double sum = 0;
        for (std::size_t k = 0; k < logits_.size(); ++k) {
            probs_[k] = std::exp(logits_[k] - mx);
            sum += probs_[k];
        }
        for (double& p : probs_) p /= sum;
        return mx + std::log(sum);
    }

    /// Cross-entropy of the last run against `label`.
    double loss(double lse, int label) const { return lse - logits_[label]; }

    /// Accumulates scale * dLoss/dParams into `grad`; if `input_grad` is non-empty it
    /// receives dLoss/dx. Must follow run() on the same sample.
    void backward(const Model& m, int label, double scale, Model* grad, std::span<double> input_grad) {
        const int K = m.num_classes;
        std::span<double> delta(delta_.data(), K);
        for (int k = 0; k < K; ++k) delta[k] = probs_[k] - (k == label ? 1.0 : 0.0);

        auto back_layer = [&](const DenseLayer& layer, DenseLayer* g, std::span<const double> in,
                              std::span<const double> d_out, std::span<double> d_in) {
            if (g) {
                for (int o = 0; o < layer.out; ++o) {
                    const double s = scale * d_out[o];
                    double* grow = g->w.data() + static_cast<std::size_t>(o) * layer.in;
                    for (int i = 0; i < layer.in; ++i) grow[i] += s * in[i];
                    g->b[o] += s;
                }
            }
            if (!d_in.empty()) {
                std::fill(d_in.begin(), d_in.end(), 0.0);
                for (int o = 0; o < layer.out; ++o) {
                    const double* row = layer.w.data() + static_cast<std::size_t>(o) * layer.in;
                    for (int i = 0; i < layer.in; ++i) d_in[i] += row[i] * d_out[o];
                }
            }
        };

        const bool need_input = !input_grad.empty();
        const std::size_t H = m.hidden.size();
        {
            std::span<double> d_in;
            if (H > 0)
                d_in = std::span<double>(delta_next_.data(), m.feature_dim);
            else if (need_input)
                d_in = input_grad;
            back_layer(m.head, grad ? &grad->head : nullptr, acts_[H], delta, d_in);
        }
        for (std::size_t l = H; l-- > 0;) {
            const auto& layer = m.hidden[l];
            std::span<double> d_out(delta_.data(), layer.out);
            std::copy_n(delta_next_.begin(), layer.out, d_out.begin());
            for (int o = 0; o < layer.out; ++o)
                if (!(acts_[l + 1][o] > 0.0)) d_out[o] = 0.0;
            std::span<double> d_in;
            if (l > 0)
                d_in = std::span<double>(delta_next_.data(), layer.in);
            else if (need_input)
                d_in = input_grad;
            back_layer(layer, grad ? &grad->hidden[l] : nullptr, acts_[l], d_out, d_in);
        }
    }

    std::span<const double> probs() const { return probs_; }
    std::span<const double> features() const { return acts_.back(); }

private:
    static int max_width(const Model& m) {
        int w = m.input_dim;
        for (const auto& l : m.hidden) w = std::max({w, l.in, l.out});
        return w;
    }

    std::vector<std::vector<double>> acts_;
    std::vector<double> logits_, probs_, delta_, delta_next_;
};

/// Activation buffers for a mini-batch, one row per sample. Used for training
/// and for the per-epoch trace pass; numerically equivalent to Workspace up to
/// floating-point summation order.
class BatchWorkspace {
public:
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using ConstMap = Eigen::Map<const Mat>;
    using Map = Eigen::Map<Mat>;

    explicit BatchWorkspace(const Model& m) : acts_(m.hidden.size() + 1), weights_(m.hidden.size() + 1) {}

    /// Forward pass over the rows of `x`; fills probabilities and per-row log-sum-exp.
    void run(const Model& m, const Mat& x) {
        // Eigen picks peeling and reduction order from operand alignment, so every
        // operand lives in Eigen-owned (aligned) storage to keep results bit-stable.
        const std::size_t H = m.hidden.size();
        for (std::size_t l = 0; l <= H; ++l) {
            const auto& layer = l < H ? m.hidden[l] : m.head;
            weights_[l] = ConstMap(layer.w.data(), layer.out, layer.in);
        }
        acts_[0] = x;
        for (std::size_t l = 0; l < H; ++l) {
            affine(m.hidden[l], weights_[l], acts_[l], acts_[l + 1]);
            acts_[l + 1] = acts_[l + 1].cwiseMax(0.0);
        }
        affine(m.head, weights_[H], acts_.back(), logits_);
        const auto rows = logits_.rows();
        lse_.resize(rows);
        probs_.resize(rows, logits_.cols());
        // Scalar on purpose: vectorized exp/sum would make the result depend on row alignment.
        const auto K = logits_.cols();
        for (Eigen::Index r = 0; r < rows; ++r) {
            const double* z = logits_.row(r).data();
            double* p = probs_.row(r).data();
            const double mx = *std::max_element(z, z + K);
            double sum = 0.0;
            for (Eigen::Index k = 0; k < K; ++k) sum += (p[k] = std::exp(z[k] - mx));
            for (Eigen::Index k = 0; k < K; ++k) p[k] /= sum;
            lse_[r] = mx + std::log(sum);
        }
    }

    double loss(Eigen::Index row, int label) const { return lse_[row] - logits_(row, label); }

    /// Accumulates scale * sum over rows of dLoss/dParams into `grad`.
    void backward(const Model& m, std::span<const int> labels, double scale, Model& grad) {
        delta_ = probs_;
        for (Eigen::Index r = 0; r < delta_.rows(); ++r) delta_(r, labels[r]) -= 1.0;
        delta_ *= scale;
        const std::size_t H = m.hidden.size();
        back_layer(weights_[H], grad.head, acts_[H], H > 0);
        for (std::size_t l = H; l-- > 0;) {
            delta_ = delta_in_.cwiseProduct((acts_[l + 1].array() > 0.0).cast<double>().matrix());
            back_layer(weights_[l], grad.hidden[l], acts_[l], l > 0);
        }
    }

    const Mat& probs() const { return probs_; }
    const Mat& features() const { return acts_.back(); }

private:
    static void affine(const DenseLayer& l, const Mat& w, const Mat& in, Mat& out) {
        out.noalias() = in * w.transpose();
        out.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(l.b.data(), l.out);
    }

    void back_layer(const Mat& w, DenseLayer& g, const Mat& in, bool need_input) {
        gw_.noalias() = delta_.transpose() * in;
        Map(g.w.data(), w.rows(), w.cols()) += gw_;
        gb_.noalias() = delta_.colwise().sum();
        Eigen::Map<Eigen::RowVectorXd>(g.b.data(), w.rows()) += gb_;
        if (need_input) delta_in_.noalias() = delta_ * w;
    }

    std::vector<Mat> acts_, weights_;
    Mat logits_, probs_, delta_, delta_in_, gw_;
    Eigen::RowVectorXd gb_;
    Eigen::VectorXd lse_;
};

struct ForwardResult {
    std::vector<double> probs;     // length K
    std::vector<double> features;  // length m
};

inline void check_input(const Model& m, std::span<const double> x) {
    if (static_cast<int>(x.size()) != m.input_dim)
        throw ConfigError("model: input has dimension " + std::to_string(x.size()) + ", expected " +
                          std::to_string(m.input_dim));
}

inline ForwardResult forward(const Model& m, std::span<const double> x) {
    check_input(m, x);
    Workspace ws(m);
    ws.run(m, x);
    return {{ws.probs().begin(), ws.probs().end()}, {ws.features().begin(), ws.features().end()}};
}

/// Gradient of the single-sample cross-entropy with respect to the input.
inline std::vector<double> input_gradient(const Model& m, std::span<const double> x, int label) {
    check_input(m, x);
    if (label < 0 || label >= m.num_classes) throw ConfigError("model: label out of range");
    Workspace ws(m);
    ws.run(m, x);
    std::vector<double> g(m.input_dim, 0.0);
    ws.backward(m, label, 1.0, nullptr, g);
    return g;
}

struct LossAndGradient {
    double loss = 0.0;  // mean cross-entropy over the batch
    Model grad;
};

inline LossAndGradient loss_and_gradient(const Model& m, std::span<const std::vector<double>> xs,
                                         std::span<const int> labels) {
    if (xs.size() != labels.size() || xs.empty()) throw ConfigError("model: batch shape mismatch");
    BatchWorkspace::Mat x(static_cast<Eigen::Index>(xs.size()), m.input_dim);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        check_input(m, xs[i]);
        if (labels[i] < 0 || labels[i] >= m.num_classes) throw ConfigError("model: label out of range");
        x.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(xs[i].data(), m.input_dim);
    }
    LossAndGradient out{0.0, m.zeros_like()};
    BatchWorkspace ws(m);
    ws.run(m, x);
    const double scale = 1.0 / static_cast<double>(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) out.loss += scale * ws.loss(static_cast<Eigen::Index>(i), labels[i]);
    ws.backward(m, labels, scale, out.grad);
    return out;
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient
/// (v <- mu*v + g + lambda*w; w <- w - lr*v).
class SgdMomentum {
public:
    SgdMomentum(double learning_rate, double momentum, double weight_decay)
        : lr_(learning_rate), mu_(momentum), wd_(weight_decay) {}

    void step(std::span<const std::span<double>> params, std::span<const std::span<double>> grads) {
        if (velocity_.empty()) {
            for (auto p : params) velocity_.emplace_back(p.size(), 0.0);
        }
        for (std::size_t b = 0; b < params.size(); ++b) {
            auto p = params[b];
            auto g = grads[b];
            auto& v = velocity_[b];
            for (std::size_t i = 0; i < p.size(); ++i) {
                v[i] = mu_ * v[i] + g[i] + wd_ * p[i];
                p[i] -= lr_ * v[i];
            }
        }
    }

private:
    double lr_, mu_, wd_;
    std::vector<std::vector<double>> velocity_;
};

struct TrainConfig {
    int epochs = 60;
    int batch_size = 64;
    double learning_rate = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
        if (momentum < 0.0 || weight_decay < 0.0) throw ConfigError("train: momentum and weight_decay must be >= 0");
    }
};

struct TraceRecord {
    double loss = 0.0;
    int pred = 0;
    double p_pred = 0.0;
    double p_assigned = 0.0;
    double p_runner_up = 0.0;        // largest probability other than the predicted class
    double p_max_other = 0.0;        // largest probability other than the assigned class

    friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

/// Per-epoch, per-sample training records (epochs are 1-based) plus feature snapshots.
struct TraceStore {
    int epochs = 0;        // T
    int num_samples = 0;   // N
    int feature_dim = 0;   // m
    int mid_epoch = 0;
    std::vector<SampleId> ids;
    std::vector<int> assigned;                // y_assigned per sample, dataset order
    std::vector<TraceRecord> records;         // epoch-major, T * N
    std::vector<double> epoch_accuracy;       // T entries
    std::vector<double> mid_features;         // N * m
    std::vector<double> end_features;         // N * m

    const TraceRecord& at(int epoch, std::size_t i) const {
        return records[static_cast<std::size_t>(epoch - 1) * num_samples + i];
    }
    TraceRecord& at(int epoch, std::size_t i) { return records[static_cast<std::size_t>(epoch - 1) * num_samples + i]; }

    friend bool operator==(const TraceStore&, const TraceStore&) = default;
};

inline TraceRecord make_record(std::span<const double> probs, double loss, int assigned) {
    TraceRecord r;
    r.loss = loss;
    r.pred = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
    r.p_pred = probs[r.pred];
    r.p_assigned = probs[assigned];
    for (int k = 0; k < static_cast<int>(probs.size()); ++k) {
        if (k != r.pred) r.p_runner_up = std::max(r.p_runner_up, probs[k]);
        if (k != assigned) r.p_max_other = std::max(r.p_max_other, probs[k]);
    }
    return r;
}

struct TrainResult {
    Model model;
    TraceStore traces;
};

inline void check_dataset(const Model& m, const Dataset& ds) {
    if (ds.empty()) throw ConfigError("train: dataset is empty");
    if (ds.num_classes != m.num_classes)
        throw ConfigError("train: dataset has " + std::to_string(ds.num_classes) + " classes, model has " +
                          std::to_string(m.num_classes));
    if (ds.dim != m.input_dim) throw ConfigError("train: dataset dimension does not match the model input");
}

namespace detail {

inline Model train_impl(Model model, const Dataset& ds, const TrainConfig& cfg, TraceStore* tr) {
    cfg.validate();
    check_dataset(model, ds);
    const int T = cfg.epochs;
    const std::size_t N = ds.size();
    const std::size_t m = static_cast<std::size_t>(model.feature_dim);

    if (tr) {
        tr->epochs = T;
        tr->num_samples = static_cast<int>(N);
        tr->feature_dim = model.feature_dim;
        tr->ids = ds.ids();
        tr->assigned.clear();
        for (const auto& s : ds.samples) tr->assigned.push_back(s.y_assigned);
        tr->records.assign(static_cast<std::size_t>(T) * N, TraceRecord{});
        tr->epoch_accuracy.assign(T, 0.0);
        tr->mid_features.assign(N * m, 0.0);
        tr->end_features.assign(N * m, 0.0);
    }

    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), 0);
    SgdMomentum opt(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    BatchWorkspace ws(model);
    BatchWorkspace::Mat x;
    std::vector<int> labels;
    constexpr std::size_t kTraceChunk = 1024;
    Model grad = model.zeros_like();
    const int fallback_mid = (T + 1) / 2;
    bool mid_found = false;
    std::vector<double> feats;

    for (int epoch = 1; epoch <= T; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < N; start += cfg.batch_size) {
            const std::size_t stop = std::min(N, start + static_cast<std::size_t>(cfg.batch_size));
            const auto B = static_cast<Eigen::Index>(stop - start);
            x.resize(B, model.input_dim);
            labels.resize(stop - start);
            for (std::size_t j = start; j < stop; ++j) {
                const auto& s = ds.samples[order[j]];
                x.row(static_cast<Eigen::Index>(j - start)) = Eigen::Map<const Eigen::RowVectorXd>(s.x.data(), model.input_dim);
                labels[j - start] = s.y_assigned;
            }
            for (auto blk : grad.parameter_blocks()) std::fill(blk.begin(), blk.end(), 0.0);
            ws.run(model, x);
            const double scale = 1.0 / static_cast<double>(B);
            double batch_loss = 0.0;
            for (Eigen::Index r = 0; r < B; ++r) batch_loss += scale * ws.loss(r, labels[r]);
            if (!std::isfinite(batch_loss)) throw DivergedTrainingError(epoch, "non-finite mini-batch loss");
            ws.backward(model, labels, scale, grad);
            auto params = model.parameter_blocks();
            auto grads = grad.parameter_blocks();
            opt.step(params, grads);
        }
        if (!tr) continue;

        std::size_t correct = 0;
        feats.assign(N * m, 0.0);
        for (std::size_t start = 0; start < N; start += kTraceChunk) {
            const std::size_t stop = std::min(N, start + kTraceChunk);
            x.resize(static_cast<Eigen::Index>(stop - start), model.input_dim);
            for (std::size_t i = start; i < stop; ++i)
                x.row(static_cast<Eigen::Index>(i - start)) =
                    Eigen::Map<const Eigen::RowVectorXd>(ds.samples[i].x.data(), model.input_dim);
            ws.run(model, x);
            for (std::size_t i = start; i < stop; ++i) {
                const auto r = static_cast<Eigen::Index>(i - start);
                const int y = ds.samples[i].y_assigned;
                const double loss = ws.loss(r, y);
                if (!std::isfinite(loss)) throw DivergedTrainingError(epoch, "non-finite sample loss");
                std::span<const double> p(ws.probs().row(r).data(), static_cast<std::size_t>(model.num_classes));
                auto rec = make_record(p, loss, y);
                if (rec.pred == y) ++correct;
                tr->at(epoch, i) = rec;
                std::copy_n(ws.features().row(r).data(), m, feats.begin() + static_cast<std::ptrdiff_t>(i * m));
            }
        }
        tr->epoch_accuracy[epoch - 1] = static_cast<double>(correct) / static_cast<double>(N);

        if (!mid_found && tr->epoch_accuracy[epoch - 1] >= 0.5) {
            mid_found = true;
            tr->mid_epoch = epoch;
            tr->mid_features = feats;
        } else if (!mid_found && epoch == fallback_mid) {
            tr->mid_epoch = epoch;
            tr->mid_features = feats;
        }
        if (epoch == T) tr->end_features = feats;
    }
    return model;
}

}  // namespace detail

/// Mini-batch SGD on mean cross-entropy against y_assigned. After every epoch a
/// full forward pass fills the trace records; feature snapshots are taken at
/// the first epoch reaching 50% training accuracy (else ceil(T/2)) and at T.
inline TrainResult train_with_tracing(Model model, const Dataset& ds, const TrainConfig& cfg) {
    TraceStore tr;
    Model trained = detail::train_impl(std::move(model), ds, cfg, &tr);
    return {std::move(trained), std::move(tr)};
}

/// Same optimization as train_with_tracing without the per-epoch trace pass.
inline Model train(Model model, const Dataset& ds, const TrainConfig& cfg) {
    return detail::train_impl(std::move(model), ds, cfg, nullptr);
}

struct EvalResult {
    double accuracy = 0.0;
    double mean_loss = 0.0;
};

/// Scores against y_true for test data and y_assigned for training data.
inline EvalResult evaluate(const Model& m, const Dataset& ds) {
    if (ds.empty()) throw ConfigError("evaluate: dataset is empty");
    check_dataset(m, ds);
    Workspace ws(m);
    std::size_t correct = 0;
    double loss_sum = 0.0;
    for (const auto& s : ds.samples) {
        const int label = ds.kind == DatasetKind::test ? s.y_true : s.y_assigned;
        double lse = ws.run(m, s.x);
        loss_sum += ws.loss(lse, label);
        auto p = ws.probs();
        if (std::max_element(p.begin(), p.end()) - p.begin() == label) ++correct;
    }
    const double n = static_cast<double>(ds.size());
    return {static_cast<double>(correct) / n, loss_sum / n};
}

// ---- serialization ---------------------------------------------------------

inline nlohmann::json model_to_json(const Model& m) {
    auto layer = [](const DenseLayer& l) { return nlohmann::json{{"in", l.in}, {"out", l.out}, {"w", l.w}, {"b", l.b}}; };
    nlohmann::json hidden = nlohmann::json::array();
    for (const auto& l : m.hidden) hidden.push_back(layer(l));
    return {{"input_dim", m.input_dim}, {"feature_dim", m.feature_dim}, {"num_classes", m.num_classes},
            {"hidden", hidden},         {"head", layer(m.head)}};
}

inline Model model_from_json(const nlohmann::json& j) {
    auto layer = [](const nlohmann::json& l) {
        DenseLayer d;
        d.in = l.at("in").get<int>();
        d.out = l.at("out").get<int>();
        d.w = l.at("w").get<std::vector<double>>();
        d.b = l.at("b").get<std::vector<double>>();
        if (d.w.size() != static_cast<std::size_t>(d.in) * d.out || d.b.size() != static_cast<std::size_t>(d.out))
            throw ConfigError("model json: layer shape mismatch");
        return d;
    };
    Model m;
    m.input_dim = j.at("input_dim").get<int>();
    m.feature_dim = j.at("feature_dim").get<int>();
    m.num_classes = j.at("num_classes").get<int>();
    for (const auto& l : j.at("hidden")) m.hidden.push_back(layer(l));
    m.head = layer(j.at("head"));
    return m;
}

inline void save_traces(const TraceStore& tr, const std::filesystem::path& dir) {
    std::string csv = "epoch,id,assigned,loss,pred_class,p_pred,p_assigned,p_runner_up,p_max_other_than_assigned\n";
    csv.reserve(static_cast<std::size_t>(tr.epochs) * tr.num_samples * 100);
    for (int t = 1; t <= tr.epochs; ++t)
        for (int i = 0; i < tr.num_samples; ++i) {
            const auto& r = tr.at(t, i);
            csv += std::to_string(t) + ',' + std::to_string(tr.ids[i]) + ',' + std::to_string(tr.assigned[i]) + ',' +
                   io::format_double(r.loss) + ',' + std::to_string(r.pred) + ',' + io::format_double(r.p_pred) + ',' +
                   io::format_double(r.p_assigned) + ',' + io::format_double(r.p_runner_up) + ',' +
                   io::format_double(r.p_max_other) + '\n';
        }
    io::write_file_atomic(dir / "traces.csv", csv);

    auto snapshot = [&](const std::vector<double>& f) {
        std::string s = "id";
        for (int k = 0; k < tr.feature_dim; ++k) s += ",f_" + std::to_string(k);
        s += '\n';
        for (int i = 0; i < tr.num_samples; ++i) {
            s += std::to_string(tr.ids[i]);
            for (int k = 0; k < tr.feature_dim; ++k) {
                s += ',';
                s += io::format_double(f[static_cast<std::size_t>(i) * tr.feature_dim + k]);
            }
            s += '\n';
        }
        return s;
    };
    io::write_file_atomic(dir / "snapshot_mid.csv", snapshot(tr.mid_features));
    io::write_file_atomic(dir / "snapshot_end.csv", snapshot(tr.end_features));
    nlohmann::json header{{"T", tr.epochs},
                          {"N", tr.num_samples},
                          {"m", tr.feature_dim},
                          {"mid_epoch", tr.mid_epoch},
                          {"epoch_accuracy", tr.epoch_accuracy}};
    io::write_file_atomic(dir / "traces.json", header.dump(2) + "\n");
}

inline TraceStore load_traces(const std::filesystem::path& dir) {
    auto header = nlohmann::json::parse(io::read_file(dir / "traces.json"));
    TraceStore tr;
    tr.epochs = header.at("T").get<int>();
    tr.num_samples = header.at("N").get<int>();
    tr.feature_dim = header.at("m").get<int>();
    tr.mid_epoch = header.at("mid_epoch").get<int>();
    tr.epoch_accuracy = header.at("epoch_accuracy").get<std::vector<double>>();
    const std::size_t N = tr.num_samples;
    tr.records.resize(static_cast<std::size_t>(tr.epochs) * N);
    tr.ids.resize(N);
    tr.assigned.resize(N);

    auto table = io::parse_csv(io::read_file(dir / "traces.csv"));
    if (table.rows.size() != tr.records.size()) throw ConfigError("traces.csv: unexpected row count");
    const auto c_ep = table.column("epoch"), c_id = table.column("id"), c_as = table.column("assigned"),
               c_loss = table.column("loss"), c_pred = table.column("pred_class"), c_pp = table.column("p_pred"),
               c_pa = table.column("p_assigned"), c_ru = table.column("p_runner_up"),
               c_mo = table.column("p_max_other_than_assigned");
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        const int epoch = static_cast<int>(io::parse_int(row[c_ep]));
        const std::size_t i = r % N;
        if (epoch != static_cast<int>(r / N) + 1) throw ConfigError("traces.csv: rows out of order");
        if (epoch == 1) {
            tr.ids[i] = io::parse_int(row[c_id]);
            tr.assigned[i] = static_cast<int>(io::parse_int(row[c_as]));
        }
        auto& rec = tr.at(epoch, i);
        rec.loss = io::parse_double(row[c_loss]);
        rec.pred = static_cast<int>(io::parse_int(row[c_pred]));
        rec.p_pred = io::parse_double(row[c_pp]);
        rec.p_assigned = io::parse_double(row[c_pa]);
        rec.p_runner_up = io::parse_double(row[c_ru]);
        rec.p_max_other = io::parse_double(row[c_mo]);
    }
    auto read_snapshot = [&](const char* name) {
        auto t = io::parse_csv(io::read_file(dir / name));
        if (t.rows.size() != N) throw ConfigError(std::string(name) + ": unexpected row count");
        std::vector<double> f(N * tr.feature_dim);
        for (std::size_t i = 0; i < N; ++i)
            for (int k = 0; k < tr.feature_dim; ++k)
                f[i * tr.feature_dim + k] = io::parse_double(t.rows[i][k + 1]);
        return f;
    };
    tr.mid_features = read_snapshot("snapshot_mid.csv");
    tr.end_features = read_snapshot("snapshot_end.csv");
    return tr;
}

}  // namespace hardnoise
