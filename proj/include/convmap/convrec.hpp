#pragma once

// Convolution over the user-item interaction map.
//
// The K x K outer product p_u q_i^T (optionally masked) is fed through a stack
// of valid (unpadded) convolutions with ReLU until the spatial size is 1 x 1;
// a linear head maps the remaining channels to a scalar score. Training uses
// the BPR pairwise loss with exact, hand-written gradients. Embeddings are
// either frozen (pretrained) or learned jointly with the tower.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "convmap/bpr.hpp"
#include "convmap/common.hpp"
#include "convmap/dataio.hpp"
#include "convmap/embed.hpp"
#include "convmap/io.hpp"
#include "convmap/scoring.hpp"

namespace convmap {

struct ConvLayerSpec {
    Index channels = 32;
    Index kernel = 2;
    Index stride = 2;

    friend bool operator==(const ConvLayerSpec&, const ConvLayerSpec&) = default;
};

struct ConvTowerConfig {
    std::vector<ConvLayerSpec> layers;
    /// Weights start uniform in +-init_scale / sqrt(fan_in); biases at zero.
    double init_scale = 1.0;
    std::uint64_t init_seed = 0;

    /// 2x2 stride-2 layers halving a power-of-two map down to 1x1.
    static ConvTowerConfig pyramid(Index map_size, Index channels, std::uint64_t seed = 0) {
        if (map_size < 2 || (map_size & (map_size - 1)) != 0)
            throw ConfigError("pyramid tower needs a power-of-two map size >= 2, got " + std::to_string(map_size));
        ConvTowerConfig cfg;
        for (Index s = map_size; s > 1; s /= 2) cfg.layers.push_back({channels, 2, 2});
        cfg.init_seed = seed;
        return cfg;
    }

    /// Spatial side length entering each layer, plus the final one.
    std::vector<Index> spatial_sizes(Index map_size) const {
        if (layers.empty()) throw ConfigError("conv tower needs at least one layer");
        std::vector<Index> sizes{map_size};
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& L = layers[l];
            if (L.channels < 1 || L.kernel < 1 || L.stride < 1)
                throw ConfigError("conv layer " + std::to_string(l) + ": channels, kernel and stride must be >= 1");
            if (sizes.back() < L.kernel)
                throw ConfigError("conv layer " + std::to_string(l) + ": kernel " + std::to_string(L.kernel) +
                                  " exceeds input size " + std::to_string(sizes.back()));
            sizes.push_back((sizes.back() - L.kernel) / L.stride + 1);
        }
        if (sizes.back() != 1)
            throw ConfigError("conv tower ends at spatial size " + std::to_string(sizes.back()) + " for map size " +
                              std::to_string(map_size) + "; it must reach 1x1");
        return sizes;
    }

    Index head_width() const { return layers.empty() ? 0 : layers.back().channels; }
};

/// Offsets of every parameter group inside the flat parameter vector.
struct TowerLayout {
    Index map_size = 0;
    std::vector<ConvLayerSpec> layers;
    std::vector<Index> sizes;
    std::vector<std::size_t> weight_offset, bias_offset, weight_count;
    std::size_t head_weight_offset = 0, head_bias_offset = 0, total = 0;

    TowerLayout() = default;
    TowerLayout(const ConvTowerConfig& cfg, Index k) : map_size(k), layers(cfg.layers), sizes(cfg.spatial_sizes(k)) {
        Index in_channels = 1;
        for (const auto& L : layers) {
            weight_offset.push_back(total);
            weight_count.push_back(std::size_t(L.channels) * in_channels * L.kernel * L.kernel);
            total += weight_count.back();
            bias_offset.push_back(total);
            total += L.channels;
            in_channels = L.channels;
        }
        head_weight_offset = total;
        total += in_channels;
        head_bias_offset = total;
        total += 1;
    }

    Index in_channels(std::size_t l) const noexcept { return l == 0 ? 1 : layers[l - 1].channels; }
};

enum class EmbeddingMode { frozen, learnable };

inline std::string to_string(EmbeddingMode m) { return m == EmbeddingMode::frozen ? "frozen" : "learnable"; }

inline EmbeddingMode parse_embedding_mode(std::string_view s) {
    if (s == "frozen") return EmbeddingMode::frozen;
    if (s == "learnable") return EmbeddingMode::learnable;
    throw ConfigError("unknown embedding mode '" + std::string(s) + "'");
}

/// Scratch buffers for one forward/backward pass.
struct TowerWorkspace {
    std::vector<std::vector<double>> act;   // act[0] = masked map, act[l+1] = post-ReLU output of layer l
    std::vector<double> grad_out, grad_in;  // backprop buffers
    std::vector<double> input_grad;         // d score / d masked map, K*K
};

class ConvRecModel {
public:
    ConvRecModel() = default;

    ConvRecModel(EmbeddingPair embeddings, ConvTowerConfig tower, EmbeddingMode mode,
                 MaskMode train_mask = MaskMode::full)
        : emb_(std::move(embeddings)), tower_(std::move(tower)), mode_(mode), train_mask_(train_mask) {
        emb_.validate();
        layout_ = TowerLayout(tower_, emb_.dim());
        params_.assign(layout_.total, 0.0);
        Rng rng(tower_.init_seed);
        for (std::size_t l = 0; l < layout_.layers.size(); ++l) {
            const auto& L = layout_.layers[l];
            const double bound =
                tower_.init_scale / std::sqrt(double(layout_.in_channels(l)) * L.kernel * L.kernel);
            for (std::size_t k = 0; k < layout_.weight_count[l]; ++k)
                params_[layout_.weight_offset[l] + k] = rng.uniform(-bound, bound);
        }
        const double head_bound = tower_.init_scale / std::sqrt(double(tower_.head_width()));
        for (Index c = 0; c < tower_.head_width(); ++c)
            params_[layout_.head_weight_offset + c] = rng.uniform(-head_bound, head_bound);
    }

    const EmbeddingPair& embeddings() const noexcept { return emb_; }
    EmbeddingPair& embeddings() noexcept { return emb_; }
    const ConvTowerConfig& tower() const noexcept { return tower_; }
    const TowerLayout& layout() const noexcept { return layout_; }
    EmbeddingMode mode() const noexcept { return mode_; }
    MaskMode train_mask() const noexcept { return train_mask_; }
    void set_train_mask(MaskMode m) noexcept { train_mask_ = m; }
    Index dim() const noexcept { return emb_.dim(); }

    std::span<const double> parameters() const noexcept { return params_; }
    std::span<double> parameters() noexcept { return params_; }

    // Parameter-group membership of a flat index.
    bool is_conv_weight(std::size_t idx) const noexcept {
        for (std::size_t l = 0; l < layout_.layers.size(); ++l)
            if (idx >= layout_.weight_offset[l] && idx < layout_.weight_offset[l] + layout_.weight_count[l]) return true;
        return false;
    }
    bool is_head_weight(std::size_t idx) const noexcept {
        return idx >= layout_.head_weight_offset && idx < layout_.head_bias_offset;
    }

    void save(const std::filesystem::path& dir) const;
    static ConvRecModel load(const std::filesystem::path& dir);

private:
    EmbeddingPair emb_;
    ConvTowerConfig tower_;
    TowerLayout layout_;
    EmbeddingMode mode_ = EmbeddingMode::frozen;
    MaskMode train_mask_ = MaskMode::full;
    std::vector<double> params_;

    friend ConvRecModel decode_conv_model(std::string_view, const nlohmann::json&);
};

namespace detail {

/// Fills ws.act[0] with mask(x, y) * p_x * q_y.
inline void build_masked_map(std::span<const double> p, std::span<const double> q, MaskMode mask, TowerWorkspace& ws) {
    const std::size_t k = p.size();
    if (ws.act.empty()) ws.act.resize(1);
    auto& m = ws.act[0];
    m.resize(k * k);
    for (std::size_t x = 0; x < k; ++x)
        for (std::size_t y = 0; y < k; ++y)
            m[x * k + y] = p[x] * q[y] * (mask_keeps(mask, Index(x), Index(y)) ? 1.0 : 0.0);
}

}  // namespace detail

/// Runs the tower on ws.act[0]; returns the scalar score.
inline double tower_forward(const TowerLayout& L, std::span<const double> params, TowerWorkspace& ws) {
    const std::size_t nl = L.layers.size();
    ws.act.resize(nl + 1);
    for (std::size_t l = 0; l < nl; ++l) {
        const auto& spec = L.layers[l];
        const std::size_t cin = L.in_channels(l), cout = spec.channels, k = spec.kernel, s = spec.stride;
        const std::size_t sin = L.sizes[l], sout = L.sizes[l + 1];
        const auto& in = ws.act[l];
        auto& out = ws.act[l + 1];
        out.assign(cout * sout * sout, 0.0);
        const double* w = params.data() + L.weight_offset[l];
        const double* b = params.data() + L.bias_offset[l];
        for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t oy = 0; oy < sout; ++oy)
                for (std::size_t ox = 0; ox < sout; ++ox) {
                    double acc = b[o];
                    for (std::size_t c = 0; c < cin; ++c) {
                        const double* wk = w + ((o * cin + c) * k) * k;
                        const double* ic = in.data() + c * sin * sin;
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx)
                                acc += wk[ky * k + kx] * ic[(oy * s + ky) * sin + ox * s + kx];
                    }
                    out[(o * sout + oy) * sout + ox] = acc > 0.0 ? acc : 0.0;
                }
    }
    const auto& last = ws.act[nl];
    double score = params[L.head_bias_offset];
    for (std::size_t c = 0; c < last.size(); ++c) score += params[L.head_weight_offset + c] * last[c];
    return score;
}

/// Accumulates dscore * d(score)/d(params) into `dparams`. When
/// `want_input_grad`, ws.input_grad receives d(score)/d(masked map) * dscore.
inline void tower_backward(const TowerLayout& L, std::span<const double> params, TowerWorkspace& ws, double dscore,
                           std::span<double> dparams, bool want_input_grad) {
    const std::size_t nl = L.layers.size();
    const auto& last = ws.act[nl];
    ws.grad_out.assign(last.size(), 0.0);
    for (std::size_t c = 0; c < last.size(); ++c) {
        dparams[L.head_weight_offset + c] += dscore * last[c];
        ws.grad_out[c] = dscore * params[L.head_weight_offset + c];
    }
    dparams[L.head_bias_offset] += dscore;

    for (std::size_t l = nl; l-- > 0;) {
        const auto& spec = L.layers[l];
        const std::size_t cin = L.in_channels(l), cout = spec.channels, k = spec.kernel, s = spec.stride;
        const std::size_t sin = L.sizes[l], sout = L.sizes[l + 1];
        const auto& in = ws.act[l];
        const auto& out = ws.act[l + 1];
        const bool need_in = l > 0 || want_input_grad;
        if (need_in) ws.grad_in.assign(cin * sin * sin, 0.0);
        const double* w = params.data() + L.weight_offset[l];
        double* dw = dparams.data() + L.weight_offset[l];
        double* db = dparams.data() + L.bias_offset[l];
        for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t oy = 0; oy < sout; ++oy)
                for (std::size_t ox = 0; ox < sout; ++ox) {
                    const std::size_t oi = (o * sout + oy) * sout + ox;
                    if (out[oi] <= 0.0) continue;  // ReLU inactive
                    const double g = ws.grad_out[oi];
                    if (g == 0.0) continue;
                    db[o] += g;
                    for (std::size_t c = 0; c < cin; ++c) {
                        const std::size_t wbase = ((o * cin + c) * k) * k;
                        const std::size_t ibase = c * sin * sin;
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const std::size_t ii = ibase + (oy * s + ky) * sin + ox * s + kx;
                                dw[wbase + ky * k + kx] += g * in[ii];
                                if (need_in) ws.grad_in[ii] += g * w[wbase + ky * k + kx];
                            }
                    }
                }
        if (need_in) std::swap(ws.grad_out, ws.grad_in);
    }
    if (want_input_grad) ws.input_grad = ws.grad_out;
}

/// head(tower(mask(p_u q_i^T))).
inline double forward(const ConvRecModel& model, Index u, Index i, MaskMode inference_mask, TowerWorkspace& ws) {
    detail::build_masked_map(model.embeddings().user(u), model.embeddings().item(i), inference_mask, ws);
    return tower_forward(model.layout(), model.parameters(), ws);
}

inline double forward(const ConvRecModel& model, Index u, Index i, MaskMode inference_mask) {
    TowerWorkspace ws;
    return forward(model, u, i, inference_mask, ws);
}

/// d score / d e_{x,y} for the raw (unmasked) map. Cells outside the mask are
/// exactly zero.
inline Matrix score_map_gradient(const ConvRecModel& model, Index u, Index i, MaskMode mask) {
    TowerWorkspace ws;
    forward(model, u, i, mask, ws);
    std::vector<double> scratch(model.parameters().size(), 0.0);
    tower_backward(model.layout(), model.parameters(), ws, 1.0, scratch, true);
    const Index k = model.dim();
    Matrix g(k, k);
    for (Index x = 0; x < k; ++x)
        for (Index y = 0; y < k; ++y) g(x, y) = ws.input_grad[x * k + y] * (mask_keeps(mask, x, y) ? 1.0 : 0.0);
    return g;
}

struct Regularization {
    double embedding = 0.0;
    double conv = 0.0;
    double head = 0.0;
};

/// Per-triple loss: -ln s(score_ui - score_uj) plus L2 terms (embedding term
/// only in learnable mode; biases are not regularized).
inline double triple_loss(const ConvRecModel& model, Index u, Index i, Index j, MaskMode mask, const Regularization& reg) {
    TowerWorkspace ws;
    const double si = forward(model, u, i, mask, ws);
    const double sj = forward(model, u, j, mask, ws);
    double loss = -log_sigmoid(si - sj);
    const auto params = model.parameters();
    double conv_sq = 0.0, head_sq = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (model.is_conv_weight(k)) conv_sq += params[k] * params[k];
        else if (model.is_head_weight(k)) head_sq += params[k] * params[k];
    }
    loss += reg.conv * conv_sq + reg.head * head_sq;
    if (model.mode() == EmbeddingMode::learnable) {
        double sq = 0.0;
        for (double v : model.embeddings().user(u)) sq += v * v;
        for (double v : model.embeddings().item(i)) sq += v * v;
        for (double v : model.embeddings().item(j)) sq += v * v;
        loss += reg.embedding * sq;
    }
    return loss;
}

struct GradientSet {
    std::vector<double> params;
    Vector user;      // d loss / d p_u
    Vector pos_item;  // d loss / d q_i
    Vector neg_item;  // d loss / d q_j
    double loss = 0.0;
};

namespace detail {

/// Adds d/dp and d/dq of sum_{x,y} G_xy * mask_xy * p_x q_y.
inline void map_grad_to_embeddings(std::span<const double> g, std::span<const double> p, std::span<const double> q,
                                   MaskMode mask, Vector& dp, Vector& dq) {
    const std::size_t k = p.size();
    for (std::size_t x = 0; x < k; ++x)
        for (std::size_t y = 0; y < k; ++y) {
            if (!mask_keeps(mask, Index(x), Index(y))) continue;
            const double gv = g[x * k + y];
            dp[x] += gv * q[y];
            dq[y] += gv * p[x];
        }
}

}  // namespace detail

/// Exact gradient of triple_loss with respect to every trainable parameter.
inline GradientSet backward(const ConvRecModel& model, Index u, Index i, Index j, MaskMode train_mask,
                            const Regularization& reg, TowerWorkspace& wi, TowerWorkspace& wj) {
    const Index k = model.dim();
    GradientSet g;
    g.params.assign(model.parameters().size(), 0.0);
    g.user = Vector::Zero(k);
    g.pos_item = Vector::Zero(k);
    g.neg_item = Vector::Zero(k);
    const bool learnable = model.mode() == EmbeddingMode::learnable;

    const double si = forward(model, u, i, train_mask, wi);
    const double sj = forward(model, u, j, train_mask, wj);
    const double x = si - sj;
    const double coef = sigmoid(-x);  // -dL/dx
    g.loss = -log_sigmoid(x);

    tower_backward(model.layout(), model.parameters(), wi, -coef, g.params, learnable);
    if (learnable)
        detail::map_grad_to_embeddings(wi.input_grad, model.embeddings().user(u), model.embeddings().item(i),
                                       train_mask, g.user, g.pos_item);
    tower_backward(model.layout(), model.parameters(), wj, coef, g.params, learnable);
    if (learnable)
        detail::map_grad_to_embeddings(wj.input_grad, model.embeddings().user(u), model.embeddings().item(j),
                                       train_mask, g.user, g.neg_item);

    const auto params = model.parameters();
    double conv_sq = 0.0, head_sq = 0.0;
    for (std::size_t l = 0; l < model.layout().layers.size(); ++l)
        for (std::size_t n = 0; n < model.layout().weight_count[l]; ++n) {
            const std::size_t idx = model.layout().weight_offset[l] + n;
            g.params[idx] += 2.0 * reg.conv * params[idx];
            conv_sq += params[idx] * params[idx];
        }
    for (std::size_t idx = model.layout().head_weight_offset; idx < model.layout().head_bias_offset; ++idx) {
        g.params[idx] += 2.0 * reg.head * params[idx];
        head_sq += params[idx] * params[idx];
    }
    g.loss += reg.conv * conv_sq + reg.head * head_sq;

    if (learnable) {
        const auto p = model.embeddings().user(u), qi = model.embeddings().item(i), qj = model.embeddings().item(j);
        double sq = 0.0;
        for (Index c = 0; c < k; ++c) {
            g.user[c] += 2.0 * reg.embedding * p[c];
            g.pos_item[c] += 2.0 * reg.embedding * qi[c];
            g.neg_item[c] += 2.0 * reg.embedding * qj[c];
            sq += p[c] * p[c] + qi[c] * qi[c] + qj[c] * qj[c];
        }
        g.loss += reg.embedding * sq;
    }
    return g;
}

inline GradientSet backward(const ConvRecModel& model, Index u, Index i, Index j, MaskMode train_mask,
                            const Regularization& reg = {}) {
    TowerWorkspace wi, wj;
    return backward(model, u, i, j, train_mask, reg, wi, wj);
}

// Training ------------------------------------------------------------------

enum class Optimizer { sgd, adam };

inline Optimizer parse_optimizer(std::string_view s) {
    if (s == "sgd") return Optimizer::sgd;
    if (s == "adam") return Optimizer::adam;
    throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

inline std::string to_string(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adam"; }

struct TrainConfig {
    double lr = 0.05;
    Regularization reg;
    std::size_t batch_size = 64;
    std::size_t max_epochs = 50;
    std::size_t eval_interval = 1;  // epochs
    std::size_t patience = 5;       // evaluation steps
    std::uint64_t seed = 0;
    Optimizer optimizer = Optimizer::sgd;

    void validate() const {
        if (patience < 1) throw ConfigError("patience must be at least 1");
        if (eval_interval < 1) throw ConfigError("evaluation interval must be at least 1");
        if (batch_size < 1) throw ConfigError("batch size must be at least 1");
        if (!(lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
    }
};

/// Stops after `patience` consecutive evaluations without strict improvement.
class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience) : patience_(patience) {
        if (patience < 1) throw ConfigError("patience must be at least 1");
    }

    /// Records one evaluation; returns true when it is a new best.
    bool observe(double metric) {
        ++steps_;
        if (!std::isnan(metric) && (!best_step_ || metric > best_)) {
            best_ = metric;
            best_step_ = steps_;
            stale_ = 0;
            return true;
        }
        ++stale_;
        return false;
    }

    bool should_stop() const noexcept { return stale_ >= patience_; }
    std::size_t steps() const noexcept { return steps_; }
    std::size_t best_step() const noexcept { return best_step_.value_or(0); }
    double best() const noexcept { return best_step_ ? best_ : std::numeric_limits<double>::quiet_NaN(); }

private:
    std::size_t patience_;
    std::size_t steps_ = 0;
    std::size_t stale_ = 0;
    std::optional<std::size_t> best_step_;
    double best_ = 0.0;
};

struct TraceRow {
    std::size_t epoch = 0;
    std::size_t eval_step = 0;
    double metric = 0.0;
    double best_so_far = 0.0;
};

inline std::string trace_to_csv(const std::vector<TraceRow>& trace) {
    std::string out = "epoch,eval_step,metric,best_so_far\n";
    for (const auto& r : trace)
        out += std::to_string(r.epoch) + ',' + std::to_string(r.eval_step) + ',' + io::format_double(r.metric) + ',' +
               io::format_double(r.best_so_far) + '\n';
    return out;
}

struct TrainResult {
    ConvRecModel model;  // best-validation checkpoint
    std::vector<TraceRow> trace;
    std::size_t best_step = 0;
    std::size_t epochs_run = 0;
    bool early_stopped = false;
};

class TrainingDiverged : public Error {
public:
    using Error::Error;
};

using ValidationCallback = std::function<double(const ConvRecModel&)>;

namespace detail {

struct AdamState {
    std::vector<double> m, v;
    std::size_t t = 0;
};

inline void adam_update(std::span<double> x, std::span<const double> g, AdamState& st, std::size_t offset, double lr,
                        std::size_t t) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, double(t)), c2 = 1.0 - std::pow(b2, double(t));
    for (std::size_t k = 0; k < x.size(); ++k) {
        double& m = st.m[offset + k];
        double& v = st.v[offset + k];
        m = b1 * m + (1.0 - b1) * g[k];
        v = b2 * v + (1.0 - b2) * g[k] * g[k];
        x[k] -= lr * (m / c1) / (std::sqrt(v / c2) + eps);
    }
}

}  // namespace detail

/// Runs one epoch of mini-batch BPR training over the positives of `train`.
/// Returns the mean triple loss.
inline double train_epoch(ConvRecModel& model, const InteractionMatrix& train, const TrainConfig& cfg, MaskMode mask,
                          std::size_t epoch, detail::AdamState& adam_params, detail::AdamState& adam_emb) {
    const bool learnable = model.mode() == EmbeddingMode::learnable;
    const Index k = model.dim();
    const auto entries = train.entries();
    std::vector<std::size_t> order(entries.size());
    for (std::size_t n = 0; n < order.size(); ++n) order[n] = n;
    Rng rng(derive_seed(cfg.seed, epoch));
    rng.shuffle(order);

    auto& emb = model.embeddings();
    const std::size_t n_users = emb.n_users();
    std::vector<double> gparams(model.parameters().size());
    std::vector<double> gemb;  // users then items, row-major
    std::vector<char> touched;
    std::vector<std::size_t> touched_rows;
    if (learnable) {
        gemb.assign((n_users + emb.n_items()) * k, 0.0);
        touched.assign(n_users + emb.n_items(), 0);
    }
    TowerWorkspace wi, wj;
    double loss_sum = 0.0;
    std::size_t n_triples = 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        std::fill(gparams.begin(), gparams.end(), 0.0);
        std::size_t in_batch = 0;
        for (std::size_t n = start; n < end; ++n) {
            const auto& pos = entries[order[n]];
            const auto neg = sample_negative(train, pos.user, rng);
            if (!neg) continue;
            auto g = backward(model, pos.user, pos.item, *neg, mask, cfg.reg, wi, wj);
            if (!std::isfinite(g.loss))
                throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + " (learning rate " +
                                       io::format_double(cfg.lr) + ")");
            loss_sum += g.loss;
            ++n_triples;
            ++in_batch;
            for (std::size_t p = 0; p < gparams.size(); ++p) gparams[p] += g.params[p];
            if (learnable) {
                auto add_row = [&](std::size_t row, const Vector& v) {
                    if (!touched[row]) {
                        touched[row] = 1;
                        touched_rows.push_back(row);
                    }
                    for (Index c = 0; c < k; ++c) gemb[row * k + c] += v[c];
                };
                add_row(pos.user, g.user);
                add_row(n_users + pos.item, g.pos_item);
                add_row(n_users + *neg, g.neg_item);
            }
        }
        if (in_batch == 0) continue;
        const double scale = 1.0 / double(in_batch);
        for (double& v : gparams) v *= scale;
        auto params = model.parameters();
        if (cfg.optimizer == Optimizer::sgd) {
            for (std::size_t p = 0; p < params.size(); ++p) params[p] -= cfg.lr * gparams[p];
        } else {
            ++adam_params.t;
            detail::adam_update(params, gparams, adam_params, 0, cfg.lr, adam_params.t);
        }
        if (learnable) {
            std::sort(touched_rows.begin(), touched_rows.end());
            if (cfg.optimizer == Optimizer::adam) ++adam_emb.t;
            for (std::size_t row : touched_rows) {
                std::span<double> target = row < n_users ? emb.user(Index(row)) : emb.item(Index(row - n_users));
                std::span<double> grad(gemb.data() + row * k, k);
                for (double& v : grad) v *= scale;
                if (cfg.optimizer == Optimizer::sgd) {
                    for (Index c = 0; c < k; ++c) target[c] -= cfg.lr * grad[c];
                } else {
                    detail::adam_update(target, grad, adam_emb, row * k, cfg.lr, adam_emb.t);
                }
                std::fill(grad.begin(), grad.end(), 0.0);
                touched[row] = 0;
            }
            touched_rows.clear();
        }
    }
    return n_triples ? loss_sum / double(n_triples) : 0.0;
}

/// BPR training with early stopping on a validation metric. The returned
/// model is the checkpoint with the best validation value.
inline TrainResult train(ConvRecModel model, const InteractionMatrix& train_matrix, const TrainConfig& cfg,
                         MaskMode train_mask, const ValidationCallback& evaluator) {
    cfg.validate();
    model.set_train_mask(train_mask);
    detail::AdamState adam_params, adam_emb;
    if (cfg.optimizer == Optimizer::adam) {
        adam_params.m.assign(model.parameters().size(), 0.0);
        adam_params.v = adam_params.m;
        if (model.mode() == EmbeddingMode::learnable) {
            const std::size_t n = (std::size_t(model.embeddings().n_users()) + model.embeddings().n_items()) * model.dim();
            adam_emb.m.assign(n, 0.0);
            adam_emb.v = adam_emb.m;
        }
    }
    EarlyStopping stopper(cfg.patience);
    TrainResult result;
    std::optional<ConvRecModel> best;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const double loss = train_epoch(model, train_matrix, cfg, train_mask, epoch, adam_params, adam_emb);
        if (!std::isfinite(loss))
            throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + " (learning rate " +
                                   io::format_double(cfg.lr) + ")");
        result.epochs_run = epoch;
        if (epoch % cfg.eval_interval != 0) continue;
        const double metric = evaluator(model);
        if (stopper.observe(metric)) best = model;
        result.trace.push_back({epoch, stopper.steps(), metric, stopper.best()});
        if (stopper.should_stop()) {
            result.early_stopped = true;
            break;
        }
    }
    result.best_step = stopper.best_step();
    result.model = best ? std::move(*best) : std::move(model);
    return result;
}

inline TrainResult train(ConvRecModel model, const SplitTriple& split, const TrainConfig& cfg, MaskMode train_mask,
                         const ValidationCallback& evaluator) {
    return train(std::move(model), split.train, cfg, train_mask, evaluator);
}

// Scoring adapter -----------------------------------------------------------

class ConvRecScorer final : public ScoringModel {
public:
    ConvRecScorer(std::shared_ptr<const ConvRecModel> model, MaskMode inference_mask)
        : model_(std::move(model)), mask_(inference_mask) {}

    std::string algorithm() const override { return "convrec"; }
    Index n_items() const override { return model_->embeddings().n_items(); }
    std::vector<double> score(Index user) const override {
        std::vector<double> out(n_items());
        TowerWorkspace ws;
        for (Index i = 0; i < out.size(); ++i) out[i] = forward(*model_, user, i, mask_, ws);
        return out;
    }
    void score_items(Index user, std::span<const Index> items, std::span<double> out) const override {
        TowerWorkspace ws;
        for (std::size_t n = 0; n < items.size(); ++n) out[n] = forward(*model_, user, items[n], mask_, ws);
    }
    void save(const std::filesystem::path& dir) const override { model_->save(dir); }

    const ConvRecModel& model() const noexcept { return *model_; }

private:
    std::shared_ptr<const ConvRecModel> model_;
    MaskMode mask_;
};

// Checkpoint ----------------------------------------------------------------
//
// model.bin: "CRM1", an EMB1 embedding block, u64 parameter count, then the
// flat parameter vector as f64 little-endian in layout order (per layer:
// weights [out][in][ky][kx], biases; then head weights, head bias).
// model.json: tower configuration, embedding mode and training mask.

inline nlohmann::ordered_json tower_to_json(const ConvTowerConfig& t) {
    nlohmann::ordered_json layers = nlohmann::ordered_json::array();
    for (const auto& L : t.layers) layers.push_back({{"channels", L.channels}, {"kernel", L.kernel}, {"stride", L.stride}});
    return {{"layers", layers}, {"init_scale", t.init_scale}, {"init_seed", t.init_seed}};
}

inline ConvTowerConfig tower_from_json(const nlohmann::json& j) {
    ConvTowerConfig t;
    for (const auto& L : j.at("layers"))
        t.layers.push_back({L.at("channels").get<Index>(), L.at("kernel").get<Index>(), L.at("stride").get<Index>()});
    t.init_scale = j.value("init_scale", 1.0);
    t.init_seed = j.value("init_seed", std::uint64_t{0});
    return t;
}

inline void ConvRecModel::save(const std::filesystem::path& dir) const {
    std::string bin = "CRM1";
    bin += encode_embeddings(emb_);
    detail::put_u64_le(bin, params_.size());
    for (double v : params_) detail::put_f64_le(bin, v);
    io::write_file(dir / "model.bin", bin);
    nlohmann::ordered_json meta;
    meta["algorithm"] = "convrec";
    meta["kind"] = "convrec";
    meta["tower"] = tower_to_json(tower_);
    meta["embedding_mode"] = to_string(mode_);
    meta["train_mask"] = to_string(train_mask_);
    io::write_file(dir / "model.json", meta.dump(2) + "\n");
}

inline ConvRecModel decode_conv_model(std::string_view bin, const nlohmann::json& meta) {
    if (bin.substr(0, 4) != "CRM1") throw Error("bad conv model checkpoint magic");
    std::size_t offset = 4;
    auto emb = decode_embeddings(bin, offset);
    ConvRecModel m(std::move(emb), tower_from_json(meta.at("tower")),
                   parse_embedding_mode(meta.at("embedding_mode").get<std::string>()),
                   parse_mask_mode(meta.at("train_mask").get<std::string>()));
    if (bin.size() < offset + 8) throw Error("conv model checkpoint truncated");
    const auto n = detail::get_u64_le(reinterpret_cast<const unsigned char*>(bin.data()) + offset);
    offset += 8;
    if (n != m.params_.size() || bin.size() < offset + 8 * n) throw Error("conv model parameter block does not match tower");
    for (std::size_t k = 0; k < n; ++k)
        m.params_[k] = detail::get_f64_le(reinterpret_cast<const unsigned char*>(bin.data()) + offset + 8 * k);
    return m;
}

inline ConvRecModel ConvRecModel::load(const std::filesystem::path& dir) {
    return decode_conv_model(io::read_file(dir / "model.bin"), nlohmann::json::parse(io::read_file(dir / "model.json")));
}

}  // namespace convmap
