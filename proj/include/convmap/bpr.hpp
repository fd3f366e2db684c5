#pragma once

// Matrix factorization trained with the BPR pairwise objective. Also the
// pretrainer for the convolutional model's frozen embeddings.

#include <cmath>
#include <memory>
#include <optional>
#include <vector>

#include "convmap/dataio.hpp"
#include "convmap/embed.hpp"
#include "convmap/scoring.hpp"

namespace convmap {

inline double sigmoid(double x) noexcept {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// log(sigmoid(x)) without overflow.
inline double log_sigmoid(double x) noexcept { return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

/// ln s(r_ui - r_uj) - reg (|p_u|^2 + |q_i|^2 + |q_j|^2); maximized by BPR.
inline double bpr_triple_objective(const EmbeddingPair& e, Index u, Index i, Index j, double reg) {
    const double x = dot_prediction(e.user(u), e.item(i)) - dot_prediction(e.user(u), e.item(j));
    double sq = 0.0;
    for (double v : e.user(u)) sq += v * v;
    for (double v : e.item(i)) sq += v * v;
    for (double v : e.item(j)) sq += v * v;
    return log_sigmoid(x) - reg * sq;
}

/// One stochastic gradient-ascent step on the triple objective, in place.
inline void bpr_step(EmbeddingPair& e, Index u, Index i, Index j, double lr, double reg) {
    const auto p = e.user(u);
    const auto qi = e.item(i);
    const auto qj = e.item(j);
    const double x = dot_prediction(p, qi) - dot_prediction(p, qj);
    const double g = sigmoid(-x);
    for (std::size_t k = 0; k < p.size(); ++k) {
        const double pu = p[k], a = qi[k], b = qj[k];
        p[k] += lr * (g * (a - b) - 2.0 * reg * pu);
        qi[k] += lr * (g * pu - 2.0 * reg * a);
        if (j != i) qj[k] += lr * (-g * pu - 2.0 * reg * b);
    }
}

inline EmbeddingPair bpr_stepped(const EmbeddingPair& e, Index u, Index i, Index j, double lr, double reg) {
    EmbeddingPair out = e;
    bpr_step(out, u, i, j, lr, reg);
    return out;
}

/// Uniform negative for `user` among items it never interacted with, or
/// nullopt when the user has interacted with every item.
inline std::optional<Index> sample_negative(const InteractionMatrix& train, Index user, Rng& rng) {
    if (train.row_size(user) >= train.n_items()) return std::nullopt;
    while (true) {
        const auto j = static_cast<Index>(rng.below(train.n_items()));
        if (!train.contains(user, j)) return j;
    }
}

struct BprOptions {
    Index factors = 64;
    double lr = 0.05;
    double reg = 1e-4;
    std::size_t epochs = 30;
    std::uint64_t seed = 0;
    double init_scale = 0.01;
};

inline EmbeddingPair train_mf_bpr(const InteractionMatrix& train, const BprOptions& opt) {
    if (opt.factors < 1) throw Error("mfbpr: factors must be at least 1");
    auto e = EmbeddingPair::random(train.n_users(), train.n_items(), opt.factors, opt.init_scale, opt.seed);
    std::vector<std::size_t> order(train.nnz());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    const auto entries = train.entries();
    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        Rng rng(derive_seed(opt.seed, epoch + 1));
        rng.shuffle(order);
        for (std::size_t k : order) {
            const auto& pos = entries[k];
            const auto neg = sample_negative(train, pos.user, rng);
            if (!neg) continue;
            bpr_step(e, pos.user, pos.item, *neg, opt.lr, opt.reg);
        }
    }
    return e;
}

inline std::unique_ptr<FactorModel> fit_mf_bpr(const InteractionMatrix& train, const BprOptions& opt) {
    return std::make_unique<FactorModel>("mfbpr", train_mf_bpr(train, opt));
}

}  // namespace convmap
