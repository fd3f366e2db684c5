#pragma once

// Synthetic implicit-feedback data with a planted low-rank preference
// structure and a popularity skew.

#include <algorithm>
#include <cmath>
#include <numeric>

#include "convmap/common.hpp"
#include "convmap/dataio.hpp"
#include "convmap/embed.hpp"

namespace convmap {

struct SyntheticConfig {
    Index n_users = 200;
    Index n_items = 300;
    Index rank = 2;
    Index per_user = 20;
    /// Correlation shared by all latent dimensions, in [0, 1).
    double factor_correlation = 0.0;
    /// Strength of the latent affinity relative to Gumbel noise.
    double signal = 3.0;
    /// Item i gets log-popularity bias -exponent * log(i + 1).
    double popularity_exponent = 0.5;
    std::uint64_t seed = 0;
};

struct SyntheticData {
    Dataset data;
    EmbeddingPair truth;  // planted factors
};

inline SyntheticData make_synthetic(const SyntheticConfig& cfg) {
    if (cfg.n_users < 1 || cfg.n_items < 2 || cfg.rank < 1) throw ConfigError("synthetic: empty dimensions");
    if (cfg.per_user < 1 || cfg.per_user >= cfg.n_items)
        throw ConfigError("synthetic: per_user must be in [1, n_items)");
    if (!(cfg.factor_correlation >= 0.0 && cfg.factor_correlation < 1.0))
        throw ConfigError("synthetic: factor_correlation must be in [0, 1)");
    Rng rng(cfg.seed);
    const double a = std::sqrt(1.0 - cfg.factor_correlation), b = std::sqrt(cfg.factor_correlation);
    auto draw = [&](Index rows) {
        Matrix m(rows, cfg.rank);
        for (Index r = 0; r < rows; ++r) {
            const double shared = rng.normal();
            for (Index c = 0; c < cfg.rank; ++c) m(r, c) = a * rng.normal() + b * shared;
        }
        return m;
    };
    SyntheticData out;
    out.truth.P = draw(cfg.n_users);
    out.truth.Q = draw(cfg.n_items);
    const double norm = 1.0 / std::sqrt(double(cfg.rank));

    std::vector<Interaction> entries;
    entries.reserve(std::size_t(cfg.n_users) * cfg.per_user);
    std::vector<double> key(cfg.n_items);
    std::vector<Index> order(cfg.n_items);
    std::int64_t t = 0;
    for (Index u = 0; u < cfg.n_users; ++u) {
        // Gumbel top-k samples per_user items without replacement from
        // softmax(signal * affinity + popularity bias).
        for (Index i = 0; i < cfg.n_items; ++i) {
            const double affinity = norm * out.truth.P.row(u).dot(out.truth.Q.row(i));
            const double bias = -cfg.popularity_exponent * std::log(double(i) + 1.0);
            double v = rng.uniform();
            while (v <= 0.0) v = rng.uniform();
            key[i] = cfg.signal * affinity + bias - std::log(-std::log(v));
        }
        std::iota(order.begin(), order.end(), Index{0});
        std::partial_sort(order.begin(), order.begin() + cfg.per_user, order.end(),
                          [&](Index x, Index y) { return key[x] > key[y] || (key[x] == key[y] && x < y); });
        for (Index n = 0; n < cfg.per_user; ++n) entries.push_back({u, order[n], 1.0, ++t});
    }
    out.data.matrix = InteractionMatrix::from_entries(cfg.n_users, cfg.n_items, std::move(entries), true);
    out.data.ids = IdMap::identity(cfg.n_users, cfg.n_items);
    return out;
}

}  // namespace convmap
