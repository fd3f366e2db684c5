#pragma once

// Neighborhood baselines: ItemKNN / UserKNN with shrunk cosine, and the
// bipartite random-walk similarities P3alpha and RP3beta.

#include <cmath>
#include <memory>
#include <vector>

#include "convmap/dataio.hpp"
#include "convmap/scoring.hpp"

namespace convmap {

namespace detail {

using SimRows = std::vector<std::vector<SimilarityMatrix::Entry>>;

inline SimilarityMatrix finish_rows(SimRows rows, Index n_cols, std::size_t top_k) {
    for (auto& r : rows) truncate_top_k(r, top_k);
    return SimilarityMatrix::from_rows(n_cols, rows);
}

}  // namespace detail

/// s_ab = (v_a . v_b) / (|v_a| |v_b| + shrink) over item columns (item axis)
/// or user rows (user axis); self-similarity is zero and each row keeps its
/// top_k values.
inline SimilarityMatrix cosine_similarity_shrunk(const InteractionMatrix& train, double shrink, std::size_t top_k,
                                                 KnnAxis axis = KnnAxis::item) {
    if (top_k < 1) throw Error("cosine_similarity_shrunk: top_k must be at least 1");
    if (!(shrink >= 0.0)) throw Error("cosine_similarity_shrunk: shrink must be non-negative");
    const InteractionMatrix transposed = train.transpose();
    const InteractionMatrix& vectors = axis == KnnAxis::item ? transposed : train;
    const InteractionMatrix& coords = axis == KnnAxis::item ? train : transposed;
    const Index n = vectors.n_users();

    std::vector<double> norm(n, 0.0);
    for (Index a = 0; a < n; ++a) {
        double sq = 0.0;
        for (const auto& e : vectors.row(a)) sq += e.value * e.value;
        norm[a] = std::sqrt(sq);
    }

    detail::SimRows rows(n);
    std::vector<double> acc(n, 0.0);
    std::vector<char> seen(n, 0);
    std::vector<Index> touched;
    for (Index a = 0; a < n; ++a) {
        for (const auto& e : vectors.row(a)) {
            for (const auto& f : coords.row(e.item)) {
                if (!seen[f.item]) {
                    seen[f.item] = 1;
                    touched.push_back(f.item);
                }
                acc[f.item] += e.value * f.value;
            }
        }
        for (Index b : touched) {
            const double denom = norm[a] * norm[b] + shrink;
            if (b != a && acc[b] != 0.0 && denom > 0.0) rows[a].emplace_back(b, acc[b] / denom);
            acc[b] = 0.0;
            seen[b] = 0;
        }
        touched.clear();
    }
    return detail::finish_rows(std::move(rows), n, top_k);
}

namespace detail {

/// Untruncated P3alpha rows: s_ij = sum_u P(i->u)^alpha P(u->j)^alpha.
inline SimRows p3alpha_rows(const InteractionMatrix& train, double alpha) {
    const InteractionMatrix item_users = train.transpose();
    std::vector<double> user_deg(train.n_users(), 0.0), item_deg(train.n_items(), 0.0);
    for (const auto& e : train.entries()) {
        user_deg[e.user] += e.value;
        item_deg[e.item] += e.value;
    }
    const Index n = train.n_items();
    SimRows rows(n);
    std::vector<double> acc(n, 0.0);
    std::vector<char> seen(n, 0);
    std::vector<Index> touched;
    for (Index i = 0; i < n; ++i) {
        for (const auto& e : item_users.row(i)) {
            if (e.value <= 0.0) continue;
            const Index u = e.item;
            const double to_user = std::pow(e.value / item_deg[i], alpha);
            for (const auto& f : train.row(u)) {
                if (f.value <= 0.0) continue;
                if (!seen[f.item]) {
                    seen[f.item] = 1;
                    touched.push_back(f.item);
                }
                acc[f.item] += to_user * std::pow(f.value / user_deg[u], alpha);
            }
        }
        std::sort(touched.begin(), touched.end());
        for (Index j : touched) {
            if (j != i && acc[j] != 0.0) rows[i].emplace_back(j, acc[j]);
            acc[j] = 0.0;
            seen[j] = 0;
        }
        touched.clear();
    }
    return rows;
}

inline void rerank_rows(SimRows& rows, std::span<const double> popularity, double beta) {
    for (auto& row : rows)
        for (auto& [j, v] : row) v = popularity[j] > 0.0 ? v / std::pow(popularity[j], beta) : 0.0;
}

}  // namespace detail

/// Item-item transition similarity of the user-item bipartite graph.
inline SimilarityMatrix p3alpha_similarity(const InteractionMatrix& train, double alpha, std::size_t top_k) {
    if (!(alpha >= 0.0)) throw Error("p3alpha: alpha must be non-negative");
    if (top_k < 1) throw Error("p3alpha: top_k must be at least 1");
    return detail::finish_rows(detail::p3alpha_rows(train, alpha), train.n_items(), top_k);
}

/// s'_ij = s_ij / popularity(j)^beta; zero-popularity columns become zero.
inline SimilarityMatrix rp3beta_rerank(const SimilarityMatrix& p3, std::span<const double> popularity, double beta) {
    if (popularity.size() != p3.n_cols()) throw Error("rp3beta: popularity length does not match item count");
    SimilarityMatrix out = p3;
    const auto vals = out.values();
    std::size_t k = 0;
    for (Index r = 0; r < out.n_rows(); ++r)
        for (Index j : out.row_cols(r)) {
            vals[k] = popularity[j] > 0.0 ? vals[k] / std::pow(popularity[j], beta) : 0.0;
            ++k;
        }
    return out;
}

inline std::unique_ptr<SimilarityModel> fit_item_knn(std::shared_ptr<const InteractionMatrix> train, double shrink,
                                                     std::size_t top_k) {
    auto s = cosine_similarity_shrunk(*train, shrink, top_k, KnnAxis::item);
    return std::make_unique<SimilarityModel>("itemknn", std::move(s), std::move(train), KnnAxis::item);
}

inline std::unique_ptr<SimilarityModel> fit_user_knn(std::shared_ptr<const InteractionMatrix> train, double shrink,
                                                     std::size_t top_k) {
    auto s = cosine_similarity_shrunk(*train, shrink, top_k, KnnAxis::user);
    return std::make_unique<SimilarityModel>("userknn", std::move(s), std::move(train), KnnAxis::user);
}

inline std::unique_ptr<SimilarityModel> fit_p3alpha(std::shared_ptr<const InteractionMatrix> train, double alpha,
                                                    std::size_t top_k) {
    auto s = p3alpha_similarity(*train, alpha, top_k);
    return std::make_unique<SimilarityModel>("p3alpha", std::move(s), std::move(train));
}

/// RP3beta reranks the full P3alpha rows before top-k truncation.
inline std::unique_ptr<SimilarityModel> fit_rp3beta(std::shared_ptr<const InteractionMatrix> train, double alpha,
                                                    double beta, std::size_t top_k) {
    if (!(alpha >= 0.0)) throw Error("rp3beta: alpha must be non-negative");
    if (top_k < 1) throw Error("rp3beta: top_k must be at least 1");
    auto rows = detail::p3alpha_rows(*train, alpha);
    const auto pop = train->item_counts();
    detail::rerank_rows(rows, pop, beta);
    auto s = detail::finish_rows(std::move(rows), train->n_items(), top_k);
    return std::make_unique<SimilarityModel>("rp3beta", std::move(s), std::move(train));
}

}  // namespace convmap
