#pragma once

// Latent-factor embeddings and the K x K interaction map built from them.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "convmap/common.hpp"
#include "convmap/io.hpp"

namespace convmap {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// User factors P (M x K) and item factors Q (N x K).
struct EmbeddingPair {
    Matrix P;
    Matrix Q;

    Index n_users() const noexcept { return static_cast<Index>(P.rows()); }
    Index n_items() const noexcept { return static_cast<Index>(Q.rows()); }
    Index dim() const noexcept { return static_cast<Index>(P.cols()); }

    std::span<const double> user(Index u) const noexcept { return {P.data() + std::size_t(u) * P.cols(), std::size_t(P.cols())}; }
    std::span<const double> item(Index i) const noexcept { return {Q.data() + std::size_t(i) * Q.cols(), std::size_t(Q.cols())}; }
    std::span<double> user(Index u) noexcept { return {P.data() + std::size_t(u) * P.cols(), std::size_t(P.cols())}; }
    std::span<double> item(Index i) noexcept { return {Q.data() + std::size_t(i) * Q.cols(), std::size_t(Q.cols())}; }

    void validate() const {
        if (P.cols() != Q.cols()) throw Error("user and item embeddings differ in dimension");
        if (!P.allFinite() || !Q.allFinite()) throw Error("embeddings contain non-finite values");
    }

    /// Uniform initialization in [-scale, scale].
    static EmbeddingPair random(Index n_users, Index n_items, Index dim, double scale, std::uint64_t seed) {
        EmbeddingPair e{Matrix(n_users, dim), Matrix(n_items, dim)};
        Rng rng(seed);
        for (Eigen::Index k = 0; k < e.P.size(); ++k) e.P.data()[k] = rng.uniform(-scale, scale);
        for (Eigen::Index k = 0; k < e.Q.size(); ++k) e.Q.data()[k] = rng.uniform(-scale, scale);
        return e;
    }

    friend bool operator==(const EmbeddingPair& a, const EmbeddingPair& b) {
        return a.P.rows() == b.P.rows() && a.P.cols() == b.P.cols() && a.Q.rows() == b.Q.rows() &&
               a.Q.cols() == b.Q.cols() && std::equal(a.P.data(), a.P.data() + a.P.size(), b.P.data()) &&
               std::equal(a.Q.data(), a.Q.data() + a.Q.size(), b.Q.data());
    }
};

/// Predicted relevance: sum_k p_k q_k, accumulated in extended precision.
inline double dot_prediction(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size())
        throw Error("dot_prediction: length mismatch (" + std::to_string(p.size()) + " vs " +
                    std::to_string(q.size()) + ")");
    long double acc = 0.0L;
    for (std::size_t k = 0; k < p.size(); ++k) acc += static_cast<long double>(p[k]) * q[k];
    return static_cast<double>(acc);
}

enum class MaskMode { full, element_wise, correlations };

inline constexpr MaskMode kAllMaskModes[] = {MaskMode::full, MaskMode::element_wise, MaskMode::correlations};

inline std::string to_string(MaskMode m) {
    switch (m) {
        case MaskMode::full: return "full";
        case MaskMode::element_wise: return "element-wise";
        case MaskMode::correlations: return "correlations";
    }
    return "?";
}

inline MaskMode parse_mask_mode(std::string_view s) {
    if (s == "full") return MaskMode::full;
    if (s == "element-wise" || s == "element_wise" || s == "elementwise") return MaskMode::element_wise;
    if (s == "correlations") return MaskMode::correlations;
    throw ConfigError("unknown mask mode '" + std::string(s) + "'");
}

/// Whether cell (x, y) survives the mask.
constexpr bool mask_keeps(MaskMode m, Index x, Index y) noexcept {
    switch (m) {
        case MaskMode::full: return true;
        case MaskMode::element_wise: return x == y;
        case MaskMode::correlations: return x != y;
    }
    return true;
}

/// 0/1 multiplicative mask shared by inference-time and training-time masking.
inline Matrix mask_matrix(Index k, MaskMode m) {
    Matrix out(k, k);
    for (Index x = 0; x < k; ++x)
        for (Index y = 0; y < k; ++y) out(x, y) = mask_keeps(m, x, y) ? 1.0 : 0.0;
    return out;
}

/// E = p q^T for one (user, item) pair.
struct InteractionMap {
    Matrix E;
    Index user = 0;
    Index item = 0;

    Index dim() const noexcept { return static_cast<Index>(E.rows()); }
};

inline InteractionMap outer_product(std::span<const double> p, std::span<const double> q, Index user = 0,
                                    Index item = 0) {
    if (p.size() != q.size())
        throw Error("outer_product: length mismatch (" + std::to_string(p.size()) + " vs " +
                    std::to_string(q.size()) + ")");
    const auto k = static_cast<Eigen::Index>(p.size());
    InteractionMap map{Matrix(k, k), user, item};
    for (Eigen::Index x = 0; x < k; ++x)
        for (Eigen::Index y = 0; y < k; ++y) map.E(x, y) = p[x] * q[y];
    return map;
}

inline InteractionMap apply_mask(const InteractionMap& map, MaskMode mode) {
    if (mode == MaskMode::full) return map;
    InteractionMap out = map;
    out.E = map.E.cwiseProduct(mask_matrix(map.dim(), mode));
    return out;
}

/// A reordering of the latent factors. Column c of the permuted embeddings is
/// column perm[c] of the original.
struct FactorPermutation {
    std::vector<Index> perm;
    std::uint64_t seed = 0;

    static FactorPermutation identity(Index k) {
        FactorPermutation p;
        p.perm.resize(k);
        std::iota(p.perm.begin(), p.perm.end(), Index{0});
        return p;
    }

    static FactorPermutation random(Index k, std::uint64_t seed) {
        auto p = identity(k);
        p.seed = seed;
        Rng rng(seed);
        rng.shuffle(p.perm);
        return p;
    }

    bool is_bijection(Index k) const {
        if (perm.size() != k) return false;
        std::vector<bool> seen(k, false);
        for (Index v : perm) {
            if (v >= k || seen[v]) return false;
            seen[v] = true;
        }
        return true;
    }

    FactorPermutation inverse() const {
        FactorPermutation inv;
        inv.seed = seed;
        inv.perm.resize(perm.size());
        for (Index c = 0; c < perm.size(); ++c) inv.perm[perm[c]] = c;
        return inv;
    }
};

/// Reorders the columns of P and Q by the same permutation, which leaves every
/// dot-product prediction unchanged.
inline EmbeddingPair permute_factors(const EmbeddingPair& pair, const FactorPermutation& perm) {
    const Index k = pair.dim();
    if (!perm.is_bijection(k)) throw Error("permute_factors: not a permutation of 0.." + std::to_string(k) + "-1");
    EmbeddingPair out{Matrix(pair.P.rows(), k), Matrix(pair.Q.rows(), k)};
    for (Index c = 0; c < k; ++c) {
        out.P.col(c) = pair.P.col(perm.perm[c]);
        out.Q.col(c) = pair.Q.col(perm.perm[c]);
    }
    return out;
}

// Checkpoint layout: "EMB1", then M, N, K as u64 little-endian, then P and Q
// row-major as f64 little-endian.

inline std::string encode_embeddings(const EmbeddingPair& e) {
    std::string out = "EMB1";
    out.reserve(4 + 24 + 8 * static_cast<std::size_t>(e.P.size() + e.Q.size()));
    detail::put_u64_le(out, e.P.rows());
    detail::put_u64_le(out, e.Q.rows());
    detail::put_u64_le(out, e.dim());
    for (Eigen::Index k = 0; k < e.P.size(); ++k) detail::put_f64_le(out, e.P.data()[k]);
    for (Eigen::Index k = 0; k < e.Q.size(); ++k) detail::put_f64_le(out, e.Q.data()[k]);
    return out;
}

/// Decodes an embedding block starting at `offset`; advances it past the block.
inline EmbeddingPair decode_embeddings(std::string_view bytes, std::size_t& offset) {
    auto need = [&](std::size_t n) {
        if (bytes.size() < offset + n) throw Error("embedding checkpoint truncated");
    };
    need(28);
    if (bytes.substr(offset, 4) != "EMB1") throw Error("bad embedding checkpoint magic");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + offset + 4;
    const auto m = detail::get_u64_le(p), n = detail::get_u64_le(p + 8), k = detail::get_u64_le(p + 16);
    offset += 28;
    if (k == 0 || m > (1ULL << 32) || n > (1ULL << 32) || k > (1ULL << 20)) throw Error("implausible embedding header");
    need(8 * (m + n) * k);
    EmbeddingPair e{Matrix(m, k), Matrix(n, k)};
    const auto* d = reinterpret_cast<const unsigned char*>(bytes.data()) + offset;
    for (Eigen::Index x = 0; x < e.P.size(); ++x, d += 8) e.P.data()[x] = detail::get_f64_le(d);
    for (Eigen::Index x = 0; x < e.Q.size(); ++x, d += 8) e.Q.data()[x] = detail::get_f64_le(d);
    offset += 8 * (m + n) * k;
    return e;
}

inline void save_embeddings(const std::filesystem::path& path, const EmbeddingPair& e) {
    io::write_file(path, encode_embeddings(e));
}

inline EmbeddingPair load_embeddings(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    std::size_t offset = 0;
    return decode_embeddings(bytes, offset);
}

}  // namespace convmap
