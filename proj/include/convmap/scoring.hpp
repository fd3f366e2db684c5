#pragma once

// Uniform scoring interface shared by every recommender, plus the two model
// families that back most baselines: item-similarity models and latent-factor
// models.

#include <algorithm>
#include <filesystem>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "convmap/common.hpp"
#include "convmap/dataio.hpp"
#include "convmap/embed.hpp"
#include "convmap/io.hpp"

namespace convmap {

using Json = nlohmann::ordered_json;

class ScoringModel {
public:
    virtual ~ScoringModel() = default;

    virtual std::string algorithm() const = 0;
    virtual Index n_items() const = 0;

    /// Scores for every item in the catalog.
    virtual std::vector<double> score(Index user) const = 0;

    /// Scores for a subset of items; models with a cheap per-item path override this.
    virtual void score_items(Index user, std::span<const Index> items, std::span<double> out) const {
        const auto all = score(user);
        for (std::size_t k = 0; k < items.size(); ++k) out[k] = all[items[k]];
    }

    /// Writes a checkpoint directory (model file plus model.json).
    virtual void save(const std::filesystem::path& dir) const = 0;

    const Json& hyperparameters() const noexcept { return params_; }
    void set_hyperparameters(Json params) { params_ = std::move(params); }

private:
    Json params_ = Json::object();
};

/// Scores with items from `exclude` set to -infinity.
inline std::vector<double> score_excluding(const ScoringModel& model, Index user, const InteractionMatrix& exclude) {
    auto s = model.score(user);
    if (user < exclude.n_users())
        for (const auto& e : exclude.row(user)) s[e.item] = kNegInf;
    return s;
}

/// Top-n item indices; ties broken by ascending item index.
inline std::vector<Index> top_n(std::span<const double> scores, std::size_t n) {
    std::vector<Index> idx(scores.size());
    std::iota(idx.begin(), idx.end(), Index{0});
    n = std::min(n, idx.size());
    auto better = [&](Index a, Index b) { return scores[a] != scores[b] ? scores[a] > scores[b] : a < b; };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end(), better);
    idx.resize(n);
    return idx;
}

/// Row-compressed sparse matrix of similarities or regression weights.
class SimilarityMatrix {
public:
    using Entry = std::pair<Index, double>;

    SimilarityMatrix() = default;

    /// Rows are given as (column, value) lists; zeros are dropped.
    static SimilarityMatrix from_rows(Index n_cols, const std::vector<std::vector<Entry>>& rows) {
        SimilarityMatrix s;
        s.n_rows_ = static_cast<Index>(rows.size());
        s.n_cols_ = n_cols;
        s.row_ptr_.assign(rows.size() + 1, 0);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            auto row = rows[r];
            std::sort(row.begin(), row.end());
            for (const auto& [c, v] : row) {
                if (c >= n_cols) throw Error("similarity column out of range");
                if (v == 0.0) continue;
                s.cols_.push_back(c);
                s.vals_.push_back(v);
            }
            s.row_ptr_[r + 1] = s.cols_.size();
        }
        return s;
    }

    static SimilarityMatrix from_dense(const Matrix& d) {
        std::vector<std::vector<Entry>> rows(d.rows());
        for (Eigen::Index r = 0; r < d.rows(); ++r)
            for (Eigen::Index c = 0; c < d.cols(); ++c)
                if (d(r, c) != 0.0) rows[r].emplace_back(static_cast<Index>(c), d(r, c));
        return from_rows(static_cast<Index>(d.cols()), rows);
    }

    Index n_rows() const noexcept { return n_rows_; }
    Index n_cols() const noexcept { return n_cols_; }
    std::size_t nnz() const noexcept { return vals_.size(); }

    std::span<const Index> row_cols(Index r) const noexcept {
        return std::span<const Index>(cols_).subspan(row_ptr_[r], row_ptr_[r + 1] - row_ptr_[r]);
    }
    std::span<const double> row_vals(Index r) const noexcept {
        return std::span<const double>(vals_).subspan(row_ptr_[r], row_ptr_[r + 1] - row_ptr_[r]);
    }

    double at(Index r, Index c) const noexcept {
        const auto cols = row_cols(r);
        auto it = std::lower_bound(cols.begin(), cols.end(), c);
        return it != cols.end() && *it == c ? row_vals(r)[static_cast<std::size_t>(it - cols.begin())] : 0.0;
    }

    Matrix to_dense() const {
        Matrix d = Matrix::Zero(n_rows_, n_cols_);
        for (Index r = 0; r < n_rows_; ++r) {
            const auto c = row_cols(r);
            const auto v = row_vals(r);
            for (std::size_t k = 0; k < c.size(); ++k) d(r, c[k]) = v[k];
        }
        return d;
    }

    /// Mutable access to stored values (structure is fixed).
    std::span<double> values() noexcept { return vals_; }

    /// "row<TAB>col<TAB>value" lines, one per stored entry.
    std::string to_tsv() const {
        std::string out;
        for (Index r = 0; r < n_rows_; ++r) {
            const auto c = row_cols(r);
            const auto v = row_vals(r);
            for (std::size_t k = 0; k < c.size(); ++k)
                out += std::to_string(r) + '\t' + std::to_string(c[k]) + '\t' + io::format_double(v[k]) + '\n';
        }
        return out;
    }

    static SimilarityMatrix from_tsv(std::string_view text, Index n_rows, Index n_cols) {
        std::vector<std::vector<Entry>> rows(n_rows);
        std::istringstream in{std::string(text)};
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            std::istringstream ls(line);
            std::uint64_t r, c;
            std::string vs;
            double v;
            if (!(ls >> r >> c >> vs) || !detail::parse_double(vs, v) || r >= n_rows || c >= n_cols)
                throw ParseError("malformed similarity triplet", line_no);
            rows[r].emplace_back(static_cast<Index>(c), v);
        }
        return from_rows(n_cols, rows);
    }

private:
    Index n_rows_ = 0;
    Index n_cols_ = 0;
    std::vector<std::size_t> row_ptr_{0};
    std::vector<Index> cols_;
    std::vector<double> vals_;
};

/// Keeps the `k` largest values (ties: lower column first).
inline void truncate_top_k(std::vector<SimilarityMatrix::Entry>& row, std::size_t k) {
    if (row.size() <= k) return;
    auto better = [](const SimilarityMatrix::Entry& a, const SimilarityMatrix::Entry& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    };
    std::nth_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k), row.end(), better);
    row.resize(k);
}

enum class KnnAxis { item, user };

/// Neighborhood scores. Item axis: profile row times S. User axis: S row of
/// the user times the interaction matrix.
inline std::vector<double> knn_scores(const SimilarityMatrix& s, const InteractionMatrix& train, Index user,
                                      KnnAxis axis = KnnAxis::item) {
    std::vector<double> out(train.n_items(), 0.0);
    if (user >= train.n_users()) return out;
    if (axis == KnnAxis::item) {
        for (const auto& e : train.row(user)) {
            const auto c = s.row_cols(e.item);
            const auto v = s.row_vals(e.item);
            for (std::size_t k = 0; k < c.size(); ++k) out[c[k]] += e.value * v[k];
        }
    } else {
        const auto c = s.row_cols(user);
        const auto v = s.row_vals(user);
        for (std::size_t k = 0; k < c.size(); ++k)
            for (const auto& e : train.row(c[k])) out[e.item] += v[k] * e.value;
    }
    return out;
}

/// Non-personalized popularity ranking.
class TopPopularModel final : public ScoringModel {
public:
    explicit TopPopularModel(std::vector<double> counts) : counts_(std::move(counts)) {}

    std::string algorithm() const override { return "toppop"; }
    Index n_items() const override { return static_cast<Index>(counts_.size()); }
    std::vector<double> score(Index) const override { return counts_; }
    void score_items(Index, std::span<const Index> items, std::span<double> out) const override {
        for (std::size_t k = 0; k < items.size(); ++k) out[k] = counts_[items[k]];
    }
    const std::vector<double>& counts() const noexcept { return counts_; }

    void save(const std::filesystem::path& dir) const override;

private:
    std::vector<double> counts_;
};

inline std::unique_ptr<TopPopularModel> fit_top_popular(const InteractionMatrix& train) {
    return std::make_unique<TopPopularModel>(train.item_counts());
}

/// Scores through an item x item (or user x user) sparse matrix applied to the
/// training profile. Backs ItemKNN, UserKNN, P3alpha, RP3beta and SLIM.
class SimilarityModel final : public ScoringModel {
public:
    SimilarityModel(std::string tag, SimilarityMatrix s, std::shared_ptr<const InteractionMatrix> train,
                    KnnAxis axis = KnnAxis::item)
        : tag_(std::move(tag)), s_(std::move(s)), train_(std::move(train)), axis_(axis) {}

    std::string algorithm() const override { return tag_; }
    Index n_items() const override { return train_->n_items(); }
    std::vector<double> score(Index user) const override { return knn_scores(s_, *train_, user, axis_); }
    const SimilarityMatrix& similarity() const noexcept { return s_; }
    KnnAxis axis() const noexcept { return axis_; }

    void save(const std::filesystem::path& dir) const override;

private:
    std::string tag_;
    SimilarityMatrix s_;
    std::shared_ptr<const InteractionMatrix> train_;
    KnnAxis axis_;
};

/// score(u, i) = p_u . q_i. Backs PureSVD, iALS and MF-BPR.
class FactorModel final : public ScoringModel {
public:
    FactorModel(std::string tag, EmbeddingPair factors) : tag_(std::move(tag)), f_(std::move(factors)) {}

    std::string algorithm() const override { return tag_; }
    Index n_items() const override { return f_.n_items(); }
    std::vector<double> score(Index user) const override {
        std::vector<double> out(f_.n_items());
        const auto p = f_.user(user);
        for (Index i = 0; i < f_.n_items(); ++i) out[i] = dot_prediction(p, f_.item(i));
        return out;
    }
    void score_items(Index user, std::span<const Index> items, std::span<double> out) const override {
        const auto p = f_.user(user);
        for (std::size_t k = 0; k < items.size(); ++k) out[k] = dot_prediction(p, f_.item(items[k]));
    }
    const EmbeddingPair& factors() const noexcept { return f_; }

    void save(const std::filesystem::path& dir) const override;

private:
    std::string tag_;
    EmbeddingPair f_;
};

// Checkpoints ---------------------------------------------------------------

namespace detail {

inline void write_model_json(const std::filesystem::path& dir, const ScoringModel& m, Json extra) {
    Json meta;
    meta["algorithm"] = m.algorithm();
    meta["hyperparameters"] = m.hyperparameters();
    for (auto& [k, v] : extra.items()) meta[k] = v;
    io::write_file(dir / "model.json", meta.dump(2) + "\n");
}

}  // namespace detail

inline void TopPopularModel::save(const std::filesystem::path& dir) const {
    std::string out;
    for (Index i = 0; i < counts_.size(); ++i) out += std::to_string(i) + '\t' + io::format_double(counts_[i]) + '\n';
    io::write_file(dir / "popularity.tsv", out);
    detail::write_model_json(dir, *this, {{"kind", "popularity"}, {"n_items", counts_.size()}});
}

inline void SimilarityModel::save(const std::filesystem::path& dir) const {
    io::write_file(dir / "similarity.tsv", s_.to_tsv());
    detail::write_model_json(dir, *this,
                             {{"kind", "similarity"},
                              {"axis", axis_ == KnnAxis::item ? "item" : "user"},
                              {"n_rows", s_.n_rows()},
                              {"n_cols", s_.n_cols()}});
}

inline void FactorModel::save(const std::filesystem::path& dir) const {
    save_embeddings(dir / "factors.bin", f_);
    detail::write_model_json(dir, *this, {{"kind", "factors"}});
}

/// Restores a checkpoint written by ScoringModel::save. Similarity models need
/// the interaction matrix they score against.
inline std::unique_ptr<ScoringModel> load_scoring_model(const std::filesystem::path& dir,
                                                        std::shared_ptr<const InteractionMatrix> train) {
    const auto meta = Json::parse(io::read_file(dir / "model.json"));
    const auto kind = meta.at("kind").get<std::string>();
    const auto tag = meta.at("algorithm").get<std::string>();
    std::unique_ptr<ScoringModel> model;
    if (kind == "popularity") {
        const auto n = meta.at("n_items").get<Index>();
        std::vector<double> counts(n, 0.0);
        std::istringstream in(io::read_file(dir / "popularity.tsv"));
        Index i;
        std::string v;
        while (in >> i >> v) {
            if (i >= n || !detail::parse_double(v, counts[i])) throw Error("malformed popularity checkpoint");
        }
        model = std::make_unique<TopPopularModel>(std::move(counts));
    } else if (kind == "similarity") {
        if (!train) throw Error("similarity checkpoint needs the training matrix");
        auto s = SimilarityMatrix::from_tsv(io::read_file(dir / "similarity.tsv"), meta.at("n_rows").get<Index>(),
                                            meta.at("n_cols").get<Index>());
        const auto axis = meta.at("axis").get<std::string>() == "user" ? KnnAxis::user : KnnAxis::item;
        model = std::make_unique<SimilarityModel>(tag, std::move(s), std::move(train), axis);
    } else if (kind == "factors") {
        model = std::make_unique<FactorModel>(tag, load_embeddings(dir / "factors.bin"));
    } else {
        throw Error("unknown model kind '" + kind + "'");
    }
    model->set_hyperparameters(meta.value("hyperparameters", Json::object()));
    return model;
}

}  // namespace convmap
