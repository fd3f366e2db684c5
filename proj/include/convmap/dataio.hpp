#pragma once

// Implicit-feedback datasets: loading, identifier remapping, leave-one-out
// splitting and negative sampling.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "convmap/common.hpp"
#include "convmap/io.hpp"

namespace convmap {

/// Provenance of a matrix. Tags are OR-ed when partitions are merged so a
/// fitted model can prove it never saw held-out data.
enum PartitionTag : std::uint8_t {
    kTagFull = 1,
    kTagTrain = 2,
    kTagValidation = 4,
    kTagTest = 8,
};

struct Interaction {
    Index user = 0;
    Index item = 0;
    double value = 1.0;
    std::int64_t timestamp = 0;

    friend bool operator==(const Interaction&, const Interaction&) = default;
};

/// Sparse user x item matrix stored row-major (sorted by user, then item).
class InteractionMatrix {
public:
    InteractionMatrix() = default;

    /// Builds a matrix from unordered entries. Duplicate (user, item) pairs are
    /// merged: values summed, latest timestamp kept.
    static InteractionMatrix from_entries(Index n_users, Index n_items, std::vector<Interaction> entries,
                                          bool has_timestamps = false, std::uint8_t tags = kTagFull) {
        for (const auto& e : entries) {
            if (e.user >= n_users || e.item >= n_items)
                throw Error("interaction (" + std::to_string(e.user) + ", " + std::to_string(e.item) +
                            ") outside a " + std::to_string(n_users) + "x" + std::to_string(n_items) + " matrix");
            if (!(e.value >= 0.0) || !std::isfinite(e.value))
                throw Error("interaction values must be finite and non-negative");
        }
        std::sort(entries.begin(), entries.end(), [](const Interaction& a, const Interaction& b) {
            return a.user != b.user ? a.user < b.user : a.item < b.item;
        });
        std::vector<Interaction> merged;
        merged.reserve(entries.size());
        for (const auto& e : entries) {
            if (!merged.empty() && merged.back().user == e.user && merged.back().item == e.item) {
                merged.back().value += e.value;
                merged.back().timestamp = std::max(merged.back().timestamp, e.timestamp);
            } else {
                merged.push_back(e);
            }
        }
        InteractionMatrix m;
        m.n_users_ = n_users;
        m.n_items_ = n_items;
        m.entries_ = std::move(merged);
        m.has_timestamps_ = has_timestamps;
        m.tags_ = tags;
        m.row_ptr_.assign(static_cast<std::size_t>(n_users) + 1, 0);
        for (const auto& e : m.entries_) ++m.row_ptr_[e.user + 1];
        for (std::size_t u = 0; u < n_users; ++u) m.row_ptr_[u + 1] += m.row_ptr_[u];
        return m;
    }

    /// An empty matrix over the given catalog.
    static InteractionMatrix empty(Index n_users, Index n_items, std::uint8_t tags = kTagFull) {
        return from_entries(n_users, n_items, {}, false, tags);
    }

    Index n_users() const noexcept { return n_users_; }
    Index n_items() const noexcept { return n_items_; }
    std::size_t nnz() const noexcept { return entries_.size(); }
    bool has_timestamps() const noexcept { return has_timestamps_; }
    std::uint8_t tags() const noexcept { return tags_; }

    std::span<const Interaction> entries() const noexcept { return entries_; }

    std::span<const Interaction> row(Index user) const noexcept {
        return std::span<const Interaction>(entries_).subspan(row_ptr_[user], row_ptr_[user + 1] - row_ptr_[user]);
    }

    std::size_t row_size(Index user) const noexcept { return row_ptr_[user + 1] - row_ptr_[user]; }

    bool contains(Index user, Index item) const noexcept {
        if (user >= n_users_) return false;
        const auto r = row(user);
        auto it = std::lower_bound(r.begin(), r.end(), item,
                                   [](const Interaction& e, Index i) { return e.item < i; });
        return it != r.end() && it->item == item;
    }

    /// Number of stored interactions per item.
    std::vector<double> item_counts() const {
        std::vector<double> counts(n_items_, 0.0);
        for (const auto& e : entries_) counts[e.item] += 1.0;
        return counts;
    }

    /// Item x user view of the same data.
    InteractionMatrix transpose() const {
        std::vector<Interaction> t;
        t.reserve(entries_.size());
        for (const auto& e : entries_) t.push_back({e.item, e.user, e.value, e.timestamp});
        return from_entries(n_items_, n_users_, std::move(t), has_timestamps_, tags_);
    }

    InteractionMatrix binarized() const {
        auto copy = *this;
        for (auto& e : copy.entries_) e.value = 1.0;
        return copy;
    }

    friend bool operator==(const InteractionMatrix& a, const InteractionMatrix& b) {
        return a.n_users_ == b.n_users_ && a.n_items_ == b.n_items_ && a.has_timestamps_ == b.has_timestamps_ &&
               a.entries_ == b.entries_;
    }

private:
    Index n_users_ = 0;
    Index n_items_ = 0;
    std::vector<Interaction> entries_;
    std::vector<std::size_t> row_ptr_{0};
    bool has_timestamps_ = false;
    std::uint8_t tags_ = kTagFull;
};

/// Union of two matrices over the same catalog; provenance tags are combined.
inline InteractionMatrix merge(const InteractionMatrix& a, const InteractionMatrix& b) {
    if (a.n_users() != b.n_users() || a.n_items() != b.n_items())
        throw Error("cannot merge matrices with different shapes");
    std::vector<Interaction> all(a.entries().begin(), a.entries().end());
    all.insert(all.end(), b.entries().begin(), b.entries().end());
    return InteractionMatrix::from_entries(a.n_users(), a.n_items(), std::move(all),
                                           a.has_timestamps() || b.has_timestamps(),
                                           static_cast<std::uint8_t>(a.tags() | b.tags()));
}

namespace detail {

inline bool is_integer_id(std::string_view s) {
    if (s.empty()) return false;
    return std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

/// Canonical identifier order: integers numerically, then everything else
/// lexicographically. Keeps internal indices independent of row order.
inline bool natural_less(const std::string& a, const std::string& b) {
    const bool ia = is_integer_id(a), ib = is_integer_id(b);
    if (ia != ib) return ia;
    if (ia) {
        const auto sa = a.find_first_not_of('0'), sb = b.find_first_not_of('0');
        const std::string_view va = sa == std::string::npos ? std::string_view{} : std::string_view(a).substr(sa);
        const std::string_view vb = sb == std::string::npos ? std::string_view{} : std::string_view(b).substr(sb);
        if (va.size() != vb.size()) return va.size() < vb.size();
        if (va != vb) return va < vb;
    }
    return a < b;
}

}  // namespace detail

/// Bijection between external identifiers and dense 0-based indices.
class IdMap {
public:
    IdMap() = default;

    /// Indices follow the canonical (natural) order of the identifiers.
    static IdMap from_names(std::vector<std::string> users, std::vector<std::string> items) {
        IdMap m;
        auto canon = [](std::vector<std::string>& v) {
            std::sort(v.begin(), v.end(), detail::natural_less);
            v.erase(std::unique(v.begin(), v.end()), v.end());
        };
        canon(users);
        canon(items);
        m.users_ = std::move(users);
        m.items_ = std::move(items);
        for (Index i = 0; i < m.users_.size(); ++i) m.user_index_.emplace(m.users_[i], i);
        for (Index i = 0; i < m.items_.size(); ++i) m.item_index_.emplace(m.items_[i], i);
        return m;
    }

    /// Identity map "0".."n-1" for generated data.
    static IdMap identity(Index n_users, Index n_items) {
        std::vector<std::string> u, i;
        for (Index k = 0; k < n_users; ++k) u.push_back(std::to_string(k));
        for (Index k = 0; k < n_items; ++k) i.push_back(std::to_string(k));
        return from_names(std::move(u), std::move(i));
    }

    Index n_users() const noexcept { return static_cast<Index>(users_.size()); }
    Index n_items() const noexcept { return static_cast<Index>(items_.size()); }

    std::optional<Index> user_index(const std::string& name) const {
        auto it = user_index_.find(name);
        return it == user_index_.end() ? std::nullopt : std::optional<Index>(it->second);
    }
    std::optional<Index> item_index(const std::string& name) const {
        auto it = item_index_.find(name);
        return it == item_index_.end() ? std::nullopt : std::optional<Index>(it->second);
    }
    const std::string& user_name(Index u) const { return users_.at(u); }
    const std::string& item_name(Index i) const { return items_.at(i); }

private:
    std::vector<std::string> users_, items_;
    std::unordered_map<std::string, Index> user_index_, item_index_;
};

enum class FileFormat { tsv, csv };

inline FileFormat parse_file_format(std::string_view s) {
    if (s == "tsv") return FileFormat::tsv;
    if (s == "csv") return FileFormat::csv;
    throw ConfigError("unknown file format '" + std::string(s) + "' (expected tsv or csv)");
}

struct LoadOptions {
    FileFormat format = FileFormat::tsv;
    bool binarize = true;
    /// Rows with value below this are dropped. Unset: keep any value > 0.
    std::optional<double> min_value;
};

struct Dataset {
    InteractionMatrix matrix;
    IdMap ids;
};

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line, FileFormat format) {
    std::vector<std::string_view> out;
    if (format == FileFormat::csv) {
        std::size_t start = 0;
        while (true) {
            const auto pos = line.find(',', start);
            auto f = line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
            while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
            while (!f.empty() && (f.back() == ' ' || f.back() == '\t')) f.remove_suffix(1);
            out.push_back(f);
            if (pos == std::string_view::npos) break;
            start = pos + 1;
        }
    } else {
        std::size_t i = 0;
        while (i < line.size()) {
            while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
            if (i >= line.size()) break;
            std::size_t j = i;
            while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
            out.push_back(line.substr(i, j - i));
            i = j;
        }
    }
    return out;
}

inline bool parse_double(std::string_view s, double& out) {
    if (s.empty()) return false;
    if (s.front() == '+') s.remove_prefix(1);
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size();
}

inline bool parse_timestamp(std::string_view s, std::int64_t& out) {
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec == std::errc() && p == s.data() + s.size()) return true;
    double d;
    if (!parse_double(s, d) || !std::isfinite(d)) return false;
    out = static_cast<std::int64_t>(std::floor(d));
    return true;
}

}  // namespace detail

/// Parses rows "user item [value] [timestamp]". Lines starting with '#' and
/// blank lines are skipped.
inline Dataset parse_interactions(std::string_view text, const LoadOptions& opt = {}) {
    struct Row {
        std::string user, item;
        double value;
        std::int64_t ts;
    };
    std::vector<Row> rows;
    bool any_timestamp = false, all_timestamp = true;
    std::size_t line_no = 0, data_rows = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string_view::npos || line[first] == '#') continue;
        const auto fields = detail::split_fields(line, opt.format);
        if (fields.size() < 2 || fields.size() > 4)
            throw ParseError("expected 2 to 4 columns, found " + std::to_string(fields.size()), line_no);
        if (fields[0].empty() || fields[1].empty()) throw ParseError("empty user or item identifier", line_no);
        double value = 1.0;
        if (fields.size() >= 3 && !detail::parse_double(fields[2], value))
            throw ParseError("malformed value '" + std::string(fields[2]) + "'", line_no);
        if (!std::isfinite(value) || value < 0.0) throw ParseError("value must be finite and non-negative", line_no);
        std::int64_t ts = 0;
        if (fields.size() == 4) {
            if (!detail::parse_timestamp(fields[3], ts))
                throw ParseError("malformed timestamp '" + std::string(fields[3]) + "'", line_no);
            any_timestamp = true;
        } else {
            all_timestamp = false;
        }
        ++data_rows;
        const bool keep = opt.min_value ? value >= *opt.min_value : value > 0.0;
        if (!keep) continue;
        rows.push_back({std::string(fields[0]), std::string(fields[1]), opt.binarize ? 1.0 : value, ts});
    }
    if (data_rows == 0) throw Error("no interaction rows in input");

    std::vector<std::string> users, items;
    for (const auto& r : rows) {
        users.push_back(r.user);
        items.push_back(r.item);
    }
    Dataset ds;
    ds.ids = IdMap::from_names(std::move(users), std::move(items));
    std::vector<Interaction> entries;
    entries.reserve(rows.size());
    for (const auto& r : rows)
        entries.push_back({*ds.ids.user_index(r.user), *ds.ids.item_index(r.item), r.value, r.ts});
    ds.matrix = InteractionMatrix::from_entries(ds.ids.n_users(), ds.ids.n_items(), std::move(entries),
                                                any_timestamp && all_timestamp);
    if (opt.binarize) ds.matrix = ds.matrix.binarized();
    return ds;
}

inline Dataset load_interactions(const std::filesystem::path& path, const LoadOptions& opt = {}) {
    if (!std::filesystem::exists(path)) throw Error("no such file: " + path.string());
    try {
        return parse_interactions(io::read_file(path), opt);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what(), e.line());
    }
}

inline std::string format_interactions(const InteractionMatrix& m, const IdMap& ids, FileFormat format = FileFormat::tsv) {
    const char sep = format == FileFormat::csv ? ',' : '\t';
    std::string out;
    for (const auto& e : m.entries()) {
        out += ids.user_name(e.user);
        out += sep;
        out += ids.item_name(e.item);
        out += sep;
        out += io::format_double(e.value);
        if (m.has_timestamps()) {
            out += sep;
            out += std::to_string(e.timestamp);
        }
        out += '\n';
    }
    return out;
}

inline void save_interactions(const std::filesystem::path& path, const InteractionMatrix& m, const IdMap& ids,
                              FileFormat format = FileFormat::tsv) {
    io::write_file(path, format_interactions(m, ids, format));
}

enum class SplitPolicy { random, latest_timestamp, automatic };

inline std::string to_string(SplitPolicy p) {
    switch (p) {
        case SplitPolicy::random: return "random";
        case SplitPolicy::latest_timestamp: return "latest_timestamp";
        case SplitPolicy::automatic: return "auto";
    }
    return "?";
}

inline SplitPolicy parse_split_policy(std::string_view s) {
    if (s == "random") return SplitPolicy::random;
    if (s == "latest_timestamp") return SplitPolicy::latest_timestamp;
    if (s == "auto") return SplitPolicy::automatic;
    throw ConfigError("unknown split policy '" + std::string(s) + "'");
}

struct SplitTriple {
    InteractionMatrix train;
    InteractionMatrix validation;
    InteractionMatrix test;
    std::uint64_t seed = 0;
    SplitPolicy policy = SplitPolicy::random;  // resolved, never automatic
    std::size_t train_only_users = 0;          // users with fewer than 3 interactions

    Index n_users() const noexcept { return train.n_users(); }
    Index n_items() const noexcept { return train.n_items(); }
};

/// Holds out one test and one validation interaction for every user with at
/// least three interactions. Other users stay train-only.
inline SplitTriple leave_one_out_split(const InteractionMatrix& m, SplitPolicy policy, std::uint64_t seed) {
    if (policy == SplitPolicy::automatic)
        policy = m.has_timestamps() ? SplitPolicy::latest_timestamp : SplitPolicy::random;
    if (policy == SplitPolicy::latest_timestamp && !m.has_timestamps())
        throw Error("latest_timestamp split requires timestamps");

    std::vector<Interaction> train, validation, test;
    std::size_t train_only = 0;
    for (Index u = 0; u < m.n_users(); ++u) {
        const auto r = m.row(u);
        if (r.size() < 3) {
            if (!r.empty()) ++train_only;
            train.insert(train.end(), r.begin(), r.end());
            continue;
        }
        std::vector<std::size_t> order(r.size());
        for (std::size_t k = 0; k < r.size(); ++k) order[k] = k;
        if (policy == SplitPolicy::latest_timestamp) {
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                return r[a].timestamp != r[b].timestamp ? r[a].timestamp < r[b].timestamp : r[a].item < r[b].item;
            });
        } else {
            Rng rng(derive_seed(seed, u));
            rng.shuffle(order);
        }
        test.push_back(r[order[order.size() - 1]]);
        validation.push_back(r[order[order.size() - 2]]);
        for (std::size_t k = 0; k + 2 < order.size(); ++k) train.push_back(r[order[k]]);
    }
    if (train_only > 0)
        std::clog << "leave_one_out_split: " << train_only << " users with fewer than 3 interactions kept train-only\n";

    SplitTriple s;
    const bool ts = m.has_timestamps();
    s.train = InteractionMatrix::from_entries(m.n_users(), m.n_items(), std::move(train), ts, kTagTrain);
    s.validation = InteractionMatrix::from_entries(m.n_users(), m.n_items(), std::move(validation), ts, kTagValidation);
    s.test = InteractionMatrix::from_entries(m.n_users(), m.n_items(), std::move(test), ts, kTagTest);
    s.seed = seed;
    s.policy = policy;
    s.train_only_users = train_only;
    return s;
}

/// Re-splits the training partition with the same procedure, giving a
/// train/validation pair for tuning that never touches the test partition.
inline SplitTriple nested_validation_split(const SplitTriple& outer, std::uint64_t seed) {
    auto inner = leave_one_out_split(outer.train, outer.policy, seed);
    inner.test = outer.test;
    return inner;
}

/// Samples `n` distinct items none of which appear in the user's rows of
/// `exclude`. The stream is derived from (seed, user).
inline std::vector<Index> sample_negatives(std::span<const InteractionMatrix* const> exclude, Index user,
                                           std::size_t n, std::uint64_t seed) {
    if (exclude.empty()) throw Error("sample_negatives needs at least one matrix");
    const Index n_items = exclude.front()->n_items();
    std::vector<Index> positives;
    for (const auto* m : exclude) {
        if (m->n_items() != n_items) throw Error("sample_negatives: catalog size mismatch");
        if (user < m->n_users())
            for (const auto& e : m->row(user)) positives.push_back(e.item);
    }
    std::sort(positives.begin(), positives.end());
    positives.erase(std::unique(positives.begin(), positives.end()), positives.end());
    const std::size_t candidates = n_items - positives.size();
    if (n > candidates)
        throw Error("user " + std::to_string(user) + " has only " + std::to_string(candidates) +
                    " negative candidates, " + std::to_string(n) + " requested");

    Rng rng(derive_seed(seed, user));
    std::vector<Index> out;
    out.reserve(n);
    auto is_positive = [&](Index i) { return std::binary_search(positives.begin(), positives.end(), i); };
    if (candidates >= 2 * n) {
        std::unordered_set<Index> chosen;
        while (out.size() < n) {
            const auto i = static_cast<Index>(rng.below(n_items));
            if (is_positive(i) || !chosen.insert(i).second) continue;
            out.push_back(i);
        }
    } else {
        std::vector<Index> pool;
        pool.reserve(candidates);
        for (Index i = 0; i < n_items; ++i)
            if (!is_positive(i)) pool.push_back(i);
        for (std::size_t k = 0; k < n; ++k) {
            const auto j = k + static_cast<std::size_t>(rng.below(pool.size() - k));
            std::swap(pool[k], pool[j]);
            out.push_back(pool[k]);
        }
    }
    return out;
}

inline std::vector<Index> sample_negatives(const InteractionMatrix& exclude, Index user, std::size_t n,
                                           std::uint64_t seed) {
    const InteractionMatrix* ptr = &exclude;
    return sample_negatives(std::span<const InteractionMatrix* const>(&ptr, 1), user, n, seed);
}

/// Writes train/validation/test files plus a JSON sidecar.
inline void save_split(const std::filesystem::path& dir, const SplitTriple& s, const IdMap& ids) {
    save_interactions(dir / "train.tsv", s.train, ids);
    save_interactions(dir / "validation.tsv", s.validation, ids);
    save_interactions(dir / "test.tsv", s.test, ids);
    nlohmann::ordered_json meta;
    meta["seed"] = s.seed;
    meta["policy"] = to_string(s.policy);
    meta["n_users"] = s.n_users();
    meta["n_items"] = s.n_items();
    meta["counts"] = {{"train", s.train.nnz()}, {"validation", s.validation.nnz()}, {"test", s.test.nnz()}};
    meta["train_only_users"] = s.train_only_users;
    io::write_file(dir / "split.json", meta.dump(2) + "\n");
}

struct LoadedSplit {
    SplitTriple split;
    IdMap ids;
};

/// Reads a directory written by save_split; the three partitions share one
/// index space.
inline LoadedSplit load_split(const std::filesystem::path& dir) {
    const auto meta = nlohmann::json::parse(io::read_file(dir / "split.json"));
    LoadOptions opt;
    opt.binarize = false;
    opt.min_value = 0.0;
    const char* names[] = {"train.tsv", "validation.tsv", "test.tsv"};
    std::vector<Dataset> parts;
    for (const char* name : names) {
        const auto text = io::read_file(dir / name);
        bool blank = text.find_first_not_of(" \t\r\n") == std::string::npos;
        if (blank) {
            parts.push_back({});
        } else {
            parts.push_back(parse_interactions(text, opt));
        }
    }
    std::vector<std::string> users, items;
    for (const auto& p : parts) {
        for (Index u = 0; u < p.ids.n_users(); ++u) users.push_back(p.ids.user_name(u));
        for (Index i = 0; i < p.ids.n_items(); ++i) items.push_back(p.ids.item_name(i));
    }
    LoadedSplit out;
    out.ids = IdMap::from_names(std::move(users), std::move(items));
    const std::uint8_t tags[] = {kTagTrain, kTagValidation, kTagTest};
    InteractionMatrix* targets[] = {&out.split.train, &out.split.validation, &out.split.test};
    bool has_ts = false;
    for (const auto& p : parts) has_ts = has_ts || p.matrix.has_timestamps();
    for (int k = 0; k < 3; ++k) {
        std::vector<Interaction> entries;
        for (const auto& e : parts[k].matrix.entries())
            entries.push_back({*out.ids.user_index(parts[k].ids.user_name(e.user)),
                               *out.ids.item_index(parts[k].ids.item_name(e.item)), e.value, e.timestamp});
        *targets[k] = InteractionMatrix::from_entries(out.ids.n_users(), out.ids.n_items(), std::move(entries), has_ts,
                                                      tags[k]);
    }
    out.split.seed = meta.at("seed").get<std::uint64_t>();
    out.split.policy = parse_split_policy(meta.at("policy").get<std::string>());
    out.split.train_only_users = meta.value("train_only_users", std::size_t{0});
    return out;
}

}  // namespace convmap
