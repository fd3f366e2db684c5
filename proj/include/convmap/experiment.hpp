#pragma once

// JSON experiment configuration for the command-line tool. The whole document
// is checked against the known keys before anything runs; every unknown key
// is reported at once with its path.

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "convmap/bpr.hpp"
#include "convmap/dataio.hpp"
#include "convmap/hpo.hpp"
#include "convmap/studies.hpp"
#include "convmap/synthetic.hpp"

namespace convmap {

struct DatasetConfig {
    std::optional<std::string> path;
    LoadOptions load;
    std::optional<SyntheticConfig> synthetic;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::optional<DatasetConfig> dataset;
    SplitPolicy split_policy = SplitPolicy::automatic;
    std::uint64_t split_seed = 0;
    EvalConfig eval;

    std::string algorithm;
    Json params = Json::object();
    std::optional<hpo::HyperparameterSpace> space;
    std::vector<studies::BaselineSpec> algorithms;
    hpo::TuneOptions tuning;  // search, metric/cutoff and model seed; eval filled from `eval`

    BprOptions pretrain;
    studies::ConvRecipe conv;
    MaskMode train_mask = MaskMode::full;

    studies::StudyOptions study;  // eval filled from `eval`
    std::string repeats = "permutations";
    Index repeat_dim = 8;
    double repeat_init_scale = 0.1;
    bool with_conv = true;

    std::optional<std::string> out;
    Json raw = Json::object();  // the document as given, for report snapshots

    static ExperimentConfig from_json(const Json& doc, std::optional<std::uint64_t> seed_override = std::nullopt);
};

namespace detail {

using KeySet = std::set<std::string, std::less<>>;

inline const KeySet& dataset_keys() {
    static const KeySet k{"path", "format", "binarize", "min_value", "synthetic"};
    return k;
}
inline const KeySet& synthetic_keys() {
    static const KeySet k{"n_users", "n_items", "rank", "per_user", "factor_correlation", "signal",
                          "popularity_exponent", "seed"};
    return k;
}
inline const KeySet& conv_keys() {
    static const KeySet k{"channels",  "layers",     "init_scale",    "init_seed", "embedding_mode",
                          "optimizer", "lr",         "reg",           "batch_size", "max_epochs",
                          "eval_interval", "patience", "seed",        "metric",    "cutoff",
                          "validation_negatives", "validation_seed", "train_mask"};
    return k;
}

/// Collects unknown keys of `obj` (and nested sections) into `bad`.
inline void check_keys(const Json& obj, const std::string& path, const KeySet& allowed, std::vector<std::string>& bad) {
    if (!obj.is_object()) throw ConfigError(path + " must be a JSON object");
    for (const auto& [k, v] : obj.items())
        if (!allowed.count(k)) bad.push_back(path.empty() ? k : path + "." + k);
}

inline void check_schema(const Json& doc) {
    std::vector<std::string> bad;
    check_keys(doc, "", {"seed", "dataset", "split", "eval", "algorithm", "params", "space", "algorithms", "search",
                         "tuning", "pretrain", "conv", "study", "out"},
               bad);
    auto section = [&](const char* key, const KeySet& allowed) {
        if (doc.contains(key)) check_keys(doc.at(key), key, allowed, bad);
    };
    section("dataset", dataset_keys());
    if (doc.contains("dataset") && doc.at("dataset").is_object() && doc.at("dataset").contains("synthetic"))
        check_keys(doc.at("dataset").at("synthetic"), "dataset.synthetic", synthetic_keys(), bad);
    section("split", {"policy", "seed"});
    section("eval", {"n_negatives", "cutoffs", "seed"});
    section("search", {"n_calls", "n_random_init", "strategy", "seed", "n_candidates", "xi"});
    section("tuning", {"metric", "cutoff", "model_seed"});
    section("pretrain", {"factors", "lr", "reg", "epochs", "init_scale", "seed"});
    section("conv", conv_keys());
    section("study", {"n_repeats", "alpha", "seed", "repeats", "dim", "init_scale", "with_conv"});
    if (doc.contains("conv") && doc.at("conv").is_object()) {
        const auto& c = doc.at("conv");
        if (c.contains("reg")) check_keys(c.at("reg"), "conv.reg", {"embedding", "conv", "head"}, bad);
        if (c.contains("layers")) {
            if (!c.at("layers").is_array()) throw ConfigError("conv.layers must be an array");
            for (std::size_t l = 0; l < c.at("layers").size(); ++l)
                check_keys(c.at("layers")[l], "conv.layers[" + std::to_string(l) + "]", {"channels", "kernel", "stride"},
                           bad);
        }
    }
    if (doc.contains("algorithms")) {
        const auto& a = doc.at("algorithms");
        if (!a.is_array()) throw ConfigError("algorithms must be an array");
        for (std::size_t k = 0; k < a.size(); ++k)
            if (!a[k].is_string()) check_keys(a[k], "algorithms[" + std::to_string(k) + "]", {"name", "fixed", "space"}, bad);
    }
    if (!bad.empty()) {
        std::string msg = "unknown configuration key(s):";
        for (const auto& k : bad) msg += " " + k;
        throw ConfigError(msg);
    }
}

/// Typed read of an optional key with the key path in the error message.
template <typename T>
void read(const Json& obj, const char* key, const std::string& path, T& out) {
    if (!obj.contains(key)) return;
    const auto& v = obj.at(key);
    try {
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError("");
        } else if constexpr (std::is_unsigned_v<T>) {
            if (!v.is_number_integer() || v.get<std::int64_t>() < 0) throw ConfigError("");
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw ConfigError("");
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ConfigError("");
        }
        out = v.get<T>();
    } catch (const std::exception&) {
        throw ConfigError((path.empty() ? "" : path + ".") + key + ": invalid value " + v.dump());
    }
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_json(const Json& doc, std::optional<std::uint64_t> seed_override) {
    using detail::read;
    detail::check_schema(doc);
    ExperimentConfig c;
    c.raw = doc;
    read(doc, "seed", "", c.seed);
    if (seed_override) {
        c.seed = *seed_override;
        c.raw["seed"] = c.seed;
    }
    // Seeds not given explicitly default to the experiment seed.
    c.split_seed = c.eval.seed = c.tuning.search.seed = c.tuning.model_seed = c.pretrain.seed = c.seed;
    c.conv.tower.init_seed = c.conv.train.seed = c.conv.validation_seed = c.study.seed = c.seed;

    if (doc.contains("dataset")) {
        const auto& d = doc.at("dataset");
        DatasetConfig ds;
        if (d.contains("path")) ds.path = d.at("path").get<std::string>();
        if (d.contains("format")) ds.load.format = parse_file_format(d.at("format").get<std::string>());
        read(d, "binarize", "dataset", ds.load.binarize);
        if (d.contains("min_value")) {
            double v = 0.0;
            read(d, "min_value", "dataset", v);
            ds.load.min_value = v;
        }
        if (d.contains("synthetic")) {
            const auto& s = d.at("synthetic");
            SyntheticConfig sc;
            sc.seed = c.seed;
            read(s, "n_users", "dataset.synthetic", sc.n_users);
            read(s, "n_items", "dataset.synthetic", sc.n_items);
            read(s, "rank", "dataset.synthetic", sc.rank);
            read(s, "per_user", "dataset.synthetic", sc.per_user);
            read(s, "factor_correlation", "dataset.synthetic", sc.factor_correlation);
            read(s, "signal", "dataset.synthetic", sc.signal);
            read(s, "popularity_exponent", "dataset.synthetic", sc.popularity_exponent);
            read(s, "seed", "dataset.synthetic", sc.seed);
            ds.synthetic = sc;
        }
        if (ds.path.has_value() == ds.synthetic.has_value())
            throw ConfigError("dataset needs exactly one of 'path' and 'synthetic'");
        c.dataset = std::move(ds);
    }
    if (doc.contains("split")) {
        const auto& s = doc.at("split");
        if (s.contains("policy")) c.split_policy = parse_split_policy(s.at("policy").get<std::string>());
        read(s, "seed", "split", c.split_seed);
    }
    if (doc.contains("eval")) {
        const auto& e = doc.at("eval");
        read(e, "n_negatives", "eval", c.eval.n_negatives);
        read(e, "cutoffs", "eval", c.eval.cutoffs);
        read(e, "seed", "eval", c.eval.seed);
        if (c.eval.cutoffs.empty()) throw ConfigError("eval.cutoffs must not be empty");
        for (auto k : c.eval.cutoffs)
            if (k < 1) throw ConfigError("eval.cutoffs must be positive");
    }

    read(doc, "algorithm", "", c.algorithm);
    if (doc.contains("params")) {
        c.params = doc.at("params");
        if (!c.params.is_object()) throw ConfigError("params must be a JSON object");
    }
    if (doc.contains("space")) c.space = hpo::HyperparameterSpace::from_json(doc.at("space"));
    if (doc.contains("algorithms")) {
        for (const auto& a : doc.at("algorithms")) {
            studies::BaselineSpec spec;
            if (a.is_string()) {
                spec.algorithm = a.get<std::string>();
                spec.space = hpo::default_space(spec.algorithm);
            } else {
                if (!a.contains("name")) throw ConfigError("algorithms entries need a 'name'");
                spec.algorithm = a.at("name").get<std::string>();
                if (a.contains("fixed")) spec.fixed = a.at("fixed");
                spec.space = a.contains("space") ? hpo::HyperparameterSpace::from_json(a.at("space"))
                                                 : hpo::default_space(spec.algorithm);
            }
            c.algorithms.push_back(std::move(spec));
        }
    }
    if (doc.contains("search")) {
        const auto& s = doc.at("search");
        auto& o = c.tuning.search;
        read(s, "n_calls", "search", o.n_calls);
        read(s, "n_random_init", "search", o.n_random_init);
        read(s, "seed", "search", o.seed);
        read(s, "n_candidates", "search", o.n_candidates);
        read(s, "xi", "search", o.xi);
        if (s.contains("strategy")) {
            const auto v = s.at("strategy").get<std::string>();
            if (v == "bayesian") o.strategy = hpo::Strategy::bayesian;
            else if (v == "random") o.strategy = hpo::Strategy::random;
            else throw ConfigError("search.strategy must be 'bayesian' or 'random'");
        }
        o.validate();
    }
    if (doc.contains("tuning")) {
        const auto& t = doc.at("tuning");
        read(t, "metric", "tuning", c.tuning.metric);
        read(t, "cutoff", "tuning", c.tuning.cutoff);
        read(t, "model_seed", "tuning", c.tuning.model_seed);
    }
    c.tuning.eval = c.eval;

    if (doc.contains("pretrain")) {
        const auto& p = doc.at("pretrain");
        read(p, "factors", "pretrain", c.pretrain.factors);
        read(p, "lr", "pretrain", c.pretrain.lr);
        read(p, "reg", "pretrain", c.pretrain.reg);
        read(p, "epochs", "pretrain", c.pretrain.epochs);
        read(p, "init_scale", "pretrain", c.pretrain.init_scale);
        read(p, "seed", "pretrain", c.pretrain.seed);
    }
    if (doc.contains("conv")) {
        const auto& v = doc.at("conv");
        auto& r = c.conv;
        read(v, "channels", "conv", r.channels);
        if (v.contains("layers"))
            for (const auto& l : v.at("layers")) {
                ConvLayerSpec spec;
                read(l, "channels", "conv.layers", spec.channels);
                read(l, "kernel", "conv.layers", spec.kernel);
                read(l, "stride", "conv.layers", spec.stride);
                r.tower.layers.push_back(spec);
            }
        read(v, "init_scale", "conv", r.tower.init_scale);
        read(v, "init_seed", "conv", r.tower.init_seed);
        if (v.contains("embedding_mode")) r.mode = parse_embedding_mode(v.at("embedding_mode").get<std::string>());
        if (v.contains("optimizer")) r.train.optimizer = parse_optimizer(v.at("optimizer").get<std::string>());
        read(v, "lr", "conv", r.train.lr);
        if (v.contains("reg")) {
            read(v.at("reg"), "embedding", "conv.reg", r.train.reg.embedding);
            read(v.at("reg"), "conv", "conv.reg", r.train.reg.conv);
            read(v.at("reg"), "head", "conv.reg", r.train.reg.head);
        }
        read(v, "batch_size", "conv", r.train.batch_size);
        read(v, "max_epochs", "conv", r.train.max_epochs);
        read(v, "eval_interval", "conv", r.train.eval_interval);
        read(v, "patience", "conv", r.train.patience);
        read(v, "seed", "conv", r.train.seed);
        read(v, "metric", "conv", r.metric);
        read(v, "cutoff", "conv", r.cutoff);
        read(v, "validation_negatives", "conv", r.validation_negatives);
        read(v, "validation_seed", "conv", r.validation_seed);
        if (v.contains("train_mask")) c.train_mask = parse_mask_mode(v.at("train_mask").get<std::string>());
        r.train.validate();
    }
    if (doc.contains("study")) {
        const auto& s = doc.at("study");
        read(s, "n_repeats", "study", c.study.n_repeats);
        read(s, "alpha", "study", c.study.alpha);
        read(s, "seed", "study", c.study.seed);
        read(s, "repeats", "study", c.repeats);
        read(s, "dim", "study", c.repeat_dim);
        read(s, "init_scale", "study", c.repeat_init_scale);
        read(s, "with_conv", "study", c.with_conv);
        if (c.repeats != "permutations" && c.repeats != "reseeded_splits")
            throw ConfigError("study.repeats must be 'permutations' or 'reseeded_splits'");
    }
    c.study.eval = c.eval;
    c.study.validate();
    if (doc.contains("out")) c.out = doc.at("out").get<std::string>();
    return c;
}

}  // namespace convmap
