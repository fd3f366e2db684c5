#pragma once

// Experiment orchestration: the factor-permutation study, the two
// interaction-map ablations and the tuned baseline comparison, each producing
// a StudyReport with per-run records, summaries and significance decisions.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "convmap/algorithms.hpp"
#include "convmap/convrec.hpp"
#include "convmap/dataio.hpp"
#include "convmap/embed.hpp"
#include "convmap/eval.hpp"
#include "convmap/hpo.hpp"
#include "convmap/io.hpp"
#include "convmap/stats.hpp"

namespace convmap::studies {

struct Summary {
    double mean = 0.0;
    double sd = 0.0;  // ddof = 1; 0 when undefined
    std::size_t n = 0;
    bool sd_defined = false;
};

struct RunRecord {
    std::string group;
    std::size_t run = 0;
    std::uint64_t seed = 0;
    std::vector<double> values;  // one per report metric
    Json info;
};

struct Comparison {
    std::string metric;
    stats::Decision decision;
};

struct Failure {
    std::string group;
    std::string message;
};

namespace detail {

inline std::string fixed(double v, int digits) { return io::format_fixed(v, digits); }

inline std::string general(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

}  // namespace detail

class StudyReport {
public:
    StudyReport() = default;
    StudyReport(std::string kind, std::vector<std::string> metrics)
        : kind_(std::move(kind)), metrics_(std::move(metrics)) {}

    const std::string& kind() const noexcept { return kind_; }
    const std::vector<std::string>& metrics() const noexcept { return metrics_; }
    const std::vector<std::string>& groups() const noexcept { return groups_; }
    const std::vector<RunRecord>& runs() const noexcept { return runs_; }
    const std::vector<Comparison>& comparisons() const noexcept { return comparisons_; }
    const std::vector<Failure>& failures() const noexcept { return failures_; }

    Json& config() noexcept { return config_; }
    const Json& config() const noexcept { return config_; }

    /// Bold the best mean of every column in the markdown table.
    bool highlight_best = false;

    void add_group(const std::string& g) {
        if (std::find(groups_.begin(), groups_.end(), g) == groups_.end()) groups_.push_back(g);
    }

    void add_run(RunRecord r) {
        if (r.values.size() != metrics_.size())
            throw Error("run for '" + r.group + "' has " + std::to_string(r.values.size()) + " values, expected " +
                        std::to_string(metrics_.size()));
        add_group(r.group);
        runs_.push_back(std::move(r));
    }

    void add_failure(const std::string& group, const std::string& message) {
        add_group(group);
        failures_.push_back({group, message});
    }

    bool failed(const std::string& group) const {
        return std::any_of(failures_.begin(), failures_.end(), [&](const Failure& f) { return f.group == group; });
    }

    std::size_t metric_index(const std::string& metric) const {
        for (std::size_t m = 0; m < metrics_.size(); ++m)
            if (metrics_[m] == metric) return m;
        throw Error("report has no metric '" + metric + "'");
    }

    /// Values of one metric for one group, ordered by run index.
    std::vector<double> values(const std::string& group, const std::string& metric) const {
        const auto m = metric_index(metric);
        std::vector<const RunRecord*> rs;
        for (const auto& r : runs_)
            if (r.group == group) rs.push_back(&r);
        std::stable_sort(rs.begin(), rs.end(), [](const RunRecord* a, const RunRecord* b) { return a->run < b->run; });
        std::vector<double> out;
        for (const auto* r : rs) out.push_back(r->values[m]);
        return out;
    }

    Summary summary(const std::string& group, const std::string& metric) const {
        const auto v = values(group, metric);
        Summary s;
        s.n = v.size();
        if (v.empty()) return s;
        s.mean = stats::mean(v);
        if (v.size() >= 2) {
            s.sd = stats::sample_sd(v);
            s.sd_defined = true;
        }
        return s;
    }

    /// Runs the significance pipeline on the paired runs of two groups and
    /// records the decision.
    const Comparison& compare(const std::string& x, const std::string& y, const std::string& metric,
                              double alpha = 0.05) {
        stats::PairedSamples s{values(x, metric), values(y, metric), x, y};
        stats::Decision d;
        if (s.x.size() != s.y.size() || s.x.size() < 3 || failed(x) || failed(y)) {
            d.test_used = "not_applicable";
            d.reason = s.x.size() != s.y.size() || failed(x) || failed(y) ? "groups do not have matching runs"
                                                                          : "fewer than 3 paired runs";
            d.alpha = alpha;
            d.n = std::min(s.x.size(), s.y.size());
            d.label_x = x;
            d.label_y = y;
        } else {
            d = stats::significance_pipeline(s, alpha);
        }
        comparisons_.push_back({metric, std::move(d)});
        return comparisons_.back();
    }

    const Comparison& comparison(const std::string& x, const std::string& y, const std::string& metric) const {
        for (const auto& c : comparisons_)
            if (c.metric == metric && c.decision.label_x == x && c.decision.label_y == y) return c;
        throw Error("no comparison " + x + " vs " + y + " on " + metric);
    }

    bool any_single_run() const {
        for (const auto& g : groups_)
            if (!failed(g) && summary(g, metrics_.front()).n == 1) return true;
        return false;
    }

    bool all_single_run() const {
        for (const auto& g : groups_)
            if (!failed(g) && summary(g, metrics_.front()).n != 1) return false;
        return true;
    }

    std::string runs_csv() const {
        std::string out = "group,run,seed";
        for (const auto& m : metrics_) out += ',' + m;
        out += '\n';
        for (const auto& r : runs_) {
            out += r.group + ',' + std::to_string(r.run) + ',' + std::to_string(r.seed);
            for (double v : r.values) out += ',' + io::format_double(v);
            out += '\n';
        }
        return out;
    }

    std::string summary_csv() const {
        std::string out = "group,metric,n,mean,std,std_defined,failed\n";
        for (const auto& g : groups_)
            for (const auto& m : metrics_) {
                const auto s = summary(g, m);
                out += g + ',' + m + ',' + std::to_string(s.n) + ',' + io::format_double(s.mean) + ',' +
                       io::format_double(s.sd) + ',' + (s.sd_defined ? "true" : "false") + ',' +
                       (failed(g) ? "true" : "false") + '\n';
            }
        return out;
    }

    std::string decisions_csv() const {
        std::string out = "x,y,metric,n,mean_difference,test_used,statistic,p,significant\n";
        for (const auto& c : comparisons_) {
            const auto& d = c.decision;
            const bool na = d.test_used == "not_applicable";
            out += d.label_x + ',' + d.label_y + ',' + c.metric + ',' + std::to_string(d.n) + ',' +
                   io::format_double(d.mean_difference) + ',' + d.test_used + ',' +
                   (na ? "" : io::format_double(d.statistic)) + ',' + (na ? "" : io::format_double(d.p)) + ',' +
                   (d.significant ? "true" : "false") + '\n';
        }
        return out;
    }

    std::string to_markdown() const {
        const bool single = all_single_run();
        std::vector<double> best(metrics_.size(), kNegInf);
        for (const auto& g : groups_) {
            if (failed(g)) continue;
            for (std::size_t m = 0; m < metrics_.size(); ++m) {
                const auto s = summary(g, metrics_[m]);
                if (s.n > 0) best[m] = std::max(best[m], s.mean);
            }
        }
        std::string out = "# " + kind_ + "\n\n| Model |";
        for (const auto& m : metrics_) out += ' ' + m + " |";
        out += "\n| --- |";
        for (std::size_t m = 0; m < metrics_.size(); ++m) out += " ---: |";
        out += '\n';
        bool flagged = false;
        for (const auto& g : groups_) {
            out += "| " + g + " |";
            for (std::size_t m = 0; m < metrics_.size(); ++m) {
                if (failed(g)) {
                    out += " failed |";
                    continue;
                }
                const auto s = summary(g, metrics_[m]);
                if (s.n == 0) {
                    out += " - |";
                    continue;
                }
                std::string cell = detail::fixed(s.mean, 4);
                if (!single) cell += " ± " + detail::fixed(s.sd, 4);
                if (highlight_best && s.mean == best[m]) cell = "**" + cell + "**";
                if (!single && !s.sd_defined) {
                    cell += " †";
                    flagged = true;
                }
                out += ' ' + cell + " |";
            }
            out += '\n';
        }
        if (flagged) out += "\n† single run: standard deviation undefined, shown as 0.\n";
        if (!failures_.empty()) {
            out += "\nFailed:\n\n";
            for (const auto& f : failures_) out += "- " + f.group + ": " + f.message + '\n';
        }
        if (!comparisons_.empty()) {
            out += "\n## Significance\n\n| Comparison | Metric | n | Mean difference | Test | Statistic | p | Significant |\n"
                   "| --- | --- | ---: | ---: | --- | ---: | ---: | --- |\n";
            for (const auto& c : comparisons_) {
                const auto& d = c.decision;
                const bool na = d.test_used == "not_applicable";
                out += "| " + d.label_x + " vs " + d.label_y + " | " + c.metric + " | " + std::to_string(d.n) + " | " +
                       detail::general(d.mean_difference) + " | " + d.test_used + " | " +
                       (na ? "-" : detail::general(d.statistic)) + " | " + (na ? "-" : detail::general(d.p)) + " | " +
                       (d.significant ? "yes" : "no") + " |\n";
            }
        }
        out += "\n## Configuration\n\n```json\n" + config_.dump(2) + "\n```\n";
        return out;
    }

    Json to_json() const {
        Json j;
        j["kind"] = kind_;
        j["metrics"] = metrics_;
        j["groups"] = groups_;
        j["config"] = config_;
        Json runs = Json::array();
        for (const auto& r : runs_) {
            Json jr;
            jr["group"] = r.group;
            jr["run"] = r.run;
            jr["seed"] = r.seed;
            Json vals;
            for (std::size_t m = 0; m < metrics_.size(); ++m) vals[metrics_[m]] = r.values[m];
            jr["values"] = vals;
            if (!r.info.is_null()) jr["info"] = r.info;
            runs.push_back(std::move(jr));
        }
        j["runs"] = std::move(runs);
        Json sum;
        for (const auto& g : groups_) {
            Json jg;
            for (const auto& m : metrics_) {
                const auto s = summary(g, m);
                jg[m] = {{"n", s.n}, {"mean", s.mean}, {"std", s.sd}, {"std_defined", s.sd_defined}};
            }
            sum[g] = std::move(jg);
        }
        j["summary"] = std::move(sum);
        Json cmp = Json::array();
        for (const auto& c : comparisons_) {
            Json jc = c.decision.to_json();
            jc["metric"] = c.metric;
            cmp.push_back(std::move(jc));
        }
        j["decisions"] = std::move(cmp);
        Json fails = Json::array();
        for (const auto& f : failures_) fails.push_back({{"group", f.group}, {"message", f.message}});
        j["failures"] = std::move(fails);
        return j;
    }

    /// Writes <stem>.md, <stem>.json, <stem>_runs.csv, <stem>_summary.csv and
    /// <stem>_decisions.csv.
    void save(const std::filesystem::path& dir, const std::string& stem = "report") const {
        io::write_file(dir / (stem + ".md"), to_markdown());
        io::write_file(dir / (stem + ".json"), to_json().dump(2) + "\n");
        io::write_file(dir / (stem + "_runs.csv"), runs_csv());
        io::write_file(dir / (stem + "_summary.csv"), summary_csv());
        io::write_file(dir / (stem + "_decisions.csv"), decisions_csv());
    }

private:
    std::string kind_;
    std::vector<std::string> metrics_;
    std::vector<std::string> groups_;
    std::vector<RunRecord> runs_;
    std::vector<Comparison> comparisons_;
    std::vector<Failure> failures_;
    Json config_ = Json::object();
};

// Shared configuration ------------------------------------------------------

/// "HR@c" and "NDCG@c" for every cutoff.
inline std::vector<std::string> metric_names(const std::vector<std::size_t>& cutoffs) {
    std::vector<std::string> out;
    for (auto c : cutoffs) {
        out.push_back("HR@" + std::to_string(c));
        out.push_back("NDCG@" + std::to_string(c));
    }
    return out;
}

inline std::vector<double> metric_values(const EvaluationResult& r) {
    std::vector<double> out;
    for (std::size_t c = 0; c < r.cutoffs.size(); ++c) {
        out.push_back(r.hr[c]);
        out.push_back(r.ndcg[c]);
    }
    return out;
}

inline Json eval_to_json(const EvalConfig& e) {
    Json j;
    j["n_negatives"] = e.n_negatives;
    j["cutoffs"] = e.cutoffs;
    j["seed"] = e.seed;
    return j;
}

inline Json train_to_json(const TrainConfig& t) {
    Json j;
    j["optimizer"] = to_string(t.optimizer);
    j["lr"] = t.lr;
    j["reg"] = {{"embedding", t.reg.embedding}, {"conv", t.reg.conv}, {"head", t.reg.head}};
    j["batch_size"] = t.batch_size;
    j["max_epochs"] = t.max_epochs;
    j["eval_interval"] = t.eval_interval;
    j["patience"] = t.patience;
    j["seed"] = t.seed;
    return j;
}

/// How a conv model is trained: tower, embedding handling, optimizer and the
/// validation metric used for early stopping.
struct ConvRecipe {
    /// Empty layers: a 2x2 stride-2 pyramid with `channels` channels.
    ConvTowerConfig tower;
    Index channels = 32;
    EmbeddingMode mode = EmbeddingMode::frozen;
    TrainConfig train;
    std::string metric = "ndcg";
    std::size_t cutoff = 10;
    std::size_t validation_negatives = 99;
    std::uint64_t validation_seed = 0;

    ConvTowerConfig resolved_tower(Index k) const {
        if (!tower.layers.empty()) return tower;
        auto t = ConvTowerConfig::pyramid(k, channels, tower.init_seed);
        t.init_scale = tower.init_scale;
        return t;
    }

    Json to_json(Index k) const {
        Json j;
        j["tower"] = tower_to_json(resolved_tower(k));
        j["embedding_mode"] = to_string(mode);
        j["train"] = train_to_json(train);
        j["early_stopping"] = {{"metric", metric},
                               {"cutoff", cutoff},
                               {"validation_negatives", validation_negatives},
                               {"validation_seed", validation_seed}};
        return j;
    }
};

/// Trains a conv model on `emb` with early stopping on the validation target.
inline TrainResult train_conv(const EmbeddingPair& emb, const SplitTriple& split, const ConvRecipe& recipe,
                              MaskMode train_mask) {
    ConvRecModel model(emb, recipe.resolved_tower(emb.dim()), recipe.mode, train_mask);
    EvalConfig vc;
    vc.n_negatives = recipe.validation_negatives;
    vc.cutoffs = {recipe.cutoff};
    vc.seed = recipe.validation_seed;
    vc.target = EvalTarget::validation;
    const ValidationCallback cb = [&](const ConvRecModel& m) {
        const ConvRecScorer scorer(std::shared_ptr<const ConvRecModel>(std::shared_ptr<void>(), &m), train_mask);
        return evaluate_loo(scorer, split, vc).metric(recipe.metric, recipe.cutoff);
    };
    return train(std::move(model), split, recipe.train, train_mask, cb);
}

inline EvaluationResult evaluate_conv(const ConvRecModel& m, const SplitTriple& split, MaskMode mask,
                                      EvalConfig eval) {
    eval.target = EvalTarget::test;
    const ConvRecScorer scorer(std::shared_ptr<const ConvRecModel>(std::shared_ptr<void>(), &m), mask);
    return evaluate_loo(scorer, split, eval);
}

struct StudyOptions {
    std::size_t n_repeats = 20;
    EvalConfig eval;  // test evaluation, shared by every run
    double alpha = 0.05;
    unsigned threads = 1;  // repeats in parallel
    std::uint64_t seed = 0;

    void validate() const {
        if (n_repeats < 1) throw ConfigError("a study needs at least one repeat");
        if (eval.cutoffs.empty()) throw ConfigError("a study needs at least one cutoff");
        if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must be in (0, 1)");
    }

    Json to_json() const {
        return {{"n_repeats", n_repeats}, {"eval", eval_to_json(eval)}, {"alpha", alpha}, {"seed", seed}};
    }
};

// Repeat sources --------------------------------------------------------------

/// Data for one repeat of a study.
struct Repeat {
    std::shared_ptr<const SplitTriple> split;
    EmbeddingPair embeddings;
    std::uint64_t seed = 0;
    Json info;
};

struct RepeatSource {
    std::function<Repeat(std::size_t)> make;
    Json config;
};

/// Every repeat uses the same split and a random consistent factor
/// permutation of the pretrained embeddings.
inline RepeatSource permuted_pretrained(EmbeddingPair pretrained, std::shared_ptr<const SplitTriple> split,
                                        std::uint64_t seed) {
    pretrained.validate();
    auto shared = std::make_shared<const EmbeddingPair>(std::move(pretrained));
    RepeatSource src;
    src.config = {{"kind", "permuted_pretrained"}, {"seed", seed}, {"dim", shared->dim()}, {"split_seed", split->seed}};
    src.make = [shared, split, seed](std::size_t r) {
        Repeat rep;
        rep.seed = derive_seed(seed, r);
        const auto perm = FactorPermutation::random(shared->dim(), rep.seed);
        rep.embeddings = permute_factors(*shared, perm);
        rep.split = split;
        rep.info = {{"permutation", perm.perm}};
        return rep;
    };
    return src;
}

/// Every repeat draws a fresh random leave-one-out split and fresh random
/// embeddings; for models trained without pretraining.
inline RepeatSource reseeded_splits(std::shared_ptr<const InteractionMatrix> data, Index dim, double init_scale,
                                    std::uint64_t seed) {
    if (dim < 1) throw ConfigError("embedding dimension must be at least 1");
    RepeatSource src;
    src.config = {{"kind", "reseeded_splits"}, {"seed", seed}, {"dim", dim}, {"init_scale", init_scale},
                  {"split_policy", "random"}};
    src.make = [data, dim, init_scale, seed](std::size_t r) {
        Repeat rep;
        rep.seed = derive_seed(seed, r);
        rep.split = std::make_shared<const SplitTriple>(leave_one_out_split(*data, SplitPolicy::random, rep.seed));
        rep.embeddings = EmbeddingPair::random(data->n_users(), data->n_items(), dim, init_scale, derive_seed(rep.seed, 1));
        rep.info = {{"split_seed", rep.seed}};
        return rep;
    };
    return src;
}

// Studies ---------------------------------------------------------------------

inline constexpr const char* kDotGroup = "dot-product";
inline constexpr const char* kConvGroup = "conv";

namespace detail {

/// Runs fn(r) for every repeat, possibly in parallel, and returns the records
/// in repeat order.
template <typename Fn>
std::vector<std::vector<RunRecord>> run_repeats(const StudyOptions& opt, Fn&& fn) {
    std::vector<std::vector<RunRecord>> out(opt.n_repeats);
    parallel_for(opt.n_repeats, opt.threads, [&](std::size_t r) { out[r] = fn(r); });
    return out;
}

inline void collect(StudyReport& report, std::vector<std::vector<RunRecord>>&& per_repeat) {
    for (auto& rs : per_repeat)
        for (auto& r : rs) report.add_run(std::move(r));
}

}  // namespace detail

/// Evaluates the plain dot-product model and, when a recipe is given, a conv
/// model trained on each consistently permuted copy of the embeddings.
inline StudyReport run_permutation_study(const EmbeddingPair& pretrained, std::shared_ptr<const SplitTriple> split,
                                         const std::optional<ConvRecipe>& recipe, const StudyOptions& opt) {
    opt.validate();
    const auto src = permuted_pretrained(pretrained, split, opt.seed);
    StudyReport report("Permutation study", metric_names(opt.eval.cutoffs));
    report.config()["study"] = opt.to_json();
    report.config()["repeats"] = src.config;
    if (recipe) report.config()["conv"] = recipe->to_json(pretrained.dim());
    report.add_group(kDotGroup);
    if (recipe) report.add_group(kConvGroup);
    EvalConfig eval = opt.eval;
    eval.target = EvalTarget::test;

    detail::collect(report, detail::run_repeats(opt, [&](std::size_t r) {
        const Repeat rep = src.make(r);
        std::vector<RunRecord> out;
        const FactorModel dot("mfbpr", rep.embeddings);
        out.push_back({kDotGroup, r, rep.seed, metric_values(evaluate_loo(dot, *rep.split, eval)), rep.info});
        if (recipe) {
            const auto tr = train_conv(rep.embeddings, *rep.split, *recipe, MaskMode::full);
            Json info = rep.info;
            info["epochs_run"] = tr.epochs_run;
            info["best_step"] = tr.best_step;
            out.push_back({kConvGroup, r, rep.seed, metric_values(evaluate_conv(tr.model, *rep.split, MaskMode::full, eval)),
                           std::move(info)});
        }
        return out;
    }));
    return report;
}

namespace detail {

inline void add_mask_comparisons(StudyReport& report, double alpha) {
    const auto full = to_string(MaskMode::full);
    for (const auto& m : report.metrics()) {
        report.compare(full, to_string(MaskMode::element_wise), m, alpha);
        report.compare(full, to_string(MaskMode::correlations), m, alpha);
    }
}

}  // namespace detail

/// Trains on the full map once per repeat and evaluates that model under
/// every inference mask.
inline StudyReport run_ablation_1(const RepeatSource& src, const ConvRecipe& recipe, const StudyOptions& opt) {
    opt.validate();
    StudyReport report("Ablation 1: full-map training, masked inference", metric_names(opt.eval.cutoffs));
    report.config()["study"] = opt.to_json();
    report.config()["repeats"] = src.config;
    report.config()["conv"] = recipe.to_json(src.config.value("dim", Index(0)));
    for (auto m : kAllMaskModes) report.add_group(to_string(m));

    detail::collect(report, detail::run_repeats(opt, [&](std::size_t r) {
        const Repeat rep = src.make(r);
        const auto tr = train_conv(rep.embeddings, *rep.split, recipe, MaskMode::full);
        Json info = rep.info;
        info["epochs_run"] = tr.epochs_run;
        info["best_step"] = tr.best_step;
        std::vector<RunRecord> out;
        for (auto m : kAllMaskModes)
            out.push_back({to_string(m), r, rep.seed, metric_values(evaluate_conv(tr.model, *rep.split, m, opt.eval)), info});
        return out;
    }));
    detail::add_mask_comparisons(report, opt.alpha);
    return report;
}

/// Trains a separate model per mask and evaluates it with the same mask.
inline StudyReport run_ablation_2(const RepeatSource& src, const ConvRecipe& recipe, const StudyOptions& opt) {
    opt.validate();
    StudyReport report("Ablation 2: masked training", metric_names(opt.eval.cutoffs));
    report.config()["study"] = opt.to_json();
    report.config()["repeats"] = src.config;
    report.config()["conv"] = recipe.to_json(src.config.value("dim", Index(0)));
    for (auto m : kAllMaskModes) report.add_group(to_string(m));

    detail::collect(report, detail::run_repeats(opt, [&](std::size_t r) {
        const Repeat rep = src.make(r);
        std::vector<RunRecord> out;
        for (auto m : kAllMaskModes) {
            const auto tr = train_conv(rep.embeddings, *rep.split, recipe, m);
            Json info = rep.info;
            info["epochs_run"] = tr.epochs_run;
            info["best_step"] = tr.best_step;
            out.push_back({to_string(m), r, rep.seed, metric_values(evaluate_conv(tr.model, *rep.split, m, opt.eval)),
                           std::move(info)});
        }
        return out;
    }));
    detail::add_mask_comparisons(report, opt.alpha);
    return report;
}

struct BaselineSpec {
    std::string algorithm;
    Json fixed = Json::object();
    hpo::HyperparameterSpace space;
};

/// Tunes and retrains every algorithm and tabulates its test metrics. An
/// algorithm that throws is reported as failed. TopPopular is always included.
inline StudyReport run_baseline_comparison(std::vector<BaselineSpec> specs, const SplitTriple& split,
                                           const hpo::TuneOptions& opt, unsigned threads = 1) {
    if (opt.eval.cutoffs.empty()) throw ConfigError("baseline comparison needs at least one cutoff");
    if (std::none_of(specs.begin(), specs.end(), [](const BaselineSpec& s) { return s.algorithm == "toppop"; }))
        specs.insert(specs.begin(), BaselineSpec{"toppop", Json::object(), {}});

    StudyReport report("Baseline comparison", metric_names(opt.eval.cutoffs));
    report.highlight_best = true;
    Json algs = Json::array();
    for (const auto& s : specs)
        algs.push_back({{"algorithm", s.algorithm}, {"fixed", s.fixed}, {"space", s.space.to_json()}});
    report.config()["algorithms"] = std::move(algs);
    report.config()["tuning"] = {{"metric", opt.metric},
                                 {"cutoff", opt.cutoff},
                                 {"n_calls", opt.search.n_calls},
                                 {"n_random_init", opt.search.n_random_init},
                                 {"strategy", opt.search.strategy == hpo::Strategy::bayesian ? "bayesian" : "random"},
                                 {"search_seed", opt.search.seed},
                                 {"model_seed", opt.model_seed}};
    report.config()["eval"] = eval_to_json(opt.eval);
    report.config()["split_seed"] = split.seed;

    struct Outcome {
        std::optional<RunRecord> run;
        std::string error;
    };
    std::vector<Outcome> outcomes(specs.size());
    parallel_for(specs.size(), threads, [&](std::size_t k) {
        try {
            const auto r = hpo::tune_and_retrain(specs[k].algorithm, specs[k].fixed, specs[k].space, split, opt);
            Json info;
            info["best"] = r.best;
            info["validation_value"] = r.validation_value;
            outcomes[k].run = RunRecord{specs[k].algorithm, 0, opt.search.seed, metric_values(r.test), std::move(info)};
        } catch (const std::exception& e) {
            outcomes[k].error = e.what();
        }
    });
    for (std::size_t k = 0; k < specs.size(); ++k) {
        if (outcomes[k].run) report.add_run(std::move(*outcomes[k].run));
        else report.add_failure(specs[k].algorithm, outcomes[k].error);
    }
    return report;
}

}  // namespace convmap::studies
