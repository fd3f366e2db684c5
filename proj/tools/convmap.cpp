// convmap: command-line front end for data preparation, model fitting and
// evaluation, hyperparameter search, the studies and heatmap figures.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "convmap/algorithms.hpp"
#include "convmap/convrec.hpp"
#include "convmap/dataio.hpp"
#include "convmap/eval.hpp"
#include "convmap/experiment.hpp"
#include "convmap/heatmap.hpp"
#include "convmap/hpo.hpp"
#include "convmap/studies.hpp"
#include "convmap/synthetic.hpp"

namespace fs = std::filesystem;
using namespace convmap;

namespace {

/// Bad input from the user: exit code 1.
class UserError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> threads;
    std::string out;
    std::string split_dir;
};

void require_exists(const fs::path& p) {
    if (!fs::exists(p)) throw UserError("no such file or directory: " + p.string());
}

ExperimentConfig load_config(const Common& c) {
    Json doc = Json::object();
    if (!c.config.empty()) {
        require_exists(c.config);
        try {
            doc = Json::parse(io::read_file(c.config));
        } catch (const Json::parse_error& e) {
            throw UserError(c.config + ": invalid JSON: " + e.what());
        }
    }
    return ExperimentConfig::from_json(doc, c.seed);
}

fs::path out_dir(const Common& c, const ExperimentConfig& cfg) {
    if (!c.out.empty()) return c.out;
    if (const char* env = std::getenv("CONVMAP_OUT"); env && *env) return env;
    if (cfg.out) return *cfg.out;
    return "convmap_out";
}

unsigned thread_count(const Common& c) {
    if (c.threads) return std::max(1u, *c.threads);
    if (const char* env = std::getenv("CONVMAP_THREADS"); env && *env) {
        try {
            return std::max(1, std::stoi(env));
        } catch (const std::exception&) {
            throw UserError(std::string("CONVMAP_THREADS is not a number: ") + env);
        }
    }
    return 1;
}

Dataset load_dataset(const DatasetConfig& d) {
    if (d.synthetic) return make_synthetic(*d.synthetic).data;
    require_exists(*d.path);
    return load_interactions(*d.path, d.load);
}

struct SplitData {
    SplitTriple split;
    IdMap ids;
};

/// The split from --split, or built from the configured dataset.
SplitData obtain_split(const Common& c, const ExperimentConfig& cfg) {
    if (!c.split_dir.empty()) {
        require_exists(fs::path(c.split_dir) / "split.json");
        auto loaded = load_split(c.split_dir);
        return {std::move(loaded.split), std::move(loaded.ids)};
    }
    if (!cfg.dataset) throw UserError("no data: pass --split <dir> or configure 'dataset'");
    auto ds = load_dataset(*cfg.dataset);
    return {leave_one_out_split(ds.matrix, cfg.split_policy, cfg.split_seed), std::move(ds.ids)};
}

void announce(const fs::path& p) { std::cout << "wrote " << p.string() << "\n"; }

// Subcommands -----------------------------------------------------------------

int cmd_prepare(const Common& c) {
    const auto cfg = load_config(c);
    if (!cfg.dataset) throw UserError("prepare-data needs a 'dataset' section");
    const auto out = out_dir(c, cfg);
    const auto ds = load_dataset(*cfg.dataset);
    const auto split = leave_one_out_split(ds.matrix, cfg.split_policy, cfg.split_seed);
    save_split(out / "split", split, ds.ids);
    save_interactions(out / "interactions.tsv", ds.matrix, ds.ids);
    Json meta;
    meta["n_users"] = ds.matrix.n_users();
    meta["n_items"] = ds.matrix.n_items();
    meta["n_interactions"] = ds.matrix.nnz();
    meta["dataset"] = cfg.raw.value("dataset", Json::object());
    meta["split"] = {{"policy", to_string(split.policy)}, {"seed", split.seed}};
    io::write_file(out / "dataset.json", meta.dump(2) + "\n");
    announce(out / "split");
    return 0;
}

EmbeddingPair pretrain(const SplitTriple& split, const ExperimentConfig& cfg) {
    return train_mf_bpr(split.train, cfg.pretrain);
}

void mark_fit_partition(const fs::path& model_dir, bool merged) {
    auto meta = Json::parse(io::read_file(model_dir / "model.json"));
    meta["fit_partition"] = merged ? "train+validation" : "train";
    io::write_file(model_dir / "model.json", meta.dump(2) + "\n");
}

int cmd_fit(const Common& c, const std::string& algorithm_flag, bool merge_validation) {
    const auto cfg = load_config(c);
    const std::string algorithm = algorithm_flag.empty() ? cfg.algorithm : algorithm_flag;
    if (algorithm.empty()) throw UserError("fit needs an algorithm (--algorithm or 'algorithm')");
    const auto out = out_dir(c, cfg);
    const auto data = obtain_split(c, cfg);
    Json summary;
    summary["algorithm"] = algorithm;
    if (algorithm == "convrec") {
        if (merge_validation) throw UserError("convrec uses the validation partition for early stopping");
        const auto emb = pretrain(data.split, cfg);
        const auto tr = studies::train_conv(emb, data.split, cfg.conv, cfg.train_mask);
        tr.model.save(out / "model");
        mark_fit_partition(out / "model", false);
        io::write_file(out / "training_trace.csv", trace_to_csv(tr.trace));
        summary["recipe"] = cfg.conv.to_json(emb.dim());
        summary["train_mask"] = to_string(cfg.train_mask);
        summary["epochs_run"] = tr.epochs_run;
        summary["best_step"] = tr.best_step;
        summary["early_stopped"] = tr.early_stopped;
    } else {
        auto train = std::make_shared<const InteractionMatrix>(
            merge_validation ? merge(data.split.train, data.split.validation) : data.split.train);
        const auto model = fit_baseline(algorithm, cfg.params, train, cfg.tuning.model_seed);
        model->save(out / "model");
        mark_fit_partition(out / "model", merge_validation);
        summary["hyperparameters"] = model->hyperparameters();
    }
    summary["fit_partition"] = merge_validation ? "train+validation" : "train";
    io::write_file(out / "fit.json", summary.dump(2) + "\n");
    announce(out / "model");
    return 0;
}

int cmd_evaluate(const Common& c, const std::string& model_dir, const std::string& target,
                 const std::string& mask_flag) {
    const auto cfg = load_config(c);
    const auto out = out_dir(c, cfg);
    require_exists(fs::path(model_dir) / "model.json");
    const auto data = obtain_split(c, cfg);
    const auto meta = Json::parse(io::read_file(fs::path(model_dir) / "model.json"));
    EvalConfig ec = cfg.eval;
    ec.threads = thread_count(c);
    if (target == "test") ec.target = EvalTarget::test;
    else if (target == "validation") ec.target = EvalTarget::validation;
    else throw UserError("--target must be 'test' or 'validation'");

    std::unique_ptr<ScoringModel> model;
    if (meta.value("kind", "") == "convrec") {
        auto conv = std::make_shared<const ConvRecModel>(ConvRecModel::load(model_dir));
        const auto mask = mask_flag.empty() ? conv->train_mask() : parse_mask_mode(mask_flag);
        model = std::make_unique<ConvRecScorer>(conv, mask);
    } else {
        if (!mask_flag.empty()) throw UserError("--mask only applies to convrec models");
        const bool merged = meta.value("fit_partition", "train") == "train+validation";
        auto train = std::make_shared<const InteractionMatrix>(merged ? merge(data.split.train, data.split.validation)
                                                                       : data.split.train);
        model = load_scoring_model(model_dir, train);
    }
    if (model->n_items() != data.split.n_items())
        throw UserError("model has " + std::to_string(model->n_items()) + " items but the split has " +
                        std::to_string(data.split.n_items()));
    const auto res = evaluate_loo(*model, data.split, ec);
    res.save(out, "evaluation");
    announce(out / "evaluation.csv");
    return 0;
}

int cmd_hpo(const Common& c, const std::string& algorithm_flag) {
    const auto cfg = load_config(c);
    const std::string algorithm = algorithm_flag.empty() ? cfg.algorithm : algorithm_flag;
    if (algorithm.empty()) throw UserError("hpo needs an algorithm (--algorithm or 'algorithm')");
    const auto out = out_dir(c, cfg);
    const auto data = obtain_split(c, cfg);
    const auto space = cfg.space ? *cfg.space : hpo::default_space(algorithm);
    auto opt = cfg.tuning;
    opt.eval.threads = thread_count(c);
    const auto r = hpo::tune_and_retrain(algorithm, cfg.params, space, data.split, opt);
    r.trace.save(out);
    Json best;
    best["algorithm"] = algorithm;
    best["space"] = space.to_json();
    best["best"] = r.best;
    best["validation"] = {{"metric", opt.metric}, {"cutoff", opt.cutoff}, {"value", r.validation_value}};
    io::write_file(out / "best.json", best.dump(2) + "\n");
    r.test.save(out, "evaluation");
    r.model->save(out / "model");
    mark_fit_partition(out / "model", true);
    announce(out / "search.csv");
    return 0;
}

/// Interaction matrix of the whole split, for re-splitting.
InteractionMatrix full_matrix(const SplitTriple& s) { return merge(merge(s.train, s.validation), s.test); }

studies::RepeatSource repeat_source(const SplitData& data, const ExperimentConfig& cfg, const fs::path& out) {
    if (cfg.repeats == "reseeded_splits")
        return studies::reseeded_splits(std::make_shared<const InteractionMatrix>(full_matrix(data.split)),
                                        cfg.repeat_dim, cfg.repeat_init_scale, cfg.study.seed);
    auto emb = pretrain(data.split, cfg);
    save_embeddings(out / "pretrained.bin", emb);
    return studies::permuted_pretrained(std::move(emb), std::make_shared<const SplitTriple>(data.split),
                                        cfg.study.seed);
}

void finish_report(studies::StudyReport& rep, const ExperimentConfig& cfg, const fs::path& out,
                   const std::string& stem) {
    rep.config()["experiment"] = cfg.raw;
    rep.save(out, stem);
    announce(out / (stem + ".md"));
}

int cmd_study(const Common& c, const std::string& which) {
    const auto cfg = load_config(c);
    const auto out = out_dir(c, cfg);
    const auto data = obtain_split(c, cfg);
    auto opt = cfg.study;
    opt.threads = thread_count(c);
    studies::StudyReport rep;
    if (which == "perm-study") {
        if (cfg.repeats != "permutations") throw UserError("perm-study permutes pretrained embeddings; set study.repeats to 'permutations'");
        auto emb = pretrain(data.split, cfg);
        save_embeddings(out / "pretrained.bin", emb);
        std::optional<studies::ConvRecipe> recipe;
        if (cfg.with_conv) recipe = cfg.conv;
        rep = studies::run_permutation_study(emb, std::make_shared<const SplitTriple>(data.split), recipe, opt);
    } else {
        const auto src = repeat_source(data, cfg, out);
        rep = which == "ablation1" ? studies::run_ablation_1(src, cfg.conv, opt)
                                   : studies::run_ablation_2(src, cfg.conv, opt);
    }
    rep.config()["pretrain"] = {{"factors", cfg.pretrain.factors}, {"lr", cfg.pretrain.lr},
                                {"reg", cfg.pretrain.reg},         {"epochs", cfg.pretrain.epochs},
                                {"init_scale", cfg.pretrain.init_scale}, {"seed", cfg.pretrain.seed}};
    const std::string stem = which == "perm-study" ? "perm_study" : which;
    finish_report(rep, cfg, out, stem);
    return 0;
}

int cmd_compare(const Common& c) {
    const auto cfg = load_config(c);
    const auto out = out_dir(c, cfg);
    const auto data = obtain_split(c, cfg);
    auto specs = cfg.algorithms;
    if (specs.empty())
        for (const auto& name : baseline_names()) specs.push_back({name, Json::object(), hpo::default_space(name)});
    auto rep = studies::run_baseline_comparison(specs, data.split, cfg.tuning, thread_count(c));
    for (const auto& f : rep.failures()) std::cerr << "warning: " << f.group << " failed: " << f.message << "\n";
    finish_report(rep, cfg, out, "baselines");
    return 0;
}

Matrix parse_matrix_csv(const std::string& text, const std::string& name) {
    std::vector<std::vector<double>> rows;
    std::istringstream in(text);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        for (char& ch : line)
            if (ch == ',' || ch == ';' || ch == '\t' || ch == '\r') ch = ' ';
        std::istringstream ls(line);
        std::vector<double> row;
        std::string tok;
        while (ls >> tok) {
            double v = 0.0;
            if (!detail::parse_double(tok, v)) throw UserError(name + ": line " + std::to_string(n) + ": not a number: " + tok);
            row.push_back(v);
        }
        if (row.empty()) continue;
        if (!rows.empty() && row.size() != rows.front().size())
            throw UserError(name + ": line " + std::to_string(n) + " has " + std::to_string(row.size()) + " values, expected " +
                            std::to_string(rows.front().size()));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw UserError(name + ": no values");
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t k = 0; k < rows[r].size(); ++k) m(Eigen::Index(r), Eigen::Index(k)) = rows[r][k];
    return m;
}

void emit_heatmap(const fs::path& stem, const Matrix& m) {
    const auto h = write_heatmap(stem, m);
    if (h.constant) std::cerr << "warning: " << stem.filename().string() << ": constant input, rendered mid-gray\n";
    announce(stem.string() + ".pgm");
}

Matrix as_row(std::span<const double> v) {
    Matrix m(1, Eigen::Index(v.size()));
    for (std::size_t k = 0; k < v.size(); ++k) m(0, Eigen::Index(k)) = v[k];
    return m;
}

struct HeatmapArgs {
    std::string input, model, mask, name = "heatmap";
    bool demo = false;
    Index dim = 8;
    Index user = 0, item = 0;
};

int cmd_heatmap(const Common& c, const HeatmapArgs& a) {
    const auto cfg = load_config(c);
    const auto out = out_dir(c, cfg);
    const int sources = int(!a.input.empty()) + int(!a.model.empty()) + int(a.demo);
    if (sources != 1) throw UserError("heatmap needs exactly one of --input, --model and --demo");
    if (!a.input.empty()) {
        require_exists(a.input);
        emit_heatmap(out / a.name, parse_matrix_csv(io::read_file(a.input), a.input));
        return 0;
    }
    if (a.demo) {
        // A random user/item pair, its interaction map, and the same after one
        // consistent permutation of the latent factors.
        if (a.dim < 1) throw UserError("--dim must be at least 1");
        Rng rng(cfg.seed);
        EmbeddingPair e{Matrix(1, a.dim), Matrix(1, a.dim)};
        for (Index k = 0; k < a.dim; ++k) e.P(0, k) = rng.normal();
        for (Index k = 0; k < a.dim; ++k) e.Q(0, k) = rng.normal();
        const auto perm = FactorPermutation::random(a.dim, derive_seed(cfg.seed, 1));
        const auto pe = permute_factors(e, perm);
        emit_heatmap(out / "user", as_row(e.user(0)));
        emit_heatmap(out / "item", as_row(e.item(0)));
        emit_heatmap(out / "map", outer_product(e.user(0), e.item(0)).E);
        emit_heatmap(out / "user_permuted", as_row(pe.user(0)));
        emit_heatmap(out / "item_permuted", as_row(pe.item(0)));
        emit_heatmap(out / "map_permuted", outer_product(pe.user(0), pe.item(0)).E);
        Json meta;
        meta["seed"] = cfg.seed;
        meta["dim"] = a.dim;
        meta["permutation"] = perm.perm;
        io::write_file(out / "demo.json", meta.dump(2) + "\n");
        return 0;
    }
    require_exists(fs::path(a.model) / "model.json");
    const auto meta = Json::parse(io::read_file(fs::path(a.model) / "model.json"));
    EmbeddingPair emb;
    MaskMode mask = MaskMode::full;
    if (meta.value("kind", "") == "convrec") {
        const auto m = ConvRecModel::load(a.model);
        emb = m.embeddings();
        mask = m.train_mask();
    } else if (meta.value("kind", "") == "factors") {
        emb = load_embeddings(fs::path(a.model) / "factors.bin");
    } else {
        throw UserError("heatmap --model needs a convrec or factor model");
    }
    if (!a.mask.empty()) mask = parse_mask_mode(a.mask);
    if (a.user >= emb.n_users() || a.item >= emb.n_items()) throw UserError("--user or --item out of range");
    emit_heatmap(out / a.name, apply_mask(outer_product(emb.user(a.user), emb.item(a.item)), mask).E);
    return 0;
}

void add_common(CLI::App* sub, Common& c, bool split = true) {
    sub->add_option("--config", c.config, "JSON experiment configuration");
    sub->add_option("--seed", c.seed, "Experiment seed; overrides the configuration");
    sub->add_option("--threads", c.threads, "Worker threads (default: CONVMAP_THREADS or 1)");
    sub->add_option("--out", c.out, "Output directory (default: CONVMAP_OUT, the configuration, or convmap_out)");
    if (split) sub->add_option("--split", c.split_dir, "Split directory written by prepare-data");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"convmap: convolutional interaction-map recommenders, baselines and studies"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);
    Common common;

    auto* prepare = app.add_subcommand("prepare-data", "Load or generate a dataset and write a leave-one-out split");
    add_common(prepare, common, false);

    std::string algorithm;
    bool merge_validation = false;
    auto* fit = app.add_subcommand("fit", "Fit a baseline or a convrec model and save it");
    add_common(fit, common);
    fit->add_option("--algorithm", algorithm, "Algorithm name; overrides the configuration");
    fit->add_flag("--merge-validation", merge_validation, "Fit on train + validation");

    std::string model_dir, target = "test", mask;
    auto* evaluate = app.add_subcommand("evaluate", "Leave-one-out evaluation of a saved model");
    add_common(evaluate, common);
    evaluate->add_option("--model", model_dir, "Model directory")->required();
    evaluate->add_option("--target", target, "test or validation");
    evaluate->add_option("--mask", mask, "Inference mask for convrec models: full, element-wise, correlations");

    auto* hpo_cmd = app.add_subcommand("hpo", "Bayesian hyperparameter search, refit and test evaluation");
    add_common(hpo_cmd, common);
    hpo_cmd->add_option("--algorithm", algorithm, "Algorithm name; overrides the configuration");

    auto* perm = app.add_subcommand("perm-study", "Factor-permutation study");
    add_common(perm, common);
    auto* abl1 = app.add_subcommand("ablation1", "Train on the full map, evaluate under each mask");
    add_common(abl1, common);
    auto* abl2 = app.add_subcommand("ablation2", "Train and evaluate separately per mask");
    add_common(abl2, common);
    auto* compare = app.add_subcommand("compare-baselines", "Tune every baseline and tabulate test metrics");
    add_common(compare, common);

    HeatmapArgs hm;
    auto* heat = app.add_subcommand("heatmap", "Render a matrix, a model's interaction map or the permutation demo");
    add_common(heat, common, false);
    heat->add_option("--input", hm.input, "CSV matrix");
    heat->add_option("--model", hm.model, "convrec or factor model directory");
    heat->add_option("--user", hm.user, "User index for --model");
    heat->add_option("--item", hm.item, "Item index for --model");
    heat->add_option("--mask", hm.mask, "Mask applied to the interaction map");
    heat->add_option("--name", hm.name, "Output file stem");
    heat->add_flag("--demo", hm.demo, "Random vectors and their permuted interaction maps");
    heat->add_option("--dim", hm.dim, "Vector length for --demo");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (prepare->parsed()) return cmd_prepare(common);
        if (fit->parsed()) return cmd_fit(common, algorithm, merge_validation);
        if (evaluate->parsed()) return cmd_evaluate(common, model_dir, target, mask);
        if (hpo_cmd->parsed()) return cmd_hpo(common, algorithm);
        if (perm->parsed()) return cmd_study(common, "perm-study");
        if (abl1->parsed()) return cmd_study(common, "ablation1");
        if (abl2->parsed()) return cmd_study(common, "ablation2");
        if (compare->parsed()) return cmd_compare(common);
        if (heat->parsed()) return cmd_heatmap(common, hm);
    } catch (const UserError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 1;
    } catch (const nlohmann::json::type_error& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 1;
    } catch (const ParseError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 1;
    } catch (const TrainingDiverged& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
