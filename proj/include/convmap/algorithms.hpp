#pragma once

// Name-based construction of the baseline recommenders from a flat JSON
// parameter object, as used by tuning, studies and the command line.

#include <memory>
#include <set>
#include <string>
#include <vector>

#include "convmap/bpr.hpp"
#include "convmap/ials.hpp"
#include "convmap/knn.hpp"
#include "convmap/puresvd.hpp"
#include "convmap/scoring.hpp"
#include "convmap/slim.hpp"

namespace convmap {

inline const std::vector<std::string>& baseline_names() {
    static const std::vector<std::string> names{"toppop",  "itemknn", "userknn", "p3alpha", "rp3beta",
                                                "puresvd", "slim",    "ials",    "mfbpr"};
    return names;
}

/// Default values of every parameter each algorithm accepts.
inline Json baseline_defaults(const std::string& name) {
    if (name == "toppop") return Json::object();
    if (name == "itemknn" || name == "userknn") return {{"shrink", 10}, {"top_k", 100}};
    if (name == "p3alpha") return {{"alpha", 1.0}, {"top_k", 100}};
    if (name == "rp3beta") return {{"alpha", 1.0}, {"beta", 0.5}, {"top_k", 100}};
    if (name == "puresvd") return {{"factors", 50}};
    if (name == "slim") return {{"l1", 1e-3}, {"l2", 1e-3}, {"top_k", 100}, {"max_iterations", 1000}};
    if (name == "ials") return {{"factors", 50}, {"alpha", 10.0}, {"reg", 0.1}, {"iterations", 10}, {"init_scale", 0.01}};
    if (name == "mfbpr") return {{"factors", 50}, {"lr", 0.05}, {"reg", 1e-4}, {"epochs", 30}, {"init_scale", 0.01}};
    throw ConfigError("unknown algorithm '" + name + "'");
}

/// Defaults overlaid with `params`; keys an algorithm does not take are rejected.
inline Json resolve_baseline_params(const std::string& name, const Json& params) {
    Json out = baseline_defaults(name);
    if (!params.is_null() && !params.is_object()) throw ConfigError(name + ": parameters must be a JSON object");
    std::vector<std::string> unknown;
    for (const auto& [k, v] : params.items()) {
        if (!out.contains(k)) unknown.push_back(k);
        else out[k] = v;
    }
    if (!unknown.empty()) {
        std::string msg = name + ": unknown parameter(s):";
        for (const auto& k : unknown) msg += " " + k;
        throw ConfigError(msg);
    }
    return out;
}

/// Fits a baseline on `train`. The stochastic ones use `seed`.
inline std::unique_ptr<ScoringModel> fit_baseline(const std::string& name, const Json& params,
                                                  std::shared_ptr<const InteractionMatrix> train,
                                                  std::uint64_t seed = 0) {
    const Json p = resolve_baseline_params(name, params);
    auto count = [&](const char* key) {
        const double v = p.at(key).get<double>();
        if (!(v >= 1.0) || v != std::floor(v)) throw ConfigError(name + ": " + key + " must be a positive integer");
        return static_cast<std::size_t>(v);
    };
    auto real = [&](const char* key) { return p.at(key).get<double>(); };
    std::unique_ptr<ScoringModel> model;
    if (name == "toppop") {
        model = fit_top_popular(*train);
    } else if (name == "itemknn") {
        model = fit_item_knn(train, real("shrink"), count("top_k"));
    } else if (name == "userknn") {
        model = fit_user_knn(train, real("shrink"), count("top_k"));
    } else if (name == "p3alpha") {
        model = fit_p3alpha(train, real("alpha"), count("top_k"));
    } else if (name == "rp3beta") {
        model = fit_rp3beta(train, real("alpha"), real("beta"), count("top_k"));
    } else if (name == "puresvd") {
        PureSvdOptions opt;
        opt.seed = seed;
        model = fit_puresvd(*train, Index(count("factors")), opt);
    } else if (name == "slim") {
        SlimOptions opt;
        opt.l1 = real("l1");
        opt.l2 = real("l2");
        opt.top_k = count("top_k");
        opt.max_iterations = count("max_iterations");
        model = fit_slim(train, opt);
    } else if (name == "ials") {
        IalsOptions opt;
        opt.factors = Index(count("factors"));
        opt.alpha = real("alpha");
        opt.reg = real("reg");
        opt.iterations = count("iterations");
        opt.init_scale = real("init_scale");
        opt.seed = seed;
        model = fit_ials(*train, opt);
    } else if (name == "mfbpr") {
        BprOptions opt;
        opt.factors = Index(count("factors"));
        opt.lr = real("lr");
        opt.reg = real("reg");
        opt.epochs = count("epochs");
        opt.init_scale = real("init_scale");
        opt.seed = seed;
        model = fit_mf_bpr(*train, opt);
    } else {
        throw ConfigError("unknown algorithm '" + name + "'");
    }
    model->set_hyperparameters(p);
    return model;
}

}  // namespace convmap
