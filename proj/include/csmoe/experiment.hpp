// Copyright (c) 2026, The csmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Whole-run helpers shared by the CLI and the acceptance suite.

#pragma once

#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "csmoe/analysis.hpp"
#include "csmoe/config.hpp"
#include "csmoe/stages.hpp"

namespace csmoe {

struct Experiment {
    World world;
    Corpus corpus;
};

inline Experiment make_experiment(const ExperimentConfig& cfg, std::size_t threads = 1) {
    cfg.validate();
    Experiment e;
    e.world = gen_world(cfg.world, cfg.world_seed);
    e.corpus = gen_corpus(e.world, cfg.data, cfg.data_seed, threads);
    return e;
}

/// Runs all four stages; failures are captured in the summary.
inline RunSummary run_summary(const ExperimentConfig& cfg, const Corpus& corpus) {
    RunSummary s;
    s.variant = cfg.variant;
    s.seed = cfg.train_seed;
    try {
        PipelineResult r = run_pipeline(cfg, corpus);
        s.cs_ce = r.eval->cs.ce;
        s.cs_accuracy = r.eval->cs.accuracy;
        s.mono_ce = r.eval->mono.ce;
        s.mono_accuracy = r.eval->mono.accuracy;
        if (r.stage2_probe) {
            double top1 = 1.0;
            for (const auto& l : r.stage2_probe->stats.languages) top1 = std::min(top1, l.top1_in_group_fraction);
            s.routing_top1 = top1;
            s.load_ratio = r.stage2_probe->load.max_ratio();
        }
    } catch (const std::exception& e) {
        s.ok = false;
        s.error = e.what();
    }
    return s;
}

inline std::vector<RunSummary> run_ablation(const ExperimentConfig& base, std::span<const Variant> variants,
                                            std::span<const std::uint64_t> seeds, const Corpus& corpus,
                                            const std::function<void(const RunSummary&)>& progress = {}) {
    if (variants.empty() || seeds.empty()) throw ArgumentError("ablation needs at least one variant and one seed");
    std::vector<RunSummary> out;
    for (std::uint64_t seed : seeds) {
        for (Variant v : variants) {
            ExperimentConfig cfg = base;
            cfg.variant = v;
            cfg.set_run_seed(seed);
            out.push_back(run_summary(cfg, corpus));
            if (progress) progress(out.back());
        }
    }
    return out;
}

namespace detail {

inline nlohmann::json opt_json(const std::optional<double>& v) {
    if (!v) return nullptr;
    if (std::isinf(*v)) return "inf";
    return *v;
}

inline std::string opt_csv(const std::optional<double>& v) {
    if (!v) return "";
    std::ostringstream os;
    os.precision(10);
    os << *v;
    return os.str();
}

}  // namespace detail

inline nlohmann::json to_json(const RunSummary& r) {
    nlohmann::json j{{"variant", variant_name(r.variant)}, {"seed", r.seed}, {"ok", r.ok}};
    if (!r.ok) {
        j["error"] = r.error;
        return j;
    }
    j["cs_ce"] = r.cs_ce;
    j["cs_accuracy"] = r.cs_accuracy;
    j["mono_ce"] = r.mono_ce;
    j["mono_accuracy"] = r.mono_accuracy;
    j["routing_top1"] = detail::opt_json(r.routing_top1);
    j["load_ratio"] = detail::opt_json(r.load_ratio);
    return j;
}

inline nlohmann::json to_json(const AblationTable& t, std::span<const RunSummary> runs) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : t.rows) {
        rows.push_back({{"variant", variant_name(r.variant)},
                        {"runs", r.runs},
                        {"failed", r.failed},
                        {"cs_ce_median", r.cs_ce_median},
                        {"cs_ce_min", r.cs_ce_min},
                        {"cs_ce_max", r.cs_ce_max},
                        {"cs_accuracy_median", r.cs_accuracy_median},
                        {"mono_ce_median", r.mono_ce_median},
                        {"routing_top1_median", detail::opt_json(r.routing_top1_median)},
                        {"load_ratio_median", detail::opt_json(r.load_ratio_median)}});
    }
    nlohmann::json all = nlohmann::json::array();
    for (const auto& r : runs) all.push_back(to_json(r));
    return {{"rows", rows}, {"runs", all}, {"notices", t.notices}};
}

inline std::string ablation_csv(const AblationTable& t) {
    std::ostringstream os;
    os.precision(10);
    os << "variant,runs,failed,cs_ce_median,cs_ce_min,cs_ce_max,cs_accuracy_median,mono_ce_median,"
          "routing_top1_median,load_ratio_median\n";
    for (const auto& r : t.rows) {
        os << variant_name(r.variant) << ',' << r.runs << ',' << r.failed << ',' << r.cs_ce_median << ','
           << r.cs_ce_min << ',' << r.cs_ce_max << ',' << r.cs_accuracy_median << ',' << r.mono_ce_median << ','
           << detail::opt_csv(r.routing_top1_median) << ',' << detail::opt_csv(r.load_ratio_median) << '\n';
    }
    return os.str();
}

inline std::string eval_csv(const EvalReport& r) {
    std::ostringstream os;
    os.precision(10);
    os << "split,ce,accuracy,tokens,records\n";
    const std::pair<const char*, const EvalMetrics*> rows[] = {{"cs", &r.cs}, {"mono", &r.mono}, {"both", &r.both}};
    for (const auto& [name, m] : rows) {
        os << name << ',' << m->ce << ',' << m->accuracy << ',' << m->tokens << ',' << m->records << '\n';
    }
    return os.str();
}

inline std::string routing_csv(const RoutingProbe& p) {
    std::ostringstream os;
    os.precision(10);
    os << "language,token_layers,top1_in_group,topk_in_group_mass,topk_in_group_count,load_ratio\n";
    for (std::size_t j = 0; j < p.stats.languages.size(); ++j) {
        const auto& l = p.stats.languages[j];
        os << j << ',' << l.token_layers << ',' << l.top1_in_group_fraction << ',' << l.topk_in_group_mass_fraction
           << ',' << l.topk_in_group_count_fraction << ',' << p.load.group_ratio.at(j) << '\n';
    }
    return os.str();
}

}  // namespace csmoe
