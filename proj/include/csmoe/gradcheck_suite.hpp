// Copyright (c) 2026, The csmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference checks of every loss and stage objective on tiny random
// MoE instances. Probabilities come from real router weights so gradients
// flow through the top-k softmax into the routers.

#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "csmoe/gradcheck.hpp"
#include "csmoe/losses.hpp"
#include "csmoe/projector.hpp"
#include "csmoe/world.hpp"

namespace csmoe {

struct GradCheckOptions {
    std::size_t seeds = 20;
    std::uint64_t base_seed = 0;
    double eps = 1e-5;
    double tolerance = 1e-4;
    /// Test hook: wraps each loss before backward (e.g. to corrupt its gradient).
    std::function<Var(const Var&)> wrap;
};

struct GradCheckEntry {
    std::string name;
    double max_relative_error = 0.0;
    std::size_t instances = 0;
    bool pass = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tolerance = 0.0;
    [[nodiscard]] bool pass() const {
        return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.pass; });
    }
};

/// Identity forward, backward scaled by `factor`. Only for harness tests.
inline Var corrupt_backward(const Var& x, double factor) {
    return x.tape()->record(x.value(), {x}, [x, factor](Tape& tape, const Tensor& g) {
        Tensor scaled = g;
        for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] *= factor;
        tape.grad(x.id()) += scaled;
    });
}

namespace detail {

struct TinyInstance {
    MoeProjector moe;
    MlpProjector mlp;
    ToyDecoder decoder;
    Tensor source_features;
    Tensor target_features;
    std::vector<LanguageLabel> source_labels;
    std::vector<LanguageLabel> target_labels;
    std::vector<std::size_t> source_targets;
    std::vector<std::size_t> target_targets;
    TransitionState ts;

    std::vector<Parameter*> moe_params() {
        auto p = moe.parameters();
        for (Parameter* q : decoder.parameters()) p.push_back(q);
        return p;
    }
    std::vector<Parameter*> mlp_params() {
        auto p = mlp.parameters();
        for (Parameter* q : decoder.parameters()) p.push_back(q);
        return p;
    }
};

inline TinyInstance make_tiny(std::uint64_t seed) {
    constexpr std::size_t m = 2, n = 2, k = 2, d_in = 3, d_model = 4, vocab = 5, tokens = 4;
    std::mt19937_64 rng(seed);
    const ProjectorConfig pc{d_in, d_model, 2};
    std::vector<MlpProjector> mlps;
    for (std::size_t j = 0; j < m; ++j) mlps.push_back(init_mlp(pc, rng()));
    TinyInstance inst;
    inst.moe = build_moe_from_pretrained(mlps, n, k, rng());
    // Break the within-group symmetry so every expert gets its own gradient.
    std::normal_distribution<double> jitter(0.0, 0.3);
    for (auto& layer : inst.moe.layers) {
        for (auto& e : layer.experts) {
            for (std::size_t i = 0; i < e.value.size(); ++i) e.value[i] += jitter(rng);
        }
        for (std::size_t i = 0; i < layer.router.value.size(); ++i) layer.router.value[i] *= 3.0;
    }
    inst.mlp = init_mlp(pc, rng());
    inst.decoder = init_decoder(d_model, 2, vocab, rng());
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick(0, vocab - 1);
    const auto features = [&]() {
        Tensor t(Shape{tokens, d_in});
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = gauss(rng);
        return t;
    };
    inst.source_features = features();
    inst.target_features = features();
    for (std::size_t t = 0; t < tokens; ++t) {
        inst.source_labels.push_back(LanguageLabel::of(t % m));
        inst.target_labels.push_back(LanguageLabel::of((t / 2) % m));
        inst.source_targets.push_back(pick(rng));
        inst.target_targets.push_back(pick(rng));
    }
    std::uniform_int_distribution<std::size_t> total(2, 9);
    inst.ts.total = total(rng);
    std::uniform_int_distribution<std::size_t> batch(1, inst.ts.total);
    inst.ts.batch = batch(rng);
    return inst;
}

struct TinyForward {
    Var ce_source;
    Var ce_target;
    RoutingTrace trace;
};

inline TinyForward tiny_moe_forward(Tape& tape, TinyInstance& inst) {
    std::vector<double> stacked(inst.source_features.values());
    stacked.insert(stacked.end(), inst.target_features.values().begin(), inst.target_features.values().end());
    const std::size_t ns = inst.source_features.rows();
    const Tensor feats(Shape{ns + inst.target_features.rows(), inst.source_features.cols()}, std::move(stacked));
    std::vector<LanguageLabel> labels = inst.source_labels;
    labels.insert(labels.end(), inst.target_labels.begin(), inst.target_labels.end());
    auto fwd = moe_forward(tape, inst.moe, tape.constant(feats), labels);
    const Var hs = slice_rows(fwd.output, 0, ns);
    const Var ht = slice_rows(fwd.output, ns, feats.rows());
    return TinyForward{cross_entropy(decode(tape, inst.decoder, hs, Task::asr), inst.source_targets),
                       cross_entropy(decode(tape, inst.decoder, ht, Task::st), inst.target_targets),
                       std::move(fwd.trace)};
}

}  // namespace detail

inline const std::vector<std::string>& grad_check_entries() {
    static const std::vector<std::string> names{"ce",         "lang",          "balance",       "conventional",
                                                "transition", "stage1_total",  "stage2_total",  "stage3_total",
                                                "stage4_total"};
    return names;
}

/// Loss builder for one named entry on one tiny instance.
inline LossBuilder grad_check_builder(const std::string& entry, detail::TinyInstance& inst) {
    const GroupMap groups = inst.moe.group_map();
    auto moe_part = [&inst](Tape& tape) { return detail::tiny_moe_forward(tape, inst); };
    if (entry == "ce" || entry == "stage1_total") {
        return [&inst, entry](Tape& tape) {
            const Var h = mlp_forward(tape, inst.mlp, tape.constant(inst.source_features));
            const Var ce = cross_entropy(decode(tape, inst.decoder, h, Task::asr), inst.source_targets);
            if (entry == "ce") return ce;
            return compose_stage_loss(1, LossBundle{ce, {}, {}, {}, {}}).total;
        };
    }
    if (entry == "lang") {
        return [moe_part, groups](Tape& tape) { return language_specific_loss(moe_part(tape).trace, groups); };
    }
    if (entry == "balance") {
        return [moe_part, groups](Tape& tape) {
            const auto f = moe_part(tape);
            return intra_group_balance_loss(std::span(&f.trace, 1), groups);
        };
    }
    if (entry == "conventional") {
        return [moe_part](Tape& tape) {
            const auto f = moe_part(tape);
            return conventional_balance_loss(std::span(&f.trace, 1));
        };
    }
    if (entry == "transition") {
        return [moe_part, &inst](Tape& tape) {
            const auto f = moe_part(tape);
            return transition_loss(f.ce_source, f.ce_target, inst.ts);
        };
    }
    if (entry == "stage2_total") {
        return [moe_part, groups](Tape& tape) {
            const auto f = moe_part(tape);
            LossBundle c;
            c.ce = f.ce_source;
            c.lang = language_specific_loss(f.trace, groups);
            c.balance = intra_group_balance_loss(std::span(&f.trace, 1), groups);
            return compose_stage_loss(2, c).total;
        };
    }
    if (entry == "stage3_total" || entry == "stage4_total") {
        const int stage = entry == "stage3_total" ? 3 : 4;
        return [moe_part, groups, &inst, stage](Tape& tape) {
            const auto f = moe_part(tape);
            LossBundle c;
            c.transition = transition_loss(f.ce_source, f.ce_target, inst.ts);
            if (stage == 3) {
                c.lang = language_specific_loss(f.trace, groups);
                c.balance = intra_group_balance_loss(std::span(&f.trace, 1), groups);
            }
            return compose_stage_loss(stage, c).total;
        };
    }
    throw ArgumentError("unknown grad-check entry '" + entry + "'");
}

inline GradCheckReport run_grad_check(const GradCheckOptions& opts = {}) {
    if (opts.seeds < 1) throw ArgumentError("grad-check: need at least one seed");
    GradCheckReport report;
    report.tolerance = opts.tolerance;
    for (const auto& name : grad_check_entries()) {
        GradCheckEntry entry{name, 0.0, 0, true};
        for (std::size_t s = 0; s < opts.seeds; ++s) {
            auto inst = detail::make_tiny(opts.base_seed * 1000003ULL + s);
            LossBuilder build = grad_check_builder(name, inst);
            if (opts.wrap) build = [inner = build, wrap = opts.wrap](Tape& tape) { return wrap(inner(tape)); };
            const bool mlp = name == "ce" || name == "stage1_total";
            auto params = mlp ? inst.mlp_params() : inst.moe_params();
            const auto cmp = compare_gradients(build, params, opts.eps);
            entry.max_relative_error = std::max(entry.max_relative_error, cmp.relative_error);
            ++entry.instances;
        }
        entry.pass = entry.max_relative_error <= opts.tolerance;
        report.entries.push_back(entry);
    }
    return report;
}

inline nlohmann::json to_json(const GradCheckReport& r) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : r.entries) {
        entries.push_back({{"name", e.name},
                           {"max_relative_error", e.max_relative_error},
                           {"instances", e.instances},
                           {"pass", e.pass}});
    }
    return {{"tolerance", r.tolerance}, {"pass", r.pass()}, {"entries", entries}};
}

}  // namespace csmoe
