// Copyright (c) 2026, The csmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training objectives. The auxiliary losses read the sparse (top-k
// restricted) routing probabilities recorded in a RoutingTrace.

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "csmoe/autodiff.hpp"
#include "csmoe/routing.hpp"

namespace csmoe {

struct AuxLossOptions {
    /// Divide token sums by the token count. Off: the literal sums are used.
    bool per_token_mean = false;
};

namespace detail {

inline Tape& trace_tape(std::span<const RoutingTrace> traces, const char* who) {
    for (const auto& tr : traces) {
        if (!tr.layers.empty()) return *tr.layers[0].probs.tape();
    }
    throw ArgumentError(std::string(who) + ": empty trace batch");
}

inline std::size_t total_tokens(std::span<const RoutingTrace> traces) {
    std::size_t n = 0;
    for (const auto& tr : traces) n += tr.num_tokens();
    return n;
}

inline Var accumulate(Tape& tape, const std::vector<Var>& terms) {
    if (terms.empty()) return tape.constant(Tensor::scalar(0.0));
    Var total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
    return total;
}

}  // namespace detail

/// -sum_t sum_l sum_i (1 - z_i) log(1 - p(h_l^t)_i), z_i = 1 iff expert i is
/// in the token's language group. Every token needs a concrete label.
inline Var language_specific_loss(std::span<const RoutingTrace> traces, const GroupMap& groups,
                                  AuxLossOptions opts = {}) {
    Tape& tape = detail::trace_tape(traces, "language_specific_loss");
    std::vector<Var> terms;
    for (const auto& tr : traces) {
        const std::size_t t = tr.num_tokens();
        if (tr.token_language.size() != t) {
            throw ArgumentError("language_specific_loss: trace lacks per-token language labels");
        }
        Tensor mask(Shape{t, groups.num_experts()});
        for (std::size_t r = 0; r < t; ++r) {
            const LanguageLabel lang = tr.token_language[r];
            if (!lang.is_concrete()) {
                throw ArgumentError("language_specific_loss: undefined for code-switched (unlabeled) tokens");
            }
            for (std::size_t i = 0; i < groups.num_experts(); ++i) {
                mask.at(r, i) = groups.in_group(i, lang.index()) ? 0.0 : 1.0;
            }
        }
        const Var mask_var = tape.constant(std::move(mask));
        for (const auto& layer : tr.layers) {
            if (layer.probs.value().cols() != groups.num_experts()) {
                throw DimensionError("language_specific_loss: trace has " + std::to_string(layer.probs.value().cols()) +
                                     " experts, group map " + std::to_string(groups.num_experts()));
            }
            terms.push_back(sum(mul(mask_var, log1m(layer.probs))));
        }
    }
    Var loss = scale(detail::accumulate(tape, terms), -1.0);
    if (opts.per_token_mean) {
        const std::size_t n = detail::total_tokens(traces);
        if (n > 0) loss = scale(loss, 1.0 / static_cast<double>(n));
    }
    return loss;
}

inline Var language_specific_loss(const RoutingTrace& trace, const GroupMap& groups, AuxLossOptions opts = {}) {
    return language_specific_loss(std::span(&trace, 1), groups, opts);
}

/// Same, with one label applied to every token of the trace.
inline Var language_specific_loss(RoutingTrace trace, LanguageLabel lang, const GroupMap& groups,
                                  AuxLossOptions opts = {}) {
    if (!lang.is_concrete()) {
        throw ArgumentError("language_specific_loss: undefined for code-switched (unlabeled) input");
    }
    trace.token_language.assign(trace.num_tokens(), lang);
    return language_specific_loss(std::span<const RoutingTrace>(&trace, 1), groups, opts);
}

/// In-group argmax of a probability row; nullopt when the group holds no mass.
inline std::optional<std::size_t> in_group_argmax(std::span<const double> row, const GroupMap& groups,
                                                  std::size_t group) {
    const std::size_t first = groups.first_expert(group);
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < groups.experts_per_group(); ++i) {
        const double p = row[first + i];
        if (p > 0.0 && (!best || p > row[first + *best])) best = i;
    }
    return best;
}

/// sum_l sum_j sum_i f_ijl * P_ijl. f counts in-group argmax dispatch of
/// language-j tokens (gradient-stopped); P is the language-j mean routing
/// probability renormalised over group j (carries gradient). A (j, l) pair
/// with no dispatched tokens contributes 0.
inline Var intra_group_balance_loss(std::span<const RoutingTrace> traces, const GroupMap& groups) {
    Tape& tape = detail::trace_tape(traces, "intra_group_balance_loss");
    const std::size_t n = groups.experts_per_group();
    const std::size_t layers = traces[0].num_layers();
    std::vector<Var> terms;
    for (std::size_t l = 0; l < layers; ++l) {
        for (std::size_t j = 0; j < groups.num_languages(); ++j) {
            std::vector<double> counts(n, 0.0);
            std::vector<Var> col_sums;
            for (const auto& tr : traces) {
                if (tr.num_layers() != layers) throw DimensionError("intra_group_balance_loss: layer count differs");
                if (tr.token_language.size() != tr.num_tokens()) {
                    throw ArgumentError("intra_group_balance_loss: trace lacks per-token language labels");
                }
                const Tensor& p = tr.probs(l);
                std::vector<std::size_t> rows;
                for (std::size_t r = 0; r < tr.num_tokens(); ++r) {
                    const LanguageLabel lang = tr.token_language[r];
                    if (!lang.is_concrete()) {
                        throw ArgumentError("intra_group_balance_loss: undefined for code-switched (unlabeled) tokens");
                    }
                    if (lang.index() != j) continue;
                    rows.push_back(r);
                    if (const auto best = in_group_argmax(p.row(r), groups, j)) counts[*best] += 1.0;
                }
                if (rows.empty()) continue;
                const Var group_probs = slice_cols(gather_rows(tr.layers[l].probs, std::move(rows)),
                                                   groups.first_expert(j), groups.first_expert(j) + n);
                col_sums.push_back(sum_rows(group_probs));
            }
            double dispatched = 0.0;
            for (double c : counts) dispatched += c;
            if (col_sums.empty() || dispatched == 0.0) continue;
            Var mass = detail::accumulate(tape, col_sums);
            const Var total = sum(mass);
            if (total.value().item() <= 0.0) continue;
            Tensor f(Shape{1, n});
            for (std::size_t i = 0; i < n; ++i) f[i] = counts[i] / dispatched;
            terms.push_back(sum(mul(tape.constant(std::move(f)), div(mass, total))));
        }
    }
    return detail::accumulate(tape, terms);
}

/// sum_l sum_i f'_il * P'_il over all N experts with no group structure:
/// f' = fraction of tokens whose global argmax is i (gradient-stopped),
/// P' = token mean of p_i.
inline Var conventional_balance_loss(std::span<const RoutingTrace> traces) {
    Tape& tape = detail::trace_tape(traces, "conventional_balance_loss");
    const std::size_t tokens = detail::total_tokens(traces);
    if (tokens == 0) throw ArgumentError("conventional_balance_loss: empty batch");
    const std::size_t layers = traces[0].num_layers();
    const std::size_t experts = traces[0].num_experts;
    std::vector<Var> terms;
    for (std::size_t l = 0; l < layers; ++l) {
        Tensor f(Shape{1, experts});
        std::vector<Var> col_sums;
        for (const auto& tr : traces) {
            if (tr.num_tokens() == 0) continue;
            const Tensor& p = tr.probs(l);
            for (std::size_t r = 0; r < tr.num_tokens(); ++r) f[argmax(p.row(r))] += 1.0;
            col_sums.push_back(sum_rows(tr.layers[l].probs));
        }
        for (double& v : f.data()) v /= static_cast<double>(tokens);
        const Var mean_p = scale(detail::accumulate(tape, col_sums), 1.0 / static_cast<double>(tokens));
        terms.push_back(sum(mul(tape.constant(std::move(f)), mean_p)));
    }
    return detail::accumulate(tape, terms);
}

/// Position b (1-based) of B in a transition stage.
struct TransitionState {
    std::size_t batch = 1;
    std::size_t total = 1;

    void validate() const {
        if (total < 1 || batch < 1 || batch > total) {
            throw ArgumentError("transition: batch index " + std::to_string(batch) + " outside [1, " +
                                std::to_string(total) + "]");
        }
    }
    [[nodiscard]] double lambda() const {
        validate();
        return static_cast<double>(batch) / static_cast<double>(total);
    }
};

/// (1 - lambda) * ce_source + lambda * ce_target with lambda = b / B.
inline Var transition_loss(const Var& ce_source, const Var& ce_target, const TransitionState& ts) {
    const double lambda = ts.lambda();
    return add(scale(ce_source, 1.0 - lambda), scale(ce_target, lambda));
}

enum class BalanceKind { none, intra_group, conventional };

/// Components active in a stage's objective.
struct LossSet {
    bool ce = false;
    bool transition = false;
    bool lang = false;
    BalanceKind balance = BalanceKind::none;

    /// Full objective of each stage.
    static LossSet for_stage(int stage) {
        switch (stage) {
            case 1: return {true, false, false, BalanceKind::none};
            case 2: return {true, false, true, BalanceKind::intra_group};
            case 3: return {false, true, true, BalanceKind::intra_group};
            case 4: return {false, true, false, BalanceKind::none};
            default: throw ArgumentError("unknown stage " + std::to_string(stage));
        }
    }

    [[nodiscard]] bool has_balance() const { return balance != BalanceKind::none; }

    friend bool operator==(const LossSet&, const LossSet&) = default;
};

/// Rejects loss sets a stage does not allow: stage 1 is CE only, stage 2
/// is CE plus optional aux losses, stage 3 is the transition plus optional
/// aux losses, stage 4 is the transition only.
inline void validate_loss_set(int stage, const LossSet& set) {
    const auto fail = [&](const std::string& why) {
        throw ArgumentError("stage " + std::to_string(stage) + " loss set: " + why);
    };
    switch (stage) {
        case 1:
            if (!set.ce || set.transition || set.lang || set.has_balance()) fail("must be {ce}");
            break;
        case 2:
            if (!set.ce || set.transition) fail("requires ce and no transition");
            break;
        case 3:
            if (set.ce || !set.transition) fail("requires transition and no plain ce");
            break;
        case 4:
            if (set.ce || !set.transition) fail("requires transition and no plain ce");
            if (set.lang || set.has_balance()) fail("language and balance losses are excluded");
            break;
        default: fail("unknown stage");
    }
}

struct LossWeights {
    double lang = 1.0;
    double balance = 1.0;
};

struct LossBundle {
    std::optional<Var> ce;
    std::optional<Var> transition;
    std::optional<Var> lang;
    std::optional<Var> balance;
    Var total;

    [[nodiscard]] static std::optional<double> value_of(const std::optional<Var>& v) {
        return v ? std::optional<double>(v->value().item()) : std::nullopt;
    }
};

/// Builds a stage objective from the components the active set requires.
/// Components outside the active set are ignored.
inline LossBundle compose_stage_loss(int stage, const LossBundle& components, const LossSet& active,
                                     LossWeights weights = {}) {
    validate_loss_set(stage, active);
    const auto need = [&](const std::optional<Var>& c, const char* name) {
        if (!c) throw ArgumentError("stage " + std::to_string(stage) + ": missing required component " + name);
        return *c;
    };
    LossBundle out;
    std::vector<Var> terms;
    if (active.ce) {
        out.ce = need(components.ce, "ce");
        terms.push_back(*out.ce);
    }
    if (active.transition) {
        out.transition = need(components.transition, "transition");
        terms.push_back(*out.transition);
    }
    if (active.lang) {
        out.lang = need(components.lang, "lang");
        terms.push_back(weights.lang == 1.0 ? *out.lang : scale(*out.lang, weights.lang));
    }
    if (active.has_balance()) {
        out.balance = need(components.balance, "balance");
        terms.push_back(weights.balance == 1.0 ? *out.balance : scale(*out.balance, weights.balance));
    }
    Var total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
    out.total = total;
    return out;
}

inline LossBundle compose_stage_loss(int stage, const LossBundle& components) {
    return compose_stage_loss(stage, components, LossSet::for_stage(stage));
}

}  // namespace csmoe
