// Copyright (c) 2026, The csmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Four-stage transition training:
//   1. per-language MLP projector pretraining on ASR (cross-entropy)
//   2. expert-group assembly from the stage-1 projectors, trained on pooled
//      ASR with cross-entropy + language-specific + intra-group balance losses
//   3. ASR -> monolingual ST transition (+ auxiliary losses)
//   4. monolingual ST -> code-switched ST transition (no auxiliary losses)
//
// Adam moments are reset at every stage boundary. Every stage draws its
// batches from streams seeded by (train seed, stage), so resuming from a
// checkpoint reproduces later stages exactly.

#pragma once

#include <algorithm>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "csmoe/analysis.hpp"
#include "csmoe/config.hpp"
#include "csmoe/losses.hpp"
#include "csmoe/optim.hpp"
#include "csmoe/projector.hpp"
#include "csmoe/world.hpp"

namespace csmoe {

/// Stage-1 output (one MLP per language), a single shared MLP, or the MoE projector.
using ProjectorState = std::variant<std::vector<MlpProjector>, MlpProjector, MoeProjector>;

struct TrainState {
    ProjectorState projector;
    ToyDecoder decoder;
    int stage = 0;           // last completed stage
    std::size_t batch = 0;   // last completed batch index of that stage
    std::mt19937_64 rng;
    std::vector<nlohmann::json> metrics;

    [[nodiscard]] bool is_moe() const { return std::holds_alternative<MoeProjector>(projector); }
    [[nodiscard]] MoeProjector& moe() { return std::get<MoeProjector>(projector); }
    [[nodiscard]] const MoeProjector& moe() const { return std::get<MoeProjector>(projector); }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        std::visit(
            [&](auto& p) {
                using T = std::decay_t<decltype(p)>;
                if constexpr (std::is_same_v<T, std::vector<MlpProjector>>) {
                    for (auto& mlp : p) {
                        for (Parameter* q : mlp.parameters()) out.push_back(q);
                    }
                } else {
                    out = p.parameters();
                }
            },
            projector);
        for (Parameter* q : decoder.parameters()) out.push_back(q);
        return out;
    }
};

struct StagePlan {
    int stage = 1;
    std::vector<std::string> source_datasets;
    std::vector<std::string> target_datasets;  // stages 3-4 only
    std::size_t total_batches = 1;
    std::size_t batch_size = 1;
    LossSet loss_set;
    AdamConfig adam;
    TransitionMode mode = TransitionMode::mixed;
    LossWeights weights;
    AuxLossOptions aux;

    void validate() const {
        validate_loss_set(stage, loss_set);
        if (stage <= 2 && !target_datasets.empty()) throw ArgumentError("stages 1-2 take no target dataset");
        if (stage >= 3 && target_datasets.empty()) throw ArgumentError("transition stages need a target dataset");
        if (source_datasets.empty()) throw ArgumentError("stage plan without source dataset");
        if (total_batches < 1 || batch_size < 1) throw ArgumentError("stage plan needs batches and batch size >= 1");
    }
};

/// Active loss set of a stage under a variant.
inline LossSet stage_loss_set(int stage, Variant variant) {
    LossSet set = LossSet::for_stage(stage);
    if (variant == Variant::no_aux_losses || variant == Variant::no_moe) {
        set.lang = false;
        set.balance = BalanceKind::none;
    }
    if (variant == Variant::conventional_balance && set.has_balance()) set.balance = BalanceKind::conventional;
    return set;
}

inline std::vector<std::string> language_splits(Task task, std::size_t m, bool train) {
    std::vector<std::string> out;
    for (std::size_t j = 0; j < m; ++j) out.push_back(split_name(task, j, train));
    return out;
}

/// Plan for `stage` under the config's variant. Stage 1 sources list every
/// language's ASR split; run_stage1 trains on them one language at a time.
inline StagePlan make_stage_plan(const ExperimentConfig& cfg, int stage) {
    if (stage < 1 || stage > 4) throw ArgumentError("unknown stage " + std::to_string(stage));
    const std::size_t m = cfg.world.num_languages;
    const StageSettings& s = cfg.stage(stage);
    StagePlan plan;
    plan.stage = stage;
    plan.total_batches = s.batches;
    plan.batch_size = s.batch_size;
    plan.adam.lr = s.lr;
    plan.mode = cfg.transition_mode;
    plan.weights = LossWeights{cfg.lang_weight, cfg.balance_weight};
    plan.aux.per_token_mean = cfg.aux_per_token_mean;
    plan.loss_set = stage_loss_set(stage, cfg.variant);
    switch (stage) {
        case 1:
        case 2: plan.source_datasets = language_splits(Task::asr, m, true); break;
        case 3:
            plan.source_datasets = language_splits(Task::asr, m, true);
            plan.target_datasets = language_splits(Task::st, m, true);
            break;
        case 4:
            plan.source_datasets = language_splits(Task::st, m, true);
            plan.target_datasets = {split_name(Task::csst, std::nullopt, true)};
            break;
        default: throw ArgumentError("unknown stage " + std::to_string(stage));
    }
    plan.validate();
    return plan;
}

// ---------------------------------------------------------------------------
// Forward

struct Projection {
    Var output;
    std::optional<RoutingTrace> trace;
};

inline Projection project(Tape& tape, ProjectorState& state, const Var& features,
                          std::vector<LanguageLabel> labels = {}) {
    if (auto* mlp = std::get_if<MlpProjector>(&state)) return Projection{mlp_forward(tape, *mlp, features), std::nullopt};
    if (auto* moe = std::get_if<MoeProjector>(&state)) {
        auto fwd = moe_forward(tape, *moe, features, std::move(labels));
        return Projection{fwd.output, std::move(fwd.trace)};
    }
    throw ArgumentError("project: state holds per-language stage-1 projectors, not a single projector");
}

namespace detail {

inline std::vector<const Dataset*> lookup(const Corpus& corpus, const std::vector<std::string>& names) {
    std::vector<const Dataset*> out;
    for (const auto& n : names) {
        const Dataset& ds = require_split(corpus, n);
        if (ds.utterances.empty()) throw ArgumentError("dataset '" + n + "' is empty");
        out.push_back(&ds);
    }
    return out;
}

inline Tensor stack_rows(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols()) throw DimensionError("stack_rows: widths differ");
    std::vector<double> v(a.values());
    v.insert(v.end(), b.values().begin(), b.values().end());
    return Tensor(Shape{a.rows() + b.rows(), a.cols()}, std::move(v));
}

inline void put(nlohmann::json& rec, const char* key, const std::optional<Var>& v) {
    if (v) rec[key] = v->value().item();
}

}  // namespace detail

/// Loss of one step. `target` is set for transition stages in mixed mode.
struct StepBatches {
    const Batch* source = nullptr;
    const Batch* target = nullptr;
    bool use_target = false;  // sampled mode: which single batch was drawn
};

inline LossBundle build_step_loss(Tape& tape, TrainState& state, const StagePlan& plan, const StepBatches& in,
                                  const TransitionState& ts, nlohmann::json* record = nullptr) {
    LossBundle comps;
    std::optional<RoutingTrace> trace;
    const bool transition = plan.stage >= 3;
    if (transition && plan.mode == TransitionMode::mixed) {
        const Batch& src = *in.source;
        const Batch& tgt = *in.target;
        std::vector<LanguageLabel> labels = src.labels;
        labels.insert(labels.end(), tgt.labels.begin(), tgt.labels.end());
        const Var feats = tape.constant(detail::stack_rows(src.features, tgt.features));
        Projection proj = project(tape, state.projector, feats, std::move(labels));
        const std::size_t ns = src.num_tokens();
        const Var ce_s = cross_entropy(
            decode(tape, state.decoder, slice_rows(proj.output, 0, ns), src.task), src.targets);
        const Var ce_t = cross_entropy(
            decode(tape, state.decoder, slice_rows(proj.output, ns, ns + tgt.num_tokens()), tgt.task), tgt.targets);
        comps.transition = transition_loss(ce_s, ce_t, ts);
        trace = std::move(proj.trace);
        if (record) {
            (*record)["ce_source"] = ce_s.value().item();
            (*record)["ce_target"] = ce_t.value().item();
        }
    } else {
        const Batch& b = transition && in.use_target ? *in.target : *in.source;
        Projection proj = project(tape, state.projector, tape.constant(b.features), b.labels);
        const Var ce = cross_entropy(decode(tape, state.decoder, proj.output, b.task), b.targets);
        if (transition) {
            comps.transition = ce;
            if (record) (*record)["drawn"] = in.use_target ? "target" : "source";
        } else {
            comps.ce = ce;
        }
        trace = std::move(proj.trace);
    }
    if (plan.loss_set.lang || plan.loss_set.has_balance()) {
        if (!trace) throw ArgumentError("stage " + std::to_string(plan.stage) + ": auxiliary losses need an MoE projector");
        const GroupMap groups = state.moe().group_map();
        if (plan.loss_set.lang) comps.lang = language_specific_loss(*trace, groups, plan.aux);
        if (plan.loss_set.balance == BalanceKind::intra_group) {
            comps.balance = intra_group_balance_loss(std::span(&*trace, 1), groups);
        } else if (plan.loss_set.balance == BalanceKind::conventional) {
            comps.balance = conventional_balance_loss(std::span(&*trace, 1));
        }
    }
    LossBundle bundle = compose_stage_loss(plan.stage, comps, plan.loss_set, plan.weights);
    if (record) {
        detail::put(*record, "ce", bundle.ce);
        detail::put(*record, "transition", bundle.transition);
        detail::put(*record, "lang", bundle.lang);
        detail::put(*record, "balance", bundle.balance);
        (*record)["total"] = bundle.total.value().item();
    }
    return bundle;
}

/// Runs plan.total_batches optimizer steps on `state`.
inline void train_stage(TrainState& state, const StagePlan& plan, const Corpus& corpus, std::uint64_t train_seed,
                        std::optional<std::size_t> language = std::nullopt) {
    plan.validate();
    const auto stage_id = static_cast<std::uint32_t>(plan.stage);
    const auto lang_id = static_cast<std::uint32_t>(language.value_or(0xffff));
    BatchSampler source(detail::lookup(corpus, plan.source_datasets), plan.batch_size,
                        derive_seed(train_seed, {stage_id, 1, lang_id}));
    std::optional<BatchSampler> target;
    if (!plan.target_datasets.empty()) {
        target.emplace(detail::lookup(corpus, plan.target_datasets), plan.batch_size,
                       derive_seed(train_seed, {stage_id, 2, lang_id}));
    }
    state.rng.seed(derive_seed(train_seed, {stage_id, 3, lang_id}));
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    Adam adam(plan.adam);
    const auto params = state.parameters();
    for (std::size_t b = 1; b <= plan.total_batches; ++b) {
        const TransitionState ts{b, plan.total_batches};
        nlohmann::json rec{{"stage", plan.stage}, {"step", b}};
        if (language) rec["language"] = *language;
        StepBatches in;
        Batch src, tgt;
        if (plan.stage >= 3) {
            rec["lambda"] = ts.lambda();
            if (plan.mode == TransitionMode::mixed) {
                src = source.next();
                tgt = target->next();
                in = {&src, &tgt, false};
            } else {
                const bool use_target = coin(state.rng) < ts.lambda();
                // Draw from both streams every step so the schedule, not the
                // coin, decides which examples each stream yields.
                src = source.next();
                tgt = target->next();
                in = {&src, &tgt, use_target};
            }
        } else {
            src = source.next();
            in = {&src, nullptr, false};
        }
        zero_grad(params);
        Tape tape;
        const LossBundle loss = build_step_loss(tape, state, plan, in, ts, &rec);
        tape.backward(loss.total);
        adam.step(params);
        state.batch = b;
        state.metrics.push_back(std::move(rec));
    }
    state.stage = plan.stage;
}

// ---------------------------------------------------------------------------
// Stages

struct Stage1Result {
    std::vector<MlpProjector> projectors;
    std::vector<std::vector<double>> losses;  // per language, per step
};

/// One projector (and throwaway decoder head) per language, each trained on
/// that language's ASR split.
inline Stage1Result run_stage1(const Corpus& corpus, const StagePlan& plan, const ExperimentConfig& cfg,
                               std::vector<nlohmann::json>* metrics = nullptr) {
    plan.validate();
    if (plan.stage != 1) throw ArgumentError("run_stage1: plan is for stage " + std::to_string(plan.stage));
    if (plan.source_datasets.size() < 2) throw ArgumentError("run_stage1: need ASR data for >= 2 languages");
    Stage1Result out;
    for (std::size_t j = 0; j < plan.source_datasets.size(); ++j) {
        TrainState st;
        st.projector = init_mlp(cfg.projector(), derive_seed(cfg.init_seed, {1, static_cast<std::uint32_t>(j)}),
                                "mlp" + std::to_string(j));
        st.decoder = init_decoder(cfg.d_model, cfg.prompt_len, cfg.world.num_languages * cfg.world.vocab_per_lang +
                                                                   cfg.world.vocab_per_lang,
                                  derive_seed(cfg.init_seed, {3, static_cast<std::uint32_t>(j)}));
        StagePlan one = plan;
        one.source_datasets = {plan.source_datasets[j]};
        train_stage(st, one, corpus, cfg.train_seed, j);
        std::vector<double> losses;
        for (const auto& rec : st.metrics) losses.push_back(rec["total"].get<double>());
        out.losses.push_back(std::move(losses));
        if (metrics) metrics->insert(metrics->end(), st.metrics.begin(), st.metrics.end());
        out.projectors.push_back(std::get<MlpProjector>(std::move(st.projector)));
    }
    return out;
}

/// Stage 1 of the no-moe variant: one shared MLP on pooled ASR for m times
/// the per-language batch budget. Its decoder is kept.
inline TrainState run_stage1_shared(const Corpus& corpus, const StagePlan& plan, const ExperimentConfig& cfg) {
    TrainState st;
    st.projector = init_mlp(cfg.projector(), derive_seed(cfg.init_seed, {1, 99}), "mlp");
    st.decoder = init_decoder(cfg.d_model, cfg.prompt_len,
                              cfg.world.num_languages * cfg.world.vocab_per_lang + cfg.world.vocab_per_lang,
                              derive_seed(cfg.init_seed, {3, 99}));
    StagePlan pooled = plan;
    pooled.total_batches = plan.total_batches * plan.source_datasets.size();
    train_stage(st, pooled, corpus, cfg.train_seed);
    return st;
}

/// Builds the MoE projector from the stage-1 projectors and trains it with a
/// fresh shared decoder on pooled, language-labelled ASR batches.
inline TrainState run_stage2(std::vector<MlpProjector> mlps, const Corpus& corpus, const StagePlan& plan,
                             const ExperimentConfig& cfg) {
    if (plan.stage != 2) throw ArgumentError("run_stage2: plan is for stage " + std::to_string(plan.stage));
    TrainState st;
    st.projector = build_moe_from_pretrained(mlps, cfg.experts_per_group, cfg.top_k, derive_seed(cfg.init_seed, {2}));
    st.decoder = init_decoder(cfg.d_model, cfg.prompt_len,
                              cfg.world.num_languages * cfg.world.vocab_per_lang + cfg.world.vocab_per_lang,
                              derive_seed(cfg.init_seed, {4}));
    st.stage = 1;
    train_stage(st, plan, corpus, cfg.train_seed);
    return st;
}

inline TrainState run_stage3(TrainState state, const Corpus& corpus, const StagePlan& plan, const ExperimentConfig& cfg) {
    if (plan.stage != 3) throw ArgumentError("run_stage3: plan is for stage " + std::to_string(plan.stage));
    if (std::holds_alternative<std::vector<MlpProjector>>(state.projector)) {
        throw ArgumentError("run_stage3: state still holds per-language stage-1 projectors");
    }
    train_stage(state, plan, corpus, cfg.train_seed);
    return state;
}

inline TrainState run_stage4(TrainState state, const Corpus& corpus, const StagePlan& plan, const ExperimentConfig& cfg) {
    if (plan.stage != 4) throw ArgumentError("run_stage4: plan is for stage " + std::to_string(plan.stage));
    if (state.stage != 3) throw ArgumentError("run_stage4: expects the state after stage 3");
    train_stage(state, plan, corpus, cfg.train_seed);
    return state;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalMetrics {
    double ce = 0.0;
    double accuracy = 0.0;
    std::size_t tokens = 0;
    std::size_t records = 0;
};

/// Per-utterance summed token CE and correct-token counts.
struct RecordScores {
    std::vector<double> ce_sum;
    std::vector<std::size_t> correct;
    std::vector<std::size_t> tokens;
};

inline RecordScores score_records(TrainState& state, const Dataset& ds, std::size_t chunk = 64) {
    RecordScores out;
    for (std::size_t begin = 0; begin < ds.utterances.size(); begin += chunk) {
        const std::size_t end = std::min(ds.utterances.size(), begin + chunk);
        std::vector<const Utterance*> utts;
        for (std::size_t u = begin; u < end; ++u) utts.push_back(&ds.utterances[u]);
        const Batch b = make_batch(utts);
        Tape tape;
        Projection proj = project(tape, state.projector, tape.constant(b.features), b.labels);
        const Tensor& logits = decode(tape, state.decoder, proj.output, b.task).value();
        std::size_t row = 0;
        for (const Utterance* u : utts) {
            double ce = 0.0;
            std::size_t correct = 0;
            for (std::size_t t = 0; t < u->length(); ++t, ++row) {
                const auto lr = logits.row(row);
                const double mx = *std::max_element(lr.begin(), lr.end());
                double z = 0.0;
                for (double v : lr) z += std::exp(v - mx);
                ce -= lr[b.targets[row]] - (mx + std::log(z));
                correct += argmax(lr) == b.targets[row] ? 1 : 0;
            }
            out.ce_sum.push_back(ce);
            out.correct.push_back(correct);
            out.tokens.push_back(u->length());
        }
    }
    return out;
}

inline EvalMetrics summarize(std::span<const RecordScores> parts) {
    EvalMetrics m;
    double ce = 0.0, correct = 0.0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < p.tokens.size(); ++i) {
            ce += p.ce_sum[i];
            correct += static_cast<double>(p.correct[i]);
            m.tokens += p.tokens[i];
            ++m.records;
        }
    }
    if (m.tokens > 0) {
        m.ce = ce / static_cast<double>(m.tokens);
        m.accuracy = correct / static_cast<double>(m.tokens);
    }
    return m;
}

inline EvalMetrics evaluate(TrainState& state, const Dataset& ds) {
    const RecordScores s = score_records(state, ds);
    return summarize(std::span(&s, 1));
}

/// CS, Mono (all monolingual ST validation splits) and Both (their union).
struct EvalReport {
    EvalMetrics cs, mono, both;
};

inline EvalReport evaluate_splits(TrainState& state, const Corpus& corpus, std::size_t num_languages) {
    const RecordScores cs = score_records(state, require_split(corpus, split_name(Task::csst, std::nullopt, false)));
    std::vector<RecordScores> mono;
    for (const auto& name : language_splits(Task::st, num_languages, false)) {
        mono.push_back(score_records(state, require_split(corpus, name)));
    }
    std::vector<RecordScores> both = mono;
    both.push_back(cs);
    return EvalReport{summarize(std::span(&cs, 1)), summarize(mono), summarize(both)};
}

inline nlohmann::json to_json(const EvalMetrics& m) {
    return {{"ce", m.ce}, {"accuracy", m.accuracy}, {"tokens", m.tokens}, {"records", m.records}};
}

inline nlohmann::json to_json(const EvalReport& r) {
    return {{"cs", to_json(r.cs)}, {"mono", to_json(r.mono)}, {"both", to_json(r.both)}};
}

struct RoutingProbe {
    RoutingStats stats;
    ExpertLoad load;
};

/// Routing statistics of an MoE state on the given datasets, labelled with
/// oracle (ground-truth) languages.
inline RoutingProbe routing_probe(TrainState& state, std::span<const Dataset* const> datasets,
                                  std::size_t chunk = 64) {
    if (!state.is_moe()) throw ArgumentError("routing_probe: state has no MoE projector");
    Tape tape;
    std::vector<RoutingTrace> traces;
    for (const Dataset* ds : datasets) {
        for (std::size_t begin = 0; begin < ds->utterances.size(); begin += chunk) {
            const std::size_t end = std::min(ds->utterances.size(), begin + chunk);
            std::vector<const Utterance*> utts;
            for (std::size_t u = begin; u < end; ++u) utts.push_back(&ds->utterances[u]);
            const Batch b = make_batch(utts);
            auto fwd = moe_forward(tape, state.moe(), tape.constant(b.features), b.oracle);
            traces.push_back(std::move(fwd.trace));
        }
    }
    const GroupMap groups = state.moe().group_map();
    return RoutingProbe{routing_accuracy(traces, groups), expert_load(traces, groups)};
}

inline RoutingProbe routing_probe_mono(TrainState& state, const Corpus& corpus, std::size_t num_languages) {
    std::vector<const Dataset*> ds;
    for (const auto& name : language_splits(Task::asr, num_languages, false)) ds.push_back(&require_split(corpus, name));
    return routing_probe(state, ds);
}

inline nlohmann::json to_json(const RoutingProbe& p) {
    nlohmann::json langs = nlohmann::json::array();
    for (const auto& l : p.stats.languages) {
        langs.push_back({{"top1_in_group", l.top1_in_group_fraction},
                         {"topk_in_group_mass", l.topk_in_group_mass_fraction},
                         {"topk_in_group_count", l.topk_in_group_count_fraction},
                         {"token_layers", l.token_layers}});
    }
    nlohmann::json ratios = nlohmann::json::array();
    for (double r : p.load.group_ratio) {
        if (std::isinf(r)) ratios.push_back("inf");
        else if (std::isnan(r)) ratios.push_back(nullptr);
        else ratios.push_back(r);
    }
    return {{"languages", langs}, {"group_share", p.stats.group_share}, {"expert_share", p.load.shares},
            {"group_load_ratio", ratios}};
}

// ---------------------------------------------------------------------------
// Pipeline

struct PipelineOptions {
    std::vector<int> stages{1, 2, 3, 4};
    std::optional<TrainState> resume;  // state after stage stages.front() - 1
    std::function<void(const TrainState&)> on_stage_end;
    bool evaluate = true;
};

struct PipelineResult {
    TrainState state;
    nlohmann::json report;
    std::optional<RoutingProbe> stage2_probe;
    std::optional<EvalReport> eval;
};

inline void validate_stage_list(const std::vector<int>& stages) {
    if (stages.empty()) throw ArgumentError("no stages requested");
    for (std::size_t i = 0; i < stages.size(); ++i) {
        if (stages[i] < 1 || stages[i] > 4) throw ArgumentError("stage " + std::to_string(stages[i]) + " out of range");
        if (i > 0 && stages[i] != stages[i - 1] + 1) throw ArgumentError("stages must be consecutive and ascending");
    }
}

inline PipelineResult run_pipeline(const ExperimentConfig& cfg, const Corpus& corpus, PipelineOptions opts = {}) {
    cfg.validate();
    validate_stage_list(opts.stages);
    PipelineResult res;
    if (opts.stages.front() > 1) {
        if (!opts.resume) throw ArgumentError("stage " + std::to_string(opts.stages.front()) + " needs a resume state");
        if (opts.resume->stage != opts.stages.front() - 1) {
            throw ArgumentError("resume state is after stage " + std::to_string(opts.resume->stage) + ", need stage " +
                                std::to_string(opts.stages.front() - 1));
        }
        res.state = std::move(*opts.resume);
        res.state.metrics.clear();
    }
    nlohmann::json stages_report = nlohmann::json::object();
    for (int s : opts.stages) {
        try {
            const StagePlan plan = make_stage_plan(cfg, s);
            const std::size_t first_metric = res.state.metrics.size();
            switch (s) {
                case 1:
                    if (cfg.variant == Variant::no_moe) {
                        res.state = run_stage1_shared(corpus, plan, cfg);
                    } else {
                        std::vector<nlohmann::json> metrics;
                        Stage1Result r = run_stage1(corpus, plan, cfg, &metrics);
                        res.state = TrainState{};
                        res.state.projector = std::move(r.projectors);
                        res.state.metrics = std::move(metrics);
                        res.state.stage = 1;
                        res.state.batch = plan.total_batches;
                    }
                    break;
                case 2:
                    if (cfg.variant == Variant::no_moe) {
                        res.state.stage = 2;
                        res.state.batch = 0;
                        res.state.metrics.push_back({{"stage", 2}, {"skipped", true}});
                    } else {
                        auto metrics = std::move(res.state.metrics);
                        auto mlps = std::get<std::vector<MlpProjector>>(std::move(res.state.projector));
                        res.state = run_stage2(std::move(mlps), corpus, plan, cfg);
                        metrics.insert(metrics.end(), res.state.metrics.begin(), res.state.metrics.end());
                        res.state.metrics = std::move(metrics);
                    }
                    break;
                case 3: res.state = run_stage3(std::move(res.state), corpus, plan, cfg); break;
                case 4: res.state = run_stage4(std::move(res.state), corpus, plan, cfg); break;
            }
            nlohmann::json sr{{"steps", res.state.metrics.size() - first_metric}};
            if (res.state.metrics.size() > first_metric && res.state.metrics.back().contains("total")) {
                sr["first_total"] = res.state.metrics[first_metric]["total"];
                sr["last_total"] = res.state.metrics.back()["total"];
            }
            if (s >= 2 && res.state.is_moe()) {
                RoutingProbe probe = routing_probe_mono(res.state, corpus, cfg.world.num_languages);
                sr["routing"] = to_json(probe);
                res.state.metrics.push_back({{"stage", s}, {"probe", sr["routing"]}});
                if (s == 2) res.stage2_probe = std::move(probe);
            }
            stages_report[std::to_string(s)] = std::move(sr);
            if (opts.on_stage_end) opts.on_stage_end(res.state);
        } catch (const std::exception& e) {
            throw std::runtime_error("stage " + std::to_string(s) + ": " + e.what());
        }
    }
    res.report = {{"variant", variant_name(cfg.variant)}, {"config_hash", config_hash(cfg)}, {"stages", stages_report}};
    if (opts.evaluate && res.state.stage >= 2) {
        res.eval = evaluate_splits(res.state, corpus, cfg.world.num_languages);
        res.report["eval"] = to_json(*res.eval);
    }
    return res;
}

}  // namespace csmoe
