// Copyright (c) 2026, The csmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <numeric>

#include "csmoe/checkpoint.hpp"
#include "csmoe/experiment.hpp"
#include "csmoe/stages.hpp"

using namespace csmoe;
namespace fs = std::filesystem;

namespace {

ExperimentConfig fast_config() {
    ExperimentConfig cfg;
    cfg.data.train_per_split = 120;
    cfg.data.val_per_split = 40;
    cfg.data.cs_train = 120;
    cfg.data.cs_val = 80;
    for (auto& s : cfg.stages) s.batches = 80;
    cfg.aux_per_token_mean = true;
    return cfg;
}

const Experiment& fast_experiment() {
    static const Experiment e = make_experiment(fast_config());
    return e;
}

double mean_of(const std::vector<double>& v, std::size_t begin, std::size_t end) {
    return std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(begin), v.begin() + static_cast<std::ptrdiff_t>(end),
                           0.0) /
           static_cast<double>(end - begin);
}

std::vector<double> field(const std::vector<nlohmann::json>& metrics, int stage, const char* key) {
    std::vector<double> out;
    for (const auto& r : metrics)
        if (r.value("stage", 0) == stage && r.contains(key)) out.push_back(r[key].get<double>());
    return out;
}

bool same_parameters(TrainState& a, TrainState& b) {
    const auto pa = a.parameters(), pb = b.parameters();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (pa[i]->name != pb[i]->name || !(pa[i]->value == pb[i]->value)) return false;
    return true;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("csmoe_test_stages_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("stage plans and loss sets", "[stages][plan]") {
    const ExperimentConfig cfg = fast_config();
    const StagePlan p1 = make_stage_plan(cfg, 1);
    CHECK(p1.source_datasets == std::vector<std::string>{"asr.0.train", "asr.1.train"});
    CHECK(p1.target_datasets.empty());
    const StagePlan p3 = make_stage_plan(cfg, 3);
    CHECK(p3.target_datasets == std::vector<std::string>{"st.0.train", "st.1.train"});
    const StagePlan p4 = make_stage_plan(cfg, 4);
    CHECK(p4.source_datasets == std::vector<std::string>{"st.0.train", "st.1.train"});
    CHECK(p4.target_datasets == std::vector<std::string>{"csst.train"});
    CHECK_THROWS_AS(make_stage_plan(cfg, 5), ArgumentError);

    CHECK(stage_loss_set(2, Variant::full) == LossSet::for_stage(2));
    CHECK(stage_loss_set(2, Variant::no_aux_losses) == LossSet{true, false, false, BalanceKind::none});
    CHECK(stage_loss_set(3, Variant::conventional_balance).balance == BalanceKind::conventional);
    CHECK(stage_loss_set(4, Variant::conventional_balance) == LossSet::for_stage(4));
    for (Variant v : kAllVariants)
        for (int s = 1; s <= 4; ++s) CHECK_NOTHROW(validate_loss_set(s, stage_loss_set(s, v)));

    StagePlan bad = p4;
    bad.loss_set.lang = true;
    CHECK_THROWS_AS(bad.validate(), ArgumentError);
    bad = make_stage_plan(cfg, 2);
    bad.target_datasets = {"st.0.train"};
    CHECK_THROWS_AS(bad.validate(), ArgumentError);
    bad = p3;
    bad.target_datasets.clear();
    CHECK_THROWS_AS(bad.validate(), ArgumentError);
    bad = p3;
    bad.total_batches = 0;
    CHECK_THROWS_AS(bad.validate(), ArgumentError);

    CHECK_THROWS_AS(validate_stage_list({2, 1}), ArgumentError);
    CHECK_THROWS_AS(validate_stage_list({1, 3}), ArgumentError);
    CHECK_THROWS_AS(validate_stage_list({}), ArgumentError);
    CHECK_NOTHROW(validate_stage_list({3, 4}));
}

TEST_CASE("stage 1 trains one projector per language", "[stages][stage1]") {
    const auto& e = fast_experiment();
    const ExperimentConfig cfg = fast_config();
    const StagePlan plan = make_stage_plan(cfg, 1);
    const Stage1Result a = run_stage1(e.corpus, plan, cfg);
    REQUIRE(a.projectors.size() == 2);
    for (const auto& l : a.losses) {
        REQUIRE(l.size() == plan.total_batches);
        CHECK(mean_of(l, l.size() - 10, l.size()) < mean_of(l, 0, 10));
    }
    const Stage1Result b = run_stage1(e.corpus, plan, cfg);
    for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t l = 0; l < cfg.num_layers; ++l)
            CHECK(a.projectors[j].layers[l].value == b.projectors[j].layers[l].value);
    CHECK_FALSE(a.projectors[0].layers[0].value == a.projectors[1].layers[0].value);

    StagePlan wrong = make_stage_plan(cfg, 2);
    CHECK_THROWS_AS(run_stage1(e.corpus, wrong, cfg), ArgumentError);
    Corpus empty = e.corpus;
    empty["asr.1.train"].utterances.clear();
    CHECK_THROWS_AS(run_stage1(empty, plan, cfg), ArgumentError);
}

TEST_CASE("stage 1 with three languages", "[stages][stage1]") {
    ExperimentConfig cfg = fast_config();
    cfg.world.num_languages = 3;
    cfg.data.train_per_split = 30;
    cfg.data.val_per_split = 5;
    cfg.data.cs_train = 5;
    cfg.data.cs_val = 5;
    cfg.stages[0].batches = 5;
    const Experiment e = make_experiment(cfg);
    CHECK(run_stage1(e.corpus, make_stage_plan(cfg, 1), cfg).projectors.size() == 3);
}

TEST_CASE("stages 2 to 4 on the fast world", "[stages][pipeline]") {
    const auto& e = fast_experiment();
    const ExperimentConfig cfg = fast_config();
    const Stage1Result s1 = run_stage1(e.corpus, make_stage_plan(cfg, 1), cfg);

    TrainState st = run_stage2(s1.projectors, e.corpus, make_stage_plan(cfg, 2), cfg);
    REQUIRE(st.is_moe());
    CHECK(st.stage == 2);
    const auto lang = field(st.metrics, 2, "lang");
    REQUIRE(lang.size() == cfg.stage(2).batches);
    CHECK(mean_of(lang, lang.size() - 10, lang.size()) < mean_of(lang, 0, 10));
    CHECK(field(st.metrics, 2, "balance").size() == cfg.stage(2).batches);
    for (const auto& layer : st.moe().layers) {
        CHECK_FALSE(layer.experts[0].value == layer.experts[1].value);
        CHECK_FALSE(layer.experts[3].value == layer.experts[4].value);
    }

    const double st_before = evaluate(st, e.corpus.at("st.0.val")).ce + evaluate(st, e.corpus.at("st.1.val")).ce;
    CHECK_THROWS_AS(run_stage4(st, e.corpus, make_stage_plan(cfg, 4), cfg), ArgumentError);
    st = run_stage3(std::move(st), e.corpus, make_stage_plan(cfg, 3), cfg);
    const double st_after = evaluate(st, e.corpus.at("st.0.val")).ce + evaluate(st, e.corpus.at("st.1.val")).ce;
    CHECK(st_after < st_before);

    const auto lambda = field(st.metrics, 3, "lambda");
    REQUIRE(lambda.size() == cfg.stage(3).batches);
    for (std::size_t i = 1; i < lambda.size(); ++i) CHECK(lambda[i] > lambda[i - 1]);
    CHECK(lambda.back() == 1.0);
    CHECK(field(st.metrics, 3, "lang").size() == lambda.size());

    const double cs_before = evaluate(st, e.corpus.at("csst.val")).ce;
    st = run_stage4(std::move(st), e.corpus, make_stage_plan(cfg, 4), cfg);
    CHECK(evaluate(st, e.corpus.at("csst.val")).ce < cs_before);
    CHECK(field(st.metrics, 4, "lang").empty());
    CHECK(field(st.metrics, 4, "balance").empty());
    CHECK(field(st.metrics, 4, "transition").size() == cfg.stage(4).batches);
}

TEST_CASE("metric records carry the active components", "[stages][metrics]") {
    const auto& e = fast_experiment();
    ExperimentConfig cfg = fast_config();
    for (auto& s : cfg.stages) s.batches = 4;
    cfg.variant = Variant::no_aux_losses;
    const auto r = run_pipeline(cfg, e.corpus, {{1, 2, 3}, std::nullopt, {}, false});
    for (const auto& rec : r.state.metrics) {
        if (rec.contains("probe")) continue;
        CHECK(rec.contains("stage"));
        CHECK(rec.contains("step"));
        CHECK(rec.contains("total"));
        CHECK_FALSE(rec.contains("lang"));
        CHECK_FALSE(rec.contains("balance"));
        if (rec["stage"] == 1) CHECK(rec.contains("language"));
        if (rec["stage"] == 3) {
            CHECK(rec.contains("lambda"));
            CHECK(rec.contains("ce_source"));
            CHECK(rec.contains("ce_target"));
        }
    }

    cfg.variant = Variant::full;
    cfg.transition_mode = TransitionMode::sampled;
    const auto s = run_pipeline(cfg, e.corpus, {{1, 2, 3}, std::nullopt, {}, false});
    std::size_t drawn = 0;
    for (const auto& rec : s.state.metrics) {
        if (rec.value("stage", 0) == 2 && !rec.contains("probe")) {
            CHECK(rec.contains("lang"));
            CHECK(rec.contains("balance"));
        }
        if (rec.value("stage", 0) == 3 && rec.contains("drawn")) ++drawn;
    }
    CHECK(drawn == 4);
}

TEST_CASE("no-moe variant trains one shared projector and skips stage 2", "[stages][pipeline]") {
    const auto& e = fast_experiment();
    ExperimentConfig cfg = fast_config();
    for (auto& s : cfg.stages) s.batches = 10;
    cfg.variant = Variant::no_moe;
    auto r = run_pipeline(cfg, e.corpus);
    CHECK(std::holds_alternative<MlpProjector>(r.state.projector));
    CHECK(field(r.state.metrics, 1, "total").size() == 20);
    bool skipped = false;
    for (const auto& rec : r.state.metrics) skipped |= rec.value("stage", 0) == 2 && rec.value("skipped", false);
    CHECK(skipped);
    CHECK_FALSE(r.stage2_probe.has_value());
    REQUIRE(r.eval.has_value());
    CHECK(r.eval->cs.tokens > 0);
}

TEST_CASE("pipeline is deterministic and resumes bit-identically", "[stages][determinism]") {
    const auto& e = fast_experiment();
    ExperimentConfig cfg = fast_config();
    for (auto& s : cfg.stages) s.batches = 15;
    auto full1 = run_pipeline(cfg, e.corpus);
    auto full2 = run_pipeline(cfg, e.corpus);
    CHECK(same_parameters(full1.state, full2.state));
    CHECK(full1.report.dump() == full2.report.dump());

    const fs::path dir = scratch("resume");
    auto head = run_pipeline(cfg, e.corpus, {{1, 2}, std::nullopt, {}, false});
    save_checkpoint(dir, head.state, cfg);
    TrainState loaded = load_checkpoint(dir, cfg);
    CHECK(loaded.stage == 2);
    auto tail = run_pipeline(cfg, e.corpus, {{3, 4}, std::move(loaded), {}, true});
    CHECK(same_parameters(tail.state, full1.state));
    CHECK(tail.report["eval"].dump() == full1.report["eval"].dump());

    CHECK_THROWS(run_pipeline(cfg, e.corpus, {{3, 4}, std::nullopt, {}, false}));
    fs::remove_all(dir);
}

TEST_CASE("checkpoint round-trip", "[stages][checkpoint]") {
    const auto& e = fast_experiment();
    ExperimentConfig cfg = fast_config();
    for (auto& s : cfg.stages) s.batches = 5;
    auto r = run_pipeline(cfg, e.corpus, {{1, 2, 3}, std::nullopt, {}, false});
    const fs::path dir = scratch("ckpt");
    save_checkpoint(dir, r.state, cfg);
    TrainState back = load_checkpoint(dir, cfg);
    CHECK(same_parameters(back, r.state));
    CHECK(back.stage == 3);
    CHECK(back.batch == r.state.batch);
    CHECK(back.rng == r.state.rng);

    const Batch probe = make_batch(e.corpus.at("csst.val"));
    Tape t1, t2;
    const Tensor y1 = decode(t1, r.state.decoder, project(t1, r.state.projector, t1.constant(probe.features)).output,
                             Task::csst)
                          .value();
    const Tensor y2 =
        decode(t2, back.decoder, project(t2, back.projector, t2.constant(probe.features)).output, Task::csst).value();
    CHECK(y1 == y2);

    ExperimentConfig other = cfg;
    other.d_model = 16;
    try {
        (void)load_checkpoint(dir, other);
        FAIL("expected CheckpointError");
    } catch (const CheckpointError& err) {
        CHECK(std::string(err.what()).find("d_model") != std::string::npos);
    }
    ExperimentConfig cosmetic = cfg;
    cosmetic.out_dir = "elsewhere";
    CHECK_NOTHROW(load_checkpoint(dir, cosmetic));

    // stage-1 state with per-language projectors
    auto s1 = run_pipeline(cfg, e.corpus, {{1}, std::nullopt, {}, false});
    const fs::path dir1 = scratch("ckpt1");
    save_checkpoint(dir1, s1.state, cfg);
    TrainState b1 = load_checkpoint(dir1, cfg);
    CHECK(same_parameters(b1, s1.state));
    CHECK(read_manifest(dir1)["projector"]["kind"] == "mlp-per-language");

    const auto manifest = read_manifest(dir);
    const fs::path victim = dir / manifest["tensors"][0]["file"].get<std::string>();
    fs::resize_file(victim, fs::file_size(victim) - 8);
    CHECK_THROWS_AS(load_checkpoint(dir, cfg), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(scratch("missing"), cfg), CheckpointError);
    fs::remove_all(dir);
    fs::remove_all(dir1);
}

TEST_CASE("evaluation splits are token weighted", "[stages][eval]") {
    const auto& e = fast_experiment();
    ExperimentConfig cfg = fast_config();
    for (auto& s : cfg.stages) s.batches = 5;
    auto r = run_pipeline(cfg, e.corpus, {{1, 2}, std::nullopt, {}, true});
    REQUIRE(r.eval.has_value());
    const auto& ev = *r.eval;
    CHECK(ev.both.tokens == ev.cs.tokens + ev.mono.tokens);
    const double mixed = (ev.cs.ce * ev.cs.tokens + ev.mono.ce * ev.mono.tokens) / static_cast<double>(ev.both.tokens);
    CHECK_THAT(ev.both.ce, Catch::Matchers::WithinRel(mixed, 1e-12));
    CHECK(ev.cs.records == e.corpus.at("csst.val").utterances.size());

    const auto whole = evaluate(r.state, e.corpus.at("csst.val"));
    const auto chunked = score_records(r.state, e.corpus.at("csst.val"), 7);
    const auto small = summarize(std::span(&chunked, 1));
    CHECK_THAT(small.ce, Catch::Matchers::WithinRel(whole.ce, 1e-12));
    CHECK(small.accuracy == whole.accuracy);

    REQUIRE(r.stage2_probe.has_value());
    CHECK(r.stage2_probe->stats.languages.size() == 2);
    CHECK(r.report["stages"]["2"].contains("routing"));
}
