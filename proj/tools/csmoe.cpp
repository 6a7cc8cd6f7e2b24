// Copyright (c) 2026, The csmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// csmoe: experiment runner for language-grouped MoE projectors.
//
// Exit status: 0 success, 1 check/tolerance failure or failed run,
// 2 usage, config or I/O error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "csmoe/checkpoint.hpp"
#include "csmoe/experiment.hpp"
#include "csmoe/gradcheck_suite.hpp"
#include "csmoe/io.hpp"

namespace fs = std::filesystem;
using namespace csmoe;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Common {
    std::string config_path;
    std::string out = "out";
    std::optional<std::uint64_t> seed;
    std::string variant;
    std::string data_dir;
};

void add_common(CLI::App* cmd, Common& c, bool with_data = true) {
    cmd->add_option("--config", c.config_path, "JSON config file (missing keys keep defaults)");
    cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
    cmd->add_option("--seed", c.seed, "Run seed (initialisation and batch order)");
    cmd->add_option("--variant", c.variant, "full | no-moe | no-aux-losses | conventional-balance");
    if (with_data) cmd->add_option("--data", c.data_dir, "Dataset directory from gen-data (default: generate in memory)");
}

std::size_t thread_cap() {
    const char* env = std::getenv("CSMOE_THREADS");
    if (!env || !*env) return 1;
    try {
        const long v = std::stol(env);
        return v < 1 ? 1 : static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw UsageError(std::string("CSMOE_THREADS must be a positive integer, got '") + env + "'");
    }
}

ExperimentConfig effective_config(const Common& c) {
    ExperimentConfig cfg = c.config_path.empty() ? default_config() : config_from_json(read_json(c.config_path));
    if (c.seed) cfg.set_run_seed(*c.seed);
    if (!c.variant.empty()) cfg.variant = parse_variant(c.variant);
    cfg.out_dir = c.out;
    cfg.validate();
    return cfg;
}

fs::path prepare_out(const ExperimentConfig& cfg) {
    const fs::path out(cfg.out_dir);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
    write_json(out / "config.json", to_json(cfg));
    return out;
}

Corpus obtain_corpus(const ExperimentConfig& cfg, const Common& c) {
    const World world = gen_world(cfg.world, cfg.world_seed);
    if (!c.data_dir.empty()) return load_corpus(c.data_dir, world, cfg.data);
    return gen_corpus(world, cfg.data, cfg.data_seed, thread_cap());
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

/// "1-4", "1,2", "3" -> consecutive stage list.
std::vector<int> parse_stages(const std::string& spec) {
    std::vector<int> out;
    std::stringstream ss(spec);
    std::string part;
    try {
        while (std::getline(ss, part, ',')) {
            const auto dash = part.find('-');
            if (dash == std::string::npos) {
                out.push_back(std::stoi(part));
            } else {
                const int lo = std::stoi(part.substr(0, dash));
                const int hi = std::stoi(part.substr(dash + 1));
                if (hi < lo) throw UsageError("bad stage range '" + part + "'");
                for (int s = lo; s <= hi; ++s) out.push_back(s);
            }
        }
    } catch (const std::invalid_argument&) {
        throw UsageError("bad --stages '" + spec + "'");
    }
    validate_stage_list(out);
    return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& spec, const std::function<T(const std::string&)>& conv) {
    std::vector<T> out;
    std::stringstream ss(spec);
    std::string part;
    while (std::getline(ss, part, ',')) {
        if (!part.empty()) out.push_back(conv(part));
    }
    if (out.empty()) throw UsageError("empty list '" + spec + "'");
    return out;
}

TrainState load_for_eval(const std::string& ckpt, const ExperimentConfig& cfg) {
    TrainState st = load_checkpoint(ckpt, cfg);
    if (std::holds_alternative<std::vector<MlpProjector>>(st.projector)) {
        throw UsageError("checkpoint after stage 1 holds per-language projectors only; evaluate stage 2 or later");
    }
    return st;
}

int cmd_gen_data(const Common& c) {
    const ExperimentConfig cfg = effective_config(c);
    const fs::path out = prepare_out(cfg);
    const World world = gen_world(cfg.world, cfg.world_seed);
    const Corpus corpus = gen_corpus(world, cfg.data, cfg.data_seed, thread_cap());
    save_corpus(out, world, corpus);
    for (const auto& [name, ds] : corpus) std::cout << name << ".jsonl  " << ds.utterances.size() << " records\n";
    return 0;
}

int cmd_train(const Common& c, const std::string& stages_spec, const std::string& resume) {
    const ExperimentConfig cfg = effective_config(c);
    PipelineOptions opts;
    opts.stages = parse_stages(stages_spec);
    if (!resume.empty()) opts.resume = load_checkpoint(resume, cfg);
    const fs::path out = prepare_out(cfg);
    const Corpus corpus = obtain_corpus(cfg, c);
    std::ofstream metrics(out / "metrics.jsonl", std::ios::app);
    if (!metrics) throw IoError("cannot write " + (out / "metrics.jsonl").string());
    std::size_t written = 0;
    opts.on_stage_end = [&](const TrainState& st) {
        for (; written < st.metrics.size(); ++written) metrics << st.metrics[written].dump() << '\n';
        metrics.flush();
        TrainState copy = st;
        const fs::path ckpt = out / ("stage" + std::to_string(st.stage) + ".ckpt");
        save_checkpoint(ckpt, copy, cfg);
        std::cerr << "stage " << st.stage << " done -> " << ckpt.string() << '\n';
    };
    const PipelineResult res = run_pipeline(cfg, corpus, std::move(opts));
    write_json(out / "report.json", res.report);
    if (res.eval) write_text(out / "report.csv", eval_csv(*res.eval));
    std::cout << res.report.dump(2) << '\n';
    return 0;
}

int cmd_eval(const Common& c, const std::string& ckpt) {
    const ExperimentConfig cfg = effective_config(c);
    TrainState st = load_for_eval(ckpt, cfg);
    const fs::path out = prepare_out(cfg);
    const Corpus corpus = obtain_corpus(cfg, c);
    const EvalReport r = evaluate_splits(st, corpus, cfg.world.num_languages);
    const nlohmann::json report{{"config_hash", config_hash(cfg)}, {"stage", st.stage}, {"eval", to_json(r)}};
    write_json(out / "report.json", report);
    write_text(out / "report.csv", eval_csv(r));
    std::cout << eval_csv(r);
    return 0;
}

int cmd_grad_check(const Common& c, std::size_t seeds, double tolerance, double eps) {
    const ExperimentConfig cfg = effective_config(c);
    const fs::path out = prepare_out(cfg);
    GradCheckOptions opts;
    opts.seeds = seeds;
    opts.tolerance = tolerance;
    opts.eps = eps;
    opts.base_seed = cfg.init_seed;
    const GradCheckReport r = run_grad_check(opts);
    write_json(out / "report.json", to_json(r));
    for (const auto& e : r.entries) {
        std::cout << (e.pass ? "PASS " : "FAIL ") << e.name << "  max_rel_err=" << e.max_relative_error << "  ("
                  << e.instances << " instances)\n";
    }
    return r.pass() ? 0 : 1;
}

int cmd_ablate(const Common& c, const std::string& variants_spec, const std::string& seeds_spec) {
    const ExperimentConfig cfg = effective_config(c);
    const auto variants = parse_list<Variant>(variants_spec, parse_variant);
    const auto seeds = parse_list<std::uint64_t>(seeds_spec, [](const std::string& s) {
        try {
            return static_cast<std::uint64_t>(std::stoull(s));
        } catch (const std::exception&) {
            throw UsageError("bad seed '" + s + "'");
        }
    });
    const fs::path out = prepare_out(cfg);
    const Corpus corpus = obtain_corpus(cfg, c);
    const auto runs = run_ablation(cfg, variants, seeds, corpus, [](const RunSummary& r) {
        std::cerr << variant_name(r.variant) << " seed " << r.seed << ": "
                  << (r.ok ? "cs_ce=" + std::to_string(r.cs_ce) : "FAILED " + r.error) << '\n';
    });
    const AblationTable table = ablation_report(runs);
    write_json(out / "report.json", to_json(table, runs));
    write_text(out / "report.csv", ablation_csv(table));
    std::cout << ablation_csv(table);
    for (const auto& n : table.notices) std::cout << "note: " << n << '\n';
    const bool any_failed = std::any_of(runs.begin(), runs.end(), [](const RunSummary& r) { return !r.ok; });
    return any_failed ? 1 : 0;
}

int cmd_routing_report(const Common& c, const std::string& ckpt) {
    const ExperimentConfig cfg = effective_config(c);
    TrainState st = load_for_eval(ckpt, cfg);
    if (!st.is_moe()) throw UsageError("routing-report needs an MoE checkpoint (stage 2 or later, not no-moe)");
    const fs::path out = prepare_out(cfg);
    const Corpus corpus = obtain_corpus(cfg, c);
    const RoutingProbe mono = routing_probe_mono(st, corpus, cfg.world.num_languages);
    const Dataset* cs[] = {&require_split(corpus, split_name(Task::csst, std::nullopt, false))};
    const RoutingProbe cs_probe = routing_probe(st, cs);
    const nlohmann::json report{{"config_hash", config_hash(cfg)},
                                {"stage", st.stage},
                                {"asr_val", to_json(mono)},
                                {"csst_val_oracle_labels", to_json(cs_probe)}};
    write_json(out / "report.json", report);
    write_text(out / "report.csv", routing_csv(mono));
    std::cout << routing_csv(mono);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"csmoe: language-grouped MoE projector experiments"};
    app.require_subcommand(1);
    Common common;

    auto* gen = app.add_subcommand("gen-data", "Write world.json and <split>.jsonl datasets");
    add_common(gen, common, false);

    std::string stages = "1-4", resume, checkpoint;
    auto* train = app.add_subcommand("train", "Run training stages, writing checkpoints and metrics");
    add_common(train, common);
    train->add_option("--stages", stages, "Stages to run, e.g. 1-4 or 1,2")->capture_default_str();
    train->add_option("--resume", resume, "Checkpoint directory to resume from");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the CS / Mono / Both validation splits");
    add_common(eval, common);
    eval->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();

    std::size_t gc_seeds = 20;
    double gc_tol = 1e-4, gc_eps = 1e-5;
    auto* gc = app.add_subcommand("grad-check", "Finite-difference check of every loss and stage objective");
    add_common(gc, common, false);
    gc->add_option("--seeds", gc_seeds, "Random instances per entry")->capture_default_str();
    gc->add_option("--tolerance", gc_tol, "Max relative error")->capture_default_str();
    gc->add_option("--eps", gc_eps, "Central-difference step")->capture_default_str();

    std::string variants = "full,no-moe,no-aux-losses,conventional-balance", seeds = "1,2,3";
    auto* ablate = app.add_subcommand("ablate", "Run the pipeline per (variant, seed) and tabulate");
    add_common(ablate, common);
    ablate->add_option("--variants", variants, "Comma-separated variants")->capture_default_str();
    ablate->add_option("--seeds", seeds, "Comma-separated run seeds")->capture_default_str();

    auto* routing = app.add_subcommand("routing-report", "Routing accuracy and expert load of a checkpoint");
    add_common(routing, common);
    routing->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*gen) return cmd_gen_data(common);
        if (*train) return cmd_train(common, stages, resume);
        if (*eval) return cmd_eval(common, checkpoint);
        if (*gc) return cmd_grad_check(common, gc_seeds, gc_tol, gc_eps);
        if (*ablate) return cmd_ablate(common, variants, seeds);
        if (*routing) return cmd_routing_report(common, checkpoint);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const ArgumentError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const CheckpointError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
