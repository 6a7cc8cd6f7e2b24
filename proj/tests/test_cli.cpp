// Copyright (c) 2026, The csmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "csmoe/config.hpp"
#include "csmoe/io.hpp"

using namespace csmoe;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "csmoe_test_cli";

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

int cli(const std::string& args, const std::string& tag = "last") {
    const std::string cmd = std::string("\"") + CSMOE_CLI_PATH + "\" " + args + " >\"" + (kRoot / (tag + ".stdout")).string() +
                            "\" 2>\"" + (kRoot / (tag + ".stderr")).string() + "\"";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string err_of(const std::string& tag = "last") { return slurp(kRoot / (tag + ".stderr")); }

nlohmann::json tiny_config_json() {
    return {{"data", {{"train_per_split", 60}, {"val_per_split", 20}, {"cs_train", 60}, {"cs_val", 40}}},
            {"stages",
             {{{"batches", 12}, {"batch_size", 8}},
              {{"batches", 12}, {"batch_size", 8}},
              {{"batches", 12}, {"batch_size", 8}},
              {{"batches", 12}, {"batch_size", 8}}}},
            {"training", {{"aux_per_token_mean", true}}}};
}

const fs::path& tiny_config() {
    static const fs::path p = [] {
        fs::remove_all(kRoot);
        fs::create_directories(kRoot);
        const fs::path path = kRoot / "tiny.json";
        write_json(path, tiny_config_json());
        return path;
    }();
    return p;
}

std::string cfg_arg() { return "--config \"" + tiny_config().string() + "\""; }

std::string out_arg(const std::string& name) { return "--out \"" + (kRoot / name).string() + "\""; }

}  // namespace

TEST_CASE("config JSON round-trip and hashing", "[cli][config]") {
    ExperimentConfig c;
    c.world.separation = 5.5;
    c.top_k = 2;
    c.stages[2].lr = 1e-3;
    c.transition_mode = TransitionMode::sampled;
    c.variant = Variant::conventional_balance;
    const ExperimentConfig back = config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
    CHECK(config_hash(back) == config_hash(c));
    CHECK(config_hash(c).size() == 16);

    ExperimentConfig cosmetic = c;
    cosmetic.out_dir = "somewhere/else";
    CHECK(config_hash(cosmetic) == config_hash(c));
    ExperimentConfig numeric = c;
    numeric.world.noise_sigma = 0.2;
    CHECK(config_hash(numeric) != config_hash(c));
    const auto diff = config_diff(c, numeric);
    REQUIRE(diff.size() == 1);
    CHECK(diff[0].find("noise_sigma") != std::string::npos);

    CHECK_THROWS_AS(config_from_json({{"bogus", 1}}), ArgumentError);
    CHECK_THROWS_AS(config_from_json({{"model", {{"top_k", 99}}}}), ArgumentError);
    CHECK_THROWS_AS(config_from_json({{"variant", "nope"}}), ArgumentError);
    CHECK_THROWS_AS(config_from_json({{"world", {{"d_in", "sixteen"}}}}), ArgumentError);
    CHECK(config_from_json(nlohmann::json::object()).experts_per_group == 3);
    CHECK(config_from_json(nlohmann::json::object()).top_k == 3);

    CHECK(derive_seed(1, {2, 3}) == derive_seed(1, {2, 3}));
    CHECK(derive_seed(1, {2, 3}) != derive_seed(1, {3, 2}));
    CHECK(derive_seed(1, {2}) != derive_seed(2, {2}));
}

TEST_CASE("cli usage errors exit with status 2", "[cli][exit]") {
    (void)tiny_config();
    CHECK(cli("") == 2);
    CHECK(cli("frobnicate") == 2);
    CHECK(cli("train --variant nope " + out_arg("x")) == 2);
    CHECK(cli("train --config \"" + (kRoot / "missing.json").string() + "\" " + out_arg("x")) == 2);
    {
        std::ofstream bad(kRoot / "unknown.json");
        bad << R"({"colour": "blue"})";
    }
    CHECK(cli("train --config \"" + (kRoot / "unknown.json").string() + "\" " + out_arg("x")) == 2);
    CHECK(err_of().find("colour") != std::string::npos);
    CHECK(cli("eval " + cfg_arg() + " " + out_arg("x")) == 2);
    CHECK(cli("train " + cfg_arg() + " --stages 2-1 " + out_arg("x")) == 2);
    CHECK(cli("train " + cfg_arg() + " --stages 3 " + out_arg("x")) == 2);
    CHECK(cli("eval " + cfg_arg() + " --checkpoint \"" + (kRoot / "nowhere").string() + "\" " + out_arg("x")) == 2);
    CHECK(cli("--help") == 0);
}

TEST_CASE("gen-data writes every split deterministically", "[cli][gen-data]") {
    REQUIRE(cli("gen-data " + cfg_arg() + " " + out_arg("data1")) == 0);
    REQUIRE(cli("gen-data " + cfg_arg() + " " + out_arg("data2")) == 0);
    const fs::path d1 = kRoot / "data1", d2 = kRoot / "data2";
    const std::map<std::string, std::size_t> expect{
        {"asr.0.train", 60}, {"asr.1.train", 60}, {"st.0.train", 60}, {"st.1.train", 60}, {"csst.train", 60},
        {"asr.0.val", 20},   {"asr.1.val", 20},   {"st.0.val", 20},   {"st.1.val", 20},   {"csst.val", 40}};
    for (const auto& [name, count] : expect) {
        INFO(name);
        const fs::path f = d1 / (name + ".jsonl");
        REQUIRE(fs::exists(f));
        CHECK(read_jsonl(f).size() == count);
        CHECK(slurp(f) == slurp(d2 / (name + ".jsonl")));
    }
    CHECK(slurp(d1 / "world.json") == slurp(d2 / "world.json"));
    CHECK(fs::exists(d1 / "config.json"));
    const auto rec = read_jsonl(d1 / "csst.val.jsonl").front();
    for (const char* key : {"task", "language", "features", "source_tokens", "targets", "segments"}) CHECK(rec.contains(key));
    CHECK(rec["language"] == "cs");
    CHECK(rec["segments"].size() == 2);
}

TEST_CASE("train, resume, eval and routing-report", "[cli][train]") {
    const std::string cfg = cfg_arg();
    REQUIRE(cli("train " + cfg + " " + out_arg("full")) == 0);
    const fs::path full = kRoot / "full";
    for (int s = 1; s <= 4; ++s) CHECK(fs::exists(full / ("stage" + std::to_string(s) + ".ckpt") / "manifest.json"));
    CHECK(fs::exists(full / "report.json"));
    CHECK(fs::exists(full / "report.csv"));
    CHECK(fs::exists(full / "config.json"));

    std::vector<double> lambdas;
    for (const auto& rec : read_jsonl(full / "metrics.jsonl"))
        if (rec.value("stage", 0) == 4 && rec.contains("lambda")) lambdas.push_back(rec["lambda"].get<double>());
    REQUIRE(lambdas.size() == 12);
    CHECK(lambdas.front() == 1.0 / 12.0);
    CHECK(lambdas.back() == 1.0);

    REQUIRE(cli("train " + cfg + " --stages 1,2 " + out_arg("split")) == 0);
    const fs::path split = kRoot / "split";
    REQUIRE(cli("train " + cfg + " --stages 3-4 --resume \"" + (split / "stage2.ckpt").string() + "\" " +
                out_arg("split")) == 0);
    CHECK(slurp(split / "metrics.jsonl") == slurp(full / "metrics.jsonl"));
    CHECK(read_json(split / "report.json")["eval"] == read_json(full / "report.json")["eval"]);
    for (const auto& entry : fs::directory_iterator(full / "stage4.ckpt" / "params"))
        CHECK(slurp(entry.path()) == slurp(split / "stage4.ckpt" / "params" / entry.path().filename()));

    // a different numeric config refuses the checkpoint and names the difference
    nlohmann::json other = tiny_config_json();
    other["model"] = {{"top_k", 2}};
    write_json(kRoot / "other.json", other);
    CHECK(cli("train --config \"" + (kRoot / "other.json").string() + "\" --stages 3-4 --resume \"" +
              (split / "stage2.ckpt").string() + "\" " + out_arg("mismatch")) == 2);
    CHECK(err_of().find("top_k") != std::string::npos);
    CHECK(cli("eval --config \"" + (kRoot / "other.json").string() + "\" --checkpoint \"" +
              (full / "stage4.ckpt").string() + "\" " + out_arg("mismatch")) == 2);

    // eval: identical bytes twice, Both recomputed from CS and Mono
    const std::string ck = " --checkpoint \"" + (full / "stage4.ckpt").string() + "\" ";
    REQUIRE(cli("eval " + cfg + ck + out_arg("eval1")) == 0);
    REQUIRE(cli("eval " + cfg + ck + out_arg("eval2")) == 0);
    CHECK(slurp(kRoot / "eval1" / "report.json") == slurp(kRoot / "eval2" / "report.json"));
    CHECK(slurp(kRoot / "eval1" / "report.csv") == slurp(kRoot / "eval2" / "report.csv"));
    const auto ev = read_json(kRoot / "eval1" / "report.json")["eval"];
    const double cs_t = ev["cs"]["tokens"].get<double>(), mono_t = ev["mono"]["tokens"].get<double>();
    CHECK(ev["both"]["tokens"].get<double>() == cs_t + mono_t);
    CHECK(ev["both"]["records"].get<double>() == ev["cs"]["records"].get<double>() + ev["mono"]["records"].get<double>());
    const double both_ce = (ev["cs"]["ce"].get<double>() * cs_t + ev["mono"]["ce"].get<double>() * mono_t) / (cs_t + mono_t);
    CHECK_THAT(ev["both"]["ce"].get<double>(), Catch::Matchers::WithinRel(both_ce, 1e-12));
    CHECK(ev == read_json(full / "report.json")["eval"]);

    // stage-2 checkpoint may be evaluated; stage-1 per-language projectors may not
    CHECK(cli("eval " + cfg + " --checkpoint \"" + (full / "stage2.ckpt").string() + "\" " + out_arg("eval_s2")) == 0);
    CHECK(cli("eval " + cfg + " --checkpoint \"" + (full / "stage1.ckpt").string() + "\" " + out_arg("eval_s1")) == 2);

    REQUIRE(cli("routing-report " + cfg + " --checkpoint \"" + (full / "stage2.ckpt").string() + "\" " +
                out_arg("routing")) == 0);
    const auto rr = read_json(kRoot / "routing" / "report.json");
    CHECK(rr["asr_val"]["languages"].size() == 2);
    CHECK(rr.contains("csst_val_oracle_labels"));

    // datasets from gen-data give the same run as in-memory generation
    REQUIRE(cli("train " + cfg + " --data \"" + (kRoot / "data1").string() + "\" " + out_arg("from_files")) == 0);
    CHECK(slurp(kRoot / "from_files" / "metrics.jsonl") == slurp(full / "metrics.jsonl"));
}

TEST_CASE("no-moe variant through the cli", "[cli][train]") {
    REQUIRE(cli("train " + cfg_arg() + " --variant no-moe " + out_arg("nomoe")) == 0);
    const fs::path d = kRoot / "nomoe";
    CHECK(read_json(d / "report.json")["variant"] == "no-moe");
    CHECK(read_json(d / "config.json")["variant"] == "no-moe");
    CHECK(cli("routing-report " + cfg_arg() + " --variant no-moe --checkpoint \"" + (d / "stage4.ckpt").string() +
              "\" " + out_arg("nomoe_routing")) == 2);
    for (const auto& rec : read_jsonl(d / "metrics.jsonl")) {
        CHECK_FALSE(rec.contains("lang"));
        CHECK_FALSE(rec.contains("balance"));
    }
}

TEST_CASE("grad-check command", "[cli][grad-check]") {
    REQUIRE(cli("grad-check --seeds 2 " + out_arg("gc")) == 0);
    const auto r = read_json(kRoot / "gc" / "report.json");
    CHECK(r["pass"] == true);
    std::vector<std::string> names;
    for (const auto& e : r["entries"]) names.push_back(e["name"].get<std::string>());
    CHECK(names == std::vector<std::string>{"ce", "lang", "balance", "conventional", "transition", "stage1_total",
                                            "stage2_total", "stage3_total", "stage4_total"});
    CHECK(cli("grad-check --seeds 2 --tolerance 1e-300 " + out_arg("gc_strict")) == 1);
    CHECK(cli("grad-check --seeds 0 " + out_arg("gc_zero")) == 2);
}

TEST_CASE("ablate command", "[cli][ablate]") {
    REQUIRE(cli("ablate " + cfg_arg() + " --variants full,no-moe --seeds 1,2 " + out_arg("abl")) == 0);
    const auto r = read_json(kRoot / "abl" / "report.json");
    CHECK(r["runs"].size() == 4);
    REQUIRE(r["rows"].size() == 2);
    CHECK(r["rows"][0]["variant"] == "full");
    CHECK(r["rows"][1]["variant"] == "no-moe");
    CHECK(r["rows"][1]["routing_top1_median"].is_null());
    const std::string csv = slurp(kRoot / "abl" / "report.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    CHECK(cli("ablate " + cfg_arg() + " --variants bogus " + out_arg("abl_bad")) == 2);
    CHECK(cli("ablate " + cfg_arg() + " --seeds x " + out_arg("abl_bad")) == 2);
}
