// Copyright (c) 2026, The csmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration and its JSON form.
//
// The config hash covers every field that affects numerics. Cosmetic fields
// (output directory, data directory, thread count) are excluded.

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>

#include <json.hpp>

#include "csmoe/losses.hpp"
#include "csmoe/optim.hpp"
#include "csmoe/projector.hpp"
#include "csmoe/world.hpp"

namespace csmoe {

enum class Variant { full, no_moe, no_aux_losses, conventional_balance };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::no_moe: return "no-moe";
        case Variant::no_aux_losses: return "no-aux-losses";
        case Variant::conventional_balance: return "conventional-balance";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    for (Variant v : {Variant::full, Variant::no_moe, Variant::no_aux_losses, Variant::conventional_balance}) {
        if (s == variant_name(v)) return v;
    }
    throw ArgumentError("unknown variant '" + s + "' (expected full | no-moe | no-aux-losses | conventional-balance)");
}

inline constexpr std::array<Variant, 4> kAllVariants{Variant::full, Variant::no_moe, Variant::no_aux_losses,
                                                     Variant::conventional_balance};

enum class TransitionMode {
    mixed,    // one mini-batch from each dataset, CE terms weighted by lambda
    sampled,  // one mini-batch from the target with probability lambda, else the source
};

struct StageSettings {
    std::size_t batches = 300;
    std::size_t batch_size = 16;
    double lr = 3e-3;

    friend bool operator==(const StageSettings&, const StageSettings&) = default;
};

struct ExperimentConfig {
    WorldConfig world;
    DataConfig data;
    std::size_t d_model = 32;
    std::size_t num_layers = 3;
    std::size_t experts_per_group = 3;  // n
    std::size_t top_k = 3;              // k
    std::size_t prompt_len = 4;
    std::array<StageSettings, 4> stages{};
    TransitionMode transition_mode = TransitionMode::mixed;
    double lang_weight = 1.0;
    double balance_weight = 1.0;
    bool aux_per_token_mean = false;
    std::uint64_t world_seed = 7;
    std::uint64_t data_seed = 11;
    std::uint64_t init_seed = 1;
    std::uint64_t train_seed = 1;
    Variant variant = Variant::full;
    // cosmetic
    std::string out_dir = "out";

    [[nodiscard]] ProjectorConfig projector() const { return ProjectorConfig{world.d_in, d_model, num_layers}; }
    [[nodiscard]] const StageSettings& stage(int s) const { return stages.at(static_cast<std::size_t>(s - 1)); }

    /// Sets the run seed (initialisation and training order); the world and
    /// data seeds are left alone so runs share one synthetic world.
    void set_run_seed(std::uint64_t seed) {
        init_seed = seed;
        train_seed = seed;
    }

    void validate() const {
        projector().validate();
        if (world.num_languages < 2) throw ArgumentError("config: world.num_languages must be >= 2");
        if (experts_per_group < 1) throw ArgumentError("config: experts_per_group must be >= 1");
        const std::size_t total = experts_per_group * world.num_languages;
        if (top_k < 1 || top_k > total) {
            throw ArgumentError("config: top_k=" + std::to_string(top_k) + " must lie in [1, n*m=" +
                                std::to_string(total) + "]");
        }
        if (prompt_len < 1) throw ArgumentError("config: prompt_len must be >= 1");
        for (std::size_t s = 0; s < stages.size(); ++s) {
            if (stages[s].batches < 1 || stages[s].batch_size < 1 || !(stages[s].lr > 0.0)) {
                throw ArgumentError("config: stage " + std::to_string(s + 1) + " needs batches, batch_size, lr > 0");
            }
        }
        if (data.min_length < 2 || data.max_length < data.min_length) {
            throw ArgumentError("config: data lengths must satisfy 2 <= min_length <= max_length");
        }
        if (data.train_per_split < 1 || data.val_per_split < 1 || data.cs_train < 1 || data.cs_val < 1) {
            throw ArgumentError("config: every split needs at least one utterance");
        }
    }
};

inline ExperimentConfig default_config() {
    ExperimentConfig cfg;
    return cfg;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json_numeric(const ExperimentConfig& c) {
    nlohmann::json j;
    j["world"] = {{"num_languages", c.world.num_languages}, {"d_in", c.world.d_in},
                  {"separation", c.world.separation},       {"noise_sigma", c.world.noise_sigma},
                  {"vocab_per_lang", c.world.vocab_per_lang}, {"token_separation", c.world.token_separation}};
    j["data"] = {{"train_per_split", c.data.train_per_split}, {"val_per_split", c.data.val_per_split},
                 {"cs_train", c.data.cs_train},               {"cs_val", c.data.cs_val},
                 {"min_length", c.data.min_length},           {"max_length", c.data.max_length},
                 {"switch_points", c.data.switch_points}};
    j["model"] = {{"d_model", c.d_model},     {"num_layers", c.num_layers}, {"experts_per_group", c.experts_per_group},
                  {"top_k", c.top_k},         {"prompt_len", c.prompt_len}};
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& s : c.stages) stages.push_back({{"batches", s.batches}, {"batch_size", s.batch_size}, {"lr", s.lr}});
    j["stages"] = stages;
    j["training"] = {{"transition_mode", c.transition_mode == TransitionMode::mixed ? "mixed" : "sampled"},
                     {"lang_weight", c.lang_weight},
                     {"balance_weight", c.balance_weight},
                     {"aux_per_token_mean", c.aux_per_token_mean}};
    j["seeds"] = {{"world", c.world_seed}, {"data", c.data_seed}, {"init", c.init_seed}, {"train", c.train_seed}};
    j["variant"] = variant_name(c.variant);
    return j;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json j = to_json_numeric(c);
    j["out_dir"] = c.out_dir;
    return j;
}

namespace detail {

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

/// Missing keys keep their defaults; unknown keys are rejected.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    static const std::array<const char*, 8> known{"world", "data", "model", "stages", "training", "seeds", "variant",
                                                  "out_dir"};
    for (const auto& [key, _] : j.items()) {
        if (std::find_if(known.begin(), known.end(), [&](const char* k) { return key == k; }) == known.end()) {
            throw ArgumentError("config: unknown key '" + key + "'");
        }
    }
    ExperimentConfig c;
    try {
        if (j.contains("world")) {
            const auto& w = j["world"];
            detail::read_opt(w, "num_languages", c.world.num_languages);
            detail::read_opt(w, "d_in", c.world.d_in);
            detail::read_opt(w, "separation", c.world.separation);
            detail::read_opt(w, "noise_sigma", c.world.noise_sigma);
            detail::read_opt(w, "vocab_per_lang", c.world.vocab_per_lang);
            detail::read_opt(w, "token_separation", c.world.token_separation);
        }
        if (j.contains("data")) {
            const auto& d = j["data"];
            detail::read_opt(d, "train_per_split", c.data.train_per_split);
            detail::read_opt(d, "val_per_split", c.data.val_per_split);
            detail::read_opt(d, "cs_train", c.data.cs_train);
            detail::read_opt(d, "cs_val", c.data.cs_val);
            detail::read_opt(d, "min_length", c.data.min_length);
            detail::read_opt(d, "max_length", c.data.max_length);
            detail::read_opt(d, "switch_points", c.data.switch_points);
        }
        if (j.contains("model")) {
            const auto& m = j["model"];
            detail::read_opt(m, "d_model", c.d_model);
            detail::read_opt(m, "num_layers", c.num_layers);
            detail::read_opt(m, "experts_per_group", c.experts_per_group);
            detail::read_opt(m, "top_k", c.top_k);
            detail::read_opt(m, "prompt_len", c.prompt_len);
        }
        if (j.contains("stages")) {
            const auto& s = j["stages"];
            if (!s.is_array() || s.size() != 4) throw ArgumentError("config: 'stages' must list 4 stage settings");
            for (std::size_t i = 0; i < 4; ++i) {
                detail::read_opt(s[i], "batches", c.stages[i].batches);
                detail::read_opt(s[i], "batch_size", c.stages[i].batch_size);
                detail::read_opt(s[i], "lr", c.stages[i].lr);
            }
        }
        if (j.contains("training")) {
            const auto& t = j["training"];
            if (t.contains("transition_mode")) {
                const auto mode = t["transition_mode"].get<std::string>();
                if (mode == "mixed") c.transition_mode = TransitionMode::mixed;
                else if (mode == "sampled") c.transition_mode = TransitionMode::sampled;
                else throw ArgumentError("config: transition_mode must be 'mixed' or 'sampled'");
            }
            detail::read_opt(t, "lang_weight", c.lang_weight);
            detail::read_opt(t, "balance_weight", c.balance_weight);
            detail::read_opt(t, "aux_per_token_mean", c.aux_per_token_mean);
        }
        if (j.contains("seeds")) {
            const auto& s = j["seeds"];
            detail::read_opt(s, "world", c.world_seed);
            detail::read_opt(s, "data", c.data_seed);
            detail::read_opt(s, "init", c.init_seed);
            detail::read_opt(s, "train", c.train_seed);
        }
        if (j.contains("variant")) c.variant = parse_variant(j["variant"].get<std::string>());
        detail::read_opt(j, "out_dir", c.out_dir);
    } catch (const nlohmann::json::exception& e) {
        throw ArgumentError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

/// FNV-1a over the canonical JSON of the numeric fields, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& c) {
    const std::string text = to_json_numeric(c).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

/// Deterministic child seed from a base seed and a path of integers.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint32_t> path) {
    std::vector<std::uint32_t> words{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32)};
    words.insert(words.end(), path.begin(), path.end());
    std::seed_seq seq(words.begin(), words.end());
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

/// Lists leaf paths whose values differ between two configs' numeric JSON.
inline std::vector<std::string> config_diff(const ExperimentConfig& a, const ExperimentConfig& b) {
    std::vector<std::string> out;
    const auto patch = nlohmann::json::diff(to_json_numeric(a), to_json_numeric(b));
    for (const auto& op : patch) {
        std::string line = op.value("path", std::string{});
        if (op.contains("value")) line += " -> " + op["value"].dump();
        out.push_back(line);
    }
    return out;
}

}  // namespace csmoe
