// Copyright (c) 2026, The csmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// JSON / JSON-lines persistence for worlds, datasets and metrics.

#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "csmoe/config.hpp"
#include "csmoe/world.hpp"

namespace csmoe {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline nlohmann::json to_json(const Utterance& u) {
    nlohmann::json feats = nlohmann::json::array();
    for (std::size_t t = 0; t < u.features.rows(); ++t) {
        const auto row = u.features.row(t);
        feats.push_back(std::vector<double>(row.begin(), row.end()));
    }
    nlohmann::json segs = nlohmann::json::array();
    for (const auto& s : u.segments) segs.push_back({{"begin", s.begin}, {"end", s.end}, {"language", s.language}});
    return {{"task", task_name(u.task)},   {"language", u.language.str()}, {"features", feats},
            {"source_tokens", u.source_tokens}, {"targets", u.targets},     {"segments", segs}};
}

inline LanguageLabel parse_language(const std::string& s) {
    if (s == "cs") return LanguageLabel::code_switched();
    try {
        std::size_t pos = 0;
        const auto v = std::stoul(s, &pos);
        if (pos == s.size()) return LanguageLabel::of(v);
    } catch (const std::exception&) {
    }
    throw IoError("bad language label '" + s + "'");
}

inline Utterance utterance_from_json(const nlohmann::json& j) {
    Utterance u;
    u.task = parse_task(j.at("task").get<std::string>());
    u.language = parse_language(j.at("language").get<std::string>());
    const auto rows = j.at("features").get<std::vector<std::vector<double>>>();
    if (rows.empty()) throw IoError("utterance without features");
    std::vector<double> flat;
    for (const auto& r : rows) {
        if (r.size() != rows[0].size()) throw IoError("ragged feature rows");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    u.features = Tensor(Shape{rows.size(), rows[0].size()}, std::move(flat));
    u.source_tokens = j.at("source_tokens").get<std::vector<std::size_t>>();
    u.targets = j.at("targets").get<std::vector<std::size_t>>();
    if (u.targets.size() != rows.size()) throw IoError("targets and features disagree on length");
    for (const auto& s : j.at("segments")) {
        u.segments.push_back(Segment{s.at("begin").get<std::size_t>(), s.at("end").get<std::size_t>(),
                                     s.at("language").get<std::size_t>()});
    }
    return u;
}

inline nlohmann::json to_json(const World& w) {
    nlohmann::json langs = nlohmann::json::array();
    for (const auto& l : w.languages) {
        langs.push_back({{"index", l.index},
                         {"centroid", l.centroid},
                         {"noise_sigma", l.noise_sigma},
                         {"vocab_begin", l.vocab_begin},
                         {"vocab_size", l.vocab_size},
                         {"token_embeddings", l.token_embeddings},
                         {"translation", l.translation}});
    }
    return {{"num_languages", w.config.num_languages},
            {"d_in", w.config.d_in},
            {"separation", w.config.separation},
            {"noise_sigma", w.config.noise_sigma},
            {"vocab_per_lang", w.config.vocab_per_lang},
            {"token_separation", w.config.token_separation},
            {"languages", langs}};
}

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

}  // namespace detail

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    auto out = detail::open_out(path);
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& records) {
    auto out = detail::open_out(path);
    for (const auto& r : records) out << r.dump() << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    std::vector<nlohmann::json> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            out.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw IoError(path.string() + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

/// Writes world.json and one <split>.jsonl per dataset.
inline void save_corpus(const std::filesystem::path& dir, const World& world, const Corpus& corpus) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    write_json(dir / "world.json", to_json(world));
    for (const auto& [name, ds] : corpus) {
        auto out = detail::open_out(dir / (name + ".jsonl"));
        for (const auto& u : ds.utterances) out << to_json(u).dump() << '\n';
        if (!out) throw IoError("write failed: " + (dir / (name + ".jsonl")).string());
    }
}

inline Dataset load_dataset(const std::filesystem::path& path) {
    Dataset ds;
    ds.name = path.stem().string();
    for (const auto& rec : read_jsonl(path)) {
        try {
            ds.utterances.push_back(utterance_from_json(rec));
        } catch (const nlohmann::json::exception& e) {
            throw IoError(path.string() + ": " + e.what());
        }
    }
    if (!ds.utterances.empty()) ds.task = ds.utterances.front().task;
    return ds;
}

/// Loads every split the config expects from `dir`.
inline Corpus load_corpus(const std::filesystem::path& dir, const World& world, const DataConfig& dc) {
    Corpus corpus;
    for (const auto& spec : corpus_splits(world, dc)) {
        corpus[spec.name] = load_dataset(dir / (spec.name + ".jsonl"));
        if (corpus[spec.name].utterances.size() != spec.count) {
            throw IoError(spec.name + ".jsonl has " + std::to_string(corpus[spec.name].utterances.size()) +
                          " records, config expects " + std::to_string(spec.count));
        }
    }
    return corpus;
}

}  // namespace csmoe
