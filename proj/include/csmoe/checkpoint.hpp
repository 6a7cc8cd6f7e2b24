// Copyright (c) 2026, The csmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint directory layout:
//
//   manifest.json        config hash, stage, step, variant, projector kind,
//                        tensor listing with shapes, RNG state
//   params/<name>.bin    raw little-endian IEEE-754 doubles, row-major
//
// Loading rebuilds the projector/decoder from the manifest and refuses a
// checkpoint written under a different config hash.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "csmoe/config.hpp"
#include "csmoe/stages.hpp"

namespace csmoe {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointFormat = 1;

namespace detail {

inline void write_le_doubles(const std::filesystem::path& path, std::span<const double> values) {
    std::vector<unsigned char> bytes(values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint64_t>(values[i]);
        for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to " + path.string());
}

inline std::vector<double> read_le_doubles(const std::filesystem::path& path, std::size_t count) {
    std::error_code ec;
    const auto size = std::filesystem::file_size(path, ec);
    if (ec) throw CheckpointError("missing tensor file " + path.string());
    if (size != count * 8) {
        throw CheckpointError("tensor file " + path.string() + " has " + std::to_string(size) + " bytes, expected " +
                              std::to_string(count * 8));
    }
    std::ifstream in(path, std::ios::binary);
    std::vector<unsigned char> bytes(count * 8);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw CheckpointError("cannot read " + path.string());
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

inline const char* projector_kind(const ProjectorState& p) {
    switch (p.index()) {
        case 0: return "mlp-per-language";
        case 1: return "mlp";
        default: return "moe";
    }
}

inline std::vector<Parameter*> state_parameters(TrainState& st) {
    auto params = st.parameters();
    std::erase_if(params, [](const Parameter* p) { return p->value.size() == 0; });
    return params;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& dir, TrainState& st, const ExperimentConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "params");
    nlohmann::json tensors = nlohmann::json::array();
    for (Parameter* p : detail::state_parameters(st)) {
        const std::string file = "params/" + p->name + ".bin";
        detail::write_le_doubles(dir / file, p->value.data());
        tensors.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"file", file}});
    }
    nlohmann::json proj{{"kind", detail::projector_kind(st.projector)}};
    if (const auto* mlps = std::get_if<std::vector<MlpProjector>>(&st.projector)) proj["count"] = mlps->size();
    if (st.is_moe()) {
        const auto& moe = st.moe();
        proj["num_languages"] = moe.num_languages;
        proj["experts_per_group"] = moe.experts_per_group;
        proj["top_k"] = moe.top_k;
    }
    std::ostringstream rng;
    rng << st.rng;
    const nlohmann::json manifest{{"format", kCheckpointFormat},
                                  {"config_hash", config_hash(cfg)},
                                  {"config", to_json_numeric(cfg)},
                                  {"variant", variant_name(cfg.variant)},
                                  {"stage", st.stage},
                                  {"step", st.batch},
                                  {"projector", proj},
                                  {"has_decoder", st.decoder.head.value.size() > 0},
                                  {"rng", rng.str()},
                                  {"tensors", tensors}};
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << '\n';
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw CheckpointError("no manifest.json in " + dir.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed manifest: ") + e.what());
    }
}

/// Restores a TrainState saved under `cfg`. Metrics are not part of the
/// checkpoint.
inline TrainState load_checkpoint(const std::filesystem::path& dir, const ExperimentConfig& cfg) {
    const nlohmann::json manifest = read_manifest(dir);
    try {
        if (manifest.at("format").get<int>() != kCheckpointFormat) throw CheckpointError("unsupported checkpoint format");
        const auto hash = manifest.at("config_hash").get<std::string>();
        if (hash != config_hash(cfg)) {
            std::string msg = "checkpoint config hash " + hash + " does not match config hash " + config_hash(cfg);
            if (manifest.contains("config")) {
                try {
                    for (const auto& line : config_diff(config_from_json(manifest["config"]), cfg)) msg += "\n  " + line;
                } catch (const std::exception&) {
                }
            }
            throw CheckpointError(msg);
        }
        TrainState st;
        const auto& proj = manifest.at("projector");
        const auto kind = proj.at("kind").get<std::string>();
        const std::size_t vocab = cfg.world.num_languages * cfg.world.vocab_per_lang + cfg.world.vocab_per_lang;
        if (kind == "mlp-per-language") {
            std::vector<MlpProjector> mlps;
            for (std::size_t j = 0; j < proj.at("count").get<std::size_t>(); ++j) {
                mlps.push_back(init_mlp(cfg.projector(), 0, "mlp" + std::to_string(j)));
            }
            st.projector = std::move(mlps);
        } else if (kind == "mlp") {
            st.projector = init_mlp(cfg.projector(), 0, "mlp");
        } else if (kind == "moe") {
            std::vector<MlpProjector> mlps(proj.at("num_languages").get<std::size_t>(), init_mlp(cfg.projector(), 0));
            st.projector = build_moe_from_pretrained(mlps, proj.at("experts_per_group").get<std::size_t>(),
                                                     proj.at("top_k").get<std::size_t>(), 0);
        } else {
            throw CheckpointError("unknown projector kind '" + kind + "'");
        }
        if (manifest.at("has_decoder").get<bool>()) st.decoder = init_decoder(cfg.d_model, cfg.prompt_len, vocab, 0);
        st.stage = manifest.at("stage").get<int>();
        st.batch = manifest.at("step").get<std::size_t>();
        std::istringstream rng(manifest.at("rng").get<std::string>());
        rng >> st.rng;
        if (!rng) throw CheckpointError("malformed RNG state");

        std::map<std::string, const nlohmann::json*> listed;
        for (const auto& t : manifest.at("tensors")) listed[t.at("name").get<std::string>()] = &t;
        const auto params = detail::state_parameters(st);
        if (params.size() != listed.size()) {
            throw CheckpointError("checkpoint lists " + std::to_string(listed.size()) + " tensors, model has " +
                                  std::to_string(params.size()));
        }
        for (Parameter* p : params) {
            const auto it = listed.find(p->name);
            if (it == listed.end()) throw CheckpointError("checkpoint lacks tensor " + p->name);
            const auto shape = it->second->at("shape").get<Shape>();
            if (shape != p->value.shape()) {
                throw CheckpointError("tensor " + p->name + " has shape " + shape_str(shape) + ", expected " +
                                      shape_str(p->value.shape()));
            }
            p->value = Tensor(shape, detail::read_le_doubles(dir / it->second->at("file").get<std::string>(),
                                                             shape_numel(shape)));
            p->zero_grad();
        }
        return st;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed manifest: ") + e.what());
    }
}

}  // namespace csmoe
