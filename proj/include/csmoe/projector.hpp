// Copyright (c) 2026, The csmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Speech projectors: the plain bias-free ReLU MLP and the grouped sparse MoE
// projector whose N = n * m experts are organised in one group of n experts
// per language. Expert i belongs to language i / n.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "csmoe/autodiff.hpp"
#include "csmoe/routing.hpp"

namespace csmoe {

struct ProjectorConfig {
    std::size_t d_in = 16;
    std::size_t d_model = 32;
    std::size_t num_layers = 3;

    void validate() const {
        if (num_layers < 1) throw ArgumentError("projector: num_layers must be >= 1");
        if (d_in < 1 || d_model < 1) throw ArgumentError("projector: widths must be >= 1");
    }
    [[nodiscard]] std::size_t layer_input_width(std::size_t l) const { return l == 0 ? d_in : d_model; }
    friend bool operator==(const ProjectorConfig&, const ProjectorConfig&) = default;
};

/// Glorot-uniform matrix.
inline Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor w(Shape{fan_in, fan_out});
    for (double& v : w.data()) v = dist(rng);
    return w;
}

struct MlpProjector {
    ProjectorConfig config;
    std::vector<Parameter> layers;  // layer 0: d_in x d_model, then d_model x d_model

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        for (auto& p : layers) out.push_back(&p);
        return out;
    }
};

inline MlpProjector init_mlp(const ProjectorConfig& config, std::uint64_t seed, const std::string& name = "mlp") {
    config.validate();
    std::mt19937_64 rng(seed);
    MlpProjector proj{config, {}};
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        proj.layers.emplace_back(name + ".layer" + std::to_string(l),
                                 xavier_uniform(config.layer_input_width(l), config.d_model, rng));
    }
    return proj;
}

/// relu(h W) for all but the last layer, h W_L for the last.
inline Var mlp_forward(Tape& tape, MlpProjector& proj, const Var& features) {
    const Tensor& fv = features.value();
    if (fv.rank() != 2 || fv.cols() != proj.config.d_in) {
        throw DimensionError("mlp_forward: features " + shape_str(fv.shape()) + " but d_in=" +
                             std::to_string(proj.config.d_in));
    }
    Var h = features;
    for (std::size_t l = 0; l < proj.layers.size(); ++l) {
        h = matmul(h, tape.parameter(proj.layers[l]));
        if (l + 1 < proj.layers.size()) h = relu(h);
    }
    return h;
}

struct MoeLayer {
    std::vector<Parameter> experts;  // N matrices of equal shape
    Parameter router;                // input width x N

    [[nodiscard]] std::size_t num_experts() const { return experts.size(); }
    [[nodiscard]] std::size_t input_width() const { return router.value.rows(); }
};

struct MoeProjector {
    ProjectorConfig config;
    std::size_t num_languages = 0;      // m
    std::size_t experts_per_group = 0;  // n
    std::size_t top_k = 0;              // k
    std::vector<MoeLayer> layers;

    [[nodiscard]] std::size_t num_experts() const { return num_languages * experts_per_group; }
    [[nodiscard]] GroupMap group_map() const { return GroupMap(num_languages, experts_per_group); }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        for (auto& layer : layers) {
            for (auto& e : layer.experts) out.push_back(&e);
            out.push_back(&layer.router);
        }
        return out;
    }
};

inline std::string expert_param_name(std::size_t layer, std::size_t expert) {
    return "moe.layer" + std::to_string(layer) + ".expert" + std::to_string(expert);
}
inline std::string router_param_name(std::size_t layer) { return "moe.layer" + std::to_string(layer) + ".router"; }

/// Expert j of group g at layer l is a copy of layer l of mlps[g]; routers
/// are Glorot-initialised from `seed`.
inline MoeProjector build_moe_from_pretrained(std::span<const MlpProjector> mlps, std::size_t n, std::size_t k,
                                              std::uint64_t seed) {
    if (mlps.empty()) throw ArgumentError("build_moe_from_pretrained: no pretrained projectors");
    if (n < 1) throw ArgumentError("build_moe_from_pretrained: experts per group must be >= 1");
    const ProjectorConfig& cfg = mlps[0].config;
    for (const auto& mlp : mlps) {
        if (!(mlp.config == cfg) || mlp.layers.size() != cfg.num_layers) {
            throw ArgumentError("build_moe_from_pretrained: pretrained projectors have different configs");
        }
    }
    const std::size_t m = mlps.size();
    const std::size_t total = n * m;
    if (k < 1 || k > total) {
        throw ArgumentError("build_moe_from_pretrained: k=" + std::to_string(k) + " outside [1, " +
                            std::to_string(total) + "]");
    }
    std::mt19937_64 rng(seed);
    MoeProjector proj{cfg, m, n, k, {}};
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        MoeLayer layer;
        for (std::size_t i = 0; i < total; ++i) {
            layer.experts.emplace_back(expert_param_name(l, i), mlps[i / n].layers[l].value);
        }
        layer.router = Parameter(router_param_name(l), xavier_uniform(cfg.layer_input_width(l), total, rng));
        proj.layers.push_back(std::move(layer));
    }
    return proj;
}

/// Routes the rows of `h` ([T x width], or a single [width] token).
inline RoutedProbs route(Tape& tape, MoeLayer& layer, const Var& h, std::size_t k) {
    const Var x = h.value().rank() == 1 ? reshape(h, Shape{1, h.value().size()}) : h;
    if (x.value().rank() != 2 || x.value().cols() != layer.input_width()) {
        throw DimensionError("route: input width " + std::to_string(x.value().cols()) + " vs router " +
                             shape_str(layer.router.value.shape()));
    }
    return topk_softmax_rows(matmul(x, tape.parameter(layer.router)), k);
}

struct MoeLayerOutput {
    Var output;
    RoutedProbs routing;
};

inline MoeLayerOutput moe_layer_forward(Tape& tape, MoeLayer& layer, const Var& h, std::size_t k) {
    const Var x = h.value().rank() == 1 ? reshape(h, Shape{1, h.value().size()}) : h;
    RoutedProbs routing = route(tape, layer, x, k);
    std::vector<Var> experts;
    experts.reserve(layer.experts.size());
    for (auto& e : layer.experts) experts.push_back(tape.parameter(e));
    Var out = moe_mix(x, experts, routing);
    return MoeLayerOutput{out, std::move(routing)};
}

struct MoeForward {
    Var output;
    RoutingTrace trace;
};

/// MoE layers in order, ReLU between layers, none after the last.
inline MoeForward moe_forward(Tape& tape, MoeProjector& proj, const Var& features,
                              std::vector<LanguageLabel> token_language = {}) {
    const Tensor& fv = features.value();
    if (fv.rank() != 2 || fv.cols() != proj.config.d_in) {
        throw DimensionError("moe_forward: features " + shape_str(fv.shape()) + " but d_in=" +
                             std::to_string(proj.config.d_in));
    }
    if (!token_language.empty() && token_language.size() != fv.rows()) {
        throw DimensionError("moe_forward: " + std::to_string(token_language.size()) + " labels for " +
                             std::to_string(fv.rows()) + " tokens");
    }
    RoutingTrace trace;
    trace.num_experts = proj.num_experts();
    trace.top_k = proj.top_k;
    trace.token_language = std::move(token_language);
    Var h = features;
    for (std::size_t l = 0; l < proj.layers.size(); ++l) {
        auto [out, routing] = moe_layer_forward(tape, proj.layers[l], h, proj.top_k);
        trace.layers.push_back(std::move(routing));
        h = l + 1 < proj.layers.size() ? relu(out) : out;
    }
    return MoeForward{h, std::move(trace)};
}

}  // namespace csmoe
