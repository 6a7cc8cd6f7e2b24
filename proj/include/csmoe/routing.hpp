// Copyright (c) 2026, The csmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "csmoe/autodiff.hpp"

namespace csmoe {

/// Language of a token: a concrete index in [0, m) or the code-switched marker.
class LanguageLabel {
public:
    constexpr LanguageLabel() = default;

    static constexpr LanguageLabel of(std::size_t language) { return LanguageLabel(language); }
    static constexpr LanguageLabel code_switched() { return LanguageLabel(); }

    [[nodiscard]] constexpr bool is_concrete() const { return value_ != kUnlabeled; }
    [[nodiscard]] std::size_t index() const {
        if (!is_concrete()) throw ArgumentError("language label is the code-switched marker");
        return value_;
    }
    [[nodiscard]] std::string str() const { return is_concrete() ? std::to_string(value_) : "cs"; }

    friend constexpr bool operator==(LanguageLabel, LanguageLabel) = default;

private:
    static constexpr std::size_t kUnlabeled = std::numeric_limits<std::size_t>::max();
    constexpr explicit LanguageLabel(std::size_t v) : value_(v) {}
    std::size_t value_ = kUnlabeled;
};

/// Expert-to-language layout: expert i belongs to group i / n.
class GroupMap {
public:
    GroupMap(std::size_t num_languages, std::size_t experts_per_group)
        : m_(num_languages), n_(experts_per_group) {
        if (m_ < 1 || n_ < 1) throw ArgumentError("group map: m and n must be >= 1");
    }

    [[nodiscard]] std::size_t num_languages() const { return m_; }
    [[nodiscard]] std::size_t experts_per_group() const { return n_; }
    [[nodiscard]] std::size_t num_experts() const { return m_ * n_; }
    [[nodiscard]] std::size_t group_of(std::size_t expert) const { return expert / n_; }
    [[nodiscard]] std::size_t first_expert(std::size_t group) const { return group * n_; }
    [[nodiscard]] bool in_group(std::size_t expert, std::size_t group) const { return group_of(expert) == group; }

    [[nodiscard]] std::vector<std::size_t> as_vector() const {
        std::vector<std::size_t> out(num_experts());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = group_of(i);
        return out;
    }

private:
    std::size_t m_, n_;
};

/// Per-layer routing of a batch of tokens. layers[l].probs is [T x N] on the
/// tape that produced it, exactly zero off each token's selected set.
struct RoutingTrace {
    std::size_t num_experts = 0;
    std::size_t top_k = 0;
    std::vector<RoutedProbs> layers;
    std::vector<LanguageLabel> token_language;  // empty when unknown

    [[nodiscard]] std::size_t num_layers() const { return layers.size(); }
    [[nodiscard]] std::size_t num_tokens() const { return layers.empty() ? 0 : layers[0].probs.value().rows(); }
    [[nodiscard]] const Tensor& probs(std::size_t layer) const { return layers[layer].probs.value(); }
    [[nodiscard]] std::span<const std::size_t> selected(std::size_t layer, std::size_t token) const {
        return std::span(layers[layer].selected).subspan(token * top_k, top_k);
    }
    [[nodiscard]] LanguageLabel language(std::size_t token) const {
        return token_language.empty() ? LanguageLabel::code_switched() : token_language[token];
    }
};

/// Global argmax of a probability row, ties toward the lower index.
inline std::size_t argmax(std::span<const double> row) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < row.size(); ++i) {
        if (row[i] > row[best]) best = i;
    }
    return best;
}

}  // namespace csmoe
