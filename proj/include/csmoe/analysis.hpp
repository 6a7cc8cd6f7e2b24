// Copyright (c) 2026, The csmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Routing and representation diagnostics. All functions are pure.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "csmoe/config.hpp"
#include "csmoe/losses.hpp"
#include "csmoe/routing.hpp"

namespace csmoe {

struct LanguageRouting {
    std::size_t token_layers = 0;              // (token, layer) pairs observed
    double top1_in_group_fraction = 0.0;       // argmax expert in the token's group
    double topk_in_group_mass_fraction = 0.0;  // in-group probability mass
    double topk_in_group_count_fraction = 0.0; // share of selected experts in group
};

struct RoutingStats {
    std::vector<LanguageRouting> languages;
    // group_share[g][i]: share of group-g dispatches (language-g tokens whose
    // argmax lies in group g) that went to the group's i-th expert.
    std::vector<std::vector<double>> group_share;
};

/// Every token needs a concrete (oracle) language label.
inline RoutingStats routing_accuracy(std::span<const RoutingTrace> traces, const GroupMap& groups) {
    const std::size_t m = groups.num_languages(), n = groups.experts_per_group();
    std::vector<double> pairs(m, 0.0), top1(m, 0.0), mass(m, 0.0), count(m, 0.0);
    std::vector<std::vector<double>> share(m, std::vector<double>(n, 0.0));
    for (const auto& tr : traces) {
        if (tr.token_language.size() != tr.num_tokens()) {
            throw ArgumentError("routing_accuracy: trace lacks per-token language labels");
        }
        for (std::size_t l = 0; l < tr.num_layers(); ++l) {
            const Tensor& p = tr.probs(l);
            for (std::size_t t = 0; t < tr.num_tokens(); ++t) {
                const LanguageLabel lang = tr.token_language[t];
                if (!lang.is_concrete()) throw ArgumentError("routing_accuracy: unlabeled token");
                const std::size_t j = lang.index();
                if (j >= m) throw ArgumentError("routing_accuracy: label outside the group map");
                pairs[j] += 1.0;
                const auto row = p.row(t);
                const std::size_t best = argmax(row);
                if (groups.in_group(best, j)) {
                    top1[j] += 1.0;
                    share[j][best - groups.first_expert(j)] += 1.0;
                }
                double in_mass = 0.0;
                for (std::size_t i = 0; i < n; ++i) in_mass += row[groups.first_expert(j) + i];
                mass[j] += in_mass;
                double in_count = 0.0;
                for (std::size_t e : tr.selected(l, t)) in_count += groups.in_group(e, j) ? 1.0 : 0.0;
                count[j] += in_count / static_cast<double>(tr.top_k);
            }
        }
    }
    RoutingStats stats;
    for (std::size_t j = 0; j < m; ++j) {
        LanguageRouting lr;
        lr.token_layers = static_cast<std::size_t>(pairs[j]);
        if (pairs[j] > 0) {
            lr.top1_in_group_fraction = top1[j] / pairs[j];
            lr.topk_in_group_mass_fraction = mass[j] / pairs[j];
            lr.topk_in_group_count_fraction = count[j] / pairs[j];
        }
        stats.languages.push_back(lr);
        double total = 0.0;
        for (double v : share[j]) total += v;
        if (total > 0) {
            for (double& v : share[j]) v /= total;
        }
    }
    stats.group_share = std::move(share);
    return stats;
}

struct ExpertLoad {
    std::vector<double> shares;       // per expert, over all (token, layer) argmax assignments
    std::vector<double> group_ratio;  // per group max/min load; +inf if an expert is dead, NaN if no tokens
    [[nodiscard]] double max_ratio() const {
        double worst = std::numeric_limits<double>::quiet_NaN();
        for (double r : group_ratio) {
            if (std::isnan(r)) continue;
            if (std::isnan(worst) || r > worst) worst = r;
        }
        return worst;
    }
};

/// Argmax load per expert. Group ratios count the group's own-language tokens
/// (and unlabeled tokens) whose argmax falls in the group.
inline ExpertLoad expert_load(std::span<const RoutingTrace> traces, const GroupMap& groups) {
    const std::size_t total_experts = groups.num_experts();
    std::vector<double> all(total_experts, 0.0), own(total_experts, 0.0);
    double pairs = 0.0;
    for (const auto& tr : traces) {
        for (std::size_t l = 0; l < tr.num_layers(); ++l) {
            const Tensor& p = tr.probs(l);
            for (std::size_t t = 0; t < tr.num_tokens(); ++t) {
                const std::size_t best = argmax(p.row(t));
                all[best] += 1.0;
                pairs += 1.0;
                const LanguageLabel lang = tr.language(t);
                if (!lang.is_concrete() || groups.in_group(best, lang.index())) own[best] += 1.0;
            }
        }
    }
    if (pairs == 0.0) throw ArgumentError("expert_load: empty trace batch");
    ExpertLoad load;
    for (double c : all) load.shares.push_back(c / pairs);
    for (std::size_t g = 0; g < groups.num_languages(); ++g) {
        const auto first = own.begin() + static_cast<std::ptrdiff_t>(groups.first_expert(g));
        const auto last = first + static_cast<std::ptrdiff_t>(groups.experts_per_group());
        const double hi = *std::max_element(first, last);
        const double lo = *std::min_element(first, last);
        if (hi == 0.0) load.group_ratio.push_back(std::numeric_limits<double>::quiet_NaN());
        else if (lo == 0.0) load.group_ratio.push_back(std::numeric_limits<double>::infinity());
        else load.group_ratio.push_back(hi / lo);
    }
    return load;
}

struct SeparationPair {
    std::size_t a = 0, b = 0;
    double ratio = 0.0;  // centroid distance / mean intra-cluster spread
};

struct SeparationReport {
    double silhouette = 0.0;
    std::vector<SeparationPair> pairs;
    std::vector<std::size_t> excluded_labels;  // labels with a single sample
};

/// Mean silhouette (Euclidean) plus pairwise centroid-distance / spread.
inline SeparationReport separation_score(std::span<const std::vector<double>> features,
                                         std::span<const std::size_t> labels) {
    if (features.size() != labels.size()) throw DimensionError("separation_score: feature/label count mismatch");
    std::map<std::size_t, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
    SeparationReport rep;
    std::vector<std::size_t> kept_labels;
    for (const auto& [lab, idx] : members) {
        if (idx.size() < 2) rep.excluded_labels.push_back(lab);
        else kept_labels.push_back(lab);
    }
    if (kept_labels.size() < 2) throw ArgumentError("separation_score: need >= 2 labels with >= 2 samples each");

    const auto dist = [&](std::size_t i, std::size_t j) { return detail::distance(features[i], features[j]); };
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t lab : kept_labels) {
        for (std::size_t i : members[lab]) {
            double a = 0.0;
            for (std::size_t j : members[lab]) {
                if (j != i) a += dist(i, j);
            }
            a /= static_cast<double>(members[lab].size() - 1);
            double b = std::numeric_limits<double>::infinity();
            for (std::size_t other : kept_labels) {
                if (other == lab) continue;
                double s = 0.0;
                for (std::size_t j : members[other]) s += dist(i, j);
                b = std::min(b, s / static_cast<double>(members[other].size()));
            }
            const double denom = std::max(a, b);
            total += denom > 0.0 ? (b - a) / denom : 0.0;
            ++counted;
        }
    }
    rep.silhouette = total / static_cast<double>(counted);

    const std::size_t d = features[0].size();
    std::map<std::size_t, std::vector<double>> centroid;
    std::map<std::size_t, double> spread;
    for (std::size_t lab : kept_labels) {
        std::vector<double> c(d, 0.0);
        for (std::size_t i : members[lab]) {
            for (std::size_t k = 0; k < d; ++k) c[k] += features[i][k];
        }
        for (double& v : c) v /= static_cast<double>(members[lab].size());
        double s = 0.0;
        for (std::size_t i : members[lab]) s += detail::distance(features[i], c);
        spread[lab] = s / static_cast<double>(members[lab].size());
        centroid[lab] = std::move(c);
    }
    for (std::size_t x = 0; x < kept_labels.size(); ++x) {
        for (std::size_t y = x + 1; y < kept_labels.size(); ++y) {
            const std::size_t a = kept_labels[x], b = kept_labels[y];
            const double cd = detail::distance(centroid[a], centroid[b]);
            const double sp = 0.5 * (spread[a] + spread[b]);
            rep.pairs.push_back({a, b, sp > 0.0 ? cd / sp : std::numeric_limits<double>::infinity()});
        }
    }
    return rep;
}

/// Mean-pooled feature vector of each utterance with its language index.
inline std::pair<std::vector<std::vector<double>>, std::vector<std::size_t>> pooled_features(
    std::span<const Dataset* const> datasets) {
    std::vector<std::vector<double>> feats;
    std::vector<std::size_t> labels;
    for (const Dataset* ds : datasets) {
        for (const auto& u : ds->utterances) {
            if (!u.language.is_concrete()) continue;
            std::vector<double> mean(u.features.cols(), 0.0);
            for (std::size_t t = 0; t < u.features.rows(); ++t) {
                for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += u.features.at(t, k);
            }
            for (double& v : mean) v /= static_cast<double>(u.features.rows());
            feats.push_back(std::move(mean));
            labels.push_back(u.language.index());
        }
    }
    return {std::move(feats), std::move(labels)};
}

// ---------------------------------------------------------------------------
// Ablation comparison

struct RunSummary {
    Variant variant = Variant::full;
    std::uint64_t seed = 0;
    bool ok = true;
    std::string error;
    double cs_ce = 0.0;
    double cs_accuracy = 0.0;
    double mono_ce = 0.0;
    double mono_accuracy = 0.0;
    std::optional<double> routing_top1;  // min over languages, MoE variants only
    std::optional<double> load_ratio;    // worst group max/min after stage 2
};

struct AblationRow {
    Variant variant = Variant::full;
    std::size_t runs = 0;
    std::size_t failed = 0;
    double cs_ce_median = 0.0, cs_ce_min = 0.0, cs_ce_max = 0.0;
    double cs_accuracy_median = 0.0;
    double mono_ce_median = 0.0;
    std::optional<double> routing_top1_median;
    std::optional<double> load_ratio_median;
};

struct AblationTable {
    std::vector<AblationRow> rows;
    std::vector<std::string> notices;

    [[nodiscard]] const AblationRow* find(Variant v) const {
        for (const auto& r : rows) {
            if (r.variant == v) return &r;
        }
        return nullptr;
    }
};

inline double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

/// One row per variant present, in the fixed full / no-moe / no-aux-losses /
/// conventional-balance order. Failed runs are counted, not used.
inline AblationTable ablation_report(std::span<const RunSummary> runs) {
    AblationTable table;
    for (Variant v : kAllVariants) {
        AblationRow row;
        row.variant = v;
        std::vector<double> ce, acc, mono, top1, ratio;
        for (const auto& r : runs) {
            if (r.variant != v) continue;
            ++row.runs;
            if (!r.ok) {
                ++row.failed;
                table.notices.push_back(std::string(variant_name(v)) + " seed " + std::to_string(r.seed) +
                                        " failed: " + r.error);
                continue;
            }
            ce.push_back(r.cs_ce);
            acc.push_back(r.cs_accuracy);
            mono.push_back(r.mono_ce);
            if (r.routing_top1) top1.push_back(*r.routing_top1);
            if (r.load_ratio) ratio.push_back(*r.load_ratio);
        }
        if (row.runs == 0) {
            table.notices.push_back(std::string("variant ") + variant_name(v) + " has no runs; row omitted");
            continue;
        }
        if (ce.empty()) {
            table.notices.push_back(std::string("variant ") + variant_name(v) + " has no successful runs; row omitted");
            continue;
        }
        row.cs_ce_median = median(ce);
        row.cs_ce_min = *std::min_element(ce.begin(), ce.end());
        row.cs_ce_max = *std::max_element(ce.begin(), ce.end());
        row.cs_accuracy_median = median(acc);
        row.mono_ce_median = median(mono);
        if (!top1.empty()) row.routing_top1_median = median(top1);
        if (!ratio.empty()) row.load_ratio_median = median(ratio);
        table.rows.push_back(row);
    }
    return table;
}

}  // namespace csmoe
