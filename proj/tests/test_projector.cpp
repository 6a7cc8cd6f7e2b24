// Copyright (c) 2026, The csmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "csmoe/projector.hpp"

using namespace csmoe;
using Catch::Matchers::WithinAbs;

namespace {

Tensor gaussian(Shape shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = g(rng);
    return t;
}

// Plain-loop reference implementations.
Tensor ref_matmul(const Tensor& a, const Tensor& b) {
    Tensor c(Shape{a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < a.cols(); ++p) s += a.at(i, p) * b.at(p, j);
            c.at(i, j) = s;
        }
    return c;
}

Tensor ref_relu(Tensor t) {
    for (double& v : t.data()) v = std::max(v, 0.0);
    return t;
}

std::vector<double> ref_row_times(std::span<const double> x, const Tensor& w) {
    std::vector<double> out(w.cols(), 0.0);
    for (std::size_t j = 0; j < w.cols(); ++j)
        for (std::size_t p = 0; p < w.rows(); ++p) out[j] += x[p] * w.at(p, j);
    return out;
}

std::vector<MlpProjector> pretrained(std::size_t m, const ProjectorConfig& pc, std::uint64_t seed) {
    std::vector<MlpProjector> out;
    for (std::size_t j = 0; j < m; ++j) out.push_back(init_mlp(pc, seed + j));
    return out;
}

MoeLayer layer_with_router(Tensor router, std::size_t width, std::size_t out_width, std::uint64_t seed) {
    MoeLayer layer;
    for (std::size_t i = 0; i < router.cols(); ++i) {
        layer.experts.emplace_back("e" + std::to_string(i), gaussian({width, out_width}, seed + i));
    }
    layer.router = Parameter("router", std::move(router));
    return layer;
}

}  // namespace

TEST_CASE("init_mlp shapes and determinism", "[projector][mlp]") {
    const ProjectorConfig pc{4, 8, 3};
    const auto a = init_mlp(pc, 7);
    REQUIRE(a.layers.size() == 3);
    CHECK(a.layers[0].value.shape() == Shape{4, 8});
    CHECK(a.layers[1].value.shape() == Shape{8, 8});
    CHECK(a.layers[2].value.shape() == Shape{8, 8});
    const auto b = init_mlp(pc, 7);
    for (std::size_t l = 0; l < 3; ++l) CHECK(a.layers[l].value == b.layers[l].value);
    const auto c = init_mlp(pc, 8);
    CHECK_FALSE(a.layers[0].value == c.layers[0].value);
    const double bound = std::sqrt(6.0 / 12.0);
    for (double v : a.layers[0].value.data()) CHECK(std::abs(v) <= bound);
    CHECK_THROWS_AS(init_mlp(ProjectorConfig{4, 8, 0}, 1), ArgumentError);
}

TEST_CASE("mlp_forward", "[projector][mlp]") {
    const ProjectorConfig pc{4, 8, 3};
    auto mlp = init_mlp(pc, 3);
    Tape tape;
    const Tensor zeros(Shape{5, 4});
    CHECK(mlp_forward(tape, mlp, tape.constant(zeros)).value() == Tensor(Shape{5, 8}));

    const Tensor x = gaussian({5, 4}, 11);
    Tensor expect = ref_relu(ref_matmul(x, mlp.layers[0].value));
    expect = ref_relu(ref_matmul(expect, mlp.layers[1].value));
    expect = ref_matmul(expect, mlp.layers[2].value);
    const Tensor got = mlp_forward(tape, mlp, tape.constant(x)).value();
    for (std::size_t i = 0; i < got.size(); ++i) CHECK_THAT(got[i], WithinAbs(expect[i], 1e-12));

    auto one = init_mlp(ProjectorConfig{4, 8, 1}, 3);
    const Tensor single = mlp_forward(tape, one, tape.constant(x)).value();
    const Tensor direct = ref_matmul(x, one.layers[0].value);
    for (std::size_t i = 0; i < single.size(); ++i) CHECK_THAT(single[i], WithinAbs(direct[i], 1e-12));

    CHECK_THROWS_AS(mlp_forward(tape, mlp, tape.constant(Tensor(Shape{2, 3}))), DimensionError);
}

TEST_CASE("build_moe_from_pretrained layout and replication", "[projector][moe]") {
    const ProjectorConfig pc{4, 6, 3};
    const auto mlps = pretrained(2, pc, 100);
    const auto moe = build_moe_from_pretrained(mlps, 3, 3, 5);
    CHECK(moe.num_experts() == 6);
    CHECK(moe.top_k == 3);
    CHECK(moe.group_map().as_vector() == std::vector<std::size_t>{0, 0, 0, 1, 1, 1});
    REQUIRE(moe.layers.size() == 3);
    for (std::size_t l = 0; l < 3; ++l) {
        CHECK(moe.layers[l].router.value.shape() == Shape{pc.layer_input_width(l), 6});
        for (std::size_t i = 0; i < 6; ++i) CHECK(moe.layers[l].experts[i].value == mlps[i / 3].layers[l].value);
    }

    CHECK_THROWS_AS(build_moe_from_pretrained(mlps, 3, 7, 5), ArgumentError);
    CHECK_THROWS_AS(build_moe_from_pretrained(mlps, 3, 0, 5), ArgumentError);
    std::vector<MlpProjector> mixed{init_mlp(pc, 1), init_mlp(ProjectorConfig{4, 7, 3}, 2)};
    CHECK_THROWS_AS(build_moe_from_pretrained(mixed, 2, 2, 5), ArgumentError);
}

TEST_CASE("route examples", "[projector][route]") {
    Tape tape;
    // Identity router: logits equal the input token.
    Tensor eye(Shape{4, 4});
    for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
    MoeLayer layer = layer_with_router(eye, 4, 2, 1);

    const auto eq = route(tape, layer, tape.constant(Tensor::vector({0.3, 0.3, 0.3, 0.3})), 2);
    CHECK(eq.selected == std::vector<std::size_t>{0, 1});
    CHECK(eq.probs.value() == Tensor::matrix({{0.5, 0.5, 0, 0}}));

    const auto cf = route(tape, layer, tape.constant(Tensor::vector({std::log(1.0), std::log(3.0), -700, -700})), 2);
    CHECK(cf.selected == std::vector<std::size_t>{1, 0});
    CHECK(cf.probs.value().at(0, 0) == 0.25);
    CHECK(cf.probs.value().at(0, 1) == 0.75);
    CHECK(cf.probs.value().at(0, 2) == 0.0);
    CHECK(cf.probs.value().at(0, 3) == 0.0);

    CHECK_THROWS_AS(route(tape, layer, tape.constant(Tensor::vector({0, 0, 0, 0})), 0), ArgumentError);
    CHECK_THROWS_AS(route(tape, layer, tape.constant(Tensor::vector({0, 0, 0, 0})), 5), ArgumentError);
    CHECK_THROWS_AS(route(tape, layer, tape.constant(Tensor::vector({0, 0, 0})), 2), DimensionError);
}

TEST_CASE("route with k = N equals the dense softmax", "[projector][route]") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        MoeLayer layer = layer_with_router(gaussian({5, 6}, seed), 5, 3, seed);
        const Tensor h = gaussian({7, 5}, seed + 1000);
        Tape tape;
        const Tensor p = route(tape, layer, tape.constant(h), 6).probs.value();
        const Tensor logits = ref_matmul(h, layer.router.value);
        double worst = 0.0;
        for (std::size_t r = 0; r < 7; ++r) {
            double z = 0.0;
            for (std::size_t c = 0; c < 6; ++c) z += std::exp(logits.at(r, c));
            for (std::size_t c = 0; c < 6; ++c) worst = std::max(worst, std::abs(p.at(r, c) - std::exp(logits.at(r, c)) / z));
        }
        CHECK(worst < 1e-12);
    }
}

TEST_CASE("routing probabilities invariants", "[projector][route]") {
    MoeLayer layer = layer_with_router(gaussian({5, 6}, 4), 5, 3, 4);
    const Tensor h = gaussian({50, 5}, 9);
    Tape tape;
    const auto r = route(tape, layer, tape.constant(h), 3);
    for (std::size_t t = 0; t < 50; ++t) {
        const auto sel = std::span(r.selected).subspan(t * 3, 3);
        double total = 0.0;
        for (std::size_t i = 0; i < 6; ++i) {
            const double p = r.probs.value().at(t, i);
            const bool in = std::find(sel.begin(), sel.end(), i) != sel.end();
            if (in) CHECK(p > 0.0);
            else CHECK(p == 0.0);
            total += p;
        }
        CHECK_THAT(total, WithinAbs(1.0, 1e-9));
        CHECK(std::set<std::size_t>(sel.begin(), sel.end()).size() == 3);
    }
    // same token twice routes identically
    Tensor twice(Shape{2, 5});
    for (std::size_t c = 0; c < 5; ++c) twice.at(0, c) = twice.at(1, c) = h.at(3, c);
    const auto rr = route(tape, layer, tape.constant(twice), 3);
    CHECK(std::equal(rr.selected.begin(), rr.selected.begin() + 3, rr.selected.begin() + 3));
}

TEST_CASE("moe_layer_forward degenerate mixtures", "[projector][moe]") {
    MoeLayer layer = layer_with_router(gaussian({4, 5}, 2), 4, 3, 2);
    const Tensor h = gaussian({6, 4}, 3);
    Tape tape;
    const auto out1 = moe_layer_forward(tape, layer, tape.constant(h), 1);
    for (std::size_t t = 0; t < 6; ++t) {
        const std::size_t e = out1.routing.selected[t];
        const auto ref = ref_row_times(h.row(t), layer.experts[e].value);
        for (std::size_t c = 0; c < 3; ++c) CHECK(out1.output.value().at(t, c) == ref[c]);
    }

    // dense mixture oracle for k = N
    const auto dense = moe_layer_forward(tape, layer, tape.constant(h), 5);
    for (std::size_t t = 0; t < 6; ++t) {
        std::vector<double> ref(3, 0.0);
        for (std::size_t e = 0; e < 5; ++e) {
            const auto y = ref_row_times(h.row(t), layer.experts[e].value);
            for (std::size_t c = 0; c < 3; ++c) ref[c] += dense.routing.probs.value().at(t, e) * y[c];
        }
        for (std::size_t c = 0; c < 3; ++c) CHECK_THAT(dense.output.value().at(t, c), WithinAbs(ref[c], 1e-12));
    }

    // identical experts: output independent of the routing weights
    MoeLayer same = layer_with_router(gaussian({4, 5}, 8), 4, 3, 0);
    for (auto& e : same.experts) e.value = same.experts[0].value;
    const auto mixed = moe_layer_forward(tape, same, tape.constant(h), 3);
    const Tensor ref = ref_matmul(h, same.experts[0].value);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK_THAT(mixed.output.value()[i], WithinAbs(ref[i], 1e-12));
}

TEST_CASE("moe_forward with n = m = k = 1 equals the MLP bit-exactly", "[projector][moe]") {
    const ProjectorConfig pc{4, 6, 3};
    const auto mlps = pretrained(1, pc, 40);
    auto moe = build_moe_from_pretrained(mlps, 1, 1, 2);
    auto mlp = mlps[0];
    const Tensor x = gaussian({9, 4}, 1);
    Tape tape;
    const auto fwd = moe_forward(tape, moe, tape.constant(x));
    CHECK(fwd.output.value() == mlp_forward(tape, mlp, tape.constant(x)).value());
    CHECK(fwd.trace.num_layers() == 3);
    CHECK(fwd.trace.num_tokens() == 9);
}

TEST_CASE("moe_forward matches a per-token replay", "[projector][moe]") {
    const ProjectorConfig pc{3, 4, 3};
    std::vector<MlpProjector> mlps{init_mlp(pc, 1), init_mlp(pc, 2)};
    auto moe = build_moe_from_pretrained(mlps, 2, 2, 3);
    for (auto& layer : moe.layers) {
        for (std::size_t i = 0; i < layer.experts.size(); ++i) {
            const Tensor j = gaussian(layer.experts[i].value.shape(), 50 + i);
            for (std::size_t q = 0; q < j.size(); ++q) layer.experts[i].value[q] += 0.2 * j[q];
        }
    }
    const Tensor x = gaussian({5, 3}, 77);
    Tape tape;
    const auto fwd = moe_forward(tape, moe, tape.constant(x));
    for (std::size_t t = 0; t < 5; ++t) {
        std::vector<double> h(x.row(t).begin(), x.row(t).end());
        for (std::size_t l = 0; l < 3; ++l) {
            const auto logits = ref_row_times(h, moe.layers[l].router.value);
            std::vector<std::size_t> idx(logits.size());
            std::iota(idx.begin(), idx.end(), 0);
            std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
            const double mx = logits[idx[0]];
            const double z = std::exp(logits[idx[0]] - mx) + std::exp(logits[idx[1]] - mx);
            std::vector<double> next(4, 0.0);
            for (std::size_t s = 0; s < 2; ++s) {
                const double p = std::exp(logits[idx[s]] - mx) / z;
                const auto y = ref_row_times(h, moe.layers[l].experts[idx[s]].value);
                for (std::size_t c = 0; c < 4; ++c) next[c] += p * y[c];
            }
            if (l + 1 < 3)
                for (double& v : next) v = std::max(v, 0.0);
            h = next;
        }
        for (std::size_t c = 0; c < 4; ++c) CHECK_THAT(fwd.output.value().at(t, c), WithinAbs(h[c], 1e-12));
    }
}

TEST_CASE("swapping same-group experts at init leaves the output unchanged", "[projector][moe]") {
    const ProjectorConfig pc{4, 6, 3};
    const auto mlps = pretrained(2, pc, 10);
    auto a = build_moe_from_pretrained(mlps, 3, 3, 6);
    auto b = a;
    for (auto& layer : b.layers) {
        std::swap(layer.experts[0].value, layer.experts[2].value);
        std::swap(layer.experts[3].value, layer.experts[4].value);
        Tensor& r = layer.router.value;
        for (std::size_t row = 0; row < r.rows(); ++row) {
            std::swap(r.at(row, 0), r.at(row, 2));
            std::swap(r.at(row, 3), r.at(row, 4));
        }
    }
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Tensor x = gaussian({8, 4}, seed);
        Tape tape;
        const Tensor ya = moe_forward(tape, a, tape.constant(x)).output.value();
        const Tensor yb = moe_forward(tape, b, tape.constant(x)).output.value();
        for (std::size_t i = 0; i < ya.size(); ++i) CHECK_THAT(ya[i], WithinAbs(yb[i], 1e-12));
    }
}

TEST_CASE("in-group routing at init preserves the pretrained MLP", "[projector][moe]") {
    const ProjectorConfig pc{4, 6, 3};
    const auto mlps = pretrained(2, pc, 20);
    auto moe = build_moe_from_pretrained(mlps, 3, 3, 1);
    // Force group 1 routing at every layer.
    for (auto& layer : moe.layers) {
        Tensor& r = layer.router.value;
        for (std::size_t row = 0; row < r.rows(); ++row)
            for (std::size_t c = 0; c < 6; ++c) r.at(row, c) = c >= 3 ? 0.0 : -1.0;
    }
    Tensor x = gaussian({6, 4}, 3);
    for (double& v : x.data()) v = std::abs(v) + 0.1;
    Tape tape;
    const auto fwd = moe_forward(tape, moe, tape.constant(x));
    auto mlp = mlps[1];
    const Tensor ref = mlp_forward(tape, mlp, tape.constant(x)).value();
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK_THAT(fwd.output.value()[i], WithinAbs(ref[i], 1e-12));
}

TEST_CASE("non-selected experts receive exactly zero gradient", "[projector][moe]") {
    const ProjectorConfig pc{3, 4, 2};
    std::vector<MlpProjector> mlps{init_mlp(pc, 1), init_mlp(pc, 2)};
    auto moe = build_moe_from_pretrained(mlps, 3, 2, 4);
    const Tensor x = gaussian({1, 3}, 5);
    Tape tape;
    const auto fwd = moe_forward(tape, moe, tape.constant(x));
    tape.backward(sum(mul(fwd.output, fwd.output)));
    for (std::size_t l = 0; l < 2; ++l) {
        const auto sel = fwd.trace.selected(l, 0);
        for (std::size_t e = 0; e < 6; ++e) {
            const bool in = std::find(sel.begin(), sel.end(), e) != sel.end();
            const auto& g = moe.layers[l].experts[e].grad;
            const bool all_zero = std::all_of(g.data().begin(), g.data().end(), [](double v) { return v == 0.0; });
            if (!in) CHECK(all_zero);
        }
    }
}

TEST_CASE("moe_forward errors", "[projector][moe]") {
    const ProjectorConfig pc{3, 4, 2};
    std::vector<MlpProjector> mlps{init_mlp(pc, 1)};
    auto moe = build_moe_from_pretrained(mlps, 2, 1, 4);
    Tape tape;
    CHECK_THROWS_AS(moe_forward(tape, moe, tape.constant(Tensor(Shape{2, 5}))), DimensionError);
    CHECK_THROWS_AS(moe_forward(tape, moe, tape.constant(Tensor(Shape{2, 3})), {LanguageLabel::of(0)}), DimensionError);
}
