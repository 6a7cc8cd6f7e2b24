// Copyright (c) 2026, The csmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "csmoe/autodiff.hpp"

namespace csmoe {

/// Central-difference gradient of a scalar function.
inline Tensor fd_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps = 1e-5) {
    if (!(eps > 0.0)) throw ArgumentError("fd_gradient: eps must be positive");
    Tensor probe = x;
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double fp = f(probe);
        probe[i] = orig - eps;
        const double fm = f(probe);
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("fd_gradient: non-finite evaluation at coordinate " + std::to_string(i));
        }
        out[i] = (fp - fm) / (2.0 * eps);
    }
    return out;
}

/// ||a - b|| / max(||a||, ||b||, floor). The floor keeps two vanishing
/// gradients (round-off against exact zero) from reading as a 100% error.
inline double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-10) {
    if (a.size() != b.size()) throw DimensionError("relative_error: length mismatch");
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double denom = std::max(std::sqrt(std::max(na, nb)), floor);
    return std::sqrt(diff) / denom;
}

/// Builds a scalar loss on a fresh tape from the current parameter values.
using LossBuilder = std::function<Var(Tape&)>;

struct GradientComparison {
    std::vector<double> analytic;
    std::vector<double> numeric;
    double relative_error = 0.0;
};

/// Backward gradients of `build` over all `params` (flattened in order)
/// against central finite differences.
inline GradientComparison compare_gradients(const LossBuilder& build, std::span<Parameter* const> params,
                                            double eps = 1e-5) {
    GradientComparison cmp;
    for (Parameter* p : params) p->zero_grad();
    {
        Tape tape;
        tape.backward(build(tape));
    }
    for (Parameter* p : params) {
        cmp.analytic.insert(cmp.analytic.end(), p->grad.data().begin(), p->grad.data().end());
    }
    const auto eval = [&]() {
        Tape tape;
        return build(tape).value().item();
    };
    for (Parameter* p : params) {
        const Tensor saved = p->value;
        const Tensor g = fd_gradient(
            [&](const Tensor& x) {
                p->value = x;
                return eval();
            },
            saved, eps);
        p->value = saved;
        cmp.numeric.insert(cmp.numeric.end(), g.data().begin(), g.data().end());
    }
    cmp.relative_error = relative_error(cmp.analytic, cmp.numeric);
    return cmp;
}

}  // namespace csmoe
