// Copyright (c) 2026, The csmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Define-by-run reverse-mode automatic differentiation over csmoe::Tensor.
//
// A Tape records every operation of one forward pass in topological order.
// Var is a lightweight handle (tape, node index). Parameters live outside the
// tape; Tape::parameter() records a leaf whose gradient is accumulated into
// Parameter::grad on backward. A Parameter must outlive every tape that
// references it. Tapes are rebuilt per training step.

#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "csmoe/tensor.hpp"

namespace csmoe {

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { grad = Tensor(value.shape()); }
};

class Tape;

class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    [[nodiscard]] bool valid() const { return tape_ != nullptr; }
    [[nodiscard]] Tape* tape() const { return tape_; }
    [[nodiscard]] std::size_t id() const { return id_; }
    [[nodiscard]] const Tensor& value() const;
    [[nodiscard]] const Shape& shape() const { return value().shape(); }
    /// Gradient of the last backward() with respect to this node (zeros if unreached).
    [[nodiscard]] Tensor grad() const;
    [[nodiscard]] bool requires_grad() const;

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value) {
        nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
        return Var(this, nodes_.size() - 1);
    }

    Var parameter(Parameter& p) {
        nodes_.push_back(Node{p.value, {}, {}, &p, true});
        return Var(this, nodes_.size() - 1);
    }

    /// Records an op. `backward` runs only if some parent requires grad.
    Var record(Tensor value, std::span<const Var> parents, BackwardFn backward) {
        bool needs = false;
        for (const Var& p : parents) {
            assert(p.tape() == this && p.id() < nodes_.size());
            needs = needs || nodes_[p.id()].requires_grad;
        }
        nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : BackwardFn{}, nullptr, needs});
        return Var(this, nodes_.size() - 1);
    }
    Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
        return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(backward));
    }

    [[nodiscard]] const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    [[nodiscard]] std::size_t size() const { return nodes_.size(); }
    [[nodiscard]] bool empty() const { return nodes_.empty(); }

    /// Gradient buffer for a node, allocated on first use.
    Tensor& grad(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.shape() != n.value.shape() || n.grad.empty() != n.value.empty()) {
            n.grad = Tensor(n.value.shape());
        }
        return n.grad;
    }
    [[nodiscard]] Tensor grad_or_zero(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.grad.shape() == n.value.shape() && n.grad.size() == n.value.size() ? n.grad : Tensor(n.value.shape());
    }

    /// Reverse sweep from a scalar loss. Parameter gradients accumulate.
    void backward(const Var& loss) {
        if (nodes_.empty() || !loss.valid()) return;
        if (loss.tape() != this) throw ArgumentError("backward: loss recorded on a different tape");
        if (nodes_[loss.id()].value.size() != 1) {
            throw ArgumentError("backward: loss must be scalar, got shape " + shape_str(nodes_[loss.id()].value.shape()));
        }
        for (Node& n : nodes_) n.grad = Tensor();
        grad(loss.id()).fill(1.0);
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.param) {
                n.param->grad += n.grad;
            } else if (n.backward) {
                // Copy: the callback may grow nothing, but it writes other nodes' grads.
                const Tensor g = n.grad;
                n.backward(*this, g);
            }
        }
    }

    void clear() { nodes_.clear(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        BackwardFn backward;
        Parameter* param;
        bool requires_grad;
    };
    std::deque<Node> nodes_;  // deque: value() references stay valid as the tape grows
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline Tensor Var::grad() const { return tape_->grad_or_zero(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

inline bool is_scalar(const Tensor& t) { return t.size() == 1; }

inline void require_same_tape(const Var& a, const Var& b) {
    if (a.tape() != b.tape()) throw ArgumentError("operands recorded on different tapes");
}

inline void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
    }
}

// Binary elementwise op with exact shapes or a scalar operand.
template <typename Fwd, typename DA, typename DB>
Var binary(const Var& a, const Var& b, const char* name, Fwd fwd, DA da, DB db) {
    require_same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const bool a_scalar = is_scalar(av) && av.shape() != bv.shape();
    const bool b_scalar = is_scalar(bv) && av.shape() != bv.shape();
    if (av.shape() != bv.shape() && !a_scalar && !b_scalar) {
        throw DimensionError(std::string(name) + ": shape mismatch " + shape_str(av.shape()) + " vs " +
                             shape_str(bv.shape()));
    }
    const Tensor& big = a_scalar ? bv : av;
    Tensor out(big.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = fwd(a_scalar ? av[0] : av[i], b_scalar ? bv[0] : bv[i]);
    }
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape()->record(std::move(out), {a, b}, [=](Tape& tape, const Tensor& g) {
        const Tensor& x = tape.value(ia);
        const Tensor& y = tape.value(ib);
        if (tape.requires_grad(ia)) {
            Tensor& gx = tape.grad(ia);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double xv = a_scalar ? x[0] : x[i];
                const double yv = b_scalar ? y[0] : y[i];
                gx[a_scalar ? 0 : i] += g[i] * da(xv, yv);
            }
        }
        if (tape.requires_grad(ib)) {
            Tensor& gy = tape.grad(ib);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double xv = a_scalar ? x[0] : x[i];
                const double yv = b_scalar ? y[0] : y[i];
                gy[b_scalar ? 0 : i] += g[i] * db(xv, yv);
            }
        }
    });
}

template <typename Fwd, typename Deriv>
Var unary(const Var& x, Fwd fwd, Deriv deriv) {
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
    const std::size_t ix = x.id();
    return x.tape()->record(std::move(out), {x}, [=](Tape& tape, const Tensor& g) {
        const Tensor& v = tape.value(ix);
        Tensor& gx = tape.grad(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(v[i]);
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// [p x q] * [q x r] -> [p x r].
inline Var matmul(const Var& a, const Var& b) {
    detail::require_same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0]) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
    }
    const std::size_t p = av.shape()[0], q = av.shape()[1], r = bv.shape()[1];
    Tensor out(Shape{p, r});
    for (std::size_t i = 0; i < p; ++i) {
        double* orow = out.data().data() + i * r;
        for (std::size_t k = 0; k < q; ++k) {
            const double aik = av[i * q + k];
            if (aik == 0.0) continue;
            const double* brow = bv.data().data() + k * r;
            for (std::size_t j = 0; j < r; ++j) orow[j] += aik * brow[j];
        }
    }
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape()->record(std::move(out), {a, b}, [=](Tape& tape, const Tensor& g) {
        const Tensor& A = tape.value(ia);
        const Tensor& B = tape.value(ib);
        if (tape.requires_grad(ia)) {
            // dA = dC * B^T
            Tensor& gA = tape.grad(ia);
            for (std::size_t i = 0; i < p; ++i) {
                for (std::size_t k = 0; k < q; ++k) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < r; ++j) s += g[i * r + j] * B[k * r + j];
                    gA[i * q + k] += s;
                }
            }
        }
        if (tape.requires_grad(ib)) {
            // dB = A^T * dC
            Tensor& gB = tape.grad(ib);
            for (std::size_t i = 0; i < p; ++i) {
                for (std::size_t k = 0; k < q; ++k) {
                    const double aik = A[i * q + k];
                    if (aik == 0.0) continue;
                    for (std::size_t j = 0; j < r; ++j) gB[k * r + j] += aik * g[i * r + j];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
    return detail::binary(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
    return detail::binary(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
    return detail::binary(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline Var div(const Var& a, const Var& b) {
    for (double v : b.value().data()) {
        if (v == 0.0) throw DomainError("div: division by zero");
    }
    return detail::binary(
        a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

inline Var scale(const Var& x, double c) {
    return detail::unary(x, [c](double v) { return c * v; }, [c](double) { return c; });
}

inline Var log(const Var& x) {
    for (double v : x.value().data()) {
        if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
    }
    return detail::unary(x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

/// log(max(1 - x, floor)); zero gradient where the floor is active.
inline Var log1m(const Var& x, double floor = 1e-12) {
    for (double v : x.value().data()) {
        if (!(v <= 1.0)) throw DomainError("log1m: input above 1: " + std::to_string(v));
    }
    return detail::unary(
        x, [floor](double v) { return std::log(std::max(1.0 - v, floor)); },
        [floor](double v) { return 1.0 - v > floor ? -1.0 / (1.0 - v) : 0.0; });
}

inline Var exp(const Var& x) {
    return detail::unary(x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

inline Var relu(const Var& x) {
    return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Var sum(const Var& x) {
    const Tensor& xv = x.value();
    double s = 0.0;
    for (double v : xv.data()) s += v;
    const std::size_t ix = x.id();
    return x.tape()->record(Tensor::scalar(s), {x}, [=](Tape& tape, const Tensor& g) {
        Tensor& gx = tape.grad(ix);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
    });
}

inline Var mean(const Var& x) {
    const std::size_t n = x.value().size();
    if (n == 0) throw DimensionError("mean of empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(n));
}

/// Concatenation along `axis` (0 or 1 for matrices, 0 for vectors).
inline Var concat(std::span<const Var> parts, std::size_t axis = 0) {
    if (parts.empty()) throw ArgumentError("concat: no operands");
    const Tensor& first = parts[0].value();
    if (axis >= std::max<std::size_t>(first.rank(), 1)) {
        throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(first.shape()));
    }
    Shape out_shape = first.shape();
    out_shape[axis] = 0;
    for (const Var& p : parts) {
        detail::require_same_tape(parts[0], p);
        const Tensor& v = p.value();
        for (std::size_t d = 0; d < first.rank(); ++d) {
            if (v.rank() != first.rank() || (d != axis && v.shape()[d] != first.shape()[d])) {
                throw DimensionError("concat: incompatible shapes " + shape_str(first.shape()) + " and " +
                                     shape_str(v.shape()));
            }
        }
        out_shape[axis] += v.shape()[axis];
    }
    Tensor out(out_shape);
    // View every operand as [outer x (axis_len * inner)].
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= out_shape[d];
    for (std::size_t d = axis + 1; d < out_shape.size(); ++d) inner *= out_shape[d];
    const std::size_t out_stride = out_shape[axis] * inner;
    std::vector<std::size_t> ids, offsets, widths;
    std::size_t offset = 0;
    for (const Var& p : parts) {
        const Tensor& v = p.value();
        const std::size_t w = v.shape()[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(v.data().data() + o * w, w, out.data().data() + o * out_stride + offset);
        }
        ids.push_back(p.id());
        offsets.push_back(offset);
        widths.push_back(w);
        offset += w;
    }
    return parts[0].tape()->record(std::move(out), parts, [=](Tape& tape, const Tensor& g) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!tape.requires_grad(ids[k])) continue;
            Tensor& gp = tape.grad(ids[k]);
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t j = 0; j < widths[k]; ++j) {
                    gp[o * widths[k] + j] += g[o * out_stride + offsets[k] + j];
                }
            }
        }
    });
}
inline Var concat(std::initializer_list<Var> parts, std::size_t axis = 0) {
    return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

/// Same data, new shape of equal element count.
inline Var reshape(const Var& x, Shape shape) {
    const Tensor& xv = x.value();
    if (shape_numel(shape) != xv.size()) {
        throw DimensionError("reshape: " + shape_str(xv.shape()) + " to " + shape_str(shape));
    }
    const std::size_t ix = x.id();
    return x.tape()->record(Tensor(std::move(shape), xv.values()), {x}, [=](Tape& tape, const Tensor& g) {
        Tensor& gx = tape.grad(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

/// Rows [begin, end) of a matrix.
inline Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
    const Tensor& xv = x.value();
    detail::require_rank2(xv, "slice_rows");
    if (begin > end || end > xv.rows()) throw DimensionError("slice_rows: range out of bounds");
    const std::size_t c = xv.cols();
    Tensor out(Shape{end - begin, c});
    std::copy_n(xv.data().data() + begin * c, (end - begin) * c, out.data().data());
    const std::size_t ix = x.id();
    return x.tape()->record(std::move(out), {x}, [=](Tape& tape, const Tensor& g) {
        Tensor& gx = tape.grad(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[begin * c + i] += g[i];
    });
}

/// Selected rows of a matrix, in the given order.
inline Var gather_rows(const Var& x, std::vector<std::size_t> rows) {
    const Tensor& xv = x.value();
    detail::require_rank2(xv, "gather_rows");
    const std::size_t c = xv.cols();
    Tensor out(Shape{rows.size(), c});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= xv.rows()) throw DimensionError("gather_rows: row index out of range");
        std::copy_n(xv.data().data() + rows[r] * c, c, out.data().data() + r * c);
    }
    const std::size_t ix = x.id();
    return x.tape()->record(std::move(out), {x}, [=, rows = std::move(rows)](Tape& tape, const Tensor& g) {
        Tensor& gx = tape.grad(ix);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            for (std::size_t j = 0; j < c; ++j) gx[rows[r] * c + j] += g[r * c + j];
        }
    });
}

/// Columns [begin, end) of a matrix.
inline Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
    const Tensor& xv = x.value();
    detail::require_rank2(xv, "slice_cols");
    if (begin > end || end > xv.cols()) throw DimensionError("slice_cols: range out of bounds");
    const std::size_t r = xv.rows(), c = xv.cols(), w = end - begin;
    Tensor out(Shape{r, w});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = xv[i * c + begin + j];
    }
    const std::size_t ix = x.id();
    return x.tape()->record(std::move(out), {x}, [=](Tape& tape, const Tensor& g) {
        Tensor& gx = tape.grad(ix);
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < w; ++j) gx[i * c + begin + j] += g[i * w + j];
        }
    });
}

/// Column sums of a matrix as a [1 x C] row.
inline Var sum_rows(const Var& x) {
    const Tensor& xv = x.value();
    detail::require_rank2(xv, "sum_rows");
    const std::size_t r = xv.rows(), c = xv.cols();
    Tensor out(Shape{1, c});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[j] += xv[i * c + j];
    }
    const std::size_t ix = x.id();
    return x.tape()->record(std::move(out), {x}, [=](Tape& tape, const Tensor& g) {
        Tensor& gx = tape.grad(ix);
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j];
        }
    });
}

inline Var mean_rows(const Var& x) {
    const std::size_t r = x.value().rows();
    if (r == 0) throw DimensionError("mean_rows of a matrix without rows");
    return scale(sum_rows(x), 1.0 / static_cast<double>(r));
}

/// Adds a [1 x C] row to every row of an [R x C] matrix.
inline Var add_row(const Var& x, const Var& row) {
    detail::require_same_tape(x, row);
    const Tensor& xv = x.value();
    const Tensor& rv = row.value();
    detail::require_rank2(xv, "add_row");
    if (rv.size() != xv.cols()) {
        throw DimensionError("add_row: row " + shape_str(rv.shape()) + " vs matrix " + shape_str(xv.shape()));
    }
    const std::size_t r = xv.rows(), c = xv.cols();
    Tensor out = xv;
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] += rv[j];
    }
    const std::size_t ix = x.id(), ir = row.id();
    return x.tape()->record(std::move(out), {x, row}, [=](Tape& tape, const Tensor& g) {
        if (tape.requires_grad(ix)) tape.grad(ix) += g;
        if (tape.requires_grad(ir)) {
            Tensor& gr = tape.grad(ir);
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) gr[j] += g[i * c + j];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization

namespace detail {

// Max-subtracted softmax over `subset` of a row; writes zeros elsewhere.
inline void subset_softmax(std::span<const double> logits, std::span<const std::size_t> subset, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i : subset) mx = std::max(mx, logits[i]);
    double z = 0.0;
    for (std::size_t i : subset) {
        out[i] = std::exp(logits[i] - mx);
        z += out[i];
    }
    for (std::size_t i : subset) out[i] /= z;
}

// d logits_i = p_i (g_i - sum_j p_j g_j) on the subset.
inline void subset_softmax_backward(std::span<const double> p, std::span<const double> g,
                                    std::span<const std::size_t> subset, std::span<double> out) {
    double dot = 0.0;
    for (std::size_t i : subset) dot += p[i] * g[i];
    for (std::size_t i : subset) out[i] += p[i] * (g[i] - dot);
}

}  // namespace detail

/// Softmax over a vector, optionally restricted to `subset` (zeros elsewhere).
inline Var softmax(const Var& logits, std::optional<std::vector<std::size_t>> subset = std::nullopt) {
    const Tensor& lv = logits.value();
    if (lv.rank() != 1) throw DimensionError("softmax: expected a vector, got " + shape_str(lv.shape()));
    const std::size_t n = lv.size();
    std::vector<std::size_t> idx;
    if (subset) {
        if (subset->empty()) throw ArgumentError("softmax: empty subset");
        idx = *subset;
        std::vector<bool> seen(n, false);
        for (std::size_t i : idx) {
            if (i >= n) throw ArgumentError("softmax: subset index " + std::to_string(i) + " out of range");
            if (seen[i]) throw ArgumentError("softmax: duplicate subset index " + std::to_string(i));
            seen[i] = true;
        }
    } else {
        if (n == 0) throw ArgumentError("softmax: empty input");
        idx.resize(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
    }
    Tensor out(lv.shape());
    detail::subset_softmax(lv.data(), idx, out.data());
    const std::size_t il = logits.id(), self = logits.tape()->size();
    return logits.tape()->record(std::move(out), {logits}, [=, idx = std::move(idx)](Tape& tape, const Tensor& g) {
        detail::subset_softmax_backward(tape.value(self).data(), g.data(), idx, tape.grad(il).data());
    });
}

/// Indices of the k largest entries, ties toward the lower index.
inline std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k) {
    if (k == 0 || k > values.size()) {
        throw ArgumentError("top-k: k=" + std::to_string(k) + " outside [1, " + std::to_string(values.size()) + "]");
    }
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
    idx.resize(k);
    return idx;
}

struct RoutedProbs {
    Var probs;                          // [T x N], zero off the selected set
    std::vector<std::size_t> selected;  // T x k, row-major, descending logit order
    std::size_t k = 0;
};

/// Row-wise top-k selection followed by softmax restricted to the selection.
/// The selection is a constant of the forward pass.
inline RoutedProbs topk_softmax_rows(const Var& logits, std::size_t k) {
    const Tensor& lv = logits.value();
    detail::require_rank2(lv, "topk_softmax_rows");
    const std::size_t t = lv.rows(), n = lv.cols();
    if (k == 0 || k > n) throw ArgumentError("top-k: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    std::vector<std::size_t> selected;
    selected.reserve(t * k);
    Tensor out(lv.shape());
    for (std::size_t r = 0; r < t; ++r) {
        const auto top = top_k_indices(lv.row(r), k);
        detail::subset_softmax(lv.row(r), top, out.row(r));
        selected.insert(selected.end(), top.begin(), top.end());
    }
    const std::size_t il = logits.id(), self = logits.tape()->size();
    Var probs = logits.tape()->record(std::move(out), {logits}, [=](Tape& tape, const Tensor& g) {
        const Tensor& p = tape.value(self);
        Tensor& gl = tape.grad(il);
        for (std::size_t r = 0; r < t; ++r) {
            detail::subset_softmax_backward(p.row(r), g.row(r), std::span(selected).subspan(r * k, k), gl.row(r));
        }
    });
    return RoutedProbs{probs, selected, k};
}

/// Mean over rows of -log softmax(logits_t)[target_t].
inline Var cross_entropy(const Var& logits, std::span<const std::size_t> targets) {
    const Tensor& lv = logits.value();
    detail::require_rank2(lv, "cross_entropy");
    const std::size_t t = lv.rows(), v = lv.cols();
    if (targets.size() != t) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(t) +
                             " rows");
    }
    if (t == 0) throw DimensionError("cross_entropy: no positions");
    for (std::size_t y : targets) {
        if (y >= v) throw ArgumentError("cross_entropy: target " + std::to_string(y) + " outside vocab " + std::to_string(v));
    }
    Tensor probs(lv.shape());
    double loss = 0.0;
    for (std::size_t r = 0; r < t; ++r) {
        const auto row = lv.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        const double log_z = mx + std::log(z);
        loss -= row[targets[r]] - log_z;
        for (std::size_t j = 0; j < v; ++j) probs[r * v + j] = std::exp(row[j] - log_z);
    }
    loss /= static_cast<double>(t);
    const std::size_t il = logits.id();
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    return logits.tape()->record(Tensor::scalar(loss), {logits},
                                 [=, probs = std::move(probs), tg = std::move(tg)](Tape& tape, const Tensor& g) {
                                     Tensor& gl = tape.grad(il);
                                     const double s = g[0] / static_cast<double>(t);
                                     for (std::size_t r = 0; r < t; ++r) {
                                         for (std::size_t j = 0; j < v; ++j) {
                                             gl[r * v + j] += s * (probs[r * v + j] - (j == tg[r] ? 1.0 : 0.0));
                                         }
                                     }
                                 });
}

// ---------------------------------------------------------------------------
// Sparse mixture

/// out[t] = sum over selected i of probs[t, i] * (h[t] * experts[i]).
/// Only selected (token, expert) pairs are evaluated or receive gradient.
inline Var moe_mix(const Var& h, std::span<const Var> experts, const RoutedProbs& routed) {
    const Tensor& hv = h.value();
    const Tensor& pv = routed.probs.value();
    detail::require_rank2(hv, "moe_mix");
    const std::size_t t = hv.rows(), w = hv.cols(), n = experts.size(), k = routed.k;
    if (n == 0) throw ArgumentError("moe_mix: no experts");
    if (pv.rows() != t || pv.cols() != n || routed.selected.size() != t * k) {
        throw DimensionError("moe_mix: routing " + shape_str(pv.shape()) + " does not match " + std::to_string(t) +
                             " tokens x " + std::to_string(n) + " experts");
    }
    const Shape& es = experts[0].value().shape();
    if (es.size() != 2 || es[0] != w) {
        throw DimensionError("moe_mix: expert shape " + shape_str(es) + " vs input " + shape_str(hv.shape()));
    }
    const std::size_t d = es[1];
    for (const Var& e : experts) {
        if (e.value().shape() != es) throw DimensionError("moe_mix: experts differ in shape");
        detail::require_same_tape(h, e);
    }
    Tensor out(Shape{t, d});
    // expert outputs cached per selected slot: [t*k x d]
    std::vector<double> cache(t * k * d, 0.0);
    for (std::size_t r = 0; r < t; ++r) {
        const double* hr = hv.data().data() + r * w;
        for (std::size_t s = 0; s < k; ++s) {
            const std::size_t i = routed.selected[r * k + s];
            const Tensor& W = experts[i].value();
            double* e = cache.data() + (r * k + s) * d;
            for (std::size_t a = 0; a < w; ++a) {
                const double ha = hr[a];
                if (ha == 0.0) continue;
                const double* wrow = W.data().data() + a * d;
                for (std::size_t j = 0; j < d; ++j) e[j] += ha * wrow[j];
            }
            const double p = pv[r * n + i];
            for (std::size_t j = 0; j < d; ++j) out[r * d + j] += p * e[j];
        }
    }
    std::vector<Var> parents{h, routed.probs};
    parents.insert(parents.end(), experts.begin(), experts.end());
    std::vector<std::size_t> expert_ids;
    for (const Var& e : experts) expert_ids.push_back(e.id());
    const std::size_t ih = h.id(), ip = routed.probs.id();
    return h.tape()->record(
        std::move(out), parents,
        [=, cache = std::move(cache), sel = routed.selected](Tape& tape, const Tensor& g) {
            const Tensor& H = tape.value(ih);
            const Tensor& P = tape.value(ip);
            const bool need_h = tape.requires_grad(ih);
            const bool need_p = tape.requires_grad(ip);
            for (std::size_t r = 0; r < t; ++r) {
                const double* gr = g.data().data() + r * d;
                for (std::size_t s = 0; s < k; ++s) {
                    const std::size_t i = sel[r * k + s];
                    const double p = P[r * n + i];
                    if (need_p) {
                        const double* e = cache.data() + (r * k + s) * d;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < d; ++j) dot += gr[j] * e[j];
                        tape.grad(ip)[r * n + i] += dot;
                    }
                    const Tensor& W = tape.value(expert_ids[i]);
                    if (need_h) {
                        Tensor& gh = tape.grad(ih);
                        for (std::size_t a = 0; a < w; ++a) {
                            const double* wrow = W.data().data() + a * d;
                            double acc = 0.0;
                            for (std::size_t j = 0; j < d; ++j) acc += wrow[j] * gr[j];
                            gh[r * w + a] += p * acc;
                        }
                    }
                    if (tape.requires_grad(expert_ids[i])) {
                        Tensor& gw = tape.grad(expert_ids[i]);
                        for (std::size_t a = 0; a < w; ++a) {
                            const double ha = p * H[r * w + a];
                            if (ha == 0.0) continue;
                            double* gwrow = gw.data().data() + a * d;
                            for (std::size_t j = 0; j < d; ++j) gwrow[j] += ha * gr[j];
                        }
                    }
                }
            }
        });
}

}  // namespace csmoe
