#pragma once

// Dense double-precision tensors with tape-based reverse-mode
// differentiation. A Tape records the forward pass as a flat list of
// nodes in topological order; backward() computes adjoints in a scratch
// buffer per node and then accumulates leaf adjoints into the gradient
// slot of the referenced Tensor. Because the sweep starts from fresh
// scratch buffers every time, calling backward twice without zeroing
// parameter grads doubles them exactly.
//
// Tensors produced by tape ops are immutable once written; a Tape is
// single-writer. Independent tapes may run concurrently.

#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "dream/error.hpp"

namespace dream {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Plain value type; holds parameters and their accumulated gradients.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // same length as data when requires_grad
    bool requires_grad = false;

    Tensor() = default;
    Tensor(Shape s, bool req_grad) : shape(std::move(s)), requires_grad(req_grad) {
        data.assign(shape_numel(shape), 0.0);
        if (requires_grad) grad.assign(data.size(), 0.0);
    }

    static Tensor zeros(Shape s, bool req_grad = false) { return Tensor(std::move(s), req_grad); }

    static Tensor vector(std::vector<double> values, bool req_grad = false) {
        Tensor t;
        t.shape = {values.size()};
        t.data = std::move(values);
        t.requires_grad = req_grad;
        if (req_grad) t.grad.assign(t.data.size(), 0.0);
        return t;
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                         bool req_grad = false) {
        if (values.size() != rows * cols)
            throw DimensionError("Tensor::matrix: value count does not match rows*cols");
        Tensor t;
        t.shape = {rows, cols};
        t.data = std::move(values);
        t.requires_grad = req_grad;
        if (req_grad) t.grad.assign(t.data.size(), 0.0);
        return t;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    void zero_grad() {
        if (!grad.empty()) grad.assign(grad.size(), 0.0);
    }
};

enum class EwOp : std::uint8_t { add, sub, mul, div, tanh_fn, logistic, relu, leaky_relu, sqrt_fn };

inline double logistic_stable(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

constexpr double kLeakySlope = 0.2;

class Tape {
public:
    struct Var {
        std::uint32_t id = 0;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Drops all recorded nodes but keeps buffer capacity for reuse.
    void reset() {
        used_ = 0;
        leaf_cache_.clear();
        touched_rows_.clear();
    }

    std::size_t size() const { return used_; }

    // ---- node creation -------------------------------------------------

    // References a parameter tensor; backward accumulates into t.grad.
    Var leaf(Tensor& t) {
        auto it = leaf_cache_.find(&t);
        if (it != leaf_cache_.end()) return Var{it->second};
        Node& n = fresh(Op::leaf, t.shape);
        n.param = &t;
        n.needs_grad = t.requires_grad;
        leaf_cache_.emplace(&t, n.id);
        return Var{n.id};
    }

    Var constant(std::vector<double> values, Shape shape) {
        if (values.size() != shape_numel(shape))
            throw DimensionError("Tape::constant: values do not match shape");
        Node& n = fresh(Op::constant, std::move(shape));
        n.val = std::move(values);
        return Var{n.id};
    }

    Var constant_scalar(double v) { return constant({v}, {1}); }

    Var constant_vector(std::vector<double> values) {
        Shape s{values.size()};
        return constant(std::move(values), std::move(s));
    }

    // Copies one row of an embedding table onto the tape; backward
    // accumulates into that row of table.grad.
    Var embedding_row(Tensor& table, std::size_t row) {
        if (table.shape.size() != 2) throw DimensionError("embedding_row: table must be 2-D");
        if (row >= table.shape[0]) throw ArgumentError("embedding_row: row out of range");
        const std::size_t d = table.shape[1];
        Node& n = fresh(Op::embedding_row, {d});
        n.param = &table;
        n.row = row;
        n.needs_grad = table.requires_grad;
        n.val.assign(table.data.begin() + static_cast<std::ptrdiff_t>(row * d),
                     table.data.begin() + static_cast<std::ptrdiff_t>((row + 1) * d));
        touched_rows_.emplace_back(&table, row);
        return Var{n.id};
    }

    // Distinct (table, row) pairs looked up since the last reset.
    const std::vector<std::pair<Tensor*, std::size_t>>& touched_rows() const {
        return touched_rows_;
    }

    // ---- ops -----------------------------------------------------------

    Var matmul(Var a, Var b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        if (na.shape.size() != 2 || nb.shape.size() != 2)
            throw DimensionError("matmul: both operands must be 2-D, got " +
                                 shape_str(na.shape) + " and " + shape_str(nb.shape));
        if (na.shape[1] != nb.shape[0])
            throw DimensionError("matmul: inner dimensions disagree: " + shape_str(na.shape) +
                                 " x " + shape_str(nb.shape));
        const std::size_t m = na.shape[0], k = na.shape[1], ncols = nb.shape[1];
        Node& out = fresh(Op::matmul, {m, ncols}, a, b);
        out.val.assign(m * ncols, 0.0);
        const double* A = values(a);
        const double* B = values(b);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double av = A[i * k + kk];
                if (av == 0.0) continue;
                for (std::size_t j = 0; j < ncols; ++j)
                    out.val[i * ncols + j] += av * B[kk * ncols + j];
            }
        return finish(out);
    }

    // W [m x k] times x [k] -> [m].
    Var matvec(Var w, Var x) {
        const Node& nw = node(w);
        const Node& nx = node(x);
        if (nw.shape.size() != 2 || nx.shape.size() != 1)
            throw DimensionError("matvec: need matrix and vector, got " + shape_str(nw.shape) +
                                 " and " + shape_str(nx.shape));
        if (nw.shape[1] != nx.shape[0])
            throw DimensionError("matvec: inner dimensions disagree");
        const std::size_t m = nw.shape[0], k = nw.shape[1];
        Node& out = fresh(Op::matvec, {m}, w, x);
        out.val.assign(m, 0.0);
        const double* W = values(w);
        const double* X = values(x);
        for (std::size_t i = 0; i < m; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j) acc += W[i * k + j] * X[j];
            out.val[i] = acc;
        }
        return finish(out);
    }

    Var elementwise(EwOp op, Var a) {
        const Node& na = node(a);
        Node& out = fresh(op_for(op), na.shape, a);
        out.ew = op;
        const double* A = values(a);
        out.val.resize(na_numel(na));
        for (std::size_t i = 0; i < out.val.size(); ++i) {
            const double x = A[i];
            switch (op) {
                case EwOp::tanh_fn: out.val[i] = std::tanh(x); break;
                case EwOp::logistic: out.val[i] = logistic_stable(x); break;
                case EwOp::relu: out.val[i] = x > 0.0 ? x : 0.0; break;
                case EwOp::leaky_relu: out.val[i] = x > 0.0 ? x : kLeakySlope * x; break;
                case EwOp::sqrt_fn: out.val[i] = std::sqrt(x); break;
                default: throw ArgumentError("elementwise: op tag requires two operands");
            }
        }
        return finish(out);
    }

    Var elementwise(EwOp op, Var a, Var b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        if (na.shape != nb.shape)
            throw DimensionError("elementwise: shape mismatch: " + shape_str(na.shape) + " vs " +
                                 shape_str(nb.shape));
        Node& out = fresh(op_for(op), na.shape, a, b);
        out.ew = op;
        const double* A = values(a);
        const double* B = values(b);
        out.val.resize(na_numel(na));
        for (std::size_t i = 0; i < out.val.size(); ++i) {
            switch (op) {
                case EwOp::add: out.val[i] = A[i] + B[i]; break;
                case EwOp::sub: out.val[i] = A[i] - B[i]; break;
                case EwOp::mul: out.val[i] = A[i] * B[i]; break;
                case EwOp::div: out.val[i] = A[i] / B[i]; break;
                default: throw ArgumentError("elementwise: op tag takes one operand");
            }
        }
        return finish(out);
    }

    Var add(Var a, Var b) { return elementwise(EwOp::add, a, b); }
    Var sub(Var a, Var b) { return elementwise(EwOp::sub, a, b); }
    Var mul(Var a, Var b) { return elementwise(EwOp::mul, a, b); }
    Var div(Var a, Var b) { return elementwise(EwOp::div, a, b); }
    Var tanh_(Var a) { return elementwise(EwOp::tanh_fn, a); }
    Var logistic_(Var a) { return elementwise(EwOp::logistic, a); }
    Var relu(Var a) { return elementwise(EwOp::relu, a); }
    Var leaky_relu(Var a) { return elementwise(EwOp::leaky_relu, a); }
    Var sqrt_(Var a) { return elementwise(EwOp::sqrt_fn, a); }

    // Numerically stable softmax over a vector (max subtraction).
    Var softmax(Var x) {
        const Node& nx = node(x);
        if (nx.shape.size() != 1) throw DimensionError("softmax: input must be 1-D");
        if (nx.shape[0] == 0) throw ArgumentError("softmax: empty input");
        const std::size_t n = nx.shape[0];
        const double* X = values(x);
        double mx = X[0];
        for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, X[i]);
        Node& out = fresh(Op::softmax, nx.shape, x);
        out.val.resize(n);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            out.val[i] = std::exp(X[i] - mx);
            sum += out.val[i];
        }
        for (std::size_t i = 0; i < n; ++i) out.val[i] /= sum;
        return finish(out);
    }

    Var concat(Var a, Var b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        if (na.shape.size() != 1 || nb.shape.size() != 1)
            throw DimensionError("concat: both operands must be 1-D");
        Node& out = fresh(Op::concat, {na.shape[0] + nb.shape[0]}, a, b);
        out.val.resize(na.shape[0] + nb.shape[0]);
        const double* A = values(a);
        const double* B = values(b);
        std::copy(A, A + na.shape[0], out.val.begin());
        std::copy(B, B + nb.shape[0], out.val.begin() + static_cast<std::ptrdiff_t>(na.shape[0]));
        return finish(out);
    }

    Var dot(Var a, Var b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        if (na.shape != nb.shape || na.shape.size() != 1)
            throw DimensionError("dot: operands must be equal-length vectors");
        Node& out = fresh(Op::dot, {1}, a, b);
        const double* A = values(a);
        const double* B = values(b);
        double acc = 0.0;
        for (std::size_t i = 0; i < na.shape[0]; ++i) acc += A[i] * B[i];
        out.val = {acc};
        return finish(out);
    }

    Var sum(Var a) {
        const Node& na = node(a);
        Node& out = fresh(Op::sum, {1}, a);
        const double* A = values(a);
        double acc = 0.0;
        for (std::size_t i = 0; i < na_numel(na); ++i) acc += A[i];
        out.val = {acc};
        return finish(out);
    }

    Var scale(Var a, double c) {
        const Node& na = node(a);
        Node& out = fresh(Op::scale, na.shape, a);
        out.c = c;
        const double* A = values(a);
        out.val.resize(na_numel(na));
        for (std::size_t i = 0; i < out.val.size(); ++i) out.val[i] = A[i] * c;
        return finish(out);
    }

    Var add_n(const std::vector<Var>& vs) {
        if (vs.empty()) throw ArgumentError("add_n: empty operand list");
        const Node& first = node(vs[0]);
        for (const Var& v : vs)
            if (node(v).shape != first.shape) throw DimensionError("add_n: shape mismatch");
        Node& out = fresh(Op::add_n, first.shape);
        for (const Var& v : vs) {
            out.ins.push_back(v.id);
            out.needs_grad = out.needs_grad || node(v).needs_grad;
        }
        out.val.assign(na_numel(first), 0.0);
        for (const Var& v : vs) {
            const double* A = values(v);
            for (std::size_t i = 0; i < out.val.size(); ++i) out.val[i] += A[i];
        }
        return finish(out);
    }

    // Extracts element i of a vector as a scalar node.
    Var slice(Var a, std::size_t i) {
        const Node& na = node(a);
        if (na.shape.size() != 1) throw DimensionError("slice: input must be 1-D");
        if (i >= na.shape[0]) throw ArgumentError("slice: index out of range");
        Node& out = fresh(Op::slice_at, {1}, a);
        out.row = i;
        out.val = {values(a)[i]};
        return finish(out);
    }

    // Repeats a scalar into a length-d vector.
    Var broadcast(Var a, std::size_t d) {
        const Node& na = node(a);
        if (shape_numel(na.shape) != 1) throw DimensionError("broadcast: input must be scalar");
        Node& out = fresh(Op::broadcast_sc, {d}, a);
        out.val.assign(d, values(a)[0]);
        return finish(out);
    }

    // Sum of squared entries; the L2 building block.
    Var square_norm(Var a) {
        const Node& na = node(a);
        Node& out = fresh(Op::square_norm, {1}, a);
        const double* A = values(a);
        double acc = 0.0;
        for (std::size_t i = 0; i < na_numel(na); ++i) acc += A[i] * A[i];
        out.val = {acc};
        return finish(out);
    }

    // Binary cross entropy from a scalar logit, computed in log space.
    Var bce_with_logits(Var logit, double target) {
        const Node& nl = node(logit);
        if (na_numel(nl) != 1) throw DimensionError("bce_with_logits: logit must be scalar");
        Node& out = fresh(Op::bce, {1}, logit);
        out.c = target;
        const double z = values(logit)[0];
        out.val = {std::max(z, 0.0) - z * target + std::log1p(std::exp(-std::abs(z)))};
        return finish(out);
    }

    // ---- access ----------------------------------------------------------

    const Shape& shape(Var v) const { return node(v).shape; }

    const double* values(Var v) const {
        const Node& n = node(v);
        if (n.op == Op::leaf) return n.param->data.data();
        return n.val.data();
    }

    std::vector<double> value_vector(Var v) const {
        const double* p = values(v);
        return std::vector<double>(p, p + shape_numel(node(v).shape));
    }

    double scalar(Var v) const {
        if (shape_numel(node(v).shape) != 1) throw DimensionError("scalar: node is not scalar");
        return values(v)[0];
    }

    // Adjoint of a node after the most recent backward (debug aid).
    std::vector<double> adjoint(Var v) const { return node(v).adj; }

    // ---- backward --------------------------------------------------------

    // Seeds d(loss)/d(loss)=1 and sweeps the tape once in reverse
    // topological order, visiting each reachable op exactly once.
    // Leaf and embedding-row adjoints are accumulated (+=) into the
    // referenced Tensor's grad; callers zero grads between steps.
    void backward(Var loss) {
        Node& ln = mut_node(loss);
        if (shape_numel(ln.shape) != 1)
            throw ArgumentError("backward: loss must be a scalar node");

        // Reachability from the loss, restricted to grad-requiring paths.
        std::vector<bool> live(used_, false);
        live[loss.id] = true;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            if (!live[i]) continue;
            const Node& n = nodes_[i];
            if (n.a != kNone && nodes_[n.a].needs_grad) live[n.a] = true;
            if (n.b != kNone && nodes_[n.b].needs_grad) live[n.b] = true;
            for (std::uint32_t in : n.ins)
                if (nodes_[in].needs_grad) live[in] = true;
        }

        for (std::size_t i = 0; i < used_; ++i)
            if (live[i]) nodes_[i].adj.assign(shape_numel(nodes_[i].shape), 0.0);
        ln.adj.assign(1, 1.0);

        for (std::size_t i = loss.id + 1; i-- > 0;) {
            if (!live[i]) continue;
            propagate(nodes_[i], live);
        }

        for (std::size_t i = 0; i < used_; ++i) {
            if (!live[i]) continue;
            Node& n = nodes_[i];
            if (n.op == Op::leaf && n.param->requires_grad) {
                for (std::size_t j = 0; j < n.adj.size(); ++j) n.param->grad[j] += n.adj[j];
            } else if (n.op == Op::embedding_row && n.param->requires_grad) {
                const std::size_t d = n.param->shape[1];
                for (std::size_t j = 0; j < d; ++j) n.param->grad[n.row * d + j] += n.adj[j];
            }
        }
    }

private:
    enum class Op : std::uint8_t {
        leaf,
        constant,
        embedding_row,
        matmul,
        matvec,
        ew_unary,
        ew_binary,
        softmax,
        concat,
        dot,
        sum,
        scale,
        add_n,
        square_norm,
        bce,
        slice_at,
        broadcast_sc,
    };

    static constexpr std::uint32_t kNone = 0xffffffffu;

    struct Node {
        Op op = Op::constant;
        EwOp ew = EwOp::add;
        bool needs_grad = false;
        std::uint32_t id = 0;
        std::uint32_t a = kNone;
        std::uint32_t b = kNone;
        std::vector<std::uint32_t> ins; // add_n only
        Shape shape;
        std::vector<double> val;
        std::vector<double> adj;
        Tensor* param = nullptr;
        std::size_t row = 0;
        double c = 0.0;
    };

    static Op op_for(EwOp op) {
        switch (op) {
            case EwOp::add:
            case EwOp::sub:
            case EwOp::mul:
            case EwOp::div: return Op::ew_binary;
            default: return Op::ew_unary;
        }
    }

    static std::size_t na_numel(const Node& n) { return shape_numel(n.shape); }

    const Node& node(Var v) const {
        if (v.id >= used_) throw ArgumentError("Tape: stale or foreign node handle");
        return nodes_[v.id];
    }
    Node& mut_node(Var v) {
        if (v.id >= used_) throw ArgumentError("Tape: stale or foreign node handle");
        return nodes_[v.id];
    }

    Node& fresh(Op op, Shape shape, Var a = Var{kNone}, Var b = Var{kNone}) {
        if (used_ == nodes_.size()) nodes_.emplace_back();
        Node& n = nodes_[used_];
        n.op = op;
        n.ew = EwOp::add;
        n.id = static_cast<std::uint32_t>(used_);
        n.a = a.id;
        n.b = b.id;
        n.ins.clear();
        n.shape = std::move(shape);
        n.val.clear();
        n.adj.clear();
        n.param = nullptr;
        n.row = 0;
        n.c = 0.0;
        n.needs_grad = false;
        if (a.id != kNone) n.needs_grad = nodes_[a.id].needs_grad;
        if (b.id != kNone) n.needs_grad = n.needs_grad || nodes_[b.id].needs_grad;
        ++used_;
        return n;
    }

    Var finish(Node& n) {
#ifndef NDEBUG
        const double* p = n.op == Op::leaf ? n.param->data.data() : n.val.data();
        for (std::size_t i = 0; i < shape_numel(n.shape); ++i)
            if (!std::isfinite(p[i]))
                throw NumericError("non-finite value produced by tape op");
#endif
        return Var{n.id};
    }

    void accumulate(std::uint32_t id, const std::vector<bool>& live, std::size_t idx, double v) {
        if (id != kNone && live[id]) nodes_[id].adj[idx] += v;
    }

    void propagate(Node& n, const std::vector<bool>& live) {
        const std::vector<double>& g = n.adj;
        switch (n.op) {
            case Op::leaf:
            case Op::constant:
            case Op::embedding_row: return;
            case Op::matmul: {
                const Node& na = nodes_[n.a];
                const Node& nb = nodes_[n.b];
                const std::size_t m = na.shape[0], k = na.shape[1], ncols = nb.shape[1];
                const double* A = values(Var{n.a});
                const double* B = values(Var{n.b});
                if (live[n.a]) {
                    std::vector<double>& ga = nodes_[n.a].adj;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < ncols; ++j) {
                            const double gv = g[i * ncols + j];
                            if (gv == 0.0) continue;
                            for (std::size_t kk = 0; kk < k; ++kk)
                                ga[i * k + kk] += gv * B[kk * ncols + j];
                        }
                }
                if (live[n.b]) {
                    std::vector<double>& gb = nodes_[n.b].adj;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t kk = 0; kk < k; ++kk) {
                            const double av = A[i * k + kk];
                            if (av == 0.0) continue;
                            for (std::size_t j = 0; j < ncols; ++j)
                                gb[kk * ncols + j] += av * g[i * ncols + j];
                        }
                }
                return;
            }
            case Op::matvec: {
                const Node& nw = nodes_[n.a];
                const std::size_t m = nw.shape[0], k = nw.shape[1];
                const double* W = values(Var{n.a});
                const double* X = values(Var{n.b});
                if (live[n.a]) {
                    std::vector<double>& gw = nodes_[n.a].adj;
                    for (std::size_t i = 0; i < m; ++i) {
                        const double gv = g[i];
                        if (gv == 0.0) continue;
                        for (std::size_t j = 0; j < k; ++j) gw[i * k + j] += gv * X[j];
                    }
                }
                if (live[n.b]) {
                    std::vector<double>& gx = nodes_[n.b].adj;
                    for (std::size_t i = 0; i < m; ++i) {
                        const double gv = g[i];
                        if (gv == 0.0) continue;
                        for (std::size_t j = 0; j < k; ++j) gx[j] += gv * W[i * k + j];
                    }
                }
                return;
            }
            case Op::ew_binary: {
                const double* A = values(Var{n.a});
                const double* B = values(Var{n.b});
                for (std::size_t i = 0; i < g.size(); ++i) {
                    switch (n.ew) {
                        case EwOp::add:
                            accumulate(n.a, live, i, g[i]);
                            accumulate(n.b, live, i, g[i]);
                            break;
                        case EwOp::sub:
                            accumulate(n.a, live, i, g[i]);
                            accumulate(n.b, live, i, -g[i]);
                            break;
                        case EwOp::mul:
                            accumulate(n.a, live, i, g[i] * B[i]);
                            accumulate(n.b, live, i, g[i] * A[i]);
                            break;
                        case EwOp::div:
                            accumulate(n.a, live, i, g[i] / B[i]);
                            accumulate(n.b, live, i, -g[i] * A[i] / (B[i] * B[i]));
                            break;
                        default: break;
                    }
                }
                return;
            }
            case Op::ew_unary: {
                if (!live[n.a]) return;
                const double* A = values(Var{n.a});
                std::vector<double>& ga = nodes_[n.a].adj;
                for (std::size_t i = 0; i < g.size(); ++i) {
                    switch (n.ew) {
                        case EwOp::tanh_fn: ga[i] += g[i] * (1.0 - n.val[i] * n.val[i]); break;
                        case EwOp::logistic: ga[i] += g[i] * n.val[i] * (1.0 - n.val[i]); break;
                        case EwOp::relu: ga[i] += A[i] > 0.0 ? g[i] : 0.0; break;
                        case EwOp::leaky_relu: ga[i] += g[i] * (A[i] > 0.0 ? 1.0 : kLeakySlope); break;
                        case EwOp::sqrt_fn: ga[i] += g[i] * 0.5 / n.val[i]; break;
                        default: break;
                    }
                }
                return;
            }
            case Op::softmax: {
                if (!live[n.a]) return;
                std::vector<double>& ga = nodes_[n.a].adj;
                double dotgy = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) dotgy += g[i] * n.val[i];
                for (std::size_t i = 0; i < g.size(); ++i)
                    ga[i] += n.val[i] * (g[i] - dotgy);
                return;
            }
            case Op::concat: {
                const std::size_t la = nodes_[n.a].shape[0];
                if (live[n.a])
                    for (std::size_t i = 0; i < la; ++i) nodes_[n.a].adj[i] += g[i];
                if (live[n.b])
                    for (std::size_t i = la; i < g.size(); ++i)
                        nodes_[n.b].adj[i - la] += g[i];
                return;
            }
            case Op::dot: {
                const double* A = values(Var{n.a});
                const double* B = values(Var{n.b});
                const double gv = g[0];
                const std::size_t len = nodes_[n.a].shape[0];
                if (live[n.a])
                    for (std::size_t i = 0; i < len; ++i) nodes_[n.a].adj[i] += gv * B[i];
                if (live[n.b])
                    for (std::size_t i = 0; i < len; ++i) nodes_[n.b].adj[i] += gv * A[i];
                return;
            }
            case Op::sum: {
                if (!live[n.a]) return;
                std::vector<double>& ga = nodes_[n.a].adj;
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
                return;
            }
            case Op::scale: {
                if (!live[n.a]) return;
                std::vector<double>& ga = nodes_[n.a].adj;
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.c;
                return;
            }
            case Op::add_n: {
                for (std::uint32_t in : n.ins) {
                    if (!live[in]) continue;
                    std::vector<double>& gi = nodes_[in].adj;
                    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                }
                return;
            }
            case Op::square_norm: {
                if (!live[n.a]) return;
                const double* A = values(Var{n.a});
                std::vector<double>& ga = nodes_[n.a].adj;
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * 2.0 * A[i];
                return;
            }
            case Op::bce: {
                if (!live[n.a]) return;
                const double z = values(Var{n.a})[0];
                nodes_[n.a].adj[0] += g[0] * (logistic_stable(z) - n.c);
                return;
            }
            case Op::slice_at: {
                if (live[n.a]) nodes_[n.a].adj[n.row] += g[0];
                return;
            }
            case Op::broadcast_sc: {
                if (!live[n.a]) return;
                double acc = 0.0;
                for (double gv : g) acc += gv;
                nodes_[n.a].adj[0] += acc;
                return;
            }
        }
    }

    std::deque<Node> nodes_; // deque: references stay valid as nodes are appended
    std::size_t used_ = 0;
    std::unordered_map<const Tensor*, std::uint32_t> leaf_cache_;
    std::vector<std::pair<Tensor*, std::size_t>> touched_rows_;
};

using Var = Tape::Var;

} // namespace dream
