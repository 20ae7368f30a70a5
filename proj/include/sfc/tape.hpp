#pragma once

// Recorded computation graphs with reverse-mode differentiation.
//
// A Tape is an immutable, ordered list of primitive operations built once and
// then evaluated any number of times on different inputs. Hook nodes are
// identity operations whose values can be overridden per evaluation (element
// sets, keep-masks, or full replacement); gradients are taken with respect to
// the hook's *output*, i.e. the value actually used downstream.
//
// All reductions run sequentially over the last axis, so two evaluations on
// identical inputs are bit-identical.

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "sfc/tensor.hpp"

namespace sfc {

using NodeId = int;

enum class Op {
    Input,
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    MatMul,     // C[m,n] = A[m,k] B[k,n]
    MatMulNT,   // C[m,n] = A[m,k] B[n,k]^T
    Relu,
    LayerNorm,  // (x[m,n], gain[n], bias[n]); cval = eps
    CausalSoftmax,
    SoftmaxVec,
    Embed,      // (table[V,d], ids[T]) -> [T,d]; ids hold integer token ids
    SliceCols,
    ConcatCols,
    Row,        // -> [1,n]
    RowsRange,
    Element,    // -> scalar
    IndexSumDiff,
    CrossEntropyRows,  // (logits[m,V], targets[m]) -> scalar mean NLL
    SumAll,
    Hook,
    StopGrad,
};

struct Node {
    Op op;
    std::vector<NodeId> args;
    std::vector<std::size_t> shape;
    std::string name;          // Input / Hook identifier
    double cval = 0.0;         // Scale factor or LayerNorm eps
    std::vector<int> iargs;    // slice bounds, row index, element coords
    std::vector<int> set_a, set_b;  // IndexSumDiff index sets
};

// Per-evaluation overrides applied at named hook nodes. Order of application:
// keep_mask, then element sets, then full replacement.
struct HookEdit {
    std::optional<std::vector<uint8_t>> keep_mask;  // flat, hook-shaped; 0 => zeroed
    std::vector<std::tuple<int, int, double>> sets; // (row, col, value); row -1 => all rows
    std::optional<Tensor> replace;
};

struct EditSet {
    std::map<std::string, HookEdit> hooks;
    bool empty() const { return hooks.empty(); }
    HookEdit& at_hook(const std::string& name) { return hooks[name]; }
};

class Tape {
public:
    NodeId input(const std::string& name, std::vector<std::size_t> shape) {
        require(!names_.count(name), "duplicate input name: " + name);
        Node n{Op::Input, {}, std::move(shape), name};
        return push(std::move(n));
    }

    NodeId add(NodeId a, NodeId b) { return binary(Op::Add, a, b); }
    NodeId sub(NodeId a, NodeId b) { return binary(Op::Sub, a, b); }
    NodeId mul(NodeId a, NodeId b) { return binary(Op::Mul, a, b); }

    NodeId scale(NodeId a, double c) {
        Node n{Op::Scale, {a}, node(a).shape};
        n.cval = c;
        return push(std::move(n));
    }

    NodeId add_bias(NodeId a, NodeId b) {
        require(node(a).shape.size() == 2 && node(b).shape.size() == 1 &&
                    node(a).shape[1] == node(b).shape[0],
                "add_bias shape mismatch: " + shp(a) + " + " + shp(b));
        return push({Op::AddBias, {a, b}, node(a).shape});
    }

    NodeId matmul(NodeId a, NodeId b) {
        require(node(a).shape.size() == 2 && node(b).shape.size() == 2 &&
                    node(a).shape[1] == node(b).shape[0],
                "matmul shape mismatch: " + shp(a) + " x " + shp(b));
        return push({Op::MatMul, {a, b}, {node(a).shape[0], node(b).shape[1]}});
    }

    NodeId matmul_nt(NodeId a, NodeId b) {
        require(node(a).shape.size() == 2 && node(b).shape.size() == 2 &&
                    node(a).shape[1] == node(b).shape[1],
                "matmul_nt shape mismatch: " + shp(a) + " x " + shp(b) + "^T");
        return push({Op::MatMulNT, {a, b}, {node(a).shape[0], node(b).shape[0]}});
    }

    NodeId relu(NodeId a) { return push({Op::Relu, {a}, node(a).shape}); }

    NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps = 1e-5) {
        require(node(x).shape.size() == 2 && node(gain).shape.size() == 1 &&
                    node(bias).shape.size() == 1 && node(x).shape[1] == node(gain).shape[0] &&
                    node(gain).shape[0] == node(bias).shape[0],
                "layer_norm shape mismatch at " + shp(x));
        Node n{Op::LayerNorm, {x, gain, bias}, node(x).shape};
        n.cval = eps;
        return push(std::move(n));
    }

    NodeId causal_softmax(NodeId a) {
        require(node(a).shape.size() == 2 && node(a).shape[0] == node(a).shape[1],
                "causal_softmax needs square matrix, got " + shp(a));
        return push({Op::CausalSoftmax, {a}, node(a).shape});
    }

    NodeId softmax_vec(NodeId a) {
        require(node(a).shape.size() <= 2, "softmax_vec rank too high: " + shp(a));
        return push({Op::SoftmaxVec, {a}, node(a).shape});
    }

    NodeId embed(NodeId table, NodeId ids) {
        require(node(table).shape.size() == 2 && node(ids).shape.size() == 1,
                "embed expects table[V,d] and ids[T]");
        return push({Op::Embed, {table, ids}, {node(ids).shape[0], node(table).shape[1]}});
    }

    NodeId slice_cols(NodeId a, int c0, int c1) {
        require(node(a).shape.size() == 2 && c0 >= 0 && c1 <= static_cast<int>(node(a).shape[1]) &&
                    c0 < c1,
                "slice_cols bounds out of range for " + shp(a));
        Node n{Op::SliceCols, {a}, {node(a).shape[0], static_cast<std::size_t>(c1 - c0)}};
        n.iargs = {c0, c1};
        return push(std::move(n));
    }

    NodeId concat_cols(const std::vector<NodeId>& parts) {
        require(!parts.empty(), "concat_cols of nothing");
        std::size_t rows = node(parts[0]).shape[0], cols = 0;
        for (NodeId p : parts) {
            require(node(p).shape.size() == 2 && node(p).shape[0] == rows,
                    "concat_cols row mismatch at " + shp(p));
            cols += node(p).shape[1];
        }
        return push({Op::ConcatCols, parts, {rows, cols}});
    }

    NodeId row(NodeId a, int r) {
        require(node(a).shape.size() == 2 && r >= 0 && r < static_cast<int>(node(a).shape[0]),
                "row index out of range for " + shp(a));
        Node n{Op::Row, {a}, {1, node(a).shape[1]}};
        n.iargs = {r};
        return push(std::move(n));
    }

    NodeId rows_range(NodeId a, int r0, int r1) {
        require(node(a).shape.size() == 2 && r0 >= 0 && r1 <= static_cast<int>(node(a).shape[0]) &&
                    r0 < r1,
                "rows_range bounds out of range for " + shp(a));
        Node n{Op::RowsRange, {a}, {static_cast<std::size_t>(r1 - r0), node(a).shape[1]}};
        n.iargs = {r0, r1};
        return push(std::move(n));
    }

    NodeId element(NodeId a, int r, int c) {
        require(node(a).shape.size() == 2 && r >= 0 && r < static_cast<int>(node(a).shape[0]) &&
                    c >= 0 && c < static_cast<int>(node(a).shape[1]),
                "element coords out of range for " + shp(a));
        Node n{Op::Element, {a}, {}};
        n.iargs = {r, c};
        return push(std::move(n));
    }

    // sum(v[A]) - sum(v[B]) over flat indices.
    NodeId index_sum_diff(NodeId a, std::vector<int> set_a, std::vector<int> set_b) {
        Node n{Op::IndexSumDiff, {a}, {}};
        n.set_a = std::move(set_a);
        n.set_b = std::move(set_b);
        return push(std::move(n));
    }

    NodeId cross_entropy_rows(NodeId logits, NodeId targets) {
        require(node(logits).shape.size() == 2 && node(targets).shape.size() == 1 &&
                    node(logits).shape[0] == node(targets).shape[0],
                "cross_entropy_rows shape mismatch");
        return push({Op::CrossEntropyRows, {logits, targets}, {}});
    }

    NodeId sum_all(NodeId a) { return push({Op::SumAll, {a}, {}}); }

    NodeId hook(NodeId a, const std::string& name) {
        require(!names_.count(name), "duplicate hook name: " + name);
        Node n{Op::Hook, {a}, node(a).shape, name};
        return push(std::move(n));
    }

    NodeId stop_grad(NodeId a) { return push({Op::StopGrad, {a}, node(a).shape}); }

    // Registers a human-readable name for an arbitrary node (outputs, metrics).
    void mark(const std::string& name, NodeId id) {
        require(!names_.count(name), "duplicate node name: " + name);
        names_[name] = id;
    }

    const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::size_t size() const { return nodes_.size(); }

    NodeId named(const std::string& name) const {
        auto it = names_.find(name);
        require(it != names_.end(), "no node named: " + name);
        return it->second;
    }

    bool has_named(const std::string& name) const { return names_.count(name) != 0; }

    const std::map<std::string, NodeId>& names() const { return names_; }

private:
    NodeId binary(Op op, NodeId a, NodeId b) {
        require(node(a).shape == node(b).shape,
                "elementwise shape mismatch: " + shp(a) + " vs " + shp(b));
        return push({op, {a, b}, node(a).shape});
    }

    NodeId push(Node n) {
        if ((n.op == Op::Input || n.op == Op::Hook) && !n.name.empty())
            names_[n.name] = static_cast<NodeId>(nodes_.size());
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    std::string shp(NodeId id) const {
        std::ostringstream os;
        os << "[";
        const auto& s = node(id).shape;
        for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
        os << "]";
        return os.str();
    }

    std::vector<Node> nodes_;
    std::map<std::string, NodeId> names_;
};

using InputMap = std::map<std::string, Tensor>;

// Resolves input names against one or more maps (run inputs, parameter store).
using InputLookup = std::function<const Tensor&(const std::string&)>;

inline InputLookup lookup_maps(const InputMap& a, const InputMap& b = {}) {
    // Copies both maps so the lookup can outlive its arguments.
    auto pa = std::make_shared<InputMap>(a);
    auto pb = std::make_shared<InputMap>(b);
    return [pa, pb](const std::string& name) -> const Tensor& {
        if (auto it = pa->find(name); it != pa->end()) return it->second;
        if (auto it = pb->find(name); it != pb->end()) return it->second;
        fail("missing input: " + name);
    };
}

class Evaluation {
public:
    Evaluation(const Tape& tape, const InputLookup& inputs, const EditSet& edits = {})
        : tape_(&tape), edits_(edits), values_(tape.size()) {
        for (const auto& [name, e] : edits_.hooks)
            require(tape.has_named(name) && tape.node(tape.named(name)).op == Op::Hook,
                    "edit targets unknown hook: " + name);
        for (std::size_t i = 0; i < tape.size(); ++i)
            eval_node(static_cast<NodeId>(i), inputs, edits_);
    }

    const Tensor& value(NodeId id) const { return values_[static_cast<std::size_t>(id)]; }
    const Tensor& value(const std::string& name) const { return value(tape_->named(name)); }

    // Reverse sweep from a scalar node. Returns one gradient tensor per tape
    // node (zero-shaped tensors for nodes the output does not depend on).
    // State is confined to the returned vector, so concurrent backward calls
    // on one Evaluation are safe.
    std::vector<Tensor> backward(NodeId scalar_node) const;

    Tensor gradient(NodeId scalar_node, NodeId wrt) const {
        auto g = backward(scalar_node);
        Tensor got = std::move(g[static_cast<std::size_t>(wrt)]);
        if (got.numel() == 0) return Tensor::zeros(tape_->node(wrt).shape);
        return got;
    }

    const Tape& tape() const { return *tape_; }

private:
    void eval_node(NodeId id, const InputLookup& inputs, const EditSet& edits);

    const Tape* tape_;
    EditSet edits_;
    std::vector<Tensor> values_;
};

namespace detail {

inline void softmax_row(const double* in, double* out, std::size_t n) {
    double mx = in[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        out[j] = std::exp(in[j] - mx);
        sum += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= sum;
}

}  // namespace detail

inline void Evaluation::eval_node(NodeId id, const InputLookup& inputs, const EditSet& edits) {
    const Node& n = tape_->node(id);
    auto& out = values_[static_cast<std::size_t>(id)];
    auto arg = [&](int i) -> const Tensor& { return values_[static_cast<std::size_t>(n.args[static_cast<std::size_t>(i)])]; };

    switch (n.op) {
        case Op::Input: {
            const Tensor& t = inputs(n.name);
            require(t.shape() == n.shape,
                    "input '" + n.name + "' has shape " + t.shape_str() + ", tape expects another");
            out = t;
            break;
        }
        case Op::Add: case Op::Sub: case Op::Mul: {
            const Tensor &a = arg(0), &b = arg(1);
            Tensor r(n.shape);
            auto d = r.mut();
            auto pa = a.data(); auto pb = b.data();
            if (n.op == Op::Add)
                for (std::size_t i = 0; i < d.size(); ++i) d[i] = pa[i] + pb[i];
            else if (n.op == Op::Sub)
                for (std::size_t i = 0; i < d.size(); ++i) d[i] = pa[i] - pb[i];
            else
                for (std::size_t i = 0; i < d.size(); ++i) d[i] = pa[i] * pb[i];
            out = std::move(r);
            break;
        }
        case Op::Scale: {
            Tensor r(n.shape);
            auto d = r.mut();
            auto pa = arg(0).data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = n.cval * pa[i];
            out = std::move(r);
            break;
        }
        case Op::AddBias: {
            const Tensor &a = arg(0), &b = arg(1);
            Tensor r(n.shape);
            auto d = r.mut();
            const std::size_t m = n.shape[0], c = n.shape[1];
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < c; ++j) d[i * c + j] = a[i * c + j] + b[j];
            out = std::move(r);
            break;
        }
        case Op::MatMul: {
            const Tensor &a = arg(0), &b = arg(1);
            Tensor r(n.shape);
            matmul_acc(a.data(), b.data(), r.mut(), a.dim(0), a.dim(1), b.dim(1));
            out = std::move(r);
            break;
        }
        case Op::MatMulNT: {
            const Tensor &a = arg(0), &b = arg(1);
            Tensor r(n.shape);
            matmul_nt_acc(a.data(), b.data(), r.mut(), a.dim(0), a.dim(1), b.dim(0));
            out = std::move(r);
            break;
        }
        case Op::Relu: {
            Tensor r(n.shape);
            auto d = r.mut();
            auto pa = arg(0).data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = pa[i] > 0.0 ? pa[i] : 0.0;
            out = std::move(r);
            break;
        }
        case Op::LayerNorm: {
            const Tensor &x = arg(0), &gain = arg(1), &bias = arg(2);
            const std::size_t m = n.shape[0], c = n.shape[1];
            Tensor r(n.shape);
            auto d = r.mut();
            for (std::size_t i = 0; i < m; ++i) {
                const double* xi = x.data().data() + i * c;
                double mu = 0.0;
                for (std::size_t j = 0; j < c; ++j) mu += xi[j];
                mu /= static_cast<double>(c);
                double var = 0.0;
                for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
                var /= static_cast<double>(c);
                const double inv = 1.0 / std::sqrt(var + n.cval);
                for (std::size_t j = 0; j < c; ++j)
                    d[i * c + j] = gain[j] * ((xi[j] - mu) * inv) + bias[j];
            }
            out = std::move(r);
            break;
        }
        case Op::CausalSoftmax: {
            const Tensor& s = arg(0);
            const std::size_t t = n.shape[0];
            Tensor r(n.shape);
            auto d = r.mut();
            for (std::size_t i = 0; i < t; ++i) {
                const double* si = s.data().data() + i * t;
                double mx = si[0];
                for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, si[j]);
                double sum = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    d[i * t + j] = std::exp(si[j] - mx);
                    sum += d[i * t + j];
                }
                for (std::size_t j = 0; j <= i; ++j) d[i * t + j] /= sum;
            }
            out = std::move(r);
            break;
        }
        case Op::SoftmaxVec: {
            const Tensor& v = arg(0);
            Tensor r(n.shape);
            detail::softmax_row(v.data().data(), r.mut().data(), v.numel());
            out = std::move(r);
            break;
        }
        case Op::Embed: {
            const Tensor &table = arg(0), &ids = arg(1);
            const std::size_t t = n.shape[0], c = n.shape[1], v = table.dim(0);
            Tensor r(n.shape);
            auto d = r.mut();
            for (std::size_t i = 0; i < t; ++i) {
                const auto tok = static_cast<std::size_t>(ids[i]);
                require(tok < v, "token id out of vocabulary: " + std::to_string(tok));
                const double* src = table.data().data() + tok * c;
                for (std::size_t j = 0; j < c; ++j) d[i * c + j] = src[j];
            }
            out = std::move(r);
            break;
        }
        case Op::SliceCols: {
            const Tensor& a = arg(0);
            const std::size_t m = n.shape[0], c = n.shape[1], ac = a.dim(1);
            const std::size_t c0 = static_cast<std::size_t>(n.iargs[0]);
            Tensor r(n.shape);
            auto d = r.mut();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < c; ++j) d[i * c + j] = a[i * ac + c0 + j];
            out = std::move(r);
            break;
        }
        case Op::ConcatCols: {
            const std::size_t m = n.shape[0], c = n.shape[1];
            Tensor r(n.shape);
            auto d = r.mut();
            std::size_t off = 0;
            for (std::size_t k = 0; k < n.args.size(); ++k) {
                const Tensor& a = arg(static_cast<int>(k));
                const std::size_t ac = a.dim(1);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < ac; ++j) d[i * c + off + j] = a[i * ac + j];
                off += ac;
            }
            out = std::move(r);
            break;
        }
        case Op::Row: {
            const Tensor& a = arg(0);
            const std::size_t c = n.shape[1], r0 = static_cast<std::size_t>(n.iargs[0]);
            Tensor r(n.shape);
            auto d = r.mut();
            for (std::size_t j = 0; j < c; ++j) d[j] = a[r0 * c + j];
            out = std::move(r);
            break;
        }
        case Op::RowsRange: {
            const Tensor& a = arg(0);
            const std::size_t m = n.shape[0], c = n.shape[1];
            const std::size_t r0 = static_cast<std::size_t>(n.iargs[0]);
            Tensor r(n.shape);
            auto d = r.mut();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < c; ++j) d[i * c + j] = a[(r0 + i) * c + j];
            out = std::move(r);
            break;
        }
        case Op::Element: {
            const Tensor& a = arg(0);
            out = Tensor::scalar(a.at2(static_cast<std::size_t>(n.iargs[0]),
                                       static_cast<std::size_t>(n.iargs[1])));
            break;
        }
        case Op::IndexSumDiff: {
            const Tensor& a = arg(0);
            double s = 0.0;
            for (int i : n.set_a) s += a[static_cast<std::size_t>(i)];
            for (int i : n.set_b) s -= a[static_cast<std::size_t>(i)];
            out = Tensor::scalar(s);
            break;
        }
        case Op::CrossEntropyRows: {
            const Tensor &logits = arg(0), &targets = arg(1);
            const std::size_t m = logits.dim(0), v = logits.dim(1);
            std::vector<double> p(v);
            double loss = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                detail::softmax_row(logits.data().data() + i * v, p.data(), v);
                const auto tgt = static_cast<std::size_t>(targets[i]);
                require(tgt < v, "target id out of vocabulary");
                loss += -std::log(p[tgt]);
            }
            out = Tensor::scalar(loss / static_cast<double>(m));
            break;
        }
        case Op::SumAll: {
            const Tensor& a = arg(0);
            double s = 0.0;
            for (double x : a.data()) s += x;
            out = Tensor::scalar(s);
            break;
        }
        case Op::Hook: {
            const Tensor& a = arg(0);
            auto it = edits.hooks.find(n.name);
            if (it == edits.hooks.end()) {
                out = a;  // shared storage, no copy
                break;
            }
            const HookEdit& e = it->second;
            if (e.replace) {
                require(e.replace->shape() == n.shape,
                        "hook replacement shape mismatch at " + n.name);
                out = *e.replace;
                break;
            }
            Tensor r(n.shape);
            auto d = r.mut();
            auto pa = a.data();
            if (e.keep_mask) {
                require(e.keep_mask->size() == r.numel(), "hook keep_mask size mismatch at " + n.name);
                for (std::size_t i = 0; i < d.size(); ++i) d[i] = (*e.keep_mask)[i] ? pa[i] : 0.0;
            } else {
                for (std::size_t i = 0; i < d.size(); ++i) d[i] = pa[i];
            }
            const std::size_t c = n.shape.size() == 2 ? n.shape[1] : r.numel();
            const std::size_t m = r.numel() / c;
            for (const auto& [row, col, val] : e.sets) {
                require(col >= 0 && static_cast<std::size_t>(col) < c && row < static_cast<int>(m),
                        "hook edit out of range at " + n.name);
                if (row < 0)
                    for (std::size_t i = 0; i < m; ++i) d[i * c + static_cast<std::size_t>(col)] = val;
                else
                    d[static_cast<std::size_t>(row) * c + static_cast<std::size_t>(col)] = val;
            }
            out = std::move(r);
            break;
        }
        case Op::StopGrad:
            out = arg(0);
            break;
    }
}

inline std::vector<Tensor> Evaluation::backward(NodeId scalar_node) const {
    const Tape& tape = *tape_;
    require(tape.node(scalar_node).shape.empty() &&
                values_[static_cast<std::size_t>(scalar_node)].numel() == 1,
            "backward requires a scalar output node");
    std::vector<Tensor> grads(tape.size());
    auto touch = [&](NodeId id) -> Tensor& {
        auto& g = grads[static_cast<std::size_t>(id)];
        if (g.numel() == 0 && !tape.node(id).shape.empty())
            g = Tensor::zeros(tape.node(id).shape);
        else if (g.numel() == 0)
            g = Tensor::scalar(0.0);
        return g;
    };
    touch(scalar_node).mut()[0] = 1.0;

    for (NodeId id = scalar_node; id >= 0; --id) {
        const Node& n = tape.node(id);
        Tensor& gt = grads[static_cast<std::size_t>(id)];
        if (gt.numel() == 0) continue;  // unreachable from the output
        auto g = gt.data();
        auto val = [&](int i) -> const Tensor& {
            return values_[static_cast<std::size_t>(n.args[static_cast<std::size_t>(i)])];
        };

        switch (n.op) {
            case Op::Input:
                break;
            case Op::Add: {
                auto ga = touch(n.args[0]).mut();
                auto gb = touch(n.args[1]).mut();
                for (std::size_t i = 0; i < g.size(); ++i) { ga[i] += g[i]; gb[i] += g[i]; }
                break;
            }
            case Op::Sub: {
                auto ga = touch(n.args[0]).mut();
                auto gb = touch(n.args[1]).mut();
                for (std::size_t i = 0; i < g.size(); ++i) { ga[i] += g[i]; gb[i] -= g[i]; }
                break;
            }
            case Op::Mul: {
                auto ga = touch(n.args[0]).mut();
                auto gb = touch(n.args[1]).mut();
                auto a = val(0).data(); auto b = val(1).data();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga[i] += g[i] * b[i];
                    gb[i] += g[i] * a[i];
                }
                break;
            }
            case Op::Scale: {
                auto ga = touch(n.args[0]).mut();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += n.cval * g[i];
                break;
            }
            case Op::AddBias: {
                auto ga = touch(n.args[0]).mut();
                auto gb = touch(n.args[1]).mut();
                const std::size_t m = n.shape[0], c = n.shape[1];
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < c; ++j) {
                        ga[i * c + j] += g[i * c + j];
                        gb[j] += g[i * c + j];
                    }
                break;
            }
            case Op::MatMul: {
                const Tensor &a = val(0), &b = val(1);
                const std::size_t m = a.dim(0), k = a.dim(1), nn = b.dim(1);
                matmul_nt_acc(g, b.data(), touch(n.args[0]).mut(), m, nn, k, true);
                matmul_tn_acc(a.data(), g, touch(n.args[1]).mut(), k, m, nn, true);
                break;
            }
            case Op::MatMulNT: {
                const Tensor &a = val(0), &b = val(1);
                const std::size_t m = a.dim(0), k = a.dim(1), nn = b.dim(0);
                matmul_acc(g, b.data(), touch(n.args[0]).mut(), m, nn, k, true);
                matmul_tn_acc(g, a.data(), touch(n.args[1]).mut(), nn, m, k, true);
                break;
            }
            case Op::Relu: {
                auto ga = touch(n.args[0]).mut();
                auto a = val(0).data();
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (a[i] > 0.0) ga[i] += g[i];
                break;
            }
            case Op::LayerNorm: {
                const Tensor &x = val(0), &gain = val(1);
                const std::size_t m = n.shape[0], c = n.shape[1];
                auto gx = touch(n.args[0]).mut();
                auto ggain = touch(n.args[1]).mut();
                auto gbias = touch(n.args[2]).mut();
                std::vector<double> xhat(c);
                for (std::size_t i = 0; i < m; ++i) {
                    const double* xi = x.data().data() + i * c;
                    double mu = 0.0;
                    for (std::size_t j = 0; j < c; ++j) mu += xi[j];
                    mu /= static_cast<double>(c);
                    double var = 0.0;
                    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
                    var /= static_cast<double>(c);
                    const double inv = 1.0 / std::sqrt(var + n.cval);
                    for (std::size_t j = 0; j < c; ++j) xhat[j] = (xi[j] - mu) * inv;
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double gy = g[i * c + j] * gain[j];
                        s1 += gy;
                        s2 += gy * xhat[j];
                    }
                    const double cn = static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        const double gy = g[i * c + j] * gain[j];
                        gx[i * c + j] += inv * (gy - s1 / cn - xhat[j] * s2 / cn);
                        ggain[j] += g[i * c + j] * xhat[j];
                        gbias[j] += g[i * c + j];
                    }
                }
                break;
            }
            case Op::CausalSoftmax: {
                const Tensor& a = values_[static_cast<std::size_t>(id)];  // softmax output
                const std::size_t t = n.shape[0];
                auto ga = touch(n.args[0]).mut();
                for (std::size_t i = 0; i < t; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) dot += g[i * t + j] * a[i * t + j];
                    for (std::size_t j = 0; j <= i; ++j)
                        ga[i * t + j] += a[i * t + j] * (g[i * t + j] - dot);
                }
                break;
            }
            case Op::SoftmaxVec: {
                const Tensor& a = values_[static_cast<std::size_t>(id)];
                auto ga = touch(n.args[0]).mut();
                double dot = 0.0;
                for (std::size_t j = 0; j < g.size(); ++j) dot += g[j] * a[j];
                for (std::size_t j = 0; j < g.size(); ++j) ga[j] += a[j] * (g[j] - dot);
                break;
            }
            case Op::Embed: {
                const Tensor& ids = val(1);
                const std::size_t t = n.shape[0], c = n.shape[1];
                auto gtab = touch(n.args[0]).mut();
                for (std::size_t i = 0; i < t; ++i) {
                    const auto tok = static_cast<std::size_t>(ids[i]);
                    for (std::size_t j = 0; j < c; ++j) gtab[tok * c + j] += g[i * c + j];
                }
                break;
            }
            case Op::SliceCols: {
                const std::size_t m = n.shape[0], c = n.shape[1];
                const std::size_t ac = val(0).dim(1), c0 = static_cast<std::size_t>(n.iargs[0]);
                auto ga = touch(n.args[0]).mut();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < c; ++j) ga[i * ac + c0 + j] += g[i * c + j];
                break;
            }
            case Op::ConcatCols: {
                const std::size_t m = n.shape[0], c = n.shape[1];
                std::size_t off = 0;
                for (std::size_t k = 0; k < n.args.size(); ++k) {
                    const std::size_t ac = val(static_cast<int>(k)).dim(1);
                    auto ga = touch(n.args[k]).mut();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < ac; ++j) ga[i * ac + j] += g[i * c + off + j];
                    off += ac;
                }
                break;
            }
            case Op::Row: {
                const std::size_t c = n.shape[1], r0 = static_cast<std::size_t>(n.iargs[0]);
                auto ga = touch(n.args[0]).mut();
                for (std::size_t j = 0; j < c; ++j) ga[r0 * c + j] += g[j];
                break;
            }
            case Op::RowsRange: {
                const std::size_t m = n.shape[0], c = n.shape[1];
                const std::size_t r0 = static_cast<std::size_t>(n.iargs[0]);
                auto ga = touch(n.args[0]).mut();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < c; ++j) ga[(r0 + i) * c + j] += g[i * c + j];
                break;
            }
            case Op::Element: {
                auto ga = touch(n.args[0]).mut();
                const std::size_t c = val(0).dim(1);
                ga[static_cast<std::size_t>(n.iargs[0]) * c + static_cast<std::size_t>(n.iargs[1])] +=
                    g[0];
                break;
            }
            case Op::IndexSumDiff: {
                auto ga = touch(n.args[0]).mut();
                for (int i : n.set_a) ga[static_cast<std::size_t>(i)] += g[0];
                for (int i : n.set_b) ga[static_cast<std::size_t>(i)] -= g[0];
                break;
            }
            case Op::CrossEntropyRows: {
                const Tensor &logits = val(0), &targets = val(1);
                const std::size_t m = logits.dim(0), v = logits.dim(1);
                auto ga = touch(n.args[0]).mut();
                std::vector<double> p(v);
                const double gm = g[0] / static_cast<double>(m);
                for (std::size_t i = 0; i < m; ++i) {
                    detail::softmax_row(logits.data().data() + i * v, p.data(), v);
                    const auto tgt = static_cast<std::size_t>(targets[i]);
                    for (std::size_t j = 0; j < v; ++j) ga[i * v + j] += gm * p[j];
                    ga[i * v + tgt] -= gm;
                }
                break;
            }
            case Op::SumAll: {
                auto ga = touch(n.args[0]).mut();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
                break;
            }
            case Op::Hook: {
                // The gradient at this node is with respect to the value used
                // downstream. Flow to the producer stops at overridden
                // coordinates.
                auto it = edits_.hooks.find(n.name);
                if (it != edits_.hooks.end() && it->second.replace) break;
                auto ga = touch(n.args[0]).mut();
                if (it == edits_.hooks.end()) {
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                    break;
                }
                const HookEdit& e = it->second;
                const std::size_t c = n.shape.size() == 2 ? n.shape[1] : g.size();
                const std::size_t m = g.size() / c;
                std::vector<uint8_t> pass(g.size(), 1);
                if (e.keep_mask)
                    for (std::size_t i = 0; i < g.size(); ++i) pass[i] = (*e.keep_mask)[i];
                for (const auto& [row, col, val] : e.sets) {
                    (void)val;
                    if (row < 0)
                        for (std::size_t i = 0; i < m; ++i)
                            pass[i * c + static_cast<std::size_t>(col)] = 0;
                    else
                        pass[static_cast<std::size_t>(row) * c + static_cast<std::size_t>(col)] = 0;
                }
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (pass[i]) ga[i] += g[i];
                break;
            }
            case Op::StopGrad:
                break;
        }
    }
    return grads;
}

// Central finite differences of a scalar node with respect to a hook node,
// overriding the hook value elementwise. The gradient oracle.
inline Tensor finite_difference_gradient(const Tape& tape, const InputLookup& inputs,
                                         NodeId scalar_node, const std::string& hook_name,
                                         double step, const EditSet& base_edits = {}) {
    require(step > 0.0, "finite difference step must be positive");
    const Evaluation clean(tape, inputs, base_edits);
    const Tensor base = clean.value(hook_name);
    Tensor grad(base.shape());
    auto gd = grad.mut();
    for (std::size_t i = 0; i < base.numel(); ++i) {
        EditSet e = base_edits;
        Tensor hi = base.clone(), lo = base.clone();
        hi.mut()[i] += step;
        lo.mut()[i] -= step;
        e.at_hook(hook_name).replace = hi;
        const double fhi = Evaluation(tape, inputs, e).value(scalar_node).item();
        e.at_hook(hook_name).replace = lo;
        const double flo = Evaluation(tape, inputs, e).value(scalar_node).item();
        gd[i] = (fhi - flo) / (2.0 * step);
    }
    return grad;
}

}  // namespace sfc
