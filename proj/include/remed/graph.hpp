#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "remed/rng.hpp"

namespace remed::nd {

struct GraphError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense host tensor, rank 1 or 2. Rank-1 vectors behave as (1,n) rows.
template <typename S>
struct HostTensor {
    std::vector<int> shape;
    std::vector<S> data;

    HostTensor() = default;
    HostTensor(std::vector<int> sh, std::vector<S> d) : shape(std::move(sh)), data(std::move(d)) {
        if (numel() != data.size()) throw GraphError("HostTensor: shape/data size mismatch");
    }

    static HostTensor zeros(std::vector<int> sh) {
        size_t n = 1;
        for (int d : sh) n *= static_cast<size_t>(d);
        return HostTensor(std::move(sh), std::vector<S>(n, S(0)));
    }
    static HostTensor ones(std::vector<int> sh) {
        size_t n = 1;
        for (int d : sh) n *= static_cast<size_t>(d);
        return HostTensor(std::move(sh), std::vector<S>(n, S(1)));
    }
    // fan-based uniform init for weight matrices
    static HostTensor glorot(int fan_in, int fan_out, Rng& rng) {
        double bound = std::sqrt(6.0 / (fan_in + fan_out));
        HostTensor t = zeros({fan_in, fan_out});
        for (auto& x : t.data) x = static_cast<S>(rng.uniform(-bound, bound));
        return t;
    }

    size_t numel() const {
        size_t n = 1;
        for (int d : shape) n *= static_cast<size_t>(d);
        return n;
    }
    int rows() const { return shape.size() == 2 ? shape[0] : 1; }
    int cols() const { return shape.size() == 2 ? shape[1] : (shape.empty() ? 1 : shape[0]); }
};

// C(m,n) = op(A) * op(B).  Row i of C depends only on row i of op(A), and the
// accumulation order over the shared dimension is fixed (p ascending per
// element), so computing any subset of rows yields bit-identical values to a
// full pass (chunked scoring relies on this). The j-blocked fast path below
// keeps exactly that order; it only moves the accumulator into registers.
template <typename S>
inline void gemm(bool ta, bool tb, int m, int n, int k,
                 const S* __restrict__ a, const S* __restrict__ b, S* __restrict__ c) {
    constexpr int JB = 32;
    if (!ta && !tb && n >= JB) {
        for (int64_t i = 0; i < m; ++i) {
            const S* __restrict__ arow = a + i * k;
            S* __restrict__ crow = c + i * n;
            int j0 = 0;
            for (; j0 + JB <= n; j0 += JB) {
                S acc[JB] = {};
                for (int p = 0; p < k; ++p) {
                    const S av = arow[p];
                    const S* __restrict__ brow = b + int64_t(p) * n + j0;
                    for (int j = 0; j < JB; ++j) acc[j] += av * brow[j];
                }
                for (int j = 0; j < JB; ++j) crow[j0 + j] = acc[j];
            }
            for (; j0 < n; ++j0) {
                S acc = S(0);
                for (int p = 0; p < k; ++p) acc += arow[p] * b[int64_t(p) * n + j0];
                crow[j0] = acc;
            }
        }
        return;
    }
    for (int64_t i = 0; i < m; ++i) {
        S* __restrict__ crow = c + i * n;
        for (int j = 0; j < n; ++j) crow[j] = S(0);
        if (!tb) {
            for (int p = 0; p < k; ++p) {
                const S av = ta ? a[int64_t(p) * m + i] : a[i * k + p];
                const S* __restrict__ brow = b + int64_t(p) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        } else {
            for (int j = 0; j < n; ++j) {
                const S* __restrict__ brow = b + int64_t(j) * k;
                S acc = S(0);
                if (!ta) {
                    const S* __restrict__ arow = a + i * k;
                    for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
                } else {
                    for (int p = 0; p < k; ++p) acc += a[int64_t(p) * m + i] * brow[p];
                }
                crow[j] = acc;
            }
        }
    }
}

enum class Op : uint8_t {
    Leaf,
    MatMul,
    Add,
    Mul,
    Concat,
    Gelu,
    Relu,
    Sigmoid,
    Softmax,
    LayerNorm,
    Log,
    Rsqrt,
    Mean,
    Sum,
    EmbedLookup,
    Scale,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::MatMul: return "matmul";
        case Op::Add: return "add";
        case Op::Mul: return "mul";
        case Op::Concat: return "concat";
        case Op::Gelu: return "gelu";
        case Op::Relu: return "relu";
        case Op::Sigmoid: return "sigmoid";
        case Op::Softmax: return "softmax";
        case Op::LayerNorm: return "layernorm";
        case Op::Log: return "log";
        case Op::Rsqrt: return "rsqrt";
        case Op::Mean: return "mean";
        case Op::Sum: return "sum";
        case Op::EmbedLookup: return "embed_lookup";
        case Op::Scale: return "scale";
    }
    return "?";
}

// Reverse-mode tape over dense tensors. Nodes are appended in evaluation
// order, so the list is topological by construction; values are computed
// eagerly at build time and every forward output is checked for NaN/Inf.
template <typename S>
class Graph {
public:
    using Id = int32_t;

    static constexpr S kLayerNormEps = S(1e-5);

    Id leaf(const HostTensor<S>& t, bool grad_required) {
        return leaf(t.shape, t.data, grad_required);
    }
    Id leaf(std::vector<int> shape, std::span<const S> data, bool grad_required) {
        Node nd;
        nd.op = Op::Leaf;
        set_shape(nd, shape);
        if (nd.numel() != data.size()) throw GraphError("leaf: shape/data mismatch");
        nd.val.assign(data.begin(), data.end());
        nd.needs_grad = grad_required;
        nd.grad_leaf = grad_required;
        check_finite(nd);
        if (grad_required) nd.grad.assign(nd.numel(), S(0));
        nodes_.push_back(std::move(nd));
        return Id(nodes_.size() - 1);
    }
    Id constant(std::vector<int> shape, std::span<const S> data) {
        return leaf(std::move(shape), data, false);
    }
    Id constant_scalar(S v) {
        S buf[1] = {v};
        return leaf({1}, std::span<const S>(buf, 1), false);
    }
    Id full(std::vector<int> shape, S v) {
        size_t n = 1;
        for (int d : shape) n *= size_t(d);
        std::vector<S> data(n, v);
        return leaf(std::move(shape), data, false);
    }
    // cut the tape: same values, no gradient path
    Id detach(Id x) {
        const Node& n = node(x);
        return leaf(n.shape, n.val, false);
    }

    Id matmul(Id a, Id b, bool trans_a = false, bool trans_b = false) {
        const Node& na = node(a);
        const Node& nb = node(b);
        int m = trans_a ? na.cols : na.rows;
        int ka = trans_a ? na.rows : na.cols;
        int kb = trans_b ? nb.cols : nb.rows;
        int n = trans_b ? nb.rows : nb.cols;
        if (ka != kb)
            throw GraphError("matmul: inner dimensions disagree (" + shape_str(a) + " x " + shape_str(b) + ")");
        Node nd = make(Op::MatMul, a, b, {m, n});
        nd.flag_a = trans_a;
        nd.flag_b = trans_b;
        gemm<S>(trans_a, trans_b, m, n, ka, na.val.data(), nb.val.data(), nd.val.data());
        return push(std::move(nd));
    }

    Id add(Id a, Id b) { return binary_broadcast(Op::Add, a, b); }
    Id mul(Id a, Id b) { return binary_broadcast(Op::Mul, a, b); }

    Id concat(Id a, Id b, int axis) {
        const Node& na = node(a);
        const Node& nb = node(b);
        if (axis != 0 && axis != 1) throw GraphError("concat: axis must be 0 or 1");
        if (axis == 0 && na.cols != nb.cols) throw GraphError("concat axis 0: column counts differ");
        if (axis == 1 && na.rows != nb.rows) throw GraphError("concat axis 1: row counts differ");
        int r = axis == 0 ? na.rows + nb.rows : na.rows;
        int c = axis == 1 ? na.cols + nb.cols : na.cols;
        Node nd = make(Op::Concat, a, b, {r, c});
        nd.axis = axis;
        if (axis == 0) {
            std::copy(na.val.begin(), na.val.end(), nd.val.begin());
            std::copy(nb.val.begin(), nb.val.end(), nd.val.begin() + na.val.size());
        } else {
            for (int i = 0; i < r; ++i) {
                std::copy_n(na.val.begin() + int64_t(i) * na.cols, na.cols, nd.val.begin() + int64_t(i) * c);
                std::copy_n(nb.val.begin() + int64_t(i) * nb.cols, nb.cols,
                            nd.val.begin() + int64_t(i) * c + na.cols);
            }
        }
        return push(std::move(nd));
    }

    Id gelu(Id x) {
        return unary(Op::Gelu, x, [](S v) {
            return S(0.5) * v * (S(1) + S(std::erf(double(v) * 0.7071067811865475)));
        });
    }
    Id relu(Id x) {
        return unary(Op::Relu, x, [](S v) { return v > S(0) ? v : S(0); });
    }
    Id sigmoid(Id x) {
        return unary(Op::Sigmoid, x, [](S v) { return S(1) / (S(1) + S(std::exp(double(-v)))); });
    }
    Id log(Id x) {
        return unary(Op::Log, x, [](S v) { return S(std::log(double(v))); });
    }
    Id rsqrt(Id x) {
        return unary(Op::Rsqrt, x, [](S v) { return S(1) / S(std::sqrt(double(v))); });
    }

    Id softmax(Id x, int axis) {
        const Node& nx = node(x);
        if (axis != 0 && axis != 1) throw GraphError("softmax: axis must be 0 or 1");
        Node nd = make(Op::Softmax, x, -1, {nx.rows, nx.cols});
        nd.axis = axis;
        int outer = axis == 1 ? nx.rows : nx.cols;
        int inner = axis == 1 ? nx.cols : nx.rows;
        for (int i = 0; i < outer; ++i) {
            auto at = [&](int j) -> int64_t {
                return axis == 1 ? int64_t(i) * nx.cols + j : int64_t(j) * nx.cols + i;
            };
            S mx = nx.val[at(0)];
            for (int j = 1; j < inner; ++j) mx = std::max(mx, nx.val[at(j)]);
            S denom = S(0);
            for (int j = 0; j < inner; ++j) {
                S e = S(std::exp(double(nx.val[at(j)] - mx)));
                nd.val[at(j)] = e;
                denom += e;
            }
            for (int j = 0; j < inner; ++j) nd.val[at(j)] /= denom;
        }
        return push(std::move(nd));
    }

    // per-row normalization over the last axis, no affine part
    Id layernorm(Id x) {
        const Node& nx = node(x);
        Node nd = make(Op::LayerNorm, x, -1, {nx.rows, nx.cols});
        nd.aux.resize(size_t(nx.rows));  // 1/sqrt(var+eps) per row
        int c = nx.cols;
        for (int i = 0; i < nx.rows; ++i) {
            const S* row = nx.val.data() + int64_t(i) * c;
            S mean = S(0);
            for (int j = 0; j < c; ++j) mean += row[j];
            mean /= S(c);
            S var = S(0);
            for (int j = 0; j < c; ++j) {
                S d = row[j] - mean;
                var += d * d;
            }
            var /= S(c);
            S inv = S(1) / S(std::sqrt(double(var + kLayerNormEps)));
            nd.aux[size_t(i)] = inv;
            S* out = nd.val.data() + int64_t(i) * c;
            for (int j = 0; j < c; ++j) out[j] = (row[j] - mean) * inv;
        }
        return push(std::move(nd));
    }

    Id mean(Id x) {
        const Node& nx = node(x);
        Node nd = make(Op::Mean, x, -1, {1});
        S acc = S(0);
        for (S v : nx.val) acc += v;
        nd.val[0] = acc / S(nx.numel());
        return push(std::move(nd));
    }
    Id sum(Id x) {
        const Node& nx = node(x);
        Node nd = make(Op::Sum, x, -1, {1});
        S acc = S(0);
        for (S v : nx.val) acc += v;
        nd.val[0] = acc;
        return push(std::move(nd));
    }

    Id embed_lookup(Id table, std::span<const int> ids) {
        const Node& nt = node(table);
        Node nd = make(Op::EmbedLookup, table, -1, {int(ids.size()), nt.cols});
        nd.ids.assign(ids.begin(), ids.end());
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= nt.rows) throw GraphError("embed_lookup: index out of range");
            std::copy_n(nt.val.begin() + int64_t(ids[i]) * nt.cols, nt.cols,
                        nd.val.begin() + int64_t(i) * nt.cols);
        }
        return push(std::move(nd));
    }

    Id scale(Id x, S alpha) {
        Node nd = make(Op::Scale, x, -1, {node(x).rows, node(x).cols});
        nd.alpha = alpha;
        const Node& nx = node(x);
        for (size_t i = 0; i < nx.val.size(); ++i) nd.val[i] = nx.val[i] * alpha;
        nd.rank = nx.rank;
        return push(std::move(nd));
    }

    // Gradient of a scalar root w.r.t. every grad_required leaf. Leaves with
    // no path to the root keep their zero-initialized gradient (the trainer's
    // frozen-path contract depends on that being exact).
    void backward(Id root) {
        Node& r = node_mut(root);
        if (r.numel() != 1) throw GraphError("backward: root must be a scalar");
        for (auto& n : nodes_) {
            if (n.grad_leaf)
                n.grad.assign(n.numel(), S(0));
            else
                n.grad.clear();
        }
        r.grad.assign(1, S(1));
        for (int32_t i = root; i >= 0; --i) {
            Node& n = nodes_[size_t(i)];
            if (n.grad.empty() || n.op == Op::Leaf) continue;
            propagate(n);
        }
    }

    std::span<const S> value(Id id) const { return node(id).val; }
    std::span<const S> grad(Id id) const {
        const Node& n = node(id);
        if (n.grad.empty()) throw GraphError("grad: node has no gradient (run backward first)");
        return n.grad;
    }
    bool has_grad(Id id) const { return !node(id).grad.empty(); }
    std::vector<int> shape(Id id) const {
        const Node& n = node(id);
        if (n.rank == 1) return {n.cols};
        return {n.rows, n.cols};
    }
    int rows(Id id) const { return node(id).rows; }
    int cols(Id id) const { return node(id).cols; }
    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Op op{Op::Leaf};
        Id a{-1}, b{-1};
        int rows{0}, cols{0};
        uint8_t rank{2};
        bool needs_grad{false};
        bool grad_leaf{false};
        bool flag_a{false}, flag_b{false};
        int axis{0};
        S alpha{0};
        std::vector<S> val;
        std::vector<S> grad;
        std::vector<S> aux;
        std::vector<int> ids;

        size_t numel() const { return size_t(rows) * size_t(cols); }
    };

    std::vector<Node> nodes_;

    const Node& node(Id id) const {
        if (id < 0 || size_t(id) >= nodes_.size()) throw GraphError("bad node id");
        return nodes_[size_t(id)];
    }
    Node& node_mut(Id id) {
        if (id < 0 || size_t(id) >= nodes_.size()) throw GraphError("bad node id");
        return nodes_[size_t(id)];
    }

    static void set_shape(Node& nd, const std::vector<int>& shape) {
        if (shape.empty() || shape.size() > 2) throw GraphError("tensors must be rank 1 or 2");
        for (int d : shape)
            if (d <= 0) throw GraphError("shape entries must be positive");
        if (shape.size() == 1) {
            nd.rank = 1;
            nd.rows = 1;
            nd.cols = shape[0];
        } else {
            nd.rank = 2;
            nd.rows = shape[0];
            nd.cols = shape[1];
        }
    }

    std::string shape_str(Id id) const {
        const Node& n = node(id);
        return "(" + std::to_string(n.rows) + "," + std::to_string(n.cols) + ")";
    }

    Node make(Op op, Id a, Id b, std::vector<int> shape) {
        Node nd;
        nd.op = op;
        nd.a = a;
        nd.b = b;
        set_shape(nd, shape);
        nd.val.assign(nd.numel(), S(0));
        nd.needs_grad = node(a).needs_grad || (b >= 0 && node(b).needs_grad);
        return nd;
    }

    Id push(Node&& nd) {
        check_finite(nd);
        nodes_.push_back(std::move(nd));
        return Id(nodes_.size() - 1);
    }

    void check_finite(const Node& nd) const {
        for (S v : nd.val)
            if (!std::isfinite(double(v)))
                throw GraphError(std::string("non-finite value in output of ") + op_name(nd.op));
    }

    template <typename F>
    Id unary(Op op, Id x, F&& f) {
        const Node& nx = node(x);
        Node nd = make(op, x, -1, {nx.rows, nx.cols});
        nd.rank = nx.rank;
        for (size_t i = 0; i < nx.val.size(); ++i) nd.val[i] = f(nx.val[i]);
        return push(std::move(nd));
    }

    // broadcast modes for add/mul: identical shapes, b as a (1,c) row
    // applied to every row, or b as an (r,1) column applied to every column
    enum class Bcast : uint8_t { None, Row, Col };

    Bcast bcast_mode(const Node& na, const Node& nb) const {
        if (na.rows == nb.rows && na.cols == nb.cols) return Bcast::None;
        if (nb.rows == 1 && nb.cols == na.cols) return Bcast::Row;
        if (nb.cols == 1 && nb.rows == na.rows) return Bcast::Col;
        throw GraphError("add/mul: shapes not broadcastable");
    }

    Id binary_broadcast(Op op, Id a, Id b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        Bcast bc = bcast_mode(na, nb);
        Node nd = make(op, a, b, {na.rows, na.cols});
        nd.rank = na.rank;
        int r = na.rows, c = na.cols;
        for (int i = 0; i < r; ++i) {
            const S* arow = na.val.data() + int64_t(i) * c;
            S* out = nd.val.data() + int64_t(i) * c;
            for (int j = 0; j < c; ++j) {
                S bv = bc == Bcast::None ? nb.val[int64_t(i) * c + j]
                       : bc == Bcast::Row ? nb.val[size_t(j)]
                                          : nb.val[size_t(i)];
                out[j] = op == Op::Add ? arow[j] + bv : arow[j] * bv;
            }
        }
        return push(std::move(nd));
    }

    std::vector<S>& ensure_grad(Id id) {
        Node& n = node_mut(id);
        if (n.grad.empty()) n.grad.assign(n.numel(), S(0));
        return n.grad;
    }

    void propagate(Node& n) {
        const std::vector<S>& g = n.grad;
        Node& na = node_mut(n.a);
        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::MatMul: {
                Node& nb = node_mut(n.b);
                int m = n.rows, out_n = n.cols;
                int k = n.flag_a ? na.rows : na.cols;
                if (na.needs_grad) {
                    std::vector<S>& ga = ensure_grad(n.a);
                    std::vector<S> tmp(na.val.size());
                    if (!n.flag_a) {
                        // dA = G * op(B)^T
                        gemm<S>(false, !n.flag_b, m, k, out_n, g.data(), nb.val.data(), tmp.data());
                    } else {
                        // A stored (k,m): dA = op(B) * G^T with op depending on flag_b
                        gemm<S>(n.flag_b, true, k, m, out_n, nb.val.data(), g.data(), tmp.data());
                    }
                    for (size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
                }
                if (nb.needs_grad) {
                    std::vector<S>& gb = ensure_grad(n.b);
                    std::vector<S> tmp(nb.val.size());
                    if (!n.flag_b) {
                        // dB = op(A)^T * G
                        gemm<S>(!n.flag_a, false, k, out_n, m, na.val.data(), g.data(), tmp.data());
                    } else {
                        // B stored (n,k): dB = G^T * op(A)
                        gemm<S>(true, n.flag_a, out_n, k, m, g.data(), na.val.data(), tmp.data());
                    }
                    for (size_t i = 0; i < tmp.size(); ++i) gb[i] += tmp[i];
                }
                break;
            }
            case Op::Add:
            case Op::Mul: {
                Node& nb = node_mut(n.b);
                Bcast bc = bcast_mode(na, nb);
                int r = n.rows, c = n.cols;
                if (na.needs_grad) {
                    std::vector<S>& ga = ensure_grad(n.a);
                    for (int64_t i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j) {
                            S gv = g[size_t(i * c + j)];
                            if (n.op == Op::Mul) {
                                S bv = bc == Bcast::None ? nb.val[size_t(i * c + j)]
                                       : bc == Bcast::Row ? nb.val[size_t(j)]
                                                          : nb.val[size_t(i)];
                                gv *= bv;
                            }
                            ga[size_t(i * c + j)] += gv;
                        }
                }
                if (nb.needs_grad) {
                    std::vector<S>& gb = ensure_grad(n.b);
                    for (int64_t i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j) {
                            S gv = g[size_t(i * c + j)];
                            if (n.op == Op::Mul) gv *= na.val[size_t(i * c + j)];
                            size_t bi = bc == Bcast::None ? size_t(i * c + j)
                                        : bc == Bcast::Row ? size_t(j)
                                                           : size_t(i);
                            gb[bi] += gv;
                        }
                }
                break;
            }
            case Op::Concat: {
                Node& nb = node_mut(n.b);
                int c = n.cols;
                if (n.axis == 0) {
                    if (na.needs_grad) {
                        std::vector<S>& ga = ensure_grad(n.a);
                        for (size_t i = 0; i < na.val.size(); ++i) ga[i] += g[i];
                    }
                    if (nb.needs_grad) {
                        std::vector<S>& gb = ensure_grad(n.b);
                        for (size_t i = 0; i < nb.val.size(); ++i) gb[i] += g[na.val.size() + i];
                    }
                } else {
                    if (na.needs_grad) {
                        std::vector<S>& ga = ensure_grad(n.a);
                        for (int64_t i = 0; i < n.rows; ++i)
                            for (int j = 0; j < na.cols; ++j)
                                ga[size_t(i * na.cols + j)] += g[size_t(i * c + j)];
                    }
                    if (nb.needs_grad) {
                        std::vector<S>& gb = ensure_grad(n.b);
                        for (int64_t i = 0; i < n.rows; ++i)
                            for (int j = 0; j < nb.cols; ++j)
                                gb[size_t(i * nb.cols + j)] += g[size_t(i * c + na.cols + j)];
                    }
                }
                break;
            }
            case Op::Gelu: {
                if (!na.needs_grad) break;
                std::vector<S>& ga = ensure_grad(n.a);
                for (size_t i = 0; i < na.val.size(); ++i) {
                    double x = double(na.val[i]);
                    double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
                    double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
                    ga[i] += g[i] * S(cdf + x * pdf);
                }
                break;
            }
            case Op::Relu: {
                if (!na.needs_grad) break;
                std::vector<S>& ga = ensure_grad(n.a);
                for (size_t i = 0; i < na.val.size(); ++i)
                    if (na.val[i] > S(0)) ga[i] += g[i];
                break;
            }
            case Op::Sigmoid: {
                if (!na.needs_grad) break;
                std::vector<S>& ga = ensure_grad(n.a);
                for (size_t i = 0; i < n.val.size(); ++i) ga[i] += g[i] * n.val[i] * (S(1) - n.val[i]);
                break;
            }
            case Op::Log: {
                if (!na.needs_grad) break;
                std::vector<S>& ga = ensure_grad(n.a);
                for (size_t i = 0; i < na.val.size(); ++i) ga[i] += g[i] / na.val[i];
                break;
            }
            case Op::Rsqrt: {
                if (!na.needs_grad) break;
                std::vector<S>& ga = ensure_grad(n.a);
                for (size_t i = 0; i < na.val.size(); ++i)
                    ga[i] += g[i] * S(-0.5) * n.val[i] / na.val[i];
                break;
            }
            case Op::Softmax: {
                if (!na.needs_grad) break;
                std::vector<S>& ga = ensure_grad(n.a);
                int outer = n.axis == 1 ? n.rows : n.cols;
                int inner = n.axis == 1 ? n.cols : n.rows;
                for (int i = 0; i < outer; ++i) {
                    auto at = [&](int j) -> size_t {
                        return n.axis == 1 ? size_t(i) * n.cols + j : size_t(j) * n.cols + i;
                    };
                    S dot = S(0);
                    for (int j = 0; j < inner; ++j) dot += g[at(j)] * n.val[at(j)];
                    for (int j = 0; j < inner; ++j) ga[at(j)] += n.val[at(j)] * (g[at(j)] - dot);
                }
                break;
            }
            case Op::LayerNorm: {
                if (!na.needs_grad) break;
                std::vector<S>& ga = ensure_grad(n.a);
                int c = n.cols;
                for (int i = 0; i < n.rows; ++i) {
                    const S* y = n.val.data() + int64_t(i) * c;
                    const S* gr = g.data() + int64_t(i) * c;
                    S inv = n.aux[size_t(i)];
                    S gmean = S(0), gymean = S(0);
                    for (int j = 0; j < c; ++j) {
                        gmean += gr[j];
                        gymean += gr[j] * y[j];
                    }
                    gmean /= S(c);
                    gymean /= S(c);
                    S* out = ga.data() + int64_t(i) * c;
                    for (int j = 0; j < c; ++j) out[j] += inv * (gr[j] - gmean - y[j] * gymean);
                }
                break;
            }
            case Op::Mean: {
                if (!na.needs_grad) break;
                std::vector<S>& ga = ensure_grad(n.a);
                S gv = g[0] / S(na.numel());
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += gv;
                break;
            }
            case Op::Sum: {
                if (!na.needs_grad) break;
                std::vector<S>& ga = ensure_grad(n.a);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
                break;
            }
            case Op::EmbedLookup: {
                if (!na.needs_grad) break;
                std::vector<S>& ga = ensure_grad(n.a);
                int c = n.cols;
                for (size_t i = 0; i < n.ids.size(); ++i)
                    for (int j = 0; j < c; ++j)
                        ga[size_t(n.ids[i]) * c + j] += g[i * c + j];
                break;
            }
            case Op::Scale: {
                if (!na.needs_grad) break;
                std::vector<S>& ga = ensure_grad(n.a);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * n.alpha;
                break;
            }
        }
    }
};

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// 64-bit only; `build` must construct a scalar root from the leaf it is given.
inline double grad_check(const std::function<Graph<double>::Id(Graph<double>&, Graph<double>::Id)>& build,
                         const HostTensor<double>& x0, double step) {
    Graph<double> g;
    auto x = g.leaf(x0, true);
    auto root = build(g, x);
    g.backward(root);
    std::vector<double> analytic(g.grad(x).begin(), g.grad(x).end());

    double max_rel = 0.0;
    HostTensor<double> xp = x0;
    for (size_t i = 0; i < x0.data.size(); ++i) {
        double keep = xp.data[i];
        xp.data[i] = keep + step;
        Graph<double> gp;
        double fp = gp.value(build(gp, gp.leaf(xp, false)))[0];
        xp.data[i] = keep - step;
        Graph<double> gm;
        double fm = gm.value(build(gm, gm.leaf(xp, false)))[0];
        xp.data[i] = keep;
        double numeric = (fp - fm) / (2.0 * step);
        double rel = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace remed::nd
