#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "remed/graph.hpp"
#include "remed/rng.hpp"

namespace remed::tf {

using nd::Graph;
using nd::HostTensor;

// Resolves host parameter tensors to per-graph leaf ids. Register each
// component once per step graph; leaves registered with grad_required=true
// report exact-zero gradients when nothing connects them to the loss, which
// is what the frozen-path checks assert.
template <typename S>
class ParamLeaves {
public:
    explicit ParamLeaves(Graph<S>& g) : g_(&g) {}

    template <typename P>
    void register_component(P& params, bool grad_required) {
        params.for_each([&](const char*, HostTensor<S>& t) {
            ids_.emplace(&t, g_->leaf(t, grad_required));
        });
    }

    typename Graph<S>::Id operator()(const HostTensor<S>& t) const {
        auto it = ids_.find(&t);
        if (it == ids_.end()) throw nd::GraphError("parameter tensor not registered in this graph");
        return it->second;
    }

private:
    Graph<S>* g_;
    std::unordered_map<const HostTensor<S>*, typename Graph<S>::Id> ids_;
};

template <typename S>
struct TransformerLayerParams {
    HostTensor<S> ln1_g, ln1_b;
    std::vector<HostTensor<S>> wq, wk, wv;  // one (d_model, d_head) matrix per head
    HostTensor<S> wo, bo;
    HostTensor<S> ln2_g, ln2_b;
    HostTensor<S> ff1, ff1_b, ff2, ff2_b;
};

// Pre-layernorm encoder stack, no positional encoding: order information only
// enters through whatever the caller adds to the input rows.
template <typename S>
struct TransformerParams {
    int d_model{0}, heads{0}, ffn{0};
    std::vector<TransformerLayerParams<S>> layers;
    HostTensor<S> lnf_g, lnf_b;

    static TransformerParams init(int d_model, int n_layers, int heads, int ffn, Rng rng) {
        if (d_model % heads != 0) throw nd::GraphError("transformer: d_model must divide by heads");
        TransformerParams p;
        p.d_model = d_model;
        p.heads = heads;
        p.ffn = ffn;
        int dh = d_model / heads;
        for (int l = 0; l < n_layers; ++l) {
            TransformerLayerParams<S> lp;
            lp.ln1_g = HostTensor<S>::ones({1, d_model});
            lp.ln1_b = HostTensor<S>::zeros({1, d_model});
            for (int h = 0; h < heads; ++h) {
                lp.wq.push_back(HostTensor<S>::glorot(d_model, dh, rng));
                lp.wk.push_back(HostTensor<S>::glorot(d_model, dh, rng));
                lp.wv.push_back(HostTensor<S>::glorot(d_model, dh, rng));
            }
            lp.wo = HostTensor<S>::glorot(d_model, d_model, rng);
            lp.bo = HostTensor<S>::zeros({1, d_model});
            lp.ln2_g = HostTensor<S>::ones({1, d_model});
            lp.ln2_b = HostTensor<S>::zeros({1, d_model});
            lp.ff1 = HostTensor<S>::glorot(d_model, ffn, rng);
            lp.ff1_b = HostTensor<S>::zeros({1, ffn});
            lp.ff2 = HostTensor<S>::glorot(ffn, d_model, rng);
            lp.ff2_b = HostTensor<S>::zeros({1, d_model});
            p.layers.push_back(std::move(lp));
        }
        p.lnf_g = HostTensor<S>::ones({1, d_model});
        p.lnf_b = HostTensor<S>::zeros({1, d_model});
        return p;
    }

    template <typename F>
    void for_each_prefixed(const std::string& prefix, F&& fn) {
        for (size_t l = 0; l < layers.size(); ++l) {
            auto& lp = layers[l];
            std::string base = prefix + ".layer" + std::to_string(l) + ".";
            auto emit = [&](const std::string& name, HostTensor<S>& t) { fn((base + name).c_str(), t); };
            emit("ln1_g", lp.ln1_g);
            emit("ln1_b", lp.ln1_b);
            for (size_t h = 0; h < lp.wq.size(); ++h) {
                emit("h" + std::to_string(h) + ".wq", lp.wq[h]);
                emit("h" + std::to_string(h) + ".wk", lp.wk[h]);
                emit("h" + std::to_string(h) + ".wv", lp.wv[h]);
            }
            emit("wo", lp.wo);
            emit("bo", lp.bo);
            emit("ln2_g", lp.ln2_g);
            emit("ln2_b", lp.ln2_b);
            emit("ff1", lp.ff1);
            emit("ff1_b", lp.ff1_b);
            emit("ff2", lp.ff2);
            emit("ff2_b", lp.ff2_b);
        }
        fn((prefix + ".lnf_g").c_str(), lnf_g);
        fn((prefix + ".lnf_b").c_str(), lnf_b);
    }
};

template <typename S>
inline typename Graph<S>::Id affine_layernorm(Graph<S>& g, typename Graph<S>::Id x,
                                              typename Graph<S>::Id gain, typename Graph<S>::Id bias) {
    return g.add(g.mul(g.layernorm(x), gain), bias);
}

// x: (n, d_model) -> (n, d_model), final layernorm applied
template <typename S>
inline typename Graph<S>::Id build_stack(Graph<S>& g, const ParamLeaves<S>& L,
                                         TransformerParams<S>& p, typename Graph<S>::Id x) {
    int dh = p.d_model / p.heads;
    const S inv_sqrt_dh = S(1.0 / std::sqrt(double(dh)));
    for (auto& lp : p.layers) {
        auto xn = affine_layernorm(g, x, L(lp.ln1_g), L(lp.ln1_b));
        typename Graph<S>::Id heads_out = -1;
        for (int h = 0; h < p.heads; ++h) {
            auto q = g.matmul(xn, L(lp.wq[size_t(h)]));
            auto k = g.matmul(xn, L(lp.wk[size_t(h)]));
            auto v = g.matmul(xn, L(lp.wv[size_t(h)]));
            auto att = g.softmax(g.scale(g.matmul(q, k, false, true), inv_sqrt_dh), 1);
            auto o = g.matmul(att, v);
            heads_out = h == 0 ? o : g.concat(heads_out, o, 1);
        }
        auto proj = g.add(g.matmul(heads_out, L(lp.wo)), L(lp.bo));
        x = g.add(x, proj);
        auto xn2 = affine_layernorm(g, x, L(lp.ln2_g), L(lp.ln2_b));
        auto ff = g.add(g.matmul(g.gelu(g.add(g.matmul(xn2, L(lp.ff1)), L(lp.ff1_b))), L(lp.ff2)),
                        L(lp.ff2_b));
        x = g.add(x, ff);
    }
    return affine_layernorm(g, x, L(p.lnf_g), L(p.lnf_b));
}

}  // namespace remed::tf
