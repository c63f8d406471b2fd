#pragma once

#include <numeric>
#include <vector>

#include "remed/events.hpp"
#include "remed/retriever.hpp"
#include "remed/transformer.hpp"

namespace remed::predictor {

using events::TaskKind;
using events::TaskSpec;
using nd::Graph;
using nd::HostTensor;

struct PredictorConfig {
    int dim{64};      // event vector dimension
    int d_time{9};    // must match the retriever's time feature width
    int d_model{64};
    int layers{2};
    int heads{4};
    int ffn{256};
};

template <typename S>
struct PredictorParams {
    HostTensor<S> in_w, in_b;   // dim -> d_model
    HostTensor<S> time_w;       // d_time -> d_model, added to the projected event
    HostTensor<S> cls;          // learned CLS vector, prepended to the set
    tf::TransformerParams<S> stack;
    std::vector<HostTensor<S>> head_w, head_b;  // one linear head per task

    static PredictorParams init(const PredictorConfig& cfg, const std::vector<TaskSpec>& tasks, Rng rng) {
        PredictorParams p;
        p.in_w = HostTensor<S>::glorot(cfg.dim, cfg.d_model, rng);
        p.in_b = HostTensor<S>::zeros({1, cfg.d_model});
        p.time_w = HostTensor<S>::glorot(cfg.d_time, cfg.d_model, rng);
        p.cls = HostTensor<S>::glorot(1, cfg.d_model, rng);
        p.stack = tf::TransformerParams<S>::init(cfg.d_model, cfg.layers, cfg.heads, cfg.ffn, rng.derive("stack"));
        for (const auto& t : tasks) {
            p.head_w.push_back(HostTensor<S>::glorot(cfg.d_model, t.head_width(), rng));
            p.head_b.push_back(HostTensor<S>::zeros({1, t.head_width()}));
        }
        return p;
    }

    template <typename F>
    void for_each(F&& fn) {
        fn("predictor.in_w", in_w);
        fn("predictor.in_b", in_b);
        fn("predictor.time_w", time_w);
        fn("predictor.cls", cls);
        stack.for_each_prefixed("predictor", fn);
        for (size_t i = 0; i < head_w.size(); ++i) {
            fn(("predictor.head" + std::to_string(i) + ".w").c_str(), head_w[i]);
            fn(("predictor.head" + std::to_string(i) + ".b").c_str(), head_b[i]);
        }
    }
};

// Canonical ordering of the retrieved set: by timestamp, then by vector
// content. predict_set is a set function; fixing the internal order makes the
// permutation invariance exact down to the last bit.
template <typename S>
inline std::vector<int> canonical_order(const S* vecs, const S* times, int count, int dim) {
    std::vector<int> order(static_cast<size_t>(count));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (times[a] != times[b]) return times[a] < times[b];
        const S* va = vecs + int64_t(a) * dim;
        const S* vb = vecs + int64_t(b) * dim;
        for (int j = 0; j < dim; ++j)
            if (va[j] != vb[j]) return va[j] < vb[j];
        return false;
    });
    return order;
}

// Transformer over the retrieved event set: events projected to d_model plus
// their time embedding, CLS prepended, no positional encoding. Returns one
// logits node per task, each (1, head_width).
template <typename S>
inline std::vector<typename Graph<S>::Id> predict_set(Graph<S>& g, const tf::ParamLeaves<S>& L,
                                                      PredictorParams<S>& p, const PredictorConfig& cfg,
                                                      const S* vecs, const S* times, int count, S T) {
    if (count < 1) throw nd::GraphError("predict_set: empty event set");
    std::vector<int> order = canonical_order(vecs, times, count, cfg.dim);

    std::vector<S> x(size_t(count) * size_t(cfg.dim));
    std::vector<S> tfeat(size_t(count) * size_t(cfg.d_time));
    for (int i = 0; i < count; ++i) {
        int src = order[size_t(i)];
        std::copy_n(vecs + int64_t(src) * cfg.dim, cfg.dim, x.begin() + int64_t(i) * cfg.dim);
        retriever::time_features(times[src], T, cfg.d_time, tfeat.data() + int64_t(i) * cfg.d_time);
    }
    auto xin = g.constant({count, cfg.dim}, x);
    auto tin = g.constant({count, cfg.d_time}, tfeat);

    auto h = g.add(g.add(g.matmul(xin, L(p.in_w)), L(p.in_b)), g.matmul(tin, L(p.time_w)));
    auto seq = g.concat(L(p.cls), h, 0);
    auto y = tf::build_stack(g, L, p.stack, seq);

    // row 0 (CLS) extracted with a constant selector
    std::vector<S> sel(size_t(count) + 1, S(0));
    sel[0] = S(1);
    auto cls_out = g.matmul(g.constant({1, count + 1}, sel), y);

    std::vector<typename Graph<S>::Id> logits;
    for (size_t t = 0; t < p.head_w.size(); ++t)
        logits.push_back(g.add(g.matmul(cls_out, L(p.head_w[t])), L(p.head_b[t])));
    return logits;
}

template <typename S>
inline std::vector<typename Graph<S>::Id> predict_single(Graph<S>& g, const tf::ParamLeaves<S>& L,
                                                         PredictorParams<S>& p, const PredictorConfig& cfg,
                                                         const S* vec, S t, S T) {
    return predict_set(g, L, p, cfg, vec, &t, 1, T);
}

// binary/multilabel -> per-component sigmoid; multiclass -> softmax
template <typename S>
inline typename Graph<S>::Id to_probabilities(Graph<S>& g, typename Graph<S>::Id logits,
                                              const TaskSpec& spec) {
    if (g.cols(logits) != spec.head_width() || g.rows(logits) != 1)
        throw nd::GraphError("to_probabilities: logits shape does not match task '" + spec.name + "'");
    if (spec.kind == TaskKind::Multiclass) return g.softmax(logits, 1);
    return g.sigmoid(logits);
}

// value-level convenience used by evaluation paths
template <typename S>
inline std::vector<S> to_probabilities_values(std::span<const S> logits, const TaskSpec& spec) {
    if (int(logits.size()) != spec.head_width())
        throw nd::GraphError("to_probabilities: logits shape does not match task '" + spec.name + "'");
    std::vector<S> out(logits.size());
    if (spec.kind == TaskKind::Multiclass) {
        S mx = logits[0];
        for (S v : logits) mx = std::max(mx, v);
        S denom = S(0);
        for (size_t i = 0; i < out.size(); ++i) {
            out[i] = S(std::exp(double(logits[i] - mx)));
            denom += out[i];
        }
        for (auto& v : out) v /= denom;
    } else {
        for (size_t i = 0; i < out.size(); ++i) out[i] = S(1) / (S(1) + S(std::exp(double(-logits[i]))));
    }
    return out;
}

// No-grad forward: fresh graph over constants, values returned per task.
template <typename S>
inline std::vector<std::vector<S>> predict_set_values(PredictorParams<S>& p, const PredictorConfig& cfg,
                                                      const S* vecs, const S* times, int count, S T,
                                                      bool as_probabilities,
                                                      const std::vector<TaskSpec>& tasks) {
    Graph<S> g;
    tf::ParamLeaves<S> L(g);
    L.register_component(p, false);
    auto logits = predict_set(g, L, p, cfg, vecs, times, count, T);
    std::vector<std::vector<S>> out;
    for (size_t t = 0; t < logits.size(); ++t) {
        auto v = g.value(logits[t]);
        if (as_probabilities)
            out.push_back(to_probabilities_values<S>(v, tasks[t]));
        else
            out.emplace_back(v.begin(), v.end());
    }
    return out;
}

}  // namespace remed::predictor
