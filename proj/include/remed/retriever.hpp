#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "remed/graph.hpp"
#include "remed/rng.hpp"

namespace remed::retriever {

using nd::Graph;
using nd::HostTensor;

enum class ScorerKind { Mlp, Cosine };

struct RetrieverConfig {
    int dim{64};       // event vector dimension
    int d_time{9};     // time feature width, odd: [a, sin/cos pairs]
    int hidden{128};   // MLP hidden width (2*dim by default)
    int chunk{4096};   // streaming chunk size
    ScorerKind kind{ScorerKind::Mlp};

    int input_width() const { return kind == ScorerKind::Mlp ? dim + d_time : dim; }
};

// Normalized elapsed time a = (T-t)/T in (0,1], expanded with sin/cos pairs at
// geometric frequencies 1,2,4,... Raw minutes are scale-unstable as MLP input.
template <typename S>
inline void time_features(S t, S T, int d_time, S* out) {
    if (!(t >= S(0)) || !(t < T)) throw nd::GraphError("time_features: requires 0 <= t < T");
    S a = (T - t) / T;
    out[0] = a;
    int pairs = (d_time - 1) / 2;
    double freq = 1.0;
    for (int i = 0; i < pairs; ++i) {
        double phase = 6.283185307179586 * double(a) * freq;
        out[1 + 2 * i] = S(std::sin(phase));
        out[2 + 2 * i] = S(std::cos(phase));
        freq *= 2.0;
    }
}

template <typename S>
struct RetrieverParams {
    ScorerKind kind{ScorerKind::Mlp};
    // MLP scorer: (dim + d_time) -> hidden -> hidden -> 1, GELU activations
    HostTensor<S> w1, b1, w2, b2, w3, b3;
    // cosine scorer: trainable task query vector, no time input
    HostTensor<S> query;

    static RetrieverParams init(const RetrieverConfig& cfg, Rng rng) {
        RetrieverParams p;
        p.kind = cfg.kind;
        if (cfg.kind == ScorerKind::Mlp) {
            int in = cfg.dim + cfg.d_time;
            p.w1 = HostTensor<S>::glorot(in, cfg.hidden, rng);
            p.b1 = HostTensor<S>::zeros({1, cfg.hidden});
            p.w2 = HostTensor<S>::glorot(cfg.hidden, cfg.hidden, rng);
            p.b2 = HostTensor<S>::zeros({1, cfg.hidden});
            p.w3 = HostTensor<S>::glorot(cfg.hidden, 1, rng);
            p.b3 = HostTensor<S>::zeros({1, 1});
        } else {
            p.query = HostTensor<S>::glorot(1, cfg.dim, rng);
        }
        return p;
    }

    template <typename F>
    void for_each(F&& fn) {
        if (kind == ScorerKind::Mlp) {
            fn("retriever.w1", w1);
            fn("retriever.b1", b1);
            fn("retriever.w2", w2);
            fn("retriever.b2", b2);
            fn("retriever.w3", w3);
            fn("retriever.b3", b3);
        } else {
            fn("retriever.query", query);
        }
    }
};

// Fixed-size buffers for one streaming pass; peak additional memory of
// scoring + selection is exactly these plus the k-entry heap, independent of
// the event count.
template <typename S>
struct ScoreWorkspace {
    std::vector<S> vecs, times, input, h1, h2, scores;

    void ensure(const RetrieverConfig& cfg) {
        size_t c = size_t(cfg.chunk);
        vecs.resize(c * size_t(cfg.dim));
        times.resize(c);
        input.resize(c * size_t(cfg.input_width()));
        h1.resize(c * size_t(cfg.hidden));
        h2.resize(c * size_t(cfg.hidden));
        scores.resize(c);
    }

    size_t capacity_bytes() const {
        return (vecs.capacity() + times.capacity() + input.capacity() + h1.capacity() + h2.capacity() +
                scores.capacity()) *
               sizeof(S);
    }
};

namespace detail {

template <typename S>
inline void gelu_inplace(S* x, size_t n) {
    for (size_t i = 0; i < n; ++i)
        x[i] = S(0.5) * x[i] * (S(1) + S(std::erf(double(x[i]) * 0.7071067811865475)));
}

template <typename S>
inline void add_row_bias(S* x, const S* b, int rows, int cols) {
    for (int64_t i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) x[i * cols + j] += b[j];
}

}  // namespace detail

// s_i = MLP(concat(v_i, time_features(t_i, T))). Row-independent, so chunked
// evaluation is bit-identical to a single pass. tf_rows, when given, must hold
// time_features(times[i], T) per event; passing a cache of those rows skips
// the sin/cos work without changing a single bit of the result.
template <typename S>
inline void score_chunk(const RetrieverConfig& cfg, const RetrieverParams<S>& p, const S* vecs,
                        const S* times, int count, S T, ScoreWorkspace<S>& ws, S* out,
                        const S* tf_rows = nullptr) {
    if (p.kind == ScorerKind::Cosine) {
        const S* q = p.query.data.data();
        double qn = 0;
        for (int j = 0; j < cfg.dim; ++j) qn += double(q[j]) * double(q[j]);
        qn = std::sqrt(qn);
        if (qn == 0) throw nd::GraphError("cosine scorer: zero-norm query");
        for (int i = 0; i < count; ++i) {
            const S* v = vecs + int64_t(i) * cfg.dim;
            double dot = 0, vn = 0;
            for (int j = 0; j < cfg.dim; ++j) {
                dot += double(v[j]) * double(q[j]);
                vn += double(v[j]) * double(v[j]);
            }
            if (vn == 0) throw nd::GraphError("cosine scorer: zero-norm event vector");
            out[i] = S(dot / (std::sqrt(vn) * qn));
        }
        return;
    }
    ws.ensure(cfg);
    int in_w = cfg.input_width();
    for (int i = 0; i < count; ++i) {
        S* row = ws.input.data() + int64_t(i) * in_w;
        std::copy_n(vecs + int64_t(i) * cfg.dim, cfg.dim, row);
        if (tf_rows)
            std::copy_n(tf_rows + int64_t(i) * cfg.d_time, cfg.d_time, row + cfg.dim);
        else
            time_features(times[i], T, cfg.d_time, row + cfg.dim);
    }
    nd::gemm<S>(false, false, count, cfg.hidden, in_w, ws.input.data(), p.w1.data.data(), ws.h1.data());
    detail::add_row_bias(ws.h1.data(), p.b1.data.data(), count, cfg.hidden);
    detail::gelu_inplace(ws.h1.data(), size_t(count) * size_t(cfg.hidden));
    nd::gemm<S>(false, false, count, cfg.hidden, cfg.hidden, ws.h1.data(), p.w2.data.data(), ws.h2.data());
    detail::add_row_bias(ws.h2.data(), p.b2.data.data(), count, cfg.hidden);
    detail::gelu_inplace(ws.h2.data(), size_t(count) * size_t(cfg.hidden));
    nd::gemm<S>(false, false, count, 1, cfg.hidden, ws.h2.data(), p.w3.data.data(), out);
    for (int i = 0; i < count; ++i) {
        out[i] += p.b3.data[0];
        if (!std::isfinite(double(out[i]))) throw nd::GraphError("score_events: non-finite score");
    }
}

// Chunk provider for streaming scoring: fills vecs (n x dim, row-major) and
// times for events [start, start+n).
template <typename S>
struct EventSource {
    int64_t count{0};
    std::function<void(int64_t start, int n, S* vecs, S* times)> fill;
};

template <typename S>
struct TopKEntry {
    S score;
    S t;
    int64_t idx;
};

// tie rule: higher score first, then more recent (larger t), then lower index
template <typename S>
inline bool topk_better(const TopKEntry<S>& a, const TopKEntry<S>& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.t != b.t) return a.t > b.t;
    return a.idx < b.idx;
}

// k-entry heap; the comparator is a total order, so the selected set is
// independent of offer order (and hence of chunk scheduling).
template <typename S>
class TopKSelector {
public:
    explicit TopKSelector(int k) : k_(size_t(k)) {
        if (k < 1) throw nd::GraphError("top_k: k must be >= 1");
        heap_.reserve(k_ + 1);
    }

    void offer(S score, S t, int64_t idx) {
        TopKEntry<S> e{score, t, idx};
        if (heap_.size() < k_) {
            heap_.push_back(e);
            std::push_heap(heap_.begin(), heap_.end(), topk_better<S>);
            return;
        }
        if (topk_better(e, heap_.front())) {
            std::pop_heap(heap_.begin(), heap_.end(), topk_better<S>);
            heap_.back() = e;
            std::push_heap(heap_.begin(), heap_.end(), topk_better<S>);
        }
    }

    // retrieved events re-sorted by t ascending (index ascending on ties)
    std::vector<TopKEntry<S>> finalize_by_time() const {
        std::vector<TopKEntry<S>> out = heap_;
        std::sort(out.begin(), out.end(), [](const TopKEntry<S>& a, const TopKEntry<S>& b) {
            if (a.t != b.t) return a.t < b.t;
            return a.idx < b.idx;
        });
        return out;
    }

    size_t heap_bytes() const { return heap_.capacity() * sizeof(TopKEntry<S>); }

private:
    size_t k_;
    std::vector<TopKEntry<S>> heap_;
};

template <typename S>
inline std::vector<int64_t> top_k(std::span<const S> scores, std::span<const S> times, int k) {
    TopKSelector<S> sel(k);
    for (size_t i = 0; i < scores.size(); ++i) sel.offer(scores[i], times[i], int64_t(i));
    std::vector<int64_t> out;
    for (const auto& e : sel.finalize_by_time()) out.push_back(e.idx);
    return out;
}

// Full streaming pass: score in fixed-size chunks, keep only the k best.
// Peak additional memory is O(chunk + k) regardless of source.count.
template <typename S>
inline std::vector<TopKEntry<S>> retrieve_topk(const RetrieverConfig& cfg, const RetrieverParams<S>& p,
                                               const EventSource<S>& src, S T, int k,
                                               ScoreWorkspace<S>& ws) {
    ws.ensure(cfg);
    TopKSelector<S> sel(k);
    for (int64_t start = 0; start < src.count; start += cfg.chunk) {
        int n = int(std::min<int64_t>(cfg.chunk, src.count - start));
        src.fill(start, n, ws.vecs.data(), ws.times.data());
        score_chunk(cfg, p, ws.vecs.data(), ws.times.data(), n, T, ws, ws.scores.data());
        for (int i = 0; i < n; ++i) sel.offer(ws.scores[size_t(i)], ws.times[size_t(i)], start + i);
    }
    return sel.finalize_by_time();
}

// All scores materialized (analysis paths); O(n) output by construction.
template <typename S>
inline std::vector<S> score_all(const RetrieverConfig& cfg, const RetrieverParams<S>& p,
                                const EventSource<S>& src, S T, ScoreWorkspace<S>& ws) {
    ws.ensure(cfg);
    std::vector<S> out(size_t(src.count));
    for (int64_t start = 0; start < src.count; start += cfg.chunk) {
        int n = int(std::min<int64_t>(cfg.chunk, src.count - start));
        src.fill(start, n, ws.vecs.data(), ws.times.data());
        score_chunk(cfg, p, ws.vecs.data(), ws.times.data(), n, T, ws, out.data() + start);
    }
    return out;
}

// softmax over the retrieved subset; invariant under adding a constant
template <typename S>
inline std::vector<S> normalize_weights(std::span<const S> retrieved_scores) {
    if (retrieved_scores.empty()) throw nd::GraphError("normalize_weights: empty score set");
    S mx = retrieved_scores[0];
    for (S s : retrieved_scores) mx = std::max(mx, s);
    std::vector<S> w(retrieved_scores.size());
    S denom = S(0);
    for (size_t i = 0; i < w.size(); ++i) {
        w[i] = S(std::exp(double(retrieved_scores[i] - mx)));
        denom += w[i];
    }
    for (auto& x : w) x /= denom;
    return w;
}

// In-graph scorer for the R-Path; reuses the same gemm/GELU arithmetic as
// score_chunk so recomputed scores match the streamed ones bit for bit.
// `rows` is the (count x input_width) matrix of [v_i | time_features].
template <typename S>
inline typename Graph<S>::Id build_mlp_scores(Graph<S>& g, typename Graph<S>::Id rows,
                                              typename Graph<S>::Id w1, typename Graph<S>::Id b1,
                                              typename Graph<S>::Id w2, typename Graph<S>::Id b2,
                                              typename Graph<S>::Id w3, typename Graph<S>::Id b3) {
    auto h1 = g.gelu(g.add(g.matmul(rows, w1), b1));
    auto h2 = g.gelu(g.add(g.matmul(h1, w2), b2));
    return g.add(g.matmul(h2, w3), b3);
}

// In-graph cosine scores: rows must be pre-normalized event vectors (constants).
template <typename S>
inline typename Graph<S>::Id build_cosine_scores(Graph<S>& g, typename Graph<S>::Id unit_rows,
                                                 typename Graph<S>::Id query) {
    auto dots = g.matmul(unit_rows, query, false, true);           // (k,1)
    auto inv_norm = g.rsqrt(g.sum(g.mul(query, query)));           // (1,1)
    return g.mul(dots, inv_norm);
}

}  // namespace remed::retriever
