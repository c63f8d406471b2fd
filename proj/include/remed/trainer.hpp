#pragma once

#include <array>
#include <atomic>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "remed/adam.hpp"
#include "remed/encoder.hpp"
#include "remed/events.hpp"
#include "remed/loss.hpp"
#include "remed/predictor.hpp"
#include "remed/retriever.hpp"

namespace remed::trainer {

struct TrainDivergence : nd::GraphError {
    using nd::GraphError::GraphError;
};

struct TrainConfig {
    double learning_rate{1e-5};
    int warmup_steps{500};
    int batch_size{8};
    int k{128};
    int max_epochs{50};
    int patience{3};
    uint64_t seed{0};
    char path_order{'P'};        // which path takes the even steps
    int baseline_max_events{0};  // cached-baseline capacity (baseline only)

    void validate() const {
        if (learning_rate <= 0 || warmup_steps <= 0 || batch_size <= 0 || k <= 0 || max_epochs <= 0)
            throw nd::GraphError("train config: all fields must be positive");
        if (patience < 1) throw nd::GraphError("train config: patience must be >= 1");
        if (path_order != 'P' && path_order != 'R') throw nd::GraphError("train config: path_order must be P or R");
    }
};

// Counts Eq.-6-style weighted combinations. Evaluation is P-Path only; the
// acceptance suite asserts this counter never moves during eval.
inline std::atomic<uint64_t>& r_combine_count() {
    static std::atomic<uint64_t> c{0};
    return c;
}

// Compact, string-free training view of an encoded cohort.
struct EncodedCohort {
    int dim{0};
    uint64_t encoder_fingerprint{0};
    std::vector<events::TaskSpec> tasks;
    std::vector<std::string> patient_ids;  // per sample
    std::vector<int64_t> offsets;          // per-sample first row + end sentinel
    std::vector<float> vecs;               // rows x dim
    std::vector<float> times;
    std::vector<float> tfeat;              // rows x d_time, cached time features
    int d_time{9};
    std::vector<double> pred_time;
    std::vector<std::vector<events::Label>> labels;
    std::vector<std::vector<int>> relevant;  // absolute event indices, empty if none
    std::vector<int32_t> code_ids;           // per event
    std::vector<std::string> code_names;

    int samples() const { return int(pred_time.size()); }
    int64_t events_of(int s) const { return offsets[size_t(s) + 1] - offsets[size_t(s)]; }

    // incremental construction (streaming generate -> encode pipelines)
    void start(int dim_, uint64_t fp, std::vector<events::TaskSpec> tasks_) {
        dim = dim_;
        encoder_fingerprint = fp;
        tasks = std::move(tasks_);
        offsets.assign(1, 0);
    }
    void append_sample(const events::PatientSample& s, const encoder::AnyEncoder& enc);
};

EncodedCohort build_encoded(const events::Cohort& cohort, encoder::VectorCache cache);

// Sample subset plus an observation window applied on the fly. Events are
// sorted by time, so a window is a per-sample suffix of rows.
struct View {
    const EncodedCohort* base{nullptr};
    std::vector<int> samples;
    double window{events::kUnlimitedWindow};

    int64_t window_begin(int sample) const;
    View with_window(double minutes) const {
        View v = *this;
        v.window = minutes;
        return v;
    }
};

std::array<View, 3> split_views(const EncodedCohort& c, const std::vector<int>& ratios, uint64_t seed);

template <typename S>
struct BatchSample {
    const S* vecs{nullptr};
    const S* times{nullptr};
    const S* tfeat{nullptr};  // optional cached time-feature rows
    int64_t count{0};
    S pred_time{0};
    std::span<const events::Label> labels;
};

template <typename S>
struct StepResult {
    double loss{0};
    int skipped{0};
    std::vector<std::vector<S>> retriever_grads;  // for_each order
    std::vector<std::vector<S>> predictor_grads;
};

namespace detail {

template <typename S, typename P>
std::vector<std::vector<S>> pull_grads(nd::Graph<S>& g, const tf::ParamLeaves<S>& L, P& params) {
    std::vector<std::vector<S>> out;
    params.for_each([&](const char*, nd::HostTensor<S>& t) {
        auto gr = g.grad(L(t));
        out.emplace_back(gr.begin(), gr.end());
    });
    return out;
}

template <typename S>
std::vector<retriever::TopKEntry<S>> stream_topk(const retriever::RetrieverConfig& rcfg,
                                                 const retriever::RetrieverParams<S>& rp,
                                                 const BatchSample<S>& bs, int k,
                                                 retriever::ScoreWorkspace<S>& ws) {
    ws.ensure(rcfg);
    retriever::TopKSelector<S> sel(k);
    for (int64_t start = 0; start < bs.count; start += rcfg.chunk) {
        int n = int(std::min<int64_t>(rcfg.chunk, bs.count - start));
        retriever::score_chunk(rcfg, rp, bs.vecs + start * rcfg.dim, bs.times + start, n, bs.pred_time,
                               ws, ws.scores.data(),
                               bs.tfeat ? bs.tfeat + start * rcfg.d_time : nullptr);
        for (int i = 0; i < n; ++i) sel.offer(ws.scores[size_t(i)], bs.times[start + i], start + i);
    }
    return sel.finalize_by_time();
}

}  // namespace detail

// R-Path: score everything, retrieve top-k, predict each retrieved event
// independently with the frozen predictor and combine the per-event
// probabilities with softmax-normalized importance weights. Gradients reach
// the retriever through the weights only; the per-event predictions re-enter
// the tape as constants, so every predictor parameter gradient is exactly
// zero by disconnection.
template <typename S>
StepResult<S> r_path_step(std::span<const BatchSample<S>> batch, const retriever::RetrieverConfig& rcfg,
                          retriever::RetrieverParams<S>& rp, const predictor::PredictorConfig& pcfg,
                          predictor::PredictorParams<S>& pp, const std::vector<events::TaskSpec>& tasks,
                          int k, retriever::ScoreWorkspace<S>& ws) {
    nd::Graph<S> g;
    tf::ParamLeaves<S> L(g);
    L.register_component(rp, true);
    L.register_component(pp, true);
    LossBuilder<S> lb(g, tasks);
    StepResult<S> out;

    for (const auto& bs : batch) {
        if (bs.count == 0) {
            ++out.skipped;
            continue;
        }
        auto picked = detail::stream_topk(rcfg, rp, bs, k, ws);
        int kk = int(picked.size());

        // in-graph scores over the retrieved rows (same kernels, same values)
        typename nd::Graph<S>::Id scores;
        if (rcfg.kind == retriever::ScorerKind::Mlp) {
            int in_w = rcfg.input_width();
            std::vector<S> rows(size_t(kk) * size_t(in_w));
            for (int j = 0; j < kk; ++j) {
                S* row = rows.data() + int64_t(j) * in_w;
                std::copy_n(bs.vecs + picked[size_t(j)].idx * rcfg.dim, rcfg.dim, row);
                if (bs.tfeat)
                    std::copy_n(bs.tfeat + picked[size_t(j)].idx * rcfg.d_time, rcfg.d_time, row + rcfg.dim);
                else
                    retriever::time_features(picked[size_t(j)].t, bs.pred_time, rcfg.d_time, row + rcfg.dim);
            }
            auto rows_id = g.constant({kk, in_w}, rows);
            scores = retriever::build_mlp_scores(g, rows_id, L(rp.w1), L(rp.b1), L(rp.w2), L(rp.b2),
                                                 L(rp.w3), L(rp.b3));
        } else {
            std::vector<S> unit(size_t(kk) * size_t(rcfg.dim));
            for (int j = 0; j < kk; ++j) {
                const S* v = bs.vecs + picked[size_t(j)].idx * rcfg.dim;
                S norm = S(0);
                for (int c = 0; c < rcfg.dim; ++c) norm += v[c] * v[c];
                if (norm == S(0)) throw nd::GraphError("cosine scorer: zero-norm event vector");
                S inv = S(1) / S(std::sqrt(double(norm)));
                for (int c = 0; c < rcfg.dim; ++c) unit[size_t(j) * size_t(rcfg.dim) + size_t(c)] = v[c] * inv;
            }
            scores = retriever::build_cosine_scores(g, g.constant({kk, rcfg.dim}, unit), L(rp.query));
        }
        auto weights = g.softmax(scores, 0);  // (kk,1)

        // frozen predictor: per-event probabilities re-entered as constants
        std::vector<std::vector<S>> yhat(tasks.size());
        for (int j = 0; j < kk; ++j) {
            const S* v = bs.vecs + picked[size_t(j)].idx * rcfg.dim;
            auto logits = predictor::predict_single(g, L, pp, pcfg, v, picked[size_t(j)].t, bs.pred_time);
            for (size_t t = 0; t < tasks.size(); ++t) {
                auto pr = g.value(predictor::to_probabilities(g, logits[t], tasks[t]));
                yhat[t].insert(yhat[t].end(), pr.begin(), pr.end());
            }
        }
        std::vector<typename nd::Graph<S>::Id> combined(tasks.size());
        for (size_t t = 0; t < tasks.size(); ++t) {
            auto y = g.constant({kk, tasks[t].head_width()}, yhat[t]);
            combined[t] = g.matmul(weights, y, true, false);  // (1, width)
        }
        r_combine_count().fetch_add(1, std::memory_order_relaxed);
        lb.add_sample(combined, bs.labels, true);
    }

    auto root = lb.finalize();
    out.loss = double(g.value(root)[0]);
    g.backward(root);
    out.retriever_grads = detail::pull_grads(g, L, rp);
    out.predictor_grads = detail::pull_grads(g, L, pp);
    return out;
}

struct RetrievalMode {
    enum Kind { TopK, LastN } kind{TopK};
    int capacity{0};
};

// P-Path: retrieve with the frozen retriever (or truncate to the most recent
// events in baseline mode), feed the whole retrieved set to the predictor,
// loss on logits. Retriever parameters are registered as leaves but nothing
// connects them to the loss, so their gradients are exactly zero.
template <typename S>
StepResult<S> p_path_step(std::span<const BatchSample<S>> batch, const retriever::RetrieverConfig& rcfg,
                          retriever::RetrieverParams<S>* rp, const predictor::PredictorConfig& pcfg,
                          predictor::PredictorParams<S>& pp, const std::vector<events::TaskSpec>& tasks,
                          RetrievalMode mode, retriever::ScoreWorkspace<S>& ws) {
    nd::Graph<S> g;
    tf::ParamLeaves<S> L(g);
    if (rp) L.register_component(*rp, true);
    L.register_component(pp, true);
    LossBuilder<S> lb(g, tasks);
    StepResult<S> out;

    std::vector<S> sel_vecs, sel_times;
    for (const auto& bs : batch) {
        if (bs.count == 0) {
            ++out.skipped;
            continue;
        }
        int kk = 0;
        if (mode.kind == RetrievalMode::TopK) {
            auto picked = detail::stream_topk(rcfg, *rp, bs, mode.capacity, ws);
            kk = int(picked.size());
            sel_vecs.resize(size_t(kk) * size_t(rcfg.dim));
            sel_times.resize(size_t(kk));
            for (int j = 0; j < kk; ++j) {
                std::copy_n(bs.vecs + picked[size_t(j)].idx * rcfg.dim, rcfg.dim,
                            sel_vecs.data() + int64_t(j) * rcfg.dim);
                sel_times[size_t(j)] = picked[size_t(j)].t;
            }
        } else {
            kk = int(std::min<int64_t>(mode.capacity, bs.count));
            int64_t first = bs.count - kk;
            sel_vecs.assign(bs.vecs + first * rcfg.dim, bs.vecs + bs.count * rcfg.dim);
            sel_times.assign(bs.times + first, bs.times + bs.count);
        }
        auto logits = predictor::predict_set(g, L, pp, pcfg, sel_vecs.data(), sel_times.data(), kk,
                                             bs.pred_time);
        lb.add_sample(logits, bs.labels, false);
    }

    auto root = lb.finalize();
    out.loss = double(g.value(root)[0]);
    g.backward(root);
    if (rp) out.retriever_grads = detail::pull_grads(g, L, *rp);
    out.predictor_grads = detail::pull_grads(g, L, pp);
    return out;
}

struct TrainLog {
    struct StepLine {
        long step;
        char path;
        double loss;
    };
    struct EpochLine {
        int epoch;
        double val_micro_auroc;
    };
    std::vector<StepLine> steps;
    std::vector<EpochLine> epochs;
    std::string stopping_reason;
    long skipped_samples{0};

    void save_jsonl(const std::string& path) const;
};

struct TrainedModel {
    bool baseline{false};
    TrainConfig tcfg;
    retriever::RetrieverConfig rcfg;
    predictor::PredictorConfig pcfg;
    std::vector<events::TaskSpec> tasks;
    retriever::RetrieverParams<float> rparams;
    predictor::PredictorParams<float> pparams;
    uint64_t encoder_fingerprint{0};
    long steps_done{0};
    double best_val_micro_auroc{0};
};

struct MetricPair {
    double score;
    int label;
};

struct EvalResult {
    std::optional<double> micro_auroc;
    std::vector<std::pair<std::string, std::optional<double>>> per_task;
    std::optional<double> retrieval_recall;
    int skipped{0};
};

// P-Path-only inference over a view: retrieval (or truncation), predict_set,
// one-vs-rest pair pooling for micro AUROC.
EvalResult evaluate(const View& view, TrainedModel& model, bool per_class_weighted = false);

// per-sample retrieval used by evaluation and the analysis operations
std::vector<retriever::TopKEntry<float>> retrieve_for_sample(const View& view, int sample,
                                                             TrainedModel& model);

TrainedModel train(const View& train_view, const View& val_view, const TrainConfig& tcfg,
                   const retriever::RetrieverConfig& rcfg, const predictor::PredictorConfig& pcfg,
                   uint64_t encoder_fingerprint, TrainLog* log);

TrainedModel train_baseline_cached(const View& train_view, const View& val_view, const TrainConfig& tcfg,
                                   const predictor::PredictorConfig& pcfg, uint64_t encoder_fingerprint,
                                   TrainLog* log);

}  // namespace remed::trainer
