#include "remed/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

#include "remed/evalstats.hpp"

namespace remed::trainer {

using json = nlohmann::ordered_json;

void EncodedCohort::append_sample(const events::PatientSample& s, const encoder::AnyEncoder& enc) {
    patient_ids.push_back(s.patient_id);
    pred_time.push_back(s.prediction_time);
    labels.push_back(s.labels);
    relevant.push_back(s.relevant_idx.value_or(std::vector<int>{}));

    std::map<std::string, int32_t> lookup;
    for (size_t i = 0; i < code_names.size(); ++i) lookup[code_names[i]] = int32_t(i);

    size_t base = vecs.size();
    vecs.resize(base + s.events.size() * size_t(dim));
    for (size_t e = 0; e < s.events.size(); ++e) {
        const auto& ev = s.events[e];
        enc.encode(events::textualize(ev), vecs.data() + base + e * size_t(dim));
        times.push_back(float(ev.t));
        tfeat.resize(tfeat.size() + size_t(d_time));
        retriever::time_features(float(ev.t), float(s.prediction_time), d_time,
                                 tfeat.data() + tfeat.size() - size_t(d_time));
        auto it = lookup.find(ev.code);
        if (it == lookup.end()) {
            lookup[ev.code] = int32_t(code_names.size());
            code_ids.push_back(int32_t(code_names.size()));
            code_names.push_back(ev.code);
        } else {
            code_ids.push_back(it->second);
        }
    }
    offsets.push_back(offsets.back() + int64_t(s.events.size()));
}

EncodedCohort build_encoded(const events::Cohort& cohort, encoder::VectorCache cache) {
    EncodedCohort out;
    out.dim = cache.dim;
    out.encoder_fingerprint = cache.encoder_fingerprint;
    out.tasks = cohort.tasks;
    out.offsets = cache.offsets;
    out.vecs = std::move(cache.data);

    std::map<std::string, int32_t> lookup;
    for (const auto& s : cohort.samples) {
        out.patient_ids.push_back(s.patient_id);
        out.pred_time.push_back(s.prediction_time);
        out.labels.push_back(s.labels);
        out.relevant.push_back(s.relevant_idx.value_or(std::vector<int>{}));
        for (const auto& ev : s.events) {
            out.times.push_back(float(ev.t));
            out.tfeat.resize(out.tfeat.size() + size_t(out.d_time));
            retriever::time_features(float(ev.t), float(s.prediction_time), out.d_time,
                                     out.tfeat.data() + out.tfeat.size() - size_t(out.d_time));
            auto it = lookup.find(ev.code);
            if (it == lookup.end()) {
                lookup[ev.code] = int32_t(out.code_names.size());
                out.code_ids.push_back(int32_t(out.code_names.size()));
                out.code_names.push_back(ev.code);
            } else {
                out.code_ids.push_back(it->second);
            }
        }
    }
    if (int64_t(out.times.size()) != out.offsets.back())
        throw nd::GraphError("build_encoded: cache rows do not match cohort events");
    return out;
}

int64_t View::window_begin(int sample) const {
    if (window == events::kUnlimitedWindow) return 0;
    const auto& c = *base;
    int64_t lo = c.offsets[size_t(sample)];
    int64_t hi = c.offsets[size_t(sample) + 1];
    float cutoff = float(c.pred_time[size_t(sample)] - window);
    // events sorted by t: the window is the suffix with t >= T - w
    const float* t0 = c.times.data();
    int64_t first = std::lower_bound(t0 + lo, t0 + hi, cutoff) - t0;
    return first - lo;
}

std::array<View, 3> split_views(const EncodedCohort& c, const std::vector<int>& ratios, uint64_t seed) {
    std::vector<std::string> patients;
    std::map<std::string, int> index;
    for (const auto& pid : c.patient_ids)
        if (!index.count(pid)) {
            index[pid] = int(patients.size());
            patients.push_back(pid);
        }
    std::vector<int> assign = events::assign_patient_splits(patients, ratios, seed);
    std::array<View, 3> out;
    for (auto& v : out) v.base = &c;
    for (int s = 0; s < c.samples(); ++s)
        out[size_t(assign[size_t(index.at(c.patient_ids[size_t(s)])) ])].samples.push_back(s);
    return out;
}

void TrainLog::save_jsonl(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw nd::GraphError("cannot write train log: " + path);
    for (const auto& s : steps) {
        json j;
        j["step"] = s.step;
        j["path"] = std::string(1, s.path);
        j["loss"] = s.loss;
        out << j.dump() << '\n';
    }
    for (const auto& e : epochs) {
        json j;
        j["epoch"] = e.epoch;
        j["val_micro_auroc"] = e.val_micro_auroc;
        out << j.dump() << '\n';
    }
    json tail;
    tail["stopping_reason"] = stopping_reason;
    tail["skipped_samples"] = skipped_samples;
    out << tail.dump() << '\n';
}

namespace {

BatchSample<float> make_batch_sample(const View& view, int sample) {
    const auto& c = *view.base;
    int64_t off = c.offsets[size_t(sample)];
    int64_t begin = view.window_begin(sample);
    BatchSample<float> bs;
    bs.vecs = c.vecs.data() + (off + begin) * c.dim;
    bs.times = c.times.data() + off + begin;
    bs.tfeat = c.tfeat.data() + (off + begin) * c.d_time;
    bs.count = c.events_of(sample) - begin;
    bs.pred_time = float(c.pred_time[size_t(sample)]);
    bs.labels = c.labels[size_t(sample)];
    return bs;
}

stats::TaskKindLite lite(events::TaskKind k) {
    switch (k) {
        case events::TaskKind::Binary: return stats::TaskKindLite::Binary;
        case events::TaskKind::Multiclass: return stats::TaskKindLite::Multiclass;
        case events::TaskKind::Multilabel: return stats::TaskKindLite::Multilabel;
    }
    return stats::TaskKindLite::Binary;
}

}  // namespace

std::vector<retriever::TopKEntry<float>> retrieve_for_sample(const View& view, int sample,
                                                             TrainedModel& model) {
    BatchSample<float> bs = make_batch_sample(view, sample);
    if (bs.count == 0) return {};
    if (model.baseline) {
        int kk = int(std::min<int64_t>(model.tcfg.baseline_max_events, bs.count));
        std::vector<retriever::TopKEntry<float>> out;
        for (int64_t j = bs.count - kk; j < bs.count; ++j)
            out.push_back({0.0f, bs.times[j], j});
        return out;
    }
    thread_local retriever::ScoreWorkspace<float> ws;
    return detail::stream_topk(model.rcfg, model.rparams, bs, model.tcfg.k, ws);
}

EvalResult evaluate(const View& view, TrainedModel& model, bool per_class_weighted) {
    EvalResult res;
    std::vector<std::vector<stats::ScoredPair>> per_task_pairs(model.tasks.size());
    double recall_sum = 0;
    long recall_n = 0;
    const auto& c = *view.base;

    for (int s : view.samples) {
        BatchSample<float> bs = make_batch_sample(view, s);
        if (bs.count == 0) {
            ++res.skipped;
            continue;
        }
        auto picked = retrieve_for_sample(view, s, model);
        int kk = int(picked.size());
        std::vector<float> vv(size_t(kk) * size_t(c.dim));
        std::vector<float> tt(static_cast<size_t>(kk));
        for (int j = 0; j < kk; ++j) {
            std::copy_n(bs.vecs + picked[size_t(j)].idx * c.dim, c.dim, vv.data() + int64_t(j) * c.dim);
            tt[size_t(j)] = picked[size_t(j)].t;
        }
        auto probs = predictor::predict_set_values(model.pparams, model.pcfg, vv.data(), tt.data(), kk,
                                                   bs.pred_time, true, model.tasks);
        for (size_t t = 0; t < model.tasks.size(); ++t) {
            if (!bs.labels[t]) continue;
            std::vector<double> pd(probs[t].begin(), probs[t].end());
            stats::expand_pairs(pd, *bs.labels[t], lite(model.tasks[t].kind), per_task_pairs[t]);
        }
        if (!model.baseline && !c.relevant[size_t(s)].empty()) {
            int64_t begin_abs = view.window_begin(s);
            long hit = 0;
            for (int r : c.relevant[size_t(s)])
                for (const auto& e : picked)
                    if (e.idx + begin_abs == r) {
                        ++hit;
                        break;
                    }
            recall_sum += double(hit) / double(c.relevant[size_t(s)].size());
            ++recall_n;
        }
    }
    res.micro_auroc = per_class_weighted ? stats::micro_auroc_weighted(per_task_pairs)
                                         : stats::micro_auroc_pooled(per_task_pairs);
    for (size_t t = 0; t < model.tasks.size(); ++t) {
        std::vector<std::vector<stats::ScoredPair>> one{per_task_pairs[t]};
        res.per_task.emplace_back(model.tasks[t].name, stats::micro_auroc_pooled(one));
    }
    if (recall_n > 0) res.retrieval_recall = recall_sum / double(recall_n);
    return res;
}

namespace {

struct Driver {
    const View* train_view;
    const View* val_view;
    TrainConfig tcfg;
    retriever::RetrieverConfig rcfg;
    predictor::PredictorConfig pcfg;
    uint64_t fingerprint;
    bool baseline;
    TrainLog* log;

    TrainedModel run() {
        tcfg.validate();
        if (train_view->samples.empty() || val_view->samples.empty())
            throw nd::GraphError("train: train/val splits must be nonempty");
        const auto& c = *train_view->base;
        if (c.dim != rcfg.dim || c.dim != pcfg.dim)
            throw nd::GraphError("train: cohort vector dim does not match model config");
        if (baseline && tcfg.baseline_max_events <= 0)
            throw nd::GraphError("train: baseline_max_events must be set for the cached baseline");

        TrainedModel model;
        model.baseline = baseline;
        model.tcfg = tcfg;
        model.rcfg = rcfg;
        model.pcfg = pcfg;
        model.tasks = c.tasks;
        model.encoder_fingerprint = fingerprint;

        Rng root(tcfg.seed);
        if (!baseline) model.rparams = retriever::RetrieverParams<float>::init(rcfg, root.derive("retriever_init"));
        model.pparams = predictor::PredictorParams<float>::init(pcfg, c.tasks, root.derive("predictor_init"));

        nd::Adam<float> adam_r, adam_p;
        std::vector<nd::HostTensor<float>*> rtensors, ptensors;
        model.rparams.for_each([&](const char*, nd::HostTensor<float>& t) { rtensors.push_back(&t); });
        model.pparams.for_each([&](const char*, nd::HostTensor<float>& t) { ptensors.push_back(&t); });

        retriever::ScoreWorkspace<float> ws;
        long step = 0;
        double best_val = -1;
        int best_epoch = -1;
        retriever::RetrieverParams<float> best_r = model.rparams;
        predictor::PredictorParams<float> best_p = model.pparams;
        std::string reason = "max_epochs";

        std::vector<int> order = train_view->samples;
        for (int epoch = 0; epoch < tcfg.max_epochs; ++epoch) {
            Rng shuffle_rng = root.derive("epoch_order", uint64_t(epoch));
            shuffle_rng.shuffle(order);

            for (size_t pos = 0; pos < order.size(); pos += size_t(tcfg.batch_size)) {
                size_t end = std::min(order.size(), pos + size_t(tcfg.batch_size));
                std::vector<BatchSample<float>> batch;
                for (size_t i = pos; i < end; ++i)
                    batch.push_back(make_batch_sample(*train_view, order[i]));

                char path;
                if (baseline)
                    path = 'P';
                else
                    path = (step % 2 == 0) ? tcfg.path_order : (tcfg.path_order == 'P' ? 'R' : 'P');
                double lr = tcfg.learning_rate *
                            std::min(1.0, double(step + 1) / double(tcfg.warmup_steps));

                double loss;
                int skipped;
                try {
                    if (path == 'R') {
                        auto st = r_path_step<float>(batch, rcfg, model.rparams, pcfg, model.pparams,
                                                     model.tasks, tcfg.k, ws);
                        adam_r.step(rtensors, st.retriever_grads, lr);
                        loss = st.loss;
                        skipped = st.skipped;
                    } else {
                        RetrievalMode mode;
                        if (baseline) {
                            mode.kind = RetrievalMode::LastN;
                            mode.capacity = tcfg.baseline_max_events;
                        } else {
                            mode.kind = RetrievalMode::TopK;
                            mode.capacity = tcfg.k;
                        }
                        auto st = p_path_step<float>(batch, rcfg, baseline ? nullptr : &model.rparams,
                                                     pcfg, model.pparams, model.tasks, mode, ws);
                        adam_p.step(ptensors, st.predictor_grads, lr);
                        loss = st.loss;
                        skipped = st.skipped;
                    }
                } catch (const nd::GraphError& e) {
                    throw TrainDivergence("training diverged at step " + std::to_string(step) +
                                          " (seed " + std::to_string(tcfg.seed) + "): " + e.what());
                }
                if (!std::isfinite(loss))
                    throw TrainDivergence("NaN loss at step " + std::to_string(step) + " (seed " +
                                          std::to_string(tcfg.seed) + ")");
                if (log) {
                    log->steps.push_back({step, path, loss});
                    log->skipped_samples += skipped;
                }
                ++step;
            }

            auto ev = evaluate(*val_view, model);  // P-Path-only inference
            double val = ev.micro_auroc.value_or(0.0);
            if (log) log->epochs.push_back({epoch, val});
            if (val > best_val) {
                best_val = val;
                best_epoch = epoch;
                best_r = model.rparams;
                best_p = model.pparams;
            } else if (epoch - best_epoch >= tcfg.patience) {
                reason = "early_stop";
                break;
            }
        }

        model.rparams = best_r;
        model.pparams = best_p;
        model.steps_done = step;
        model.best_val_micro_auroc = best_val;
        if (log) log->stopping_reason = reason;
        return model;
    }
};

}  // namespace

TrainedModel train(const View& train_view, const View& val_view, const TrainConfig& tcfg,
                   const retriever::RetrieverConfig& rcfg, const predictor::PredictorConfig& pcfg,
                   uint64_t encoder_fingerprint, TrainLog* log) {
    Driver d{&train_view, &val_view, tcfg, rcfg, pcfg, encoder_fingerprint, false, log};
    return d.run();
}

TrainedModel train_baseline_cached(const View& train_view, const View& val_view, const TrainConfig& tcfg,
                                   const predictor::PredictorConfig& pcfg, uint64_t encoder_fingerprint,
                                   TrainLog* log) {
    retriever::RetrieverConfig rcfg;
    rcfg.dim = pcfg.dim;
    Driver d{&train_view, &val_view, tcfg, rcfg, pcfg, encoder_fingerprint, true, log};
    return d.run();
}

}  // namespace remed::trainer
