#include "remed/synthcohort.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "remed/rng.hpp"

namespace remed::synth {

using events::MedicalEvent;
using events::PatientSample;
using json = nlohmann::ordered_json;

namespace {

constexpr double kValueLo = 0.1;
constexpr double kValueHi = 100.0;

std::string render_value(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", v);
    return buf;
}

std::string noise_code(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "N%03d", i);
    return buf;
}

double log_uniform(Rng& rng, double lo, double hi) {
    return std::exp(rng.uniform(std::log(lo), std::log(hi)));
}

// bucket index over edges e1..em: (-inf,e1) -> 0, [e1,e2) -> 1, ..., [em,inf) -> m
int bucket_of(double v, const std::vector<double>& edges) {
    int b = 0;
    for (double e : edges)
        if (v >= e) ++b;
    return b;
}

std::pair<double, double> bucket_range(int b, const std::vector<double>& edges, double vlo, double vhi) {
    double lo = b == 0 ? vlo : std::max(vlo, edges[size_t(b) - 1]);
    double hi = b == int(edges.size()) ? vhi : std::min(vhi, edges[size_t(b)]);
    return {lo, hi};
}

}  // namespace

int SignalSpec::task_classes() const {
    switch (mechanism) {
        case Mechanism::Presence: return 2;
        case Mechanism::ValueBucketLast: return int(bucket_edges.size()) + 2;  // buckets + "none"
        case Mechanism::Count: return count_bits;
    }
    return 2;
}

events::TaskKind SignalSpec::task_kind() const {
    switch (mechanism) {
        case Mechanism::Presence: return events::TaskKind::Binary;
        case Mechanism::ValueBucketLast: return events::TaskKind::Multiclass;
        case Mechanism::Count: return events::TaskKind::Multilabel;
    }
    return events::TaskKind::Binary;
}

void GenConfig::validate() const {
    if (n_patients <= 0) throw std::invalid_argument("gen config: n_patients must be positive");
    if (events_min <= 0 || events_min > events_max)
        throw std::invalid_argument("gen config: events_per_sample range invalid");
    if (prediction_time <= 0) throw std::invalid_argument("gen config: prediction_time must be positive");
    if (n_noise_codes <= 0) throw std::invalid_argument("gen config: n_noise_codes must be positive");
    std::set<std::string> names;
    for (const auto& s : signal_specs) {
        if (!(0 <= s.t_lo && s.t_lo < s.t_hi && s.t_hi <= prediction_time))
            throw std::invalid_argument("signal spec '" + s.task_name + "': needs 0 <= t_lo < t_hi <= T");
        if (!std::is_sorted(s.bucket_edges.begin(), s.bucket_edges.end()) ||
            std::adjacent_find(s.bucket_edges.begin(), s.bucket_edges.end()) != s.bucket_edges.end())
            throw std::invalid_argument("signal spec '" + s.task_name + "': bucket_edges must be strictly increasing");
        if (s.events_min < 1 || s.events_min > s.events_max)
            throw std::invalid_argument("signal spec '" + s.task_name + "': planted count range invalid");
        if (s.mechanism == Mechanism::ValueBucketLast && s.bucket_edges.empty())
            throw std::invalid_argument("signal spec '" + s.task_name + "': value mechanism needs bucket_edges");
        if (s.value_style == ValueStyle::MirroredDigits &&
            (s.bucket_edges.size() != 1 || s.bucket_edges[0] <= 3.9 || s.bucket_edges[0] > 5.0))
            throw std::invalid_argument("signal spec '" + s.task_name +
                                        "': mirrored digits need a single edge in (3.9, 5.0]");
        if (!(0 < s.value_lo && s.value_lo < s.value_hi))
            throw std::invalid_argument("signal spec '" + s.task_name + "': value range invalid");
        if (!names.insert(s.task_name).second)
            throw std::invalid_argument("duplicate task name '" + s.task_name + "'");
    }
    if (horizon_events != 0 && (horizon_events < 1 || horizon_events >= events_min))
        throw std::invalid_argument("gen config: horizon_events must satisfy 1 <= h < events_min");
}

std::map<std::string, std::string> code_descriptions_of(const GenConfig& cfg) {
    std::map<std::string, std::string> out;
    auto lower_of = [](std::string s) {
        for (auto& ch : s) ch = char(std::tolower(static_cast<unsigned char>(ch)));
        return s;
    };
    for (int i = 0; i < cfg.n_noise_codes; ++i) {
        std::string code = noise_code(i);
        out[code] = "synthetic noise stream " + lower_of(code) + " reading";
    }
    for (const auto& spec : cfg.signal_specs)
        out[spec.signal_code] = "synthetic signal assay " + lower_of(spec.signal_code) + " reading";
    return out;
}

std::vector<events::TaskSpec> tasks_of(const GenConfig& cfg) {
    std::vector<events::TaskSpec> tasks;
    for (const auto& s : cfg.signal_specs)
        tasks.push_back({s.task_name, s.task_kind(), s.task_classes()});
    return tasks;
}

PatientSample generate_sample(const GenConfig& cfg, int index) {
    Rng base = Rng(cfg.seed).derive("sample", uint64_t(index));

    PatientSample s;
    char pid[24];
    std::snprintf(pid, sizeof pid, "p%06d", index);
    s.patient_id = pid;
    s.stay_id = std::string(pid) + "-s0";
    s.prediction_time = cfg.prediction_time;
    s.labels.assign(cfg.signal_specs.size(), std::nullopt);

    for (int attempt = 0;; ++attempt) {
        Rng rng = attempt == 0 ? base : base.derive("retry", uint64_t(attempt));
        std::vector<std::pair<MedicalEvent, bool>> events;  // (event, is_signal)

        int n_noise = rng.uniform_int(cfg.events_min, cfg.events_max);
        for (int i = 0; i < n_noise; ++i) {
            MedicalEvent e;
            e.code = noise_code(int(rng.uniform_int(uint64_t(cfg.n_noise_codes))));
            e.t = rng.uniform(0.0, cfg.prediction_time);
            e.details = {{"Value", render_value(log_uniform(rng, kValueLo, kValueHi))}, {"Unit", "u"}};
            events.emplace_back(std::move(e), false);
        }

        std::vector<events::Label> labels(cfg.signal_specs.size());
        for (size_t si = 0; si < cfg.signal_specs.size(); ++si) {
            const SignalSpec& spec = cfg.signal_specs[si];
            bool plant = rng.uniform() < 0.5;
            if (!plant) {
                labels[si] = 0;  // complementary label: absent
                continue;
            }
            int m = rng.uniform_int(spec.events_min, spec.events_max);
            if (spec.mechanism == Mechanism::Count) m = std::min(m, spec.count_bits);
            int shared_bucket = int(rng.uniform_int(uint64_t(spec.bucket_edges.size() + 1)));
            double last_t = -1, last_v = 0;
            for (int i = 0; i < m; ++i) {
                MedicalEvent e;
                e.code = spec.signal_code;
                e.t = rng.uniform(spec.t_lo, spec.t_hi);
                double v;
                if (spec.mechanism == Mechanism::ValueBucketLast &&
                    spec.value_style == ValueStyle::MirroredDigits) {
                    // digit multisets {a,b} are identical across buckets; only
                    // the digit order encodes the bucket
                    int a = 1 + int(rng.uniform_int(3));  // 1..3
                    int b = 5 + int(rng.uniform_int(4));  // 5..8
                    v = shared_bucket == 0 ? double(a) + 0.1 * double(b)
                                           : double(b) + 0.1 * double(a);
                } else if (spec.mechanism == Mechanism::ValueBucketLast) {
                    // target a bucket uniformly, then draw uniform inside it
                    int b = int(rng.uniform_int(uint64_t(spec.bucket_edges.size() + 1)));
                    auto [lo, hi] = bucket_range(b, spec.bucket_edges, spec.value_lo, spec.value_hi);
                    v = rng.uniform(lo, hi);
                } else {
                    v = log_uniform(rng, spec.value_lo, spec.value_hi);
                }
                e.details = {{"Value", render_value(v)}, {"Unit", "u"}};
                if (e.t > last_t) {
                    last_t = e.t;
                    // label derives from the rendered string, exactly what an
                    // oracle reading the file would see
                    last_v = std::stod(e.details[0].second);
                }
                events.emplace_back(std::move(e), true);
            }
            switch (spec.mechanism) {
                case Mechanism::Presence: labels[si] = 1; break;
                case Mechanism::ValueBucketLast: labels[si] = 1 + bucket_of(last_v, spec.bucket_edges); break;
                case Mechanism::Count: labels[si] = (1 << m) - 1; break;
            }
        }

        std::vector<int> order(events.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return events[size_t(a)].first.t < events[size_t(b)].first.t; });

        if (cfg.horizon_events > 0) {
            // all signal events must lie strictly before the last horizon_events
            bool ok = true;
            for (size_t pos = order.size() - size_t(cfg.horizon_events); pos < order.size(); ++pos)
                if (events[size_t(order[pos])].second) ok = false;
            if (!ok) continue;  // re-draw this sample from a fresh substream
        }

        s.events.clear();
        std::vector<int> relevant;
        for (size_t i = 0; i < order.size(); ++i) {
            if (events[size_t(order[i])].second) relevant.push_back(int(i));
            s.events.push_back(std::move(events[size_t(order[i])].first));
        }
        s.relevant_idx = std::move(relevant);
        s.labels = std::move(labels);
        return s;
    }
}

events::Cohort generate(const GenConfig& cfg) {
    cfg.validate();
    events::Cohort c;
    c.tasks = tasks_of(cfg);
    c.code_descriptions = code_descriptions_of(cfg);
    for (int i = 0; i < cfg.n_patients; ++i) {
        auto s = generate_sample(cfg, i);
        for (auto& e : s.events) e.description = c.code_descriptions.at(e.code);
        c.samples.push_back(std::move(s));
    }
    return c;
}

events::Label derive_label(const SignalSpec& spec, const PatientSample& sample) {
    int count = 0;
    double last_t = -1, last_v = 0;
    for (const auto& e : sample.events) {
        if (e.code != spec.signal_code) continue;
        ++count;
        if (e.t > last_t) {
            last_t = e.t;
            for (const auto& [f, v] : e.details)
                if (f == "Value") last_v = std::stod(v);
        }
    }
    switch (spec.mechanism) {
        case Mechanism::Presence: return count > 0 ? 1 : 0;
        case Mechanism::ValueBucketLast: return count > 0 ? 1 + bucket_of(last_v, spec.bucket_edges) : 0;
        case Mechanism::Count: return (1 << std::min(count, spec.count_bits)) - 1;
    }
    return std::nullopt;
}

GenConfig make_far_signal_config(GenConfig base, int horizon_events) {
    if (horizon_events < 1 || horizon_events >= base.events_min)
        throw std::invalid_argument("far-signal config: needs 1 <= horizon_events < min events per sample");
    // Two signal codes, both verified per sample to precede the last
    // horizon_events events so a truncating reader never sees them.
    //   SFAR: dense presence code confined to the early stay; carries the
    //         truncation gap and bootstraps retrieval.
    //   SSPAN: sparse value code spread over most of the stay; every longer
    //          observation window captures the label-critical last event for
    //          more samples, which is what makes AUROC grow with the window.
    // The shared description tokens place both codes in the same region of
    // the encoding space, so retrieval learned on one transfers to the other.
    SignalSpec far;
    far.signal_code = "SFAR";
    far.task_name = "far_signal_presence";
    far.t_lo = 0.05 * base.prediction_time;
    far.t_hi = 0.25 * base.prediction_time;
    far.mechanism = Mechanism::Presence;
    far.events_min = 24;
    far.events_max = 48;

    SignalSpec span;
    span.signal_code = "SSPAN";
    span.task_name = "span_value_bucket";
    span.t_lo = 0.0;
    span.t_hi = 0.845 * base.prediction_time;
    span.mechanism = Mechanism::ValueBucketLast;
    span.bucket_edges = {10.0, 40.0};
    span.events_min = 2;
    span.events_max = 4;

    base.signal_specs = {far, span};
    base.horizon_events = horizon_events;
    if (double(base.events_min) * 0.5 < double(horizon_events))
        throw std::invalid_argument("far-signal config: placement infeasible for this horizon");
    base.validate();
    return base;
}

GenConfig make_recency_value_config(GenConfig base) {
    SignalSpec spec;
    spec.signal_code = "SVAL";
    spec.task_name = "recent_value_bucket";
    spec.t_lo = 0.0;
    spec.t_hi = base.prediction_time;
    spec.mechanism = Mechanism::ValueBucketLast;
    spec.bucket_edges = {10.0, 40.0};
    spec.events_min = 6;
    spec.events_max = 12;
    base.signal_specs = {spec};
    base.horizon_events = 0;
    base.validate();
    return base;
}

namespace {

const char* mech_str(Mechanism m) {
    switch (m) {
        case Mechanism::Presence: return "presence";
        case Mechanism::ValueBucketLast: return "value_bucket_last";
        case Mechanism::Count: return "count";
    }
    return "?";
}

Mechanism mech_from(const std::string& s) {
    if (s == "presence") return Mechanism::Presence;
    if (s == "value_bucket_last") return Mechanism::ValueBucketLast;
    if (s == "count") return Mechanism::Count;
    throw std::invalid_argument("unknown mechanism '" + s + "'");
}

}  // namespace

std::string gen_config_to_json(const GenConfig& cfg) {
    json j;
    j["n_patients"] = cfg.n_patients;
    j["events_per_sample"] = {cfg.events_min, cfg.events_max};
    j["n_noise_codes"] = cfg.n_noise_codes;
    j["prediction_time"] = cfg.prediction_time;
    j["seed"] = cfg.seed;
    j["horizon_events"] = cfg.horizon_events;
    j["signal_specs"] = json::array();
    for (const auto& s : cfg.signal_specs) {
        json js;
        js["signal_code"] = s.signal_code;
        js["task_name"] = s.task_name;
        js["t_lo"] = s.t_lo;
        js["t_hi"] = s.t_hi;
        js["mechanism"] = mech_str(s.mechanism);
        js["bucket_edges"] = s.bucket_edges;
        js["events_min"] = s.events_min;
        js["events_max"] = s.events_max;
        js["count_bits"] = s.count_bits;
        js["value_lo"] = s.value_lo;
        js["value_hi"] = s.value_hi;
        js["value_style"] = s.value_style == ValueStyle::MirroredDigits ? "mirrored_digits" : "uniform";
        j["signal_specs"].push_back(std::move(js));
    }
    return j.dump(2);
}

GenConfig gen_config_from_json(const std::string& text) {
    json j = json::parse(text);
    static const std::set<std::string> top_keys = {"n_patients",      "events_per_sample", "n_noise_codes",
                                                   "prediction_time", "seed",              "horizon_events",
                                                   "signal_specs"};
    static const std::set<std::string> spec_keys = {"signal_code", "task_name",  "t_lo",
                                                    "t_hi",        "mechanism",  "bucket_edges",
                                                    "events_min",  "events_max", "count_bits",
                                                    "value_lo",    "value_hi",   "value_style"};
    for (const auto& [k, v] : j.items())
        if (!top_keys.count(k)) throw std::invalid_argument("gen config: unknown key '" + k + "'");

    GenConfig cfg;
    cfg.n_patients = j.at("n_patients").get<int>();
    auto range = j.at("events_per_sample").get<std::vector<int>>();
    if (range.size() != 2) throw std::invalid_argument("gen config: events_per_sample must be [min,max]");
    cfg.events_min = range[0];
    cfg.events_max = range[1];
    cfg.n_noise_codes = j.at("n_noise_codes").get<int>();
    cfg.prediction_time = j.at("prediction_time").get<double>();
    cfg.seed = j.value("seed", uint64_t(0));
    cfg.horizon_events = j.value("horizon_events", 0);
    for (const auto& js : j.at("signal_specs")) {
        for (const auto& [k, v] : js.items())
            if (!spec_keys.count(k)) throw std::invalid_argument("signal spec: unknown key '" + k + "'");
        SignalSpec s;
        s.signal_code = js.at("signal_code").get<std::string>();
        s.task_name = js.at("task_name").get<std::string>();
        s.t_lo = js.at("t_lo").get<double>();
        s.t_hi = js.at("t_hi").get<double>();
        s.mechanism = mech_from(js.at("mechanism").get<std::string>());
        s.bucket_edges = js.value("bucket_edges", std::vector<double>{});
        s.events_min = js.value("events_min", 4);
        s.events_max = js.value("events_max", 8);
        s.count_bits = js.value("count_bits", 4);
        s.value_lo = js.value("value_lo", 0.1);
        s.value_hi = js.value("value_hi", 100.0);
        std::string style = js.value("value_style", "uniform");
        if (style != "uniform" && style != "mirrored_digits")
            throw std::invalid_argument("signal spec: unknown value_style '" + style + "'");
        s.value_style = style == "mirrored_digits" ? ValueStyle::MirroredDigits : ValueStyle::Uniform;
        cfg.signal_specs.push_back(std::move(s));
    }
    cfg.validate();
    return cfg;
}

}  // namespace remed::synth
