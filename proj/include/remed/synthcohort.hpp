#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "remed/events.hpp"

namespace remed::synth {

enum class Mechanism {
    Presence,         // binary: were any signal events planted
    ValueBucketLast,  // multiclass: bucket of the last signal event's value (class 0 = none)
    Count,            // multilabel: unary threshold bits over the planted count
};

enum class ValueStyle {
    Uniform,         // each planted value targets its own bucket, uniform inside it
    MirroredDigits,  // one bucket per sample; values a.b vs b.a with identical digit
                     // multisets on both sides of the single edge, so bag-of-token
                     // encodings carry no bucket signal while token order does
};

struct SignalSpec {
    std::string signal_code;
    std::string task_name;
    double t_lo{0}, t_hi{0};  // placement window relative to admission
    Mechanism mechanism{Mechanism::Presence};
    std::vector<double> bucket_edges;  // multiclass only, strictly increasing
    int events_min{4}, events_max{8};  // planted count range (Count caps at classes)
    int count_bits{4};                 // multilabel width
    double value_lo{0.1}, value_hi{100.0};  // rendered signal value range
    ValueStyle value_style{ValueStyle::Uniform};

    int task_classes() const;
    events::TaskKind task_kind() const;
};

struct GenConfig {
    int n_patients{2000};
    int events_min{512}, events_max{4096};
    int n_noise_codes{200};
    double prediction_time{2880.0};  // 48h in minutes
    std::vector<SignalSpec> signal_specs;
    uint64_t seed{0};
    // when > 0, every sample is checked to keep all signal events strictly
    // before the last `horizon_events` events (far-signal construction)
    int horizon_events{0};

    void validate() const;
};

std::vector<events::TaskSpec> tasks_of(const GenConfig& cfg);
std::map<std::string, std::string> code_descriptions_of(const GenConfig& cfg);

// deterministic per (config.seed, index); events sorted by t, relevant_idx set
events::PatientSample generate_sample(const GenConfig& cfg, int index);

events::Cohort generate(const GenConfig& cfg);

// label oracle: re-derive the label of one task from the stored events alone
events::Label derive_label(const SignalSpec& spec, const events::PatientSample& sample);

// binary presence task planted in an early window, so that after sorting all
// signal events lie strictly before the last `horizon_events` events
GenConfig make_far_signal_config(GenConfig base, int horizon_events);

// multiclass task labeled by the bucket of the most recent signal event's
// value; signal events span the whole stay, so both recency and value matter
GenConfig make_recency_value_config(GenConfig base);

std::string gen_config_to_json(const GenConfig& cfg);
GenConfig gen_config_from_json(const std::string& text);

}  // namespace remed::synth
