#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace remed::events {

struct CohortError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One timestamped record: code, human-readable description, detail fields.
struct MedicalEvent {
    std::string code;
    std::string description;
    std::vector<std::pair<std::string, std::string>> details;
    double t{0.0};  // minutes since admission
};

enum class TaskKind { Binary, Multiclass, Multilabel };

struct TaskSpec {
    std::string name;
    TaskKind kind{TaskKind::Binary};
    int classes{2};

    // number of one-vs-rest outputs a head produces for this task
    int head_width() const { return kind == TaskKind::Binary ? 1 : classes; }
    bool label_valid(long v) const;
};

// missing labels are first-class; absent entries are excluded from loss and metrics
using Label = std::optional<int>;

struct PatientSample {
    std::string patient_id;
    std::string stay_id;
    std::vector<MedicalEvent> events;  // sorted by t ascending
    double prediction_time{0.0};
    std::vector<Label> labels;                 // aligned with Cohort::tasks
    std::optional<std::vector<int>> relevant_idx;  // synthetic ground truth only
};

struct Cohort {
    std::vector<TaskSpec> tasks;
    std::vector<PatientSample> samples;
    std::map<std::string, std::string> code_descriptions;
};

struct LoadReport {
    int auto_sorted_samples{0};
    std::vector<std::string> warnings;
};

// description, then each detail as "FieldName Value", all joined by ", "
std::string textualize(const MedicalEvent& e);

Cohort load_cohort(const std::string& path, LoadReport* report = nullptr);
void save_cohort(const Cohort& c, const std::string& path);

// patient-grouped assignment shared by split_cohort and any index-level split:
// returns split id (0..ratios-1) per patient, deterministic in (ids, seed)
std::vector<int> assign_patient_splits(const std::vector<std::string>& patient_ids_in_order,
                                       const std::vector<int>& ratios, uint64_t seed);

std::tuple<Cohort, Cohort, Cohort> split_cohort(const Cohort& c, const std::vector<int>& ratios,
                                                uint64_t seed);

constexpr double kUnlimitedWindow = -1.0;

// keeps events with prediction_time - t <= window; kUnlimitedWindow keeps all
PatientSample filter_window(const PatientSample& s, double window_minutes);

}  // namespace remed::events
