#include "remed/events.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "remed/rng.hpp"

namespace remed::events {

using json = nlohmann::ordered_json;

bool TaskSpec::label_valid(long v) const {
    switch (kind) {
        case TaskKind::Binary: return v == 0 || v == 1;
        case TaskKind::Multiclass: return v >= 0 && v < classes;
        case TaskKind::Multilabel: return v >= 0 && v < (1L << classes);
    }
    return false;
}

std::string textualize(const MedicalEvent& e) {
    if (e.description.empty())
        throw CohortError("textualize: event '" + e.code + "' has no description");
    std::string out = e.description;
    for (const auto& [field, value] : e.details) {
        out += ", ";
        out += field;
        out += ' ';
        out += value;
    }
    return out;
}

namespace {

const char* kind_str(TaskKind k) {
    switch (k) {
        case TaskKind::Binary: return "binary";
        case TaskKind::Multiclass: return "multiclass";
        case TaskKind::Multilabel: return "multilabel";
    }
    return "?";
}

TaskKind kind_from(const std::string& s, int line) {
    if (s == "binary") return TaskKind::Binary;
    if (s == "multiclass") return TaskKind::Multiclass;
    if (s == "multilabel") return TaskKind::Multilabel;
    throw CohortError("line " + std::to_string(line) + ": unknown task kind '" + s + "'");
}

}  // namespace

Cohort load_cohort(const std::string& path, LoadReport* report) {
    std::ifstream in(path);
    if (!in) throw CohortError("cannot open cohort file: " + path);

    Cohort c;
    std::string line;
    int line_no = 0;

    auto fail = [&](const std::string& msg) -> CohortError {
        return CohortError("line " + std::to_string(line_no) + ": " + msg);
    };

    if (!std::getline(in, line)) throw CohortError("empty cohort file: " + path);
    line_no = 1;
    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception& e) {
        throw fail(std::string("malformed header: ") + e.what());
    }
    if (header.value("format_version", -1) != 1) throw fail("unsupported format_version");
    for (const auto& jt : header.at("tasks")) {
        TaskSpec t;
        t.name = jt.at("name").get<std::string>();
        t.kind = kind_from(jt.at("kind").get<std::string>(), line_no);
        t.classes = jt.at("classes").get<int>();
        if (t.kind != TaskKind::Binary && t.classes < 2) throw fail("task '" + t.name + "': classes must be >= 2");
        for (const auto& prev : c.tasks)
            if (prev.name == t.name) throw fail("duplicate task name '" + t.name + "'");
        c.tasks.push_back(std::move(t));
    }
    for (const auto& [code, desc] : header.at("code_descriptions").items())
        c.code_descriptions[code] = desc.get<std::string>();

    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json js;
        try {
            js = json::parse(line);
        } catch (const json::exception& e) {
            throw fail(std::string("malformed sample: ") + e.what());
        }
        PatientSample s;
        try {
            s.patient_id = js.at("patient_id").get<std::string>();
            s.stay_id = js.at("stay_id").get<std::string>();
            s.prediction_time = js.at("prediction_time").get<double>();
            for (const auto& je : js.at("events")) {
                MedicalEvent e;
                e.code = je.at("code").get<std::string>();
                e.t = je.at("t").get<double>();
                for (const auto& jd : je.at("details"))
                    e.details.emplace_back(jd.at(0).get<std::string>(), jd.at(1).get<std::string>());
                s.events.push_back(std::move(e));
            }
            s.labels.assign(c.tasks.size(), std::nullopt);
            for (const auto& [name, jv] : js.at("labels").items()) {
                auto it = std::find_if(c.tasks.begin(), c.tasks.end(),
                                       [&](const TaskSpec& t) { return t.name == name; });
                if (it == c.tasks.end()) throw fail("unknown task '" + name + "' in labels");
                if (jv.is_null()) continue;
                long v = jv.get<long>();
                if (!it->label_valid(v))
                    throw fail("label " + std::to_string(v) + " out of range for task '" + name + "'");
                s.labels[size_t(it - c.tasks.begin())] = int(v);
            }
            if (js.contains("relevant_idx")) {
                std::vector<int> rel = js.at("relevant_idx").get<std::vector<int>>();
                for (int r : rel)
                    if (r < 0 || size_t(r) >= s.events.size()) throw fail("relevant_idx out of range");
                s.relevant_idx = std::move(rel);
            }
        } catch (const json::exception& e) {
            throw fail(std::string("malformed sample: ") + e.what());
        }

        for (const auto& e : s.events) {
            if (e.code.empty()) throw fail("event with empty code");
            if (e.t < 0) throw fail("event with negative timestamp");
            if (e.t >= s.prediction_time) throw fail("event at or after prediction_time");
            if (!c.code_descriptions.count(e.code)) throw fail("code '" + e.code + "' has no description");
        }
        bool sorted = std::is_sorted(s.events.begin(), s.events.end(),
                                     [](const MedicalEvent& a, const MedicalEvent& b) { return a.t < b.t; });
        if (!sorted) {
            // relevant_idx refers to positions, so it has to follow the sort
            std::vector<int> order(s.events.size());
            for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
            std::stable_sort(order.begin(), order.end(),
                             [&](int a, int b) { return s.events[size_t(a)].t < s.events[size_t(b)].t; });
            std::vector<MedicalEvent> ev;
            ev.reserve(s.events.size());
            std::vector<int> new_pos(order.size());
            for (size_t i = 0; i < order.size(); ++i) {
                new_pos[size_t(order[i])] = int(i);
                ev.push_back(std::move(s.events[size_t(order[i])]));
            }
            s.events = std::move(ev);
            if (s.relevant_idx)
                for (int& r : *s.relevant_idx) r = new_pos[size_t(r)];
            if (report) {
                ++report->auto_sorted_samples;
                report->warnings.push_back("line " + std::to_string(line_no) +
                                           ": events not sorted by t, auto-sorted");
            }
        }
        // fill descriptions from the cohort table
        for (auto& e : s.events) e.description = c.code_descriptions.at(e.code);
        c.samples.push_back(std::move(s));
    }
    return c;
}

void save_cohort(const Cohort& c, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CohortError("cannot write cohort file: " + path);

    json header;
    header["format_version"] = 1;
    header["tasks"] = json::array();
    for (const auto& t : c.tasks)
        header["tasks"].push_back({{"name", t.name}, {"kind", kind_str(t.kind)}, {"classes", t.classes}});
    header["code_descriptions"] = json::object();
    for (const auto& [code, desc] : c.code_descriptions) header["code_descriptions"][code] = desc;
    out << header.dump() << '\n';

    for (const auto& s : c.samples) {
        json js;
        js["patient_id"] = s.patient_id;
        js["stay_id"] = s.stay_id;
        js["prediction_time"] = s.prediction_time;
        js["events"] = json::array();
        for (const auto& e : s.events) {
            json je;
            je["code"] = e.code;
            je["details"] = json::array();
            for (const auto& [f, v] : e.details) je["details"].push_back(json::array({f, v}));
            je["t"] = e.t;
            js["events"].push_back(std::move(je));
        }
        js["labels"] = json::object();
        for (size_t i = 0; i < c.tasks.size(); ++i) {
            if (s.labels[i])
                js["labels"][c.tasks[i].name] = *s.labels[i];
            else
                js["labels"][c.tasks[i].name] = nullptr;
        }
        if (s.relevant_idx) js["relevant_idx"] = *s.relevant_idx;
        out << js.dump() << '\n';
    }
    if (!out) throw CohortError("write failed: " + path);
}

std::vector<int> assign_patient_splits(const std::vector<std::string>& patient_ids_in_order,
                                       const std::vector<int>& ratios, uint64_t seed) {
    size_t n = patient_ids_in_order.size();
    size_t k = ratios.size();
    for (int r : ratios)
        if (r <= 0) throw CohortError("split ratios must be positive");
    if (n < k) throw CohortError("fewer patients than splits");

    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng = Rng(seed).derive("split");
    rng.shuffle(order);

    long total = 0;
    for (int r : ratios) total += r;
    // cumulative boundaries; every split gets at least one patient
    std::vector<size_t> bounds(k);
    long cum = 0;
    for (size_t i = 0; i < k; ++i) {
        cum += ratios[i];
        bounds[i] = size_t(double(cum) / double(total) * double(n) + 0.5);
    }
    bounds[k - 1] = n;
    for (size_t i = 1; i < k; ++i)
        if (bounds[i] <= bounds[i - 1]) bounds[i] = bounds[i - 1] + 1;
    for (size_t i = k; i-- > 1;)
        if (bounds[i] > n - (k - 1 - i)) bounds[i] = n - (k - 1 - i);

    std::vector<int> assignment(n, int(k - 1));
    size_t pos = 0;
    for (size_t s = 0; s < k; ++s)
        for (; pos < bounds[s]; ++pos) assignment[order[pos]] = int(s);
    return assignment;
}

std::tuple<Cohort, Cohort, Cohort> split_cohort(const Cohort& c, const std::vector<int>& ratios,
                                                uint64_t seed) {
    if (ratios.size() != 3) throw CohortError("split_cohort expects 3 ratios");
    std::vector<std::string> patients;
    std::set<std::string> seen;
    for (const auto& s : c.samples)
        if (seen.insert(s.patient_id).second) patients.push_back(s.patient_id);
    std::vector<int> assign = assign_patient_splits(patients, ratios, seed);
    std::map<std::string, int> by_patient;
    for (size_t i = 0; i < patients.size(); ++i) by_patient[patients[i]] = assign[i];

    Cohort parts[3];
    for (auto& p : parts) {
        p.tasks = c.tasks;
        p.code_descriptions = c.code_descriptions;
    }
    for (const auto& s : c.samples) parts[size_t(by_patient.at(s.patient_id))].samples.push_back(s);
    return {std::move(parts[0]), std::move(parts[1]), std::move(parts[2])};
}

PatientSample filter_window(const PatientSample& s, double window_minutes) {
    if (window_minutes != kUnlimitedWindow && window_minutes <= 0)
        throw CohortError("filter_window: window must be positive or unlimited");
    if (window_minutes == kUnlimitedWindow) return s;

    PatientSample out = s;
    out.events.clear();
    std::vector<int> keep_pos(s.events.size(), -1);
    for (size_t i = 0; i < s.events.size(); ++i) {
        if (s.prediction_time - s.events[i].t <= window_minutes) {
            keep_pos[i] = int(out.events.size());
            out.events.push_back(s.events[i]);
        }
    }
    if (s.relevant_idx) {
        std::vector<int> rel;
        for (int r : *s.relevant_idx)
            if (keep_pos[size_t(r)] >= 0) rel.push_back(keep_pos[size_t(r)]);
        out.relevant_idx = std::move(rel);
    }
    return out;
}

}  // namespace remed::events
