#include "remed/analysis.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>

namespace remed::stats {

double retrieval_recall(const trainer::View& view, trainer::TrainedModel& model) {
    double sum = 0;
    long n = 0;
    const auto& c = *view.base;
    for (int s : view.samples) {
        const auto& relevant = c.relevant[size_t(s)];
        if (relevant.empty()) continue;
        auto picked = trainer::retrieve_for_sample(view, s, model);
        int64_t begin = view.window_begin(s);
        long hit = 0;
        for (int r : relevant)
            for (const auto& e : picked)
                if (e.idx + begin == r) {
                    ++hit;
                    break;
                }
        sum += double(hit) / double(relevant.size());
        ++n;
    }
    if (n == 0) throw std::invalid_argument("retrieval_recall: no samples carry relevant_idx");
    return sum / double(n);
}

std::vector<CodeFreqRow> code_retrieval_freq(const trainer::View& view, trainer::TrainedModel& model) {
    const auto& c = *view.base;
    std::map<int32_t, long> counts;
    long predictions = 0;
    for (int s : view.samples) {
        auto picked = trainer::retrieve_for_sample(view, s, model);
        if (picked.empty()) continue;
        ++predictions;
        int64_t off = c.offsets[size_t(s)] + view.window_begin(s);
        for (const auto& e : picked) counts[c.code_ids[size_t(off + e.idx)]]++;
    }
    std::vector<CodeFreqRow> rows;
    if (predictions == 0) return rows;
    for (const auto& [code_id, cnt] : counts)
        rows.push_back({c.code_names[size_t(code_id)], double(cnt) / double(predictions)});
    std::sort(rows.begin(), rows.end(), [](const CodeFreqRow& a, const CodeFreqRow& b) {
        if (a.avg_retrieved != b.avg_retrieved) return a.avg_retrieved > b.avg_retrieved;
        return a.code < b.code;
    });
    return rows;
}

void write_code_freq_csv(const std::vector<CodeFreqRow>& rows, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write csv: " + path);
    out << "code,avg_retrieved\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.6f", r.avg_retrieved);
        out << r.code << ',' << buf << '\n';
    }
}

ProfileResult importance_profile(const trainer::View& view, const events::Cohort& cohort,
                                 trainer::TrainedModel& model, const std::string& code) {
    if (model.baseline) throw std::invalid_argument("importance_profile: needs a retriever model");
    ProfileResult res;
    const auto& c = *view.base;
    retriever::ScoreWorkspace<float> ws;
    for (int s : view.samples) {
        int64_t off = c.offsets[size_t(s)];
        int64_t n = c.events_of(s);
        if (n == 0) continue;
        // score every event of the sample (full profile, not just retrieved)
        retriever::EventSource<float> src;
        src.count = n;
        src.fill = [&](int64_t start, int cnt, float* vecs, float* times) {
            std::copy_n(c.vecs.data() + (off + start) * c.dim, int64_t(cnt) * c.dim, vecs);
            std::copy_n(c.times.data() + off + start, cnt, times);
        };
        auto scores = retriever::score_all(model.rcfg, model.rparams, src, float(c.pred_time[size_t(s)]), ws);
        const auto& sample = cohort.samples[size_t(s)];
        for (int64_t e = 0; e < n; ++e) {
            if (sample.events[size_t(e)].code != code) continue;
            const auto& details = sample.events[size_t(e)].details;
            auto it = std::find_if(details.begin(), details.end(),
                                   [](const auto& kv) { return kv.first == "Value"; });
            double value = 0;
            bool ok = false;
            if (it != details.end()) {
                try {
                    size_t pos = 0;
                    value = std::stod(it->second, &pos);
                    ok = pos == it->second.size();
                } catch (const std::exception&) {
                    ok = false;
                }
            }
            if (!ok) {
                ++res.skipped_unparsable;
                continue;
            }
            res.rows.push_back({sample.events[size_t(e)].t, value, double(scores[size_t(e)])});
        }
    }
    return res;
}

void write_profile_csv(const ProfileResult& res, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write csv: " + path);
    out << "t_minutes,value,score\n";
    char buf[128];
    for (const auto& r : res.rows) {
        std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f", r.t, r.value, r.score);
        out << buf << '\n';
    }
}

}  // namespace remed::stats
