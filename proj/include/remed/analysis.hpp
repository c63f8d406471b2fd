#pragma once

#include <string>
#include <vector>

#include "remed/evalstats.hpp"
#include "remed/trainer.hpp"

namespace remed::stats {

// mean over samples of |retrieved ∩ relevant| / |relevant|; samples without
// ground truth are excluded
double retrieval_recall(const trainer::View& view, trainer::TrainedModel& model);

// per code, total retrieved occurrences across all predictions divided by the
// prediction count, sorted descending (code name breaks ties)
struct CodeFreqRow {
    std::string code;
    double avg_retrieved;
};
std::vector<CodeFreqRow> code_retrieval_freq(const trainer::View& view, trainer::TrainedModel& model);
void write_code_freq_csv(const std::vector<CodeFreqRow>& rows, const std::string& path);

// every event of one code: (t, parsed "Value", importance score); events with
// unparsable values are skipped and counted
struct ProfileRow {
    double t;
    double value;
    double score;
};
struct ProfileResult {
    std::vector<ProfileRow> rows;
    long skipped_unparsable{0};
};
ProfileResult importance_profile(const trainer::View& view, const events::Cohort& cohort,
                                 trainer::TrainedModel& model, const std::string& code);
void write_profile_csv(const ProfileResult& rows, const std::string& path);

}  // namespace remed::stats
