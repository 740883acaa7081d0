#pragma once
// Human-readable summaries of a corpus and (optionally) a finished run:
// term frequency tables, pairwise-distance diagnostics, design correlations,
// metrics recomputed from persisted predictions, and PGM atlas slices.

#include <string>

#include "cogmap/corpus.hpp"

namespace cogmap::report {

struct ReportSummary {
    bool metrics_consistent = true; // recomputed == persisted metrics.csv
    int n_prediction_rows = 0;
    double median_same_study = 0.0;
    double median_same_term_set = 0.0;
    double median_same_condition = 0.0;
};

// run_dir may be empty: corpus-only report (frequencies, distances, design).
ReportSummary write_report(const corpus::Corpus& corpus, const std::string& run_dir,
                           const std::string& out_dir);

} // namespace cogmap::report
