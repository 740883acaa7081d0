#pragma once
// End-to-end runs: forward (GLM + contrasts + significance volumes) and
// reverse (per-fold parcellation, selection, tuning, final fits, chance
// levels) with all artifacts persisted to a run directory.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cogmap/corpus.hpp"
#include "cogmap/evaluation.hpp"
#include "cogmap/glm.hpp"

namespace cogmap::pipe {

enum class Method { LogisticWeighted, Logistic, NaiveBayes, Knn };

std::string method_name(Method m);
Method method_from_name(const std::string& name);

// 6 log-spaced points, 1e-2 .. 1e3.
std::vector<double> default_lambda_grid();

struct RunConfig {
    cv::Scheme scheme = cv::Scheme::LeaveOneStudyOut;
    Method method = Method::LogisticWeighted;

    std::vector<double> lambda_grid = default_lambda_grid();
    double parcel_ratio = 0.31;     // n_parcels = round(ratio * p)
    double select_fraction = 0.30;  // ANOVA keep fraction
    int inner_splits = 10;
    double inner_test_fraction = 0.2;
    int chance_permutations = 100;  // total per term, spread over folds; 0 = off
    std::vector<int> knn_grid = {5, 10, 15, 20};
    int knn_tune_splits = 3;
    clf::BiasMode bias_mode = clf::BiasMode::Normalized;

    double alpha = 0.05;                    // forward FWER level
    std::vector<std::string> excluded;      // forward design exclusions
    glm::ContrastMode contrast_mode = glm::ContrastMode::Coefficient;

    double sigma_map = 2.0;        // atlas smoothing (voxels)
    double atlas_top_fraction = 0.05;
    bool atlas_smooth_first = true; // smooth-then-threshold (default) or threshold raw values

    int jobs = 1;
    std::uint64_t seed = 42;
    std::string out_dir; // empty: keep everything in memory only
};

struct TermRow {
    std::string term, category;
    int corpus_count = 0;  // maps containing the term (whole corpus)
    int support_train = 0; // mean train positives over eligible folds, rounded
    int support_test = 0;  // pooled test positives
    double precision = 0.0, recall = 0.0;
    bool precision_undefined = false, recall_undefined = false;
    double chance_precision = 0.0, chance_precision_sd = 0.0;
    double chance_recall = 0.0, chance_recall_sd = 0.0;
    double lambda_selected = 0.0; // modal over folds; 0 for NB / KNN
    int tp = 0, fp = 0, fn = 0, tn = 0;
};

struct ReverseResult {
    Method method = Method::LogisticWeighted;
    cv::Scheme scheme = cv::Scheme::LeaveOneStudyOut;
    std::vector<TermRow> rows;        // taxonomy order, eligible terms only
    std::vector<std::string> skipped; // terms eligible in no fold
    // term -> {"tune","final","chance"} -> number of optimizer runs
    std::map<std::string, std::map<std::string, int>> fit_counts;
    double micro_f1 = 0.0; // pooled over all rows' confusion counts
    int n_folds = 0;
};

ReverseResult run_reverse(const corpus::Corpus& corpus, const RunConfig& config);

struct ForwardResult {
    std::vector<glm::ContrastResult> contrasts; // per included term
    Eigen::MatrixXd design_correlation;
    std::vector<std::string> design_terms;
    int dof = 0;
};

ForwardResult run_forward(const corpus::Corpus& corpus, const RunConfig& config);

// --- model files --------------------------------------------------------------
// "CMDL1\n", u32 term/category name lengths + bytes, f64 lambda/rho/intercept,
// u32 n_selected, selected u32s, weights f64s. Little-endian.
struct SavedModel {
    std::string term, category;
    double lambda = 0.0, rho = 0.0, intercept = 0.0;
    std::vector<int> selected;
    Eigen::VectorXd weights; // aligned with selected
};

void save_model(const std::string& path, const SavedModel& model);
SavedModel load_model(const std::string& path);

void write_metrics_csv(const std::string& path, const ReverseResult& result);

// File-name-safe term slug (spaces and '/' -> '_').
std::string term_slug(const std::string& term);

} // namespace cogmap::pipe
