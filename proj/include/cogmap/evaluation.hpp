#pragma once
// Cross-validation plumbing: leave-one-study/laboratory-out fold plans,
// stratified shuffle splits, lambda search, precision/recall with explicit
// undefined flags, permutation chance levels, and corpus distance diagnostics.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cogmap/classifiers.hpp"
#include "cogmap/corpus.hpp"

namespace cogmap::cv {

enum class Scheme { LeaveOneStudyOut, LeaveOneLabOut };

std::string scheme_name(Scheme s);
Scheme scheme_from_name(const std::string& name);

struct Fold {
    std::string held_out;       // study or laboratory id
    std::vector<int> train_ids; // map indices
    std::vector<int> test_ids;
};

struct FoldPlan {
    Scheme scheme = Scheme::LeaveOneStudyOut;
    std::vector<Fold> folds;
};

// One fold per held-out study (or laboratory); test sets partition the corpus.
FoldPlan make_folds(const corpus::Corpus& corpus, Scheme scheme);

struct InnerSplit {
    std::vector<int> train; // positions into the fold-local sample array
    std::vector<int> val;
};

struct InnerSplitPlan {
    int n_splits = 10;
    double test_fraction = 0.2;
    std::vector<InnerSplit> splits;
};

// Randomized class-stratified shuffle splits; each class's validation share is
// within +-1 sample of test_fraction * class_count. `term` is used in errors.
InnerSplitPlan inner_splits(const std::vector<int>& y, int n_splits, double test_fraction,
                            std::uint64_t seed, const std::string& term = "");

struct TuneResult {
    double best_lambda = 0.0;
    std::vector<double> grid;                   // deduplicated, descending
    std::vector<double> mean_balanced_accuracy; // aligned with grid
    int n_fits = 0;
};

// Fits every (split, lambda) with warm starts along the descending grid and
// selects the lambda maximizing mean balanced accuracy; ties -> smaller lambda.
TuneResult tune_lambda(const Eigen::MatrixXd& X, const std::vector<int>& y, bool weighted,
                       const std::vector<double>& grid, const InnerSplitPlan& plan,
                       const clf::LogisticOpts& opts = {});

struct TermMetrics {
    std::string term;
    double precision = 0.0;
    double recall = 0.0;
    bool precision_undefined = false; // no predicted positives
    bool recall_undefined = false;    // no actual positives
    int support = 0;                  // actual positives
    int tp = 0, fp = 0, fn = 0, tn = 0;
};

TermMetrics precision_recall(const std::string& term, const std::vector<std::uint8_t>& predicted,
                             const std::vector<std::uint8_t>& truth);

struct ChancePR {
    double precision_mean = 0.0, precision_sd = 0.0;
    double recall_mean = 0.0, recall_sd = 0.0;
    int n_permutations = 0;
};

// Structure-preserving label permutation: labels are shuffled within each
// study. fit_and_score receives the permuted labels and the permutation index
// and returns (precision, recall) of the refitted pipeline on held-out data.
ChancePR chance_levels(
    const std::vector<int>& labels, const std::vector<int>& study_of, int n_permutations,
    std::uint64_t seed,
    const std::function<std::pair<double, double>(const std::vector<int>&, int)>& fit_and_score);

// Permute labels in place within each study group (helper, deterministic).
std::vector<int> permute_within_groups(const std::vector<int>& labels,
                                       const std::vector<int>& groups, std::uint64_t seed);

struct DistanceDiagnostics {
    std::vector<double> same_study;    // pairs sharing the study
    std::vector<double> same_term_set; // identical term sets, different studies
    std::vector<double> same_condition; // same (study, condition)
    double median_same_study = 0.0;
    double median_same_term_set = 0.0;
    double median_same_condition = 0.0;
    Eigen::MatrixXd design_correlation;
    std::vector<std::string> design_terms;
};

DistanceDiagnostics distance_diagnostics(const corpus::Corpus& corpus);

} // namespace cogmap::cv
