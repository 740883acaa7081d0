// cogmap: cross-study activation-map meta-analysis.
//
// Subcommands:
//   synth     generate a synthetic corpus with known ground truth
//   validate  check a corpus manifest, its maps, and the term span rule
//   forward   mass-univariate GLM with term contrasts and FWER control
//   reverse   cross-validated reverse inference (parcellate/select/classify)
//   report    frequency tables, distance diagnostics, and atlas slices
//
// Exit codes: 0 success, 2 validation error, 3 numerical error.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cogmap/pipeline.hpp"
#include "cogmap/report.hpp"
#include "cogmap/synth.hpp"

using namespace cogmap;

namespace {

struct SynthArgs {
    std::string out;
    std::uint64_t seed = 42;
    int jobs = 1;
    synth::SynthConfig config;
    std::vector<int> grid_dims = {24, 24, 18};
};

int cmd_synth(const SynthArgs& args) {
    synth::SynthConfig config = args.config;
    if (args.grid_dims.size() != 3)
        throw ValidationError("--grid expects three comma-separated dimensions");
    config.grid.nx = args.grid_dims[0];
    config.grid.ny = args.grid_dims[1];
    config.grid.nz = args.grid_dims[2];

    const auto taxonomy = corpus::default_taxonomy();
    const auto mask = synth::make_ellipsoid_mask(config.grid);
    auto truth = synth::make_ground_truth(taxonomy, mask, config, args.seed);
    const auto corpus = synth::generate_corpus(truth, args.seed, args.jobs);
    corpus::save_corpus(corpus, args.out);
    synth::save_ledger(truth, args.out + "/ledger.json");

    int n_subjects = 0, n_conditions = 0;
    for (const auto& s : corpus.studies()) {
        n_subjects += static_cast<int>(s.subjects.size());
        n_conditions += static_cast<int>(s.conditions.size());
    }
    std::printf("wrote corpus: %zu studies, %d subjects, %d conditions, %d maps, p=%d -> %s\n",
                corpus.studies().size(), n_subjects, n_conditions, corpus.n_maps(), corpus.p(),
                args.out.c_str());
    return 0;
}

int cmd_validate(const std::string& manifest, bool strict) {
    const auto corpus = corpus::load_corpus(manifest);
    if (strict) corpus.validate_strict_categories();

    const auto spans = corpus::validate_term_span(corpus);
    std::printf("%-22s %-18s %8s %6s\n", "term", "category", "studies", "ok");
    int violations = 0;
    for (const auto& s : spans) {
        const bool present = s.n_studies > 0;
        if (present && !s.usable) ++violations;
        std::printf("%-22s %-18s %8d %6s\n", s.term.c_str(),
                    corpus.taxonomy().category_name_of(s.term).c_str(), s.n_studies,
                    !present ? "absent" : (s.usable ? "yes" : "VIOLATION"));
    }
    std::printf("corpus: %zu studies, %d maps, p=%d\n", corpus.studies().size(), corpus.n_maps(),
                corpus.p());
    if (violations > 0)
        throw ValidationError(std::to_string(violations) +
                              " term(s) appear in fewer than 2 studies (span rule)");
    std::printf("corpus valid\n");
    return 0;
}

int cmd_forward(const std::string& manifest, const pipe::RunConfig& config) {
    const auto corpus = corpus::load_corpus(manifest);
    const auto result = pipe::run_forward(corpus, config);
    std::printf("%-22s %10s %14s\n", "term", "threshold", "n_significant");
    for (const auto& c : result.contrasts)
        std::printf("%-22s %10.4f %14d\n", c.term.c_str(), c.fwer_threshold_t, c.n_significant);
    std::printf("dof=%d, alpha=%g, %zu terms\n", result.dof, config.alpha,
                result.contrasts.size());
    return 0;
}

int cmd_reverse(const std::string& manifest, const pipe::RunConfig& config) {
    const auto corpus = corpus::load_corpus(manifest);
    const auto result = pipe::run_reverse(corpus, config);
    std::printf("%-22s %9s %9s %13s %13s %10s\n", "term", "precision", "recall", "chance_prec",
                "chance_rec", "lambda");
    for (const auto& r : result.rows)
        std::printf("%-22s %9.3f %9.3f %13.3f %13.3f %10g\n", r.term.c_str(), r.precision,
                    r.recall, r.chance_precision, r.chance_recall, r.lambda_selected);
    std::printf("method=%s scheme=%s folds=%d micro_f1=%.4f\n",
                pipe::method_name(result.method).c_str(), cv::scheme_name(result.scheme).c_str(),
                result.n_folds, result.micro_f1);
    for (const auto& s : result.skipped) std::printf("skipped term: %s\n", s.c_str());
    return 0;
}

int cmd_report(const std::string& manifest, const std::string& run, std::string out) {
    const auto corpus = corpus::load_corpus(manifest);
    if (out.empty()) out = run.empty() ? "report" : run + "/report";
    const auto summary = report::write_report(corpus, run, out);
    std::printf("report -> %s\n", out.c_str());
    std::printf("median distance: same-study %.4f, same-term-set %.4f, same-condition %.4f\n",
                summary.median_same_study, summary.median_same_term_set,
                summary.median_same_condition);
    if (!run.empty()) {
        std::printf("prediction rows: %d; metrics %s\n", summary.n_prediction_rows,
                    summary.metrics_consistent ? "consistent" : "INCONSISTENT");
        if (!summary.metrics_consistent)
            throw ValidationError("metrics.csv disagrees with persisted predictions");
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"cross-study activation-map meta-analysis"};
    app.require_subcommand(1);
    bool quiet = false;
    app.add_flag("--quiet", quiet, "suppress warnings");

    // --- synth ---
    SynthArgs synth_args;
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic ground-truth corpus");
    synth_cmd->add_option("--out", synth_args.out, "output corpus directory")->required();
    synth_cmd->add_option("--seed", synth_args.seed, "master seed");
    synth_cmd->add_option("--jobs", synth_args.jobs, "worker threads");
    synth_cmd->add_option("--studies", synth_args.config.n_studies, "number of studies");
    synth_cmd->add_option("--labs", synth_args.config.n_labs, "number of laboratories");
    synth_cmd->add_option("--grid", synth_args.grid_dims, "grid dims nx,ny,nz")->delimiter(',');
    synth_cmd->add_option("--effect-amp", synth_args.config.effect_amplitude,
                          "blob peak amplitude");
    synth_cmd->add_option("--blob-sigma", synth_args.config.blob_sigma, "blob sigma (voxels)");
    synth_cmd->add_option("--noise-sigma", synth_args.config.noise_sigma, "map noise SD");
    synth_cmd->add_option("--noise-smooth", synth_args.config.noise_smooth_sigma,
                          "noise smoothing sigma (voxels)");
    synth_cmd->add_option("--study-effect-amp", synth_args.config.study_effect_amplitude,
                          "per-study confound RMS amplitude");
    synth_cmd->add_option("--interaction-amp", synth_args.config.interaction_amplitude,
                          "per-(study,term) gain jitter SD");
    synth_cmd->add_flag("--forbid-overlap", synth_args.config.forbid_overlap,
                        "make term supports pairwise disjoint");
    synth_cmd->add_option("--subjects", synth_args.config.subjects_per_study,
                          "per-study subject counts")
        ->delimiter(',');
    synth_cmd->add_option("--conditions", synth_args.config.conditions_per_study,
                          "per-study condition counts")
        ->delimiter(',');

    // --- validate ---
    std::string val_corpus;
    bool val_strict = false;
    auto* val_cmd = app.add_subcommand("validate", "validate a corpus manifest");
    val_cmd->add_option("--corpus", val_corpus, "manifest.json path")->required();
    val_cmd->add_flag("--strict", val_strict, "enforce <=1 term per category");

    // --- shared run options ---
    pipe::RunConfig fwd_config, rev_config;
    std::string fwd_corpus, rev_corpus;
    std::string rev_method = "logistic-weighted", rev_cv = "loso", rev_bias = "normalized";
    std::string fwd_contrast = "coefficient";

    auto* fwd_cmd = app.add_subcommand("forward", "mass-univariate GLM forward inference");
    fwd_cmd->add_option("--corpus", fwd_corpus, "manifest.json path")->required();
    fwd_cmd->add_option("--out", fwd_config.out_dir, "run output directory");
    fwd_cmd->add_option("--alpha", fwd_config.alpha, "FWER level");
    fwd_cmd->add_option("--exclude", fwd_config.excluded, "terms to drop from the design")
        ->delimiter(',');
    fwd_cmd->add_option("--contrast-mode", fwd_contrast, "coefficient|category-mean");
    fwd_cmd->add_option("--sigma-map", fwd_config.sigma_map, "atlas smoothing sigma (voxels)");
    fwd_cmd->add_option("--jobs", fwd_config.jobs, "worker threads");
    fwd_cmd->add_option("--seed", fwd_config.seed, "master seed");

    auto* rev_cmd = app.add_subcommand("reverse", "cross-validated reverse inference");
    rev_cmd->add_option("--corpus", rev_corpus, "manifest.json path")->required();
    rev_cmd->add_option("--out", rev_config.out_dir, "run output directory");
    rev_cmd->add_option("--method", rev_method,
                        "logistic-weighted|logistic|naive-bayes|knn");
    rev_cmd->add_option("--cv", rev_cv, "loso|lolo");
    rev_cmd->add_option("--lambda-grid", rev_config.lambda_grid, "ridge penalties")
        ->delimiter(',');
    rev_cmd->add_option("--parcel-ratio", rev_config.parcel_ratio, "parcels / voxels");
    rev_cmd->add_option("--select-frac", rev_config.select_fraction, "ANOVA keep fraction");
    rev_cmd->add_option("--inner-splits", rev_config.inner_splits, "inner shuffle splits");
    rev_cmd->add_option("--inner-frac", rev_config.inner_test_fraction,
                        "inner validation fraction");
    rev_cmd->add_option("--chance-perms", rev_config.chance_permutations,
                        "total label permutations per term (0 = off)");
    rev_cmd->add_option("--bias-mode", rev_bias, "normalized|literal prior shift");
    rev_cmd->add_option("--sigma-map", rev_config.sigma_map, "atlas smoothing sigma (voxels)");
    rev_cmd->add_option("--jobs", rev_config.jobs, "worker threads");
    rev_cmd->add_option("--seed", rev_config.seed, "master seed");

    // --- report ---
    std::string rep_corpus, rep_run, rep_out;
    auto* rep_cmd = app.add_subcommand("report", "corpus / run report");
    rep_cmd->add_option("--corpus", rep_corpus, "manifest.json path")->required();
    rep_cmd->add_option("--run", rep_run, "previous run directory (optional)");
    rep_cmd->add_option("--out", rep_out, "report output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    Log::set_quiet(quiet);

    try {
        if (synth_cmd->parsed()) return cmd_synth(synth_args);
        if (val_cmd->parsed()) return cmd_validate(val_corpus, val_strict);
        if (fwd_cmd->parsed()) {
            fwd_config.contrast_mode = fwd_contrast == "category-mean"
                                           ? glm::ContrastMode::CategoryMean
                                           : glm::ContrastMode::Coefficient;
            if (fwd_contrast != "coefficient" && fwd_contrast != "category-mean")
                throw ValidationError("unknown contrast mode '" + fwd_contrast + "'");
            return cmd_forward(fwd_corpus, fwd_config);
        }
        if (rev_cmd->parsed()) {
            rev_config.method = pipe::method_from_name(rev_method);
            rev_config.scheme = cv::scheme_from_name(rev_cv);
            if (rev_bias == "normalized") rev_config.bias_mode = clf::BiasMode::Normalized;
            else if (rev_bias == "literal") rev_config.bias_mode = clf::BiasMode::Literal;
            else throw ValidationError("unknown bias mode '" + rev_bias + "'");
            return cmd_reverse(rev_corpus, rev_config);
        }
        if (rep_cmd->parsed()) return cmd_report(rep_corpus, rep_run, rep_out);
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 0;
}
