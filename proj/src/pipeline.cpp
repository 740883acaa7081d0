#include "cogmap/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "cogmap/parcellation.hpp"
#include "cogmap/rng.hpp"

namespace cogmap::pipe {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string method_name(Method m) {
    switch (m) {
        case Method::LogisticWeighted: return "logistic-weighted";
        case Method::Logistic: return "logistic";
        case Method::NaiveBayes: return "naive-bayes";
        case Method::Knn: return "knn";
    }
    return "?";
}

Method method_from_name(const std::string& name) {
    if (name == "logistic-weighted") return Method::LogisticWeighted;
    if (name == "logistic") return Method::Logistic;
    if (name == "naive-bayes") return Method::NaiveBayes;
    if (name == "knn") return Method::Knn;
    throw ValidationError("unknown method '" + name +
                          "' (expected logistic-weighted, logistic, naive-bayes, or knn)");
}

std::vector<double> default_lambda_grid() {
    std::vector<double> grid;
    for (int e = -2; e <= 3; ++e) grid.push_back(std::pow(10.0, e));
    return grid;
}

std::string term_slug(const std::string& term) {
    std::string s = term;
    for (char& c : s)
        if (c == ' ' || c == '/') c = '_';
    return s;
}

namespace {

std::string fmt(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", x);
    return buf;
}

bool is_logistic(Method m) { return m == Method::Logistic || m == Method::LogisticWeighted; }

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64(std::ostream& out, double v) { out.write(reinterpret_cast<const char*>(&v), 8); }

double get_f64(std::istream& in) {
    double v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

void put_str(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_str(std::istream& in) {
    const std::uint32_t n = get_u32(in);
    if (n > (1u << 20)) throw ValidationError("model file: implausible string length");
    std::string s(n, '\0');
    in.read(s.data(), n);
    return s;
}

// One prediction row of a fold's prediction table.
struct Pred {
    int map = 0;
    int term = 0; // index into the taxonomy term list
    double p = 0.0, p_biased = 0.0;
    bool predicted = false, truth = false;
};

struct FoldWork {
    std::vector<Pred> preds; // test-map-major, term order within a map
    std::map<std::string, double> lambda;
    std::map<std::string, int> train_pos;
    std::map<std::string, cv::ChancePR> chance;
    std::map<std::string, std::map<std::string, int>> fits;
    std::map<std::string, SavedModel> models; // logistic methods only
    parcel::Parcellation parc;                // logistic methods only
    int knn_k = 0;
};

Eigen::MatrixXf gather_rows(const Eigen::MatrixXf& data, const std::vector<int>& ids) {
    Eigen::MatrixXf out(static_cast<int>(ids.size()), data.cols());
    for (std::size_t i = 0; i < ids.size(); ++i)
        out.row(static_cast<int>(i)) = data.row(ids[i]);
    return out;
}

Eigen::MatrixXd gather_cols(const Eigen::MatrixXd& X, const std::vector<int>& cols) {
    Eigen::MatrixXd out(X.rows(), static_cast<int>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<int>(j)) = X.col(cols[j]);
    return out;
}

// Share of the total permutation budget assigned to rank r of m folds.
int perm_share(int total, int m, int r) {
    return total / m + (r < total % m ? 1 : 0);
}

void validate_common(const RunConfig& config) {
    if (config.parcel_ratio <= 0 || config.parcel_ratio > 1)
        throw ValidationError("parcel ratio must be in (0, 1]");
    if (config.select_fraction <= 0 || config.select_fraction > 1)
        throw ValidationError("selection fraction must be in (0, 1]");
    if (config.inner_splits < 1) throw ValidationError("inner splits must be >= 1");
    if (config.inner_test_fraction <= 0 || config.inner_test_fraction >= 1)
        throw ValidationError("inner test fraction must be in (0, 1)");
    if (config.chance_permutations < 0) throw ValidationError("chance permutations must be >= 0");
    if (config.jobs < 1) throw ValidationError("jobs must be >= 1");
    if (config.lambda_grid.empty()) throw ValidationError("lambda grid must be nonempty");
    for (double l : config.lambda_grid)
        if (!(l > 0)) throw ValidationError("lambda grid values must be > 0");
    if (config.knn_grid.empty()) throw ValidationError("knn grid must be nonempty");
    for (int k : config.knn_grid)
        if (k < 1) throw ValidationError("knn grid values must be >= 1");
    if (!(config.sigma_map >= 0)) throw ValidationError("sigma-map must be >= 0");
    if (config.atlas_top_fraction <= 0 || config.atlas_top_fraction > 1)
        throw ValidationError("atlas top fraction must be in (0, 1]");
    if (config.alpha <= 0 || config.alpha >= 1) throw ValidationError("alpha must be in (0, 1)");
}

json config_json(const RunConfig& config) {
    // jobs and out_dir are intentionally omitted: run directories produced
    // with different thread counts or paths must diff clean.
    json j;
    j["method"] = method_name(config.method);
    j["cv_scheme"] = cv::scheme_name(config.scheme);
    j["lambda_grid"] = config.lambda_grid;
    j["parcel_ratio"] = config.parcel_ratio;
    j["select_fraction"] = config.select_fraction;
    j["inner_splits"] = config.inner_splits;
    j["inner_test_fraction"] = config.inner_test_fraction;
    j["chance_permutations"] = config.chance_permutations;
    j["knn_grid"] = config.knn_grid;
    j["knn_tune_splits"] = config.knn_tune_splits;
    j["bias_mode"] = config.bias_mode == clf::BiasMode::Normalized ? "normalized" : "literal";
    j["alpha"] = config.alpha;
    j["excluded"] = config.excluded;
    j["contrast_mode"] =
        config.contrast_mode == glm::ContrastMode::Coefficient ? "coefficient" : "category-mean";
    j["sigma_map"] = config.sigma_map;
    j["atlas_top_fraction"] = config.atlas_top_fraction;
    j["atlas_smooth_first"] = config.atlas_smooth_first;
    j["seed"] = config.seed;
    return j;
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path);
    out << content;
}

} // namespace

void save_model(const std::string& path, const SavedModel& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write model file " + path);
    out.write("CMDL1\n", 6);
    put_str(out, model.term);
    put_str(out, model.category);
    put_f64(out, model.lambda);
    put_f64(out, model.rho);
    put_f64(out, model.intercept);
    if (model.weights.size() != static_cast<Eigen::Index>(model.selected.size()))
        throw ValidationError("model weights/selected size mismatch");
    put_u32(out, static_cast<std::uint32_t>(model.selected.size()));
    for (int s : model.selected) put_u32(out, static_cast<std::uint32_t>(s));
    for (Eigen::Index i = 0; i < model.weights.size(); ++i) put_f64(out, model.weights[i]);
    if (!out) throw ValidationError("short write on model file " + path);
}

SavedModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open model file " + path);
    char magic[6];
    in.read(magic, 6);
    if (!in || std::string(magic, 6) != "CMDL1\n")
        throw ValidationError("not a CMDL1 model file: " + path);
    SavedModel m;
    m.term = get_str(in);
    m.category = get_str(in);
    m.lambda = get_f64(in);
    m.rho = get_f64(in);
    m.intercept = get_f64(in);
    const std::uint32_t n = get_u32(in);
    if (n > (1u << 28)) throw ValidationError("model file: implausible weight count");
    m.selected.resize(n);
    for (auto& s : m.selected) s = static_cast<int>(get_u32(in));
    m.weights.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) m.weights[static_cast<int>(i)] = get_f64(in);
    if (!in) throw ValidationError("truncated model file: " + path);
    return m;
}

void write_metrics_csv(const std::string& path, const ReverseResult& result) {
    std::ostringstream out;
    out << "method,cv_scheme,term,category,support_train,support_test,precision,recall,"
           "precision_chance,recall_chance,lambda_selected\n";
    for (const auto& r : result.rows) {
        out << method_name(result.method) << ',' << cv::scheme_name(result.scheme) << ',' << r.term
            << ',' << r.category << ',' << r.support_train << ',' << r.support_test << ','
            << fmt(r.precision) << ',' << fmt(r.recall) << ',' << fmt(r.chance_precision) << ','
            << fmt(r.chance_recall) << ',' << fmt(r.lambda_selected) << '\n';
    }
    write_text(path, out.str());
}

ReverseResult run_reverse(const corpus::Corpus& corpus, const RunConfig& config) {
    validate_common(config);
    const auto plan = cv::make_folds(corpus, config.scheme);
    const int n_folds = static_cast<int>(plan.folds.size());
    const int n = corpus.n_maps();
    const int p = corpus.p();
    const auto terms = corpus.taxonomy().all_terms();
    const int n_terms = static_cast<int>(terms.size());
    const bool weighted = (config.method == Method::LogisticWeighted);

    // Fold discipline: the test sets partition the corpus and never intersect
    // their own training sets.
    {
        std::vector<std::uint8_t> seen(static_cast<std::size_t>(n), 0);
        for (const auto& fold : plan.folds) {
            std::vector<std::uint8_t> in_test(static_cast<std::size_t>(n), 0);
            for (int id : fold.test_ids) {
                in_test[static_cast<std::size_t>(id)] = 1;
                if (seen[static_cast<std::size_t>(id)]++)
                    throw ValidationError("fold plan: map in two test sets");
            }
            for (int id : fold.train_ids)
                if (in_test[static_cast<std::size_t>(id)])
                    throw ValidationError("fold plan: train/test sets overlap");
            if (fold.train_ids.size() + fold.test_ids.size() != static_cast<std::size_t>(n))
                throw ValidationError("fold plan: train + test do not cover the corpus");
        }
        for (auto s : seen)
            if (!s) throw ValidationError("fold plan: map missing from all test sets");
    }

    // Per-term binary labels and per-map study ids.
    std::vector<std::vector<int>> y_term(static_cast<std::size_t>(n_terms),
                                         std::vector<int>(static_cast<std::size_t>(n), 0));
    std::vector<int> study_of(static_cast<std::size_t>(n), 0);
    std::vector<int> corpus_count(static_cast<std::size_t>(n_terms), 0);
    for (int i = 0; i < n; ++i) {
        study_of[static_cast<std::size_t>(i)] = corpus.maps()[static_cast<std::size_t>(i)].study;
        for (int t = 0; t < n_terms; ++t)
            if (corpus.map_has_term(i, terms[static_cast<std::size_t>(t)])) {
                y_term[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)] = 1;
                ++corpus_count[static_cast<std::size_t>(t)];
            }
    }

    // Eligibility per (term, fold): enough of both classes in training, and
    // the term must span >= 2 training studies.
    std::vector<std::vector<std::uint8_t>> eligible(
        static_cast<std::size_t>(n_terms),
        std::vector<std::uint8_t>(static_cast<std::size_t>(n_folds), 0));
    for (int t = 0; t < n_terms; ++t)
        for (int f = 0; f < n_folds; ++f) {
            const auto& fold = plan.folds[static_cast<std::size_t>(f)];
            int pos = 0;
            std::set<int> span;
            for (int id : fold.train_ids)
                if (y_term[static_cast<std::size_t>(t)][static_cast<std::size_t>(id)]) {
                    ++pos;
                    span.insert(study_of[static_cast<std::size_t>(id)]);
                }
            const int neg = static_cast<int>(fold.train_ids.size()) - pos;
            eligible[static_cast<std::size_t>(t)][static_cast<std::size_t>(f)] =
                (pos >= 4 && neg >= 4 && static_cast<int>(span.size()) >= 2) ? 1 : 0;
        }
    std::vector<std::vector<int>> eligible_folds(static_cast<std::size_t>(n_terms));
    for (int t = 0; t < n_terms; ++t)
        for (int f = 0; f < n_folds; ++f)
            if (eligible[static_cast<std::size_t>(t)][static_cast<std::size_t>(f)])
                eligible_folds[static_cast<std::size_t>(t)].push_back(f);

    ReverseResult result;
    result.method = config.method;
    result.scheme = config.scheme;
    result.n_folds = n_folds;
    for (int t = 0; t < n_terms; ++t)
        if (eligible_folds[static_cast<std::size_t>(t)].empty() &&
            corpus_count[static_cast<std::size_t>(t)] > 0) {
            result.skipped.push_back(terms[static_cast<std::size_t>(t)]);
            Log::warn("term '" + terms[static_cast<std::size_t>(t)] +
                      "' skipped: not enough training data in any fold");
        } else if (corpus_count[static_cast<std::size_t>(t)] == 0) {
            result.skipped.push_back(terms[static_cast<std::size_t>(t)]);
        }

    const int n_parcels = std::max(1, static_cast<int>(std::llround(config.parcel_ratio * p)));
    vol::AdjacencyGraph adj;
    if (is_logistic(config.method)) adj = vol::build_adjacency(*corpus.mask());

    const std::string scheme_tag = cv::scheme_name(config.scheme);
    std::vector<FoldWork> works(static_cast<std::size_t>(n_folds));

    auto run_fold = [&](int f) {
        const auto& fold = plan.folds[static_cast<std::size_t>(f)];
        FoldWork& work = works[static_cast<std::size_t>(f)];
        const int n_tr = static_cast<int>(fold.train_ids.size());
        const int n_te = static_cast<int>(fold.test_ids.size());

        Eigen::MatrixXf Xtr = gather_rows(corpus.data(), fold.train_ids);
        Eigen::MatrixXf Xte = gather_rows(corpus.data(), fold.test_ids);
        std::vector<int> study_tr(static_cast<std::size_t>(n_tr));
        for (int i = 0; i < n_tr; ++i)
            study_tr[static_cast<std::size_t>(i)] =
                study_of[static_cast<std::size_t>(fold.train_ids[static_cast<std::size_t>(i)])];

        // Fold-local labels per term.
        auto labels_of = [&](int t, const std::vector<int>& ids) {
            std::vector<int> y(ids.size());
            for (std::size_t i = 0; i < ids.size(); ++i)
                y[i] = y_term[static_cast<std::size_t>(t)][static_cast<std::size_t>(ids[i])];
            return y;
        };
        auto chance_share = [&](int t) {
            const auto& ef = eligible_folds[static_cast<std::size_t>(t)];
            const int m = static_cast<int>(ef.size());
            const int r = static_cast<int>(std::find(ef.begin(), ef.end(), f) - ef.begin());
            return perm_share(config.chance_permutations, m, r);
        };

        // Reserve prediction slots: test-map-major, term order within a map.
        std::vector<int> fold_terms;
        for (int t = 0; t < n_terms; ++t)
            if (eligible[static_cast<std::size_t>(t)][static_cast<std::size_t>(f)])
                fold_terms.push_back(t);
        work.preds.assign(static_cast<std::size_t>(n_te) * fold_terms.size(), Pred{});
        auto pred_at = [&](int te_row, int ft) -> Pred& {
            return work.preds[static_cast<std::size_t>(te_row) * fold_terms.size() +
                              static_cast<std::size_t>(ft)];
        };

        if (is_logistic(config.method)) {
            work.parc = parcel::ward_parcellate(Xtr, adj, n_parcels);
            const Eigen::MatrixXd Ftr = parcel::reduce(Xtr, work.parc).cast<double>();
            const Eigen::MatrixXd Fte = parcel::reduce(Xte, work.parc).cast<double>();
            Xtr.resize(0, 0);
            Xte.resize(0, 0);

            clf::LogisticOpts opts;
            opts.newton_polish = false; // L-BFGS to tolerance is enough here
            clf::LogisticOpts chance_opts = opts;
            chance_opts.tol_scale = 1e-5; // chance levels average over decisions

            for (int t : fold_terms) {
                const std::string& term = terms[static_cast<std::size_t>(t)];
                const std::vector<int> y_tr = labels_of(t, fold.train_ids);
                const std::vector<int> y_te = labels_of(t, fold.test_ids);
                const int pos = std::accumulate(y_tr.begin(), y_tr.end(), 0);

                const auto sel = parcel::anova_select(Ftr, y_tr, config.select_fraction);
                const Eigen::MatrixXd Xsel = gather_cols(Ftr, sel.selected);
                const Eigen::MatrixXd Xsel_te = gather_cols(Fte, sel.selected);

                const auto iplan = cv::inner_splits(
                    y_tr, config.inner_splits, config.inner_test_fraction,
                    derive_seed(config.seed, "inner/" + scheme_tag + "/" + fold.held_out + "/" + term),
                    term);
                const auto tune =
                    cv::tune_lambda(Xsel, y_tr, weighted, config.lambda_grid, iplan, opts);
                work.fits[term]["tune"] += tune.n_fits;

                const Eigen::VectorXd w =
                    weighted ? clf::balance_weights(y_tr) : Eigen::VectorXd::Ones(n_tr);
                const auto model = clf::fit_logistic(Xsel, y_tr, w, tune.best_lambda, opts);
                work.fits[term]["final"] += 1;

                work.lambda[term] = tune.best_lambda;
                work.train_pos[term] = pos;
                SavedModel sm;
                sm.term = term;
                sm.category = corpus.taxonomy().category_name_of(term);
                sm.lambda = tune.best_lambda;
                sm.rho = model.rho_term;
                sm.intercept = model.intercept;
                sm.selected = sel.selected;
                sm.weights = model.weights;
                work.models[term] = std::move(sm);

                const int ft = static_cast<int>(std::find(fold_terms.begin(), fold_terms.end(), t) -
                                                fold_terms.begin());
                for (int j = 0; j < n_te; ++j) {
                    const auto bp =
                        clf::predict_biased(model, Xsel_te.row(j).transpose(), config.bias_mode);
                    pred_at(j, ft) = Pred{fold.test_ids[static_cast<std::size_t>(j)], t, bp.p,
                                          bp.p_biased, bp.present, y_te[static_cast<std::size_t>(j)] != 0};
                }

                const int n_perms = config.chance_permutations > 0 ? chance_share(t) : 0;
                if (n_perms > 0) {
                    auto fit_and_score = [&](const std::vector<int>& py, int) {
                        const auto sel_p =
                            parcel::anova_select(Ftr, py, config.select_fraction);
                        const Eigen::MatrixXd Xp = gather_cols(Ftr, sel_p.selected);
                        const Eigen::VectorXd wp =
                            weighted ? clf::balance_weights(py) : Eigen::VectorXd::Ones(n_tr);
                        const auto pm =
                            clf::fit_logistic(Xp, py, wp, tune.best_lambda, chance_opts);
                        work.fits[term]["chance"] += 1;
                        const Eigen::MatrixXd Xpte = gather_cols(Fte, sel_p.selected);
                        std::vector<std::uint8_t> yhat(static_cast<std::size_t>(n_te)),
                            ytrue(static_cast<std::size_t>(n_te));
                        for (int j = 0; j < n_te; ++j) {
                            const double z = Xpte.row(j).dot(pm.weights) + pm.intercept;
                            yhat[static_cast<std::size_t>(j)] = z >= 0 ? 1 : 0;
                            ytrue[static_cast<std::size_t>(j)] =
                                y_te[static_cast<std::size_t>(j)] ? 1 : 0;
                        }
                        const auto pr = cv::precision_recall(term, yhat, ytrue);
                        return std::make_pair(pr.precision, pr.recall);
                    };
                    work.chance[term] = cv::chance_levels(
                        y_tr, study_tr, n_perms,
                        derive_seed(config.seed,
                                    "chance/" + scheme_tag + "/" + fold.held_out + "/" + term),
                        fit_and_score);
                }
            }
        } else if (config.method == Method::NaiveBayes) {
            for (int ft = 0; ft < static_cast<int>(fold_terms.size()); ++ft) {
                const int t = fold_terms[static_cast<std::size_t>(ft)];
                const std::string& term = terms[static_cast<std::size_t>(t)];
                const std::vector<int> y_tr = labels_of(t, fold.train_ids);
                const std::vector<int> y_te = labels_of(t, fold.test_ids);
                work.train_pos[term] = std::accumulate(y_tr.begin(), y_tr.end(), 0);

                const auto model = clf::fit_naive_bayes(Xtr, y_tr);
                work.fits[term]["final"] += 1;
                for (int j = 0; j < n_te; ++j) {
                    const double pp = clf::predict_nb(model, Xte.row(j).transpose());
                    pred_at(j, ft) = Pred{fold.test_ids[static_cast<std::size_t>(j)], t, pp, pp,
                                          pp >= 0.5, y_te[static_cast<std::size_t>(j)] != 0};
                }

                const int n_perms = config.chance_permutations > 0 ? chance_share(t) : 0;
                if (n_perms > 0) {
                    auto fit_and_score = [&](const std::vector<int>& py, int) {
                        const auto pm = clf::fit_naive_bayes(Xtr, py);
                        work.fits[term]["chance"] += 1;
                        std::vector<std::uint8_t> yhat(static_cast<std::size_t>(n_te)),
                            ytrue(static_cast<std::size_t>(n_te));
                        for (int j = 0; j < n_te; ++j) {
                            yhat[static_cast<std::size_t>(j)] =
                                clf::predict_nb(pm, Xte.row(j).transpose()) >= 0.5 ? 1 : 0;
                            ytrue[static_cast<std::size_t>(j)] =
                                y_te[static_cast<std::size_t>(j)] ? 1 : 0;
                        }
                        const auto pr = cv::precision_recall(term, yhat, ytrue);
                        return std::make_pair(pr.precision, pr.recall);
                    };
                    work.chance[term] = cv::chance_levels(
                        y_tr, study_tr, n_perms,
                        derive_seed(config.seed,
                                    "chance/" + scheme_tag + "/" + fold.held_out + "/" + term),
                        fit_and_score);
                }
            }
        } else { // KNN
            // All pairwise distances through one Gram matrix per fold.
            Eigen::MatrixXf Gtr(n_tr, n_tr);
            Gtr.noalias() = Xtr * Xtr.transpose();
            const Eigen::VectorXf sqtr = Gtr.diagonal();

            const int max_k = *std::max_element(config.knn_grid.begin(), config.knn_grid.end());

            // Tune k by pooled micro-F1 over shuffle splits of the training set.
            int best_k = config.knn_grid.front();
            {
                std::vector<std::array<long long, 3>> conf(
                    config.knn_grid.size(), {0, 0, 0}); // tp, fp, fn per k
                Rng rng(derive_seed(config.seed, "knn/" + scheme_tag + "/" + fold.held_out));
                for (int split = 0; split < config.knn_tune_splits; ++split) {
                    std::vector<int> order(static_cast<std::size_t>(n_tr));
                    std::iota(order.begin(), order.end(), 0);
                    rng.shuffle(order);
                    const int n_val = std::min(
                        n_tr - 1,
                        std::max(1, static_cast<int>(std::llround(config.inner_test_fraction *
                                                                  n_tr))));
                    const std::vector<int> val(order.begin(), order.begin() + n_val);
                    std::vector<int> tr(order.begin() + n_val, order.end());
                    std::sort(tr.begin(), tr.end());

                    for (int v : val) {
                        // k nearest split-train rows of val row v.
                        std::vector<std::pair<float, int>> cand;
                        cand.reserve(tr.size());
                        for (int i : tr)
                            cand.emplace_back(sqtr[v] + sqtr[i] - 2.0f * Gtr(v, i), i);
                        const int kk = std::min<int>(max_k, static_cast<int>(cand.size()));
                        std::partial_sort(cand.begin(), cand.begin() + kk, cand.end());
                        for (std::size_t gi = 0; gi < config.knn_grid.size(); ++gi) {
                            const int k = std::min(config.knn_grid[gi], kk);
                            for (int t : fold_terms) {
                                int votes = 0;
                                for (int q = 0; q < k; ++q)
                                    votes += y_term[static_cast<std::size_t>(t)][static_cast<std::size_t>(
                                        fold.train_ids[static_cast<std::size_t>(cand[static_cast<std::size_t>(q)].second)])];
                                const bool hat = 2 * votes > k;
                                const bool truth =
                                    y_term[static_cast<std::size_t>(t)][static_cast<std::size_t>(
                                        fold.train_ids[static_cast<std::size_t>(v)])] != 0;
                                if (hat && truth) ++conf[gi][0];
                                else if (hat) ++conf[gi][1];
                                else if (truth) ++conf[gi][2];
                            }
                        }
                    }
                }
                double best_f1 = -1;
                for (std::size_t gi = 0; gi < config.knn_grid.size(); ++gi) {
                    const double denom = 2.0 * conf[gi][0] + conf[gi][1] + conf[gi][2];
                    const double f1 = denom > 0 ? 2.0 * conf[gi][0] / denom : 0.0;
                    if (f1 > best_f1) {
                        best_f1 = f1;
                        best_k = config.knn_grid[gi];
                    }
                }
            }
            work.knn_k = best_k;

            // Test-set neighbors with the chosen k.
            Eigen::MatrixXf Gte(n_te, n_tr);
            Gte.noalias() = Xte * Xtr.transpose();
            const Eigen::VectorXf sqte = (Xte.array().square().rowwise().sum()).matrix();
            const int k_eff = std::min(best_k, n_tr);
            std::vector<std::vector<int>> neighbors(static_cast<std::size_t>(n_te));
            for (int j = 0; j < n_te; ++j) {
                std::vector<std::pair<float, int>> cand;
                cand.reserve(static_cast<std::size_t>(n_tr));
                for (int i = 0; i < n_tr; ++i)
                    cand.emplace_back(sqte[j] + sqtr[i] - 2.0f * Gte(j, i), i);
                std::partial_sort(cand.begin(), cand.begin() + k_eff, cand.end());
                for (int q = 0; q < k_eff; ++q)
                    neighbors[static_cast<std::size_t>(j)].push_back(cand[static_cast<std::size_t>(q)].second);
            }

            for (int ft = 0; ft < static_cast<int>(fold_terms.size()); ++ft) {
                const int t = fold_terms[static_cast<std::size_t>(ft)];
                const std::string& term = terms[static_cast<std::size_t>(t)];
                const std::vector<int> y_tr = labels_of(t, fold.train_ids);
                const std::vector<int> y_te = labels_of(t, fold.test_ids);
                work.train_pos[term] = std::accumulate(y_tr.begin(), y_tr.end(), 0);
                work.fits[term]["final"] += 1;

                for (int j = 0; j < n_te; ++j) {
                    int votes = 0;
                    for (int i : neighbors[static_cast<std::size_t>(j)])
                        votes += y_tr[static_cast<std::size_t>(i)];
                    const double pp = static_cast<double>(votes) / k_eff;
                    pred_at(j, ft) = Pred{fold.test_ids[static_cast<std::size_t>(j)], t, pp, pp,
                                          2 * votes > k_eff, y_te[static_cast<std::size_t>(j)] != 0};
                }

                const int n_perms = config.chance_permutations > 0 ? chance_share(t) : 0;
                if (n_perms > 0) {
                    auto fit_and_score = [&](const std::vector<int>& py, int) {
                        work.fits[term]["chance"] += 1;
                        std::vector<std::uint8_t> yhat(static_cast<std::size_t>(n_te)),
                            ytrue(static_cast<std::size_t>(n_te));
                        for (int j = 0; j < n_te; ++j) {
                            int votes = 0;
                            for (int i : neighbors[static_cast<std::size_t>(j)])
                                votes += py[static_cast<std::size_t>(i)];
                            yhat[static_cast<std::size_t>(j)] = 2 * votes > k_eff ? 1 : 0;
                            ytrue[static_cast<std::size_t>(j)] =
                                y_te[static_cast<std::size_t>(j)] ? 1 : 0;
                        }
                        const auto pr = cv::precision_recall(term, yhat, ytrue);
                        return std::make_pair(pr.precision, pr.recall);
                    };
                    work.chance[term] = cv::chance_levels(
                        y_tr, study_tr, n_perms,
                        derive_seed(config.seed,
                                    "chance/" + scheme_tag + "/" + fold.held_out + "/" + term),
                        fit_and_score);
                }
            }
        }
    };

    parallel_for(config.jobs, n_folds, run_fold);

    // --- deterministic aggregation (fold order, then taxonomy term order) ---
    for (int t = 0; t < n_terms; ++t) {
        const auto& ef = eligible_folds[static_cast<std::size_t>(t)];
        if (ef.empty()) continue;
        const std::string& term = terms[static_cast<std::size_t>(t)];
        TermRow row;
        row.term = term;
        row.category = corpus.taxonomy().category_name_of(term);
        row.corpus_count = corpus_count[static_cast<std::size_t>(t)];

        long long train_pos_sum = 0;
        std::map<double, int> lambda_votes;
        double csum_p = 0, csum2_p = 0, csum_r = 0, csum2_r = 0;
        long long cn = 0;
        for (int f : ef) {
            const FoldWork& work = works[static_cast<std::size_t>(f)];
            for (const auto& pr : work.preds) {
                if (pr.term != t) continue;
                if (pr.predicted && pr.truth) ++row.tp;
                else if (pr.predicted) ++row.fp;
                else if (pr.truth) ++row.fn;
                else ++row.tn;
            }
            train_pos_sum += work.train_pos.at(term);
            auto lit = work.lambda.find(term);
            if (lit != work.lambda.end()) ++lambda_votes[lit->second];
            auto cit = work.chance.find(term);
            if (cit != work.chance.end()) {
                const auto& c = cit->second;
                csum_p += c.precision_mean * c.n_permutations;
                csum2_p += (c.precision_sd * c.precision_sd +
                            c.precision_mean * c.precision_mean) *
                           c.n_permutations;
                csum_r += c.recall_mean * c.n_permutations;
                csum2_r += (c.recall_sd * c.recall_sd + c.recall_mean * c.recall_mean) *
                           c.n_permutations;
                cn += c.n_permutations;
            }
        }
        row.support_test = row.tp + row.fn;
        row.support_train =
            static_cast<int>(std::llround(static_cast<double>(train_pos_sum) / ef.size()));
        const int pred_pos = row.tp + row.fp;
        row.precision_undefined = (pred_pos == 0);
        row.precision = pred_pos > 0 ? static_cast<double>(row.tp) / pred_pos : 0.0;
        row.recall_undefined = (row.support_test == 0);
        row.recall = row.support_test > 0 ? static_cast<double>(row.tp) / row.support_test : 0.0;
        if (cn > 0) {
            row.chance_precision = csum_p / cn;
            row.chance_recall = csum_r / cn;
            row.chance_precision_sd = std::sqrt(std::max(
                0.0, csum2_p / cn - row.chance_precision * row.chance_precision));
            row.chance_recall_sd =
                std::sqrt(std::max(0.0, csum2_r / cn - row.chance_recall * row.chance_recall));
        }
        if (!lambda_votes.empty()) {
            int best = -1;
            for (const auto& [lam, votes] : lambda_votes)
                if (votes > best) {
                    best = votes;
                    row.lambda_selected = lam;
                }
        }
        result.rows.push_back(std::move(row));
    }
    for (const auto& work : works)
        for (const auto& [term, purposes] : work.fits)
            for (const auto& [purpose, count] : purposes)
                result.fit_counts[term][purpose] += count;

    long long tp = 0, fp = 0, fn = 0;
    for (const auto& r : result.rows) {
        tp += r.tp;
        fp += r.fp;
        fn += r.fn;
    }
    result.micro_f1 = (2 * tp + fp + fn) > 0 ? 2.0 * tp / (2.0 * tp + fp + fn) : 0.0;

    // --- persistence ---------------------------------------------------------
    if (!config.out_dir.empty()) {
        fs::create_directories(config.out_dir);
        fs::create_directories(config.out_dir + "/predictions");
        write_text(config.out_dir + "/config.json", config_json(config).dump(2) + "\n");
        write_metrics_csv(config.out_dir + "/metrics.csv", result);

        {
            std::ostringstream out;
            out << "method,cv_scheme,fold,held_out,term,lambda,knn_k,train_pos,test_pos\n";
            for (int f = 0; f < n_folds; ++f) {
                const auto& fold = plan.folds[static_cast<std::size_t>(f)];
                const FoldWork& work = works[static_cast<std::size_t>(f)];
                for (int t = 0; t < n_terms; ++t) {
                    if (!eligible[static_cast<std::size_t>(t)][static_cast<std::size_t>(f)])
                        continue;
                    const std::string& term = terms[static_cast<std::size_t>(t)];
                    int test_pos = 0;
                    for (int id : fold.test_ids)
                        test_pos +=
                            y_term[static_cast<std::size_t>(t)][static_cast<std::size_t>(id)];
                    auto lit = work.lambda.find(term);
                    out << method_name(config.method) << ',' << scheme_tag << ',' << f << ','
                        << fold.held_out << ',' << term << ','
                        << fmt(lit == work.lambda.end() ? 0.0 : lit->second) << ',' << work.knn_k
                        << ',' << work.train_pos.at(term) << ',' << test_pos << '\n';
                }
            }
            write_text(config.out_dir + "/folds.csv", out.str());
        }

        for (int f = 0; f < n_folds; ++f) {
            const auto& fold = plan.folds[static_cast<std::size_t>(f)];
            const FoldWork& work = works[static_cast<std::size_t>(f)];
            std::ostringstream out;
            out << "map_id,term,P,P_biased,predicted,truth\n";
            for (const auto& pr : work.preds)
                out << corpus.map_id(pr.map) << ',' << terms[static_cast<std::size_t>(pr.term)]
                    << ',' << fmt(pr.p) << ',' << fmt(pr.p_biased) << ',' << (pr.predicted ? 1 : 0)
                    << ',' << (pr.truth ? 1 : 0) << '\n';
            write_text(config.out_dir + "/predictions/fold_" + term_slug(fold.held_out) + ".csv",
                       out.str());
        }

        {
            json j;
            json totals = {{"tune", 0}, {"final", 0}, {"chance", 0}};
            json per_term = json::object();
            for (const auto& [term, purposes] : result.fit_counts) {
                json jp = json::object();
                for (const auto& [purpose, count] : purposes) {
                    jp[purpose] = count;
                    totals[purpose] = totals[purpose].get<int>() + count;
                }
                per_term[term] = std::move(jp);
            }
            j["totals"] = std::move(totals);
            j["terms"] = std::move(per_term);
            write_text(config.out_dir + "/fit_ledger.json", j.dump(2) + "\n");
        }

        if (is_logistic(config.method)) {
            fs::create_directories(config.out_dir + "/parcellations");
            fs::create_directories(config.out_dir + "/atlas");
            for (int f = 0; f < n_folds; ++f) {
                const auto& fold = plan.folds[static_cast<std::size_t>(f)];
                parcel::save_parcellation(config.out_dir + "/parcellations/fold_" +
                                              term_slug(fold.held_out) + ".parc",
                                          works[static_cast<std::size_t>(f)].parc);
            }
            for (int t = 0; t < n_terms; ++t) {
                const auto& ef = eligible_folds[static_cast<std::size_t>(t)];
                if (ef.empty()) continue;
                const std::string& term = terms[static_cast<std::size_t>(t)];
                const std::string slug = term_slug(term);
                fs::create_directories(config.out_dir + "/models/" + slug);

                vol::MaskedVector mean{corpus.mask(), Eigen::VectorXd::Zero(p)};
                for (int f : ef) {
                    const auto& fold = plan.folds[static_cast<std::size_t>(f)];
                    const auto& work = works[static_cast<std::size_t>(f)];
                    const auto& sm = work.models.at(term);
                    save_model(config.out_dir + "/models/" + slug + "/fold_" +
                                   term_slug(fold.held_out) + ".cmdl",
                               sm);
                    parcel::FeatureSelection sel;
                    sel.selected = sm.selected;
                    mean.data += parcel::backproject(sm.weights, sel, work.parc, corpus.mask()).data;
                }
                mean.data /= static_cast<double>(ef.size());

                const auto smoothed = vol::smooth(mean, config.sigma_map);
                vol::bmap::write_masked(config.out_dir + "/atlas/reverse_" + slug + ".bmap",
                                        smoothed, "brain");
                const auto& basis = config.atlas_smooth_first ? smoothed : mean;
                const auto outline = vol::top_fraction_mask(basis, config.atlas_top_fraction);
                vol::MaskedVector ov{corpus.mask(), Eigen::VectorXd::Zero(p)};
                for (int v = 0; v < p; ++v) ov.data[v] = outline[static_cast<std::size_t>(v)];
                vol::bmap::write_masked(config.out_dir + "/atlas/reverse_outline_" + slug + ".bmap",
                                        ov, "brain");
            }
        }
    }
    return result;
}

ForwardResult run_forward(const corpus::Corpus& corpus, const RunConfig& config) {
    validate_common(config);
    std::unordered_set<std::string> excluded(config.excluded.begin(), config.excluded.end());
    const auto design = corpus::build_design_matrix(corpus, excluded, true);
    const auto fit = glm::fit_glm(corpus.data(), design);

    ForwardResult result;
    result.dof = fit.dof;
    result.design_correlation = glm::design_correlation(design);
    result.design_terms = design.columns;
    for (const auto& term : design.columns)
        result.contrasts.push_back(
            glm::term_contrast(fit, term, config.alpha, config.contrast_mode, &corpus.taxonomy()));

    if (!config.out_dir.empty()) {
        fs::create_directories(config.out_dir);
        fs::create_directories(config.out_dir + "/forward");
        fs::create_directories(config.out_dir + "/atlas");
        write_text(config.out_dir + "/config.json", config_json(config).dump(2) + "\n");

        auto freq = corpus::term_frequencies(corpus);
        std::ostringstream out;
        out << "term,category,count,dof,fwer_threshold_t,n_significant\n";
        for (const auto& c : result.contrasts) {
            int count = 0;
            for (const auto& [term, k] : freq)
                if (term == c.term) count = k;
            out << c.term << ',' << corpus.taxonomy().category_name_of(c.term) << ',' << count
                << ',' << fit.dof << ',' << fmt(c.fwer_threshold_t) << ',' << c.n_significant
                << '\n';
        }
        write_text(config.out_dir + "/forward_summary.csv", out.str());

        {
            std::ostringstream cs;
            cs << "term";
            for (const auto& t : result.design_terms) cs << ',' << t;
            cs << '\n';
            for (std::size_t i = 0; i < result.design_terms.size(); ++i) {
                cs << result.design_terms[i];
                for (std::size_t j = 0; j < result.design_terms.size(); ++j)
                    cs << ','
                       << fmt(result.design_correlation(static_cast<int>(i), static_cast<int>(j)));
                cs << '\n';
            }
            write_text(config.out_dir + "/design_correlation.csv", cs.str());
        }

        const int p = corpus.p();
        for (const auto& c : result.contrasts) {
            const std::string slug = term_slug(c.term);
            vol::MaskedVector t{corpus.mask(), c.t_values};
            vol::MaskedVector pv{corpus.mask(), c.p_values};
            vol::bmap::write_masked(config.out_dir + "/forward/tmap_" + slug + ".bmap", t, "brain");
            vol::bmap::write_masked(config.out_dir + "/forward/pmap_" + slug + ".bmap", pv,
                                    "brain");
            vol::MaskedVector sig{corpus.mask(), Eigen::VectorXd::Zero(p)};
            for (int v = 0; v < p; ++v) sig.data[v] = c.significant[static_cast<std::size_t>(v)];
            vol::bmap::write_masked(config.out_dir + "/forward/sig_" + slug + ".bmap", sig,
                                    "brain");

            // Display atlas: smoothed t-map plus a top-fraction outline.
            vol::MaskedVector finite_t = t;
            for (int v = 0; v < p; ++v)
                if (!std::isfinite(finite_t.data[v]))
                    finite_t.data[v] = finite_t.data[v] > 0 ? 1e30 : -1e30;
            const auto smoothed = vol::smooth(finite_t, config.sigma_map);
            vol::bmap::write_masked(config.out_dir + "/atlas/forward_" + slug + ".bmap", smoothed,
                                    "brain");
            const auto& basis = config.atlas_smooth_first ? smoothed : finite_t;
            const auto outline = vol::top_fraction_mask(basis, config.atlas_top_fraction);
            vol::MaskedVector ov{corpus.mask(), Eigen::VectorXd::Zero(p)};
            for (int v = 0; v < p; ++v) ov.data[v] = outline[static_cast<std::size_t>(v)];
            vol::bmap::write_masked(config.out_dir + "/atlas/forward_outline_" + slug + ".bmap", ov,
                                    "brain");
        }
    }
    return result;
}

} // namespace cogmap::pipe
