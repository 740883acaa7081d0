#include "cogmap/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "cogmap/glm.hpp"
#include "cogmap/rng.hpp"

namespace cogmap::cv {

std::string scheme_name(Scheme s) {
    return s == Scheme::LeaveOneStudyOut ? "leave-one-study-out" : "leave-one-laboratory-out";
}

Scheme scheme_from_name(const std::string& name) {
    if (name == "leave-one-study-out" || name == "loso") return Scheme::LeaveOneStudyOut;
    if (name == "leave-one-laboratory-out" || name == "lolo") return Scheme::LeaveOneLabOut;
    throw ValidationError("unknown cv scheme '" + name + "'");
}

FoldPlan make_folds(const corpus::Corpus& corpus, Scheme scheme) {
    // Units in order of first appearance.
    std::vector<std::string> units;
    std::vector<int> unit_of_study;
    for (const auto& st : corpus.studies()) {
        const std::string& u =
            scheme == Scheme::LeaveOneStudyOut ? st.id : st.laboratory;
        auto it = std::find(units.begin(), units.end(), u);
        if (it == units.end()) {
            unit_of_study.push_back(static_cast<int>(units.size()));
            units.push_back(u);
        } else {
            unit_of_study.push_back(static_cast<int>(it - units.begin()));
        }
    }
    if (units.size() < 2)
        throw ValidationError("cross-validation needs at least 2 " +
                              std::string(scheme == Scheme::LeaveOneStudyOut ? "studies"
                                                                             : "laboratories"));
    FoldPlan plan;
    plan.scheme = scheme;
    plan.folds.resize(units.size());
    for (std::size_t u = 0; u < units.size(); ++u) plan.folds[u].held_out = units[u];
    for (int i = 0; i < corpus.n_maps(); ++i) {
        const int u = unit_of_study[corpus.maps()[i].study];
        for (std::size_t f = 0; f < units.size(); ++f) {
            if (static_cast<int>(f) == u)
                plan.folds[f].test_ids.push_back(i);
            else
                plan.folds[f].train_ids.push_back(i);
        }
    }
    return plan;
}

InnerSplitPlan inner_splits(const std::vector<int>& y, int n_splits, double test_fraction,
                            std::uint64_t seed, const std::string& term) {
    if (n_splits < 1) throw ValidationError("inner_splits: n_splits must be >= 1");
    if (!(test_fraction > 0.0) || !(test_fraction < 1.0))
        throw ValidationError("inner_splits: test_fraction must lie in (0,1)");
    std::vector<int> pos, neg;
    for (std::size_t i = 0; i < y.size(); ++i) (y[i] ? pos : neg).push_back(static_cast<int>(i));
    const std::string label = term.empty() ? "(unnamed)" : term;
    if (pos.size() < 2 || neg.size() < 2)
        throw ValidationError("term '" + label +
                              "': a class is too small to stratify (needs >= 2 per class)");

    auto val_count = [&](std::size_t n_class) {
        auto c = static_cast<std::size_t>(std::llround(test_fraction * n_class));
        return std::clamp<std::size_t>(c, 1, n_class - 1);
    };
    const std::size_t vp = val_count(pos.size());
    const std::size_t vn = val_count(neg.size());

    InnerSplitPlan plan;
    plan.n_splits = n_splits;
    plan.test_fraction = test_fraction;
    Rng rng(seed);
    for (int s = 0; s < n_splits; ++s) {
        rng.shuffle(pos);
        rng.shuffle(neg);
        InnerSplit split;
        split.val.assign(pos.begin(), pos.begin() + vp);
        split.val.insert(split.val.end(), neg.begin(), neg.begin() + vn);
        split.train.assign(pos.begin() + vp, pos.end());
        split.train.insert(split.train.end(), neg.begin() + vn, neg.end());
        std::sort(split.val.begin(), split.val.end());
        std::sort(split.train.begin(), split.train.end());
        plan.splits.push_back(std::move(split));
    }
    return plan;
}

TuneResult tune_lambda(const Eigen::MatrixXd& X, const std::vector<int>& y, bool weighted,
                       const std::vector<double>& grid, const InnerSplitPlan& plan,
                       const clf::LogisticOpts& opts) {
    if (grid.empty()) throw ValidationError("tune_lambda: empty grid");
    TuneResult res;
    res.grid = grid;
    std::sort(res.grid.begin(), res.grid.end(), std::greater<double>());
    res.grid.erase(std::unique(res.grid.begin(), res.grid.end()), res.grid.end());
    for (double l : res.grid)
        if (!(l > 0.0)) throw ValidationError("tune_lambda: grid values must be > 0");

    const int d = static_cast<int>(X.cols());
    std::vector<double> acc_sum(res.grid.size(), 0.0);
    for (const auto& split : plan.splits) {
        const int ntr = static_cast<int>(split.train.size());
        Eigen::MatrixXd Xtr(ntr, d);
        std::vector<int> ytr(ntr);
        for (int i = 0; i < ntr; ++i) {
            Xtr.row(i) = X.row(split.train[i]);
            ytr[i] = y[split.train[i]];
        }
        Eigen::VectorXd w =
            weighted ? clf::balance_weights(ytr) : Eigen::VectorXd::Ones(ntr);

        clf::LogisticModel warm;
        clf::LogisticOpts fit_opts = opts;
        fit_opts.warm = nullptr;
        for (std::size_t gi = 0; gi < res.grid.size(); ++gi) {
            const auto model = clf::fit_logistic(Xtr, ytr, w, res.grid[gi], fit_opts);
            ++res.n_fits;
            warm = model;
            fit_opts.warm = &warm;

            int tp = 0, fp = 0, fn = 0, tn = 0;
            for (int vi : split.val) {
                const double z = model.weights.dot(X.row(vi)) + model.intercept;
                const bool pred = z >= 0.0;
                if (y[vi] && pred) ++tp;
                else if (y[vi]) ++fn;
                else if (pred) ++fp;
                else ++tn;
            }
            const double tpr = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
            const double tnr = tn + fp > 0 ? static_cast<double>(tn) / (tn + fp) : 0.0;
            acc_sum[gi] += 0.5 * (tpr + tnr);
        }
    }

    res.mean_balanced_accuracy.resize(res.grid.size());
    double best = -1.0;
    for (std::size_t gi = 0; gi < res.grid.size(); ++gi) {
        res.mean_balanced_accuracy[gi] = acc_sum[gi] / plan.splits.size();
        // Grid is descending, so on ties the LAST best (smaller lambda) wins;
        // use >= to implement the smaller-lambda tie rule.
        if (res.mean_balanced_accuracy[gi] >= best) {
            best = res.mean_balanced_accuracy[gi];
            res.best_lambda = res.grid[gi];
        }
    }
    return res;
}

TermMetrics precision_recall(const std::string& term, const std::vector<std::uint8_t>& predicted,
                             const std::vector<std::uint8_t>& truth) {
    if (predicted.size() != truth.size())
        throw ValidationError("precision_recall: prediction/truth misaligned");
    TermMetrics m;
    m.term = term;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] && predicted[i]) ++m.tp;
        else if (truth[i]) ++m.fn;
        else if (predicted[i]) ++m.fp;
        else ++m.tn;
    }
    m.support = m.tp + m.fn;
    if (m.tp + m.fp > 0) {
        m.precision = static_cast<double>(m.tp) / (m.tp + m.fp);
    } else {
        m.precision = 0.0;
        m.precision_undefined = true;
    }
    if (m.support > 0) {
        m.recall = static_cast<double>(m.tp) / m.support;
    } else {
        m.recall = 0.0;
        m.recall_undefined = true;
    }
    return m;
}

std::vector<int> permute_within_groups(const std::vector<int>& labels,
                                       const std::vector<int>& groups, std::uint64_t seed) {
    if (labels.size() != groups.size())
        throw ValidationError("permute_within_groups: size mismatch");
    std::unordered_map<int, std::vector<int>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) members[groups[i]].push_back(static_cast<int>(i));
    std::vector<int> group_ids;
    for (const auto& [g, _] : members) group_ids.push_back(g);
    std::sort(group_ids.begin(), group_ids.end()); // hash order is not deterministic

    std::vector<int> out(labels.size());
    Rng rng(seed);
    for (int g : group_ids) {
        auto& idx = members[g];
        std::vector<int> vals;
        vals.reserve(idx.size());
        for (int i : idx) vals.push_back(labels[i]);
        rng.shuffle(vals);
        for (std::size_t j = 0; j < idx.size(); ++j) out[idx[j]] = vals[j];
    }
    return out;
}

ChancePR chance_levels(
    const std::vector<int>& labels, const std::vector<int>& study_of, int n_permutations,
    std::uint64_t seed,
    const std::function<std::pair<double, double>(const std::vector<int>&, int)>& fit_and_score) {
    if (n_permutations < 1)
        throw ValidationError("chance_levels: need at least 1 permutation");
    double psum = 0.0, psum2 = 0.0, rsum = 0.0, rsum2 = 0.0;
    for (int perm = 0; perm < n_permutations; ++perm) {
        const auto permuted =
            permute_within_groups(labels, study_of, splitmix64(seed + 0x9e3779b9ull * perm));
        const auto [prec, rec] = fit_and_score(permuted, perm);
        psum += prec;
        psum2 += prec * prec;
        rsum += rec;
        rsum2 += rec * rec;
    }
    ChancePR out;
    out.n_permutations = n_permutations;
    out.precision_mean = psum / n_permutations;
    out.recall_mean = rsum / n_permutations;
    const double pvar = std::max(0.0, psum2 / n_permutations - out.precision_mean * out.precision_mean);
    const double rvar = std::max(0.0, rsum2 / n_permutations - out.recall_mean * out.recall_mean);
    out.precision_sd = std::sqrt(pvar);
    out.recall_sd = std::sqrt(rvar);
    return out;
}

DistanceDiagnostics distance_diagnostics(const corpus::Corpus& corpus) {
    const int n = corpus.n_maps();
    DistanceDiagnostics out;

    // Pairwise squared distances from the Gram matrix (single sgemm).
    const Eigen::MatrixXf& D = corpus.data();
    Eigen::MatrixXf G(n, n);
    G.noalias() = D * D.transpose();
    Eigen::VectorXf sq = G.diagonal();

    std::vector<std::string> set_key(n);
    for (int i = 0; i < n; ++i) set_key[i] = corpus.map_condition(i).term_set_key();

    for (int i = 0; i < n; ++i) {
        const auto& mi = corpus.maps()[i];
        for (int j = i + 1; j < n; ++j) {
            const auto& mj = corpus.maps()[j];
            const bool study_match = mi.study == mj.study;
            const bool set_match = set_key[i] == set_key[j];
            if (!study_match && !set_match) continue;
            const double d2 = std::max(0.0, static_cast<double>(sq[i] + sq[j] - 2.0f * G(i, j)));
            const double dist = std::sqrt(d2);
            if (study_match) {
                out.same_study.push_back(dist);
                if (mi.condition == mj.condition) out.same_condition.push_back(dist);
            } else {
                out.same_term_set.push_back(dist); // identical labels, different study
            }
        }
    }

    auto median = [](std::vector<double> v) {
        if (v.empty()) return 0.0;
        const std::size_t m = v.size() / 2;
        std::nth_element(v.begin(), v.begin() + m, v.end());
        double hi = v[m];
        if (v.size() % 2 == 1) return hi;
        std::nth_element(v.begin(), v.begin() + m - 1, v.begin() + m);
        return 0.5 * (v[m - 1] + hi);
    };
    out.median_same_study = median(out.same_study);
    out.median_same_term_set = median(out.same_term_set);
    out.median_same_condition = median(out.same_condition);

    const auto design = corpus::build_design_matrix(corpus, {}, true);
    out.design_correlation = glm::design_correlation(design);
    out.design_terms = design.columns;
    return out;
}

} // namespace cogmap::cv
