#include "cogmap/glm.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/Cholesky>
#include <Eigen/LU>

#include "cogmap/stats.hpp"

namespace cogmap::glm {

namespace {

// Pairwise |r| > 0.999 column groups, used in the rank-deficiency error text.
std::string collinearity_report(const corpus::DesignMatrix& d) {
    const int k = d.k_total();
    const auto name = [&](int j) {
        return j < d.k_terms() ? d.columns[j] : std::string("intercept");
    };
    Eigen::VectorXd mean = d.Y.colwise().mean();
    Eigen::MatrixXd centered = d.Y.rowwise() - mean.transpose();
    Eigen::VectorXd sd = centered.colwise().norm();
    std::ostringstream os;
    bool any = false;
    for (int i = 0; i < k; ++i) {
        if (sd[i] == 0.0 && !(i == d.k_terms())) {
            os << (any ? "; " : "") << "('" << name(i) << "' is constant";
            if (d.intercept_included) os << ", collinear with the intercept";
            os << ")";
            any = true;
        }
    }
    for (int i = 0; i < k; ++i)
        for (int j = i + 1; j < k; ++j) {
            if (sd[i] == 0.0 || sd[j] == 0.0) continue;
            const double r = centered.col(i).dot(centered.col(j)) / (sd[i] * sd[j]);
            if (std::fabs(r) > 0.999) {
                os << (any ? "; " : "") << "('" << name(i) << "', '" << name(j)
                   << "' r=" << r << ")";
                any = true;
            }
        }
    if (!any) os << "(no single pair above |r|=0.999; a larger column group is dependent)";
    return os.str();
}

template <typename MapsMatrix>
GlmFit fit_glm_impl(const MapsMatrix& maps, const corpus::DesignMatrix& design) {
    const int n = static_cast<int>(maps.rows());
    const int p = static_cast<int>(maps.cols());
    const int k = design.k_total();
    if (design.n() != n) throw ValidationError("design rows do not match map count");
    if (n <= k)
        throw ValidationError("need more maps than design columns (n=" + std::to_string(n) +
                              ", k=" + std::to_string(k) + ")");

    const Eigen::MatrixXd G = design.Y.transpose() * design.Y;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(G);
    lu.setThreshold(1e-10);
    if (lu.rank() < k)
        throw ValidationError("design matrix is rank deficient; collinear columns: " +
                              collinearity_report(design));

    Eigen::LDLT<Eigen::MatrixXd> ldlt(G);
    GlmFit fit;
    fit.design = design;
    fit.dof = n - k;
    fit.xtx_inv = ldlt.solve(Eigen::MatrixXd::Identity(k, k));
    fit.beta.resize(k, p);
    fit.residual_variance.resize(p);

    constexpr int block = 1024;
    for (int j0 = 0; j0 < p; j0 += block) {
        const int m = std::min(block, p - j0);
        const Eigen::MatrixXd X = maps.middleCols(j0, m).template cast<double>();
        const Eigen::MatrixXd C = design.Y.transpose() * X;
        const Eigen::MatrixXd B = ldlt.solve(C);
        fit.beta.middleCols(j0, m) = B;
        // RSS = ||x||^2 - 2 b'C + b'Gb = ||x||^2 - b'C since Gb = C.
        for (int j = 0; j < m; ++j) {
            const double rss = X.col(j).squaredNorm() - B.col(j).dot(C.col(j));
            fit.residual_variance[j0 + j] = std::max(rss, 0.0) / fit.dof;
        }
    }
    return fit;
}

} // namespace

GlmFit fit_glm(const Eigen::MatrixXf& maps, const corpus::DesignMatrix& design) {
    return fit_glm_impl(maps, design);
}

GlmFit fit_glm(const Eigen::MatrixXd& maps, const corpus::DesignMatrix& design) {
    return fit_glm_impl(maps, design);
}

double fwer_threshold(int p, double alpha, int dof) {
    if (p < 1) throw ValidationError("fwer_threshold: p must be >= 1");
    if (!(alpha > 0.0) || !(alpha < 1.0)) throw ValidationError("alpha must lie in (0,1)");
    if (dof < 1) throw ValidationError("fwer_threshold: dof must be >= 1");
    return stats::t_two_sided_quantile(alpha / p, static_cast<double>(dof));
}

ContrastResult term_contrast(const GlmFit& fit, const std::string& term, double alpha,
                             ContrastMode mode, const corpus::Taxonomy* taxonomy) {
    const corpus::DesignMatrix& d = fit.design;
    const int col = d.column_of(term);
    if (col < 0)
        throw ValidationError("term '" + term +
                              "' is excluded from the design (no contrast available)");
    if (fit.dof < 1) throw ValidationError("no residual degrees of freedom for testing");

    Eigen::VectorXd c = Eigen::VectorXd::Zero(d.k_total());
    c[col] = 1.0;
    if (mode == ContrastMode::CategoryMean) {
        if (!taxonomy)
            throw ValidationError("CategoryMean contrast requires the taxonomy");
        const int cat = taxonomy->category_of(term);
        if (cat < 0) throw ValidationError("term '" + term + "' is not in the taxonomy");
        std::vector<int> peers;
        for (int j = 0; j < d.k_terms(); ++j)
            if (j != col && taxonomy->category_of(d.columns[j]) == cat) peers.push_back(j);
        for (int j : peers) c[j] = -1.0 / static_cast<double>(peers.size());
    }

    const double var_c = c.dot(fit.xtx_inv * c);
    const int p = static_cast<int>(fit.beta.cols());
    ContrastResult res;
    res.term = term;
    res.alpha = alpha;
    res.t_values.resize(p);
    res.p_values.resize(p);
    res.significant.assign(p, 0);
    res.fwer_threshold_t = fwer_threshold(p, alpha, fit.dof);
    const double bonferroni = alpha / p;
    const Eigen::VectorXd effect = fit.beta.transpose() * c;
    for (int j = 0; j < p; ++j) {
        const double se2 = fit.residual_variance[j] * var_c;
        double t;
        if (se2 > 0.0) {
            t = effect[j] / std::sqrt(se2);
        } else {
            // Zero residual variance: infinite-SNR guard.
            t = effect[j] == 0.0 ? 0.0
                                 : std::copysign(std::numeric_limits<double>::infinity(),
                                                 effect[j]);
        }
        res.t_values[j] = t;
        res.p_values[j] = std::isinf(t) ? 0.0
                                        : stats::t_two_sided_p(t, static_cast<double>(fit.dof));
        if (res.p_values[j] <= bonferroni) {
            res.significant[j] = 1;
            ++res.n_significant;
        }
    }
    return res;
}

Eigen::MatrixXd design_correlation(const corpus::DesignMatrix& design) {
    const int k = design.k_terms();
    Eigen::MatrixXd corr = Eigen::MatrixXd::Identity(k, k);
    const Eigen::MatrixXd Y = design.Y.leftCols(k);
    const Eigen::VectorXd mean = Y.colwise().mean();
    const Eigen::MatrixXd centered = Y.rowwise() - mean.transpose();
    const Eigen::VectorXd sd = centered.colwise().norm();
    for (int i = 0; i < k; ++i)
        for (int j = i + 1; j < k; ++j) {
            double r = 0.0;
            if (sd[i] > 0.0 && sd[j] > 0.0)
                r = centered.col(i).dot(centered.col(j)) / (sd[i] * sd[j]);
            corr(i, j) = corr(j, i) = r;
        }
    return corr;
}

} // namespace cogmap::glm
