#include "cogmap/classifiers.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <unordered_map>
#include <unordered_set>

#include <Eigen/Cholesky>

namespace cogmap::clf {

namespace {

// log(1 + exp(t)) without overflow.
inline double softplus(double t) {
    if (t > 0.0) return t + std::log1p(std::exp(-t));
    return std::log1p(std::exp(t));
}

// The objective in the original parameters (beta, b) can be badly conditioned:
// spatially reduced features share large common offsets and very different
// scales, which couples every coordinate to the intercept. The solver
// therefore works in the re-parameterization gamma_j = s_j * beta_j,
// c = b + mu' beta (an implicit per-column center/scale), which leaves the
// minimizer unchanged while making quasi-Newton steps well-scaled. Convergence
// is still declared on the ORIGINAL-space gradient so the contract does not
// depend on this internal change of variables.
struct Problem {
    const Eigen::MatrixXd& X;
    const Eigen::VectorXd& yt; // +-1
    const Eigen::VectorXd& w;
    double lambda;
    Eigen::VectorXd mu; // column means
    Eigen::VectorXd s;  // column scales (sd, floored)

    Problem(const Eigen::MatrixXd& X_, const Eigen::VectorXd& yt_, const Eigen::VectorXd& w_,
            double lambda_)
        : X(X_), yt(yt_), w(w_), lambda(lambda_) {
        const int nn = n(), dd = d();
        mu = X.colwise().mean();
        s.resize(dd);
        for (int j = 0; j < dd; ++j) {
            const double ssq = (X.col(j).array() - mu[j]).square().sum() / nn;
            s[j] = ssq > 0.0 ? std::sqrt(ssq) : 1.0;
        }
    }

    int n() const { return static_cast<int>(X.rows()); }
    int d() const { return static_cast<int>(X.cols()); }

    Eigen::VectorXd to_original(const Eigen::VectorXd& theta) const {
        const int dd = d();
        Eigen::VectorXd out(dd + 1);
        out.head(dd) = theta.head(dd).cwiseQuotient(s);
        out[dd] = theta[dd] - mu.dot(out.head(dd));
        return out;
    }

    Eigen::VectorXd from_original(const Eigen::VectorXd& beta, double b) const {
        const int dd = d();
        Eigen::VectorXd theta(dd + 1);
        theta.head(dd) = beta.cwiseProduct(s);
        theta[dd] = b + mu.dot(beta);
        return theta;
    }

    // f(theta) and transformed grad(theta); theta = [gamma; c]. Also reports
    // the original-space gradient infinity norm for the convergence test.
    double eval(const Eigen::VectorXd& theta, Eigen::VectorXd& grad, double* orig_grad_inf) const {
        const int nn = n(), dd = d();
        const Eigen::VectorXd beta = theta.head(dd).cwiseQuotient(s);
        Eigen::VectorXd z = X * beta;
        z.array() += theta[dd] - mu.dot(beta);
        double f = 0.0;
        Eigen::VectorXd r(nn);
        for (int i = 0; i < nn; ++i) {
            const double m = yt[i] * z[i];
            f += w[i] * softplus(-m);
            // d/dz of w*softplus(-y z) = -w y sigma(-y z)
            r[i] = -w[i] * yt[i] / (1.0 + std::exp(m));
        }
        f += 0.5 * lambda * beta.squaredNorm();
        const double r_sum = r.sum();
        Eigen::VectorXd t(dd);
        t.noalias() = X.transpose() * r;
        t += lambda * beta; // original-space feature gradient
        if (orig_grad_inf)
            *orig_grad_inf = std::max(t.lpNorm<Eigen::Infinity>(), std::fabs(r_sum));
        grad.resize(dd + 1);
        grad.head(dd) = (t - r_sum * mu).cwiseQuotient(s);
        grad[dd] = r_sum;
        return f;
    }

    double value(const Eigen::VectorXd& theta) const {
        const int nn = n(), dd = d();
        const Eigen::VectorXd beta = theta.head(dd).cwiseQuotient(s);
        Eigen::VectorXd z = X * beta;
        z.array() += theta[dd] - mu.dot(beta);
        double f = 0.0;
        for (int i = 0; i < nn; ++i) f += w[i] * softplus(-yt[i] * z[i]);
        return f + 0.5 * lambda * beta.squaredNorm();
    }

    // f and gradient directly in the original parameters (beta, b); used by the
    // Newton polish and the public objective/gradient helpers.
    double eval_original(const Eigen::VectorXd& theta, Eigen::VectorXd& grad) const {
        const int nn = n(), dd = d();
        const auto beta = theta.head(dd);
        Eigen::VectorXd z = X * beta;
        z.array() += theta[dd];
        double f = 0.0;
        Eigen::VectorXd r(nn);
        for (int i = 0; i < nn; ++i) {
            const double m = yt[i] * z[i];
            f += w[i] * softplus(-m);
            r[i] = -w[i] * yt[i] / (1.0 + std::exp(m));
        }
        f += 0.5 * lambda * beta.squaredNorm();
        grad.resize(dd + 1);
        grad.head(dd).noalias() = X.transpose() * r;
        grad.head(dd) += lambda * beta;
        grad[dd] = r.sum();
        return f;
    }

    double value_original(const Eigen::VectorXd& theta) const {
        const int nn = n(), dd = d();
        Eigen::VectorXd z = X * theta.head(dd);
        z.array() += theta[dd];
        double f = 0.0;
        for (int i = 0; i < nn; ++i) f += w[i] * softplus(-yt[i] * z[i]);
        return f + 0.5 * lambda * theta.head(dd).squaredNorm();
    }
};

// Strong-Wolfe line search (Nocedal & Wright alg. 3.5/3.6, cubic-free zoom by
// bisection on the bracketing interval; the objective is smooth and convex so
// this converges quickly and keeps the implementation compact).
struct LineSearchResult {
    double t = 0.0, f = 0.0;
    double orig_inf = 0.0; // original-space gradient norm at the accepted point
    bool ok = false;
};

LineSearchResult wolfe_search(const Problem& prob, const Eigen::VectorXd& theta0, double f0,
                              const Eigen::VectorXd& g0, const Eigen::VectorXd& dir,
                              Eigen::VectorXd& theta_out, Eigen::VectorXd& g_out) {
    constexpr double c1 = 1e-4, c2 = 0.9;
    const double d0 = g0.dot(dir);
    LineSearchResult res;
    if (d0 >= 0.0) return res; // not a descent direction

    double probe_inf = 0.0;
    auto phi = [&](double t, double& dphi) {
        theta_out = theta0 + t * dir;
        const double f = prob.eval(theta_out, g_out, &probe_inf);
        dphi = g_out.dot(dir);
        return f;
    };

    double t_prev = 0.0, f_prev = f0;
    double t = 1.0;
    double lo = -1.0, hi = -1.0, f_lo = 0.0;
    bool bracketed = false;
    for (int iter = 0; iter < 60 && !bracketed; ++iter) {
        double dphi;
        const double f = phi(t, dphi);
        if (f > f0 + c1 * t * d0 || (iter > 0 && f >= f_prev)) {
            lo = t_prev; f_lo = f_prev;
            hi = t;
            bracketed = true;
            break;
        }
        if (std::fabs(dphi) <= -c2 * d0) {
            res = {t, f, probe_inf, true};
            return res;
        }
        if (dphi >= 0.0) {
            lo = t; f_lo = f;
            hi = t_prev;
            bracketed = true;
            break;
        }
        t_prev = t; f_prev = f;
        t *= 2.0;
    }
    if (!bracketed) return res;

    for (int iter = 0; iter < 60; ++iter) {
        const double tm = 0.5 * (lo + hi);
        double dphi;
        const double f = phi(tm, dphi);
        if (f > f0 + c1 * tm * d0 || f >= f_lo) {
            hi = tm;
        } else {
            if (std::fabs(dphi) <= -c2 * d0) {
                res = {tm, f, probe_inf, true};
                return res;
            }
            if (dphi * (hi - lo) >= 0.0) hi = lo;
            lo = tm; f_lo = f;
        }
        if (std::fabs(hi - lo) < 1e-16 * (1.0 + std::fabs(lo))) break;
    }
    // Fall back to the best admissible point found.
    double dphi;
    const double f = phi(lo, dphi);
    if (lo > 0.0 && f < f0) res = {lo, f, probe_inf, true};
    return res;
}

void check_inputs(const Eigen::MatrixXd& X, const std::vector<int>& y, const Eigen::VectorXd& w,
                  double lambda) {
    const int n = static_cast<int>(X.rows());
    if (static_cast<int>(y.size()) != n || w.size() != n)
        throw ValidationError("logistic: labels/weights do not match sample count");
    if (!(lambda > 0.0)) throw ValidationError("logistic: lambda must be > 0");
    if (!X.allFinite()) throw ValidationError("logistic: features contain non-finite values");
    int pos = 0;
    for (int v : y) pos += (v != 0);
    if (pos == 0 || pos == n)
        throw ValidationError("logistic: both classes must be present in the training labels");
}

} // namespace

double logistic_objective(const Eigen::MatrixXd& X, const std::vector<int>& y,
                          const Eigen::VectorXd& w, double lambda, const Eigen::VectorXd& beta,
                          double intercept) {
    const int n = static_cast<int>(X.rows());
    Eigen::VectorXd yt(n);
    for (int i = 0; i < n; ++i) yt[i] = y[i] ? 1.0 : -1.0;
    Problem prob(X, yt, w, lambda);
    Eigen::VectorXd theta(X.cols() + 1);
    theta << beta, intercept;
    return prob.value_original(theta);
}

Eigen::VectorXd logistic_gradient(const Eigen::MatrixXd& X, const std::vector<int>& y,
                                  const Eigen::VectorXd& w, double lambda,
                                  const Eigen::VectorXd& beta, double intercept) {
    const int n = static_cast<int>(X.rows());
    Eigen::VectorXd yt(n);
    for (int i = 0; i < n; ++i) yt[i] = y[i] ? 1.0 : -1.0;
    Problem prob(X, yt, w, lambda);
    Eigen::VectorXd theta(X.cols() + 1), grad;
    theta << beta, intercept;
    prob.eval_original(theta, grad);
    return grad;
}

LogisticModel fit_logistic(const Eigen::MatrixXd& X, const std::vector<int>& y,
                           const Eigen::VectorXd& sample_weights, double lambda,
                           const LogisticOpts& opts) {
    check_inputs(X, y, sample_weights, lambda);
    const int n = static_cast<int>(X.rows());
    const int d = static_cast<int>(X.cols());
    Eigen::VectorXd yt(n);
    int pos = 0;
    for (int i = 0; i < n; ++i) {
        yt[i] = y[i] ? 1.0 : -1.0;
        pos += (y[i] != 0);
    }
    Problem prob(X, yt, sample_weights, lambda);

    Eigen::VectorXd theta = Eigen::VectorXd::Zero(d + 1);
    if (opts.warm && opts.warm->weights.size() == d)
        theta = prob.from_original(opts.warm->weights, opts.warm->intercept);

    const double tol = opts.tol_scale * std::max(1.0, static_cast<double>(n));
    Eigen::VectorXd grad;
    double orig_inf = 0.0;
    double f = prob.eval(theta, grad, &orig_inf);

    // L-BFGS with two-loop recursion.
    std::deque<Eigen::VectorXd> s_hist, y_hist;
    std::deque<double> rho_hist;
    Eigen::VectorXd theta_new, grad_new, dir(d + 1), q, alpha_buf;
    bool converged = orig_inf <= tol;
    for (int iter = 0; iter < opts.max_iter && !converged; ++iter) {
        // Two-loop recursion for dir = -H * grad.
        q = grad;
        const int hist = static_cast<int>(s_hist.size());
        std::vector<double> alpha(hist);
        for (int i = hist - 1; i >= 0; --i) {
            alpha[i] = rho_hist[i] * s_hist[i].dot(q);
            q -= alpha[i] * y_hist[i];
        }
        double gamma = 1.0;
        if (hist > 0) {
            const double yy = y_hist.back().squaredNorm();
            if (yy > 0.0) gamma = s_hist.back().dot(y_hist.back()) / yy;
        }
        q *= gamma;
        for (int i = 0; i < hist; ++i) {
            const double beta_i = rho_hist[i] * y_hist[i].dot(q);
            q += (alpha[i] - beta_i) * s_hist[i];
        }
        dir = -q;

        const auto ls = wolfe_search(prob, theta, f, grad, dir, theta_new, grad_new);
        if (!ls.ok) {
            // Restart from steepest descent once; if that also fails we are at
            // numerical resolution.
            if (!s_hist.empty()) {
                s_hist.clear();
                y_hist.clear();
                rho_hist.clear();
                continue;
            }
            break;
        }
        const Eigen::VectorXd s = theta_new - theta;
        const Eigen::VectorXd yv = grad_new - grad;
        const double sy = s.dot(yv);
        if (sy > 1e-12 * s.norm() * yv.norm()) {
            s_hist.push_back(s);
            y_hist.push_back(yv);
            rho_hist.push_back(1.0 / sy);
            if (static_cast<int>(s_hist.size()) > opts.memory) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }
        theta = theta_new;
        grad = grad_new;
        f = ls.f;
        orig_inf = ls.orig_inf;
        converged = orig_inf <= tol;
    }

    Eigen::VectorXd theta_orig = prob.to_original(theta);

    // Newton phase. Two roles: rescue fits where quasi-Newton progress stalled
    // before the tolerance (each damped step is exact on this convex objective,
    // at O(n d^2) cost), and — when newton_polish is set — a couple of extra
    // steps so independent solver runs agree to near machine precision.
    int polish_remaining = opts.newton_polish ? opts.polish_steps : 0;
    int rescue_remaining = 40;
    if (polish_remaining > 0 || !converged) {
        Eigen::MatrixXd H(d + 1, d + 1);
        Eigen::VectorXd zbuf(n), dvec(n);
        while (converged ? polish_remaining > 0 : rescue_remaining > 0) {
            if (converged)
                --polish_remaining;
            else
                --rescue_remaining;
            zbuf.noalias() = X * theta_orig.head(d);
            zbuf.array() += theta_orig[d];
            for (int i = 0; i < n; ++i) {
                const double p = sigmoid(zbuf[i]);
                dvec[i] = std::max(sample_weights[i] * p * (1.0 - p), 1e-12);
            }
            H.topLeftCorner(d, d).noalias() = X.transpose() * dvec.asDiagonal() * X;
            H.topLeftCorner(d, d).diagonal().array() += lambda;
            H.topRightCorner(d, 1).noalias() = X.transpose() * dvec;
            H.bottomLeftCorner(1, d) = H.topRightCorner(d, 1).transpose();
            H(d, d) = dvec.sum();
            prob.eval_original(theta_orig, grad);
            Eigen::VectorXd delta = H.ldlt().solve(grad);
            double t = 1.0;
            const double f0 = prob.value_original(theta_orig);
            for (int back = 0; back < 30; ++back) {
                if (prob.value_original(theta_orig - t * delta) <= f0) break;
                t *= 0.5;
            }
            theta_orig -= t * delta;
            f = prob.eval_original(theta_orig, grad);
            orig_inf = grad.lpNorm<Eigen::Infinity>();
            converged = orig_inf <= tol;
        }
    }

    if (!converged)
        throw NumericalError("logistic solver did not reach the gradient tolerance (|g|_inf=" +
                             std::to_string(orig_inf) + ", tol=" + std::to_string(tol) + ")");

    LogisticModel model;
    model.weights = theta_orig.head(d);
    model.intercept = theta_orig[d];
    model.lambda = lambda;
    model.rho_term = static_cast<double>(pos) / n;
    return model;
}

Eigen::VectorXd balance_weights(const std::vector<int>& y) {
    const int n = static_cast<int>(y.size());
    int pos = 0;
    for (int v : y) pos += (v != 0);
    if (pos == 0 || pos == n)
        throw ValidationError("balance_weights: both classes must be present");
    const double wp = n / (2.0 * pos);
    const double wn = n / (2.0 * (n - pos));
    Eigen::VectorXd w(n);
    for (int i = 0; i < n; ++i) w[i] = y[i] ? wp : wn;
    return w;
}

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

BiasedPrediction predict_biased(const LogisticModel& model, const Eigen::VectorXd& x,
                                BiasMode mode) {
    if (x.size() != model.weights.size())
        throw ValidationError("predict_biased: feature dimension mismatch");
    BiasedPrediction out;
    out.p = sigmoid(model.weights.dot(x) + model.intercept);
    const double rho = model.rho_term;
    if (mode == BiasMode::Literal) {
        out.p_biased = rho * out.p;
    } else {
        const double num = rho * out.p;
        const double den = num + (1.0 - rho) * (1.0 - out.p);
        out.p_biased = den > 0.0 ? num / den : 0.0;
    }
    // The decision is the same threshold on p in both modes (the literal-mode
    // cut-off rho/2 on rho*p restates it exactly).
    out.present = out.p >= 0.5;
    return out;
}

// --- naive Bayes ---------------------------------------------------------------

NaiveBayesModel fit_naive_bayes(const Eigen::MatrixXf& X, const std::vector<int>& y) {
    const int n = static_cast<int>(X.rows());
    const int p = static_cast<int>(X.cols());
    if (static_cast<int>(y.size()) != n)
        throw ValidationError("naive bayes: labels do not match sample count");
    int n1 = 0;
    for (int v : y) n1 += (v != 0);
    const int n0 = n - n1;
    if (n0 == 0 || n1 == 0)
        throw ValidationError("naive bayes: both classes must be present");

    NaiveBayesModel m;
    m.mean0 = Eigen::VectorXd::Zero(p);
    m.mean1 = Eigen::VectorXd::Zero(p);
    m.var0 = Eigen::VectorXd::Zero(p);
    m.var1 = Eigen::VectorXd::Zero(p);
    for (int i = 0; i < n; ++i) {
        const auto row = X.row(i).cast<double>();
        if (y[i])
            m.mean1 += row;
        else
            m.mean0 += row;
    }
    m.mean0 /= n0;
    m.mean1 /= n1;
    for (int i = 0; i < n; ++i) {
        const auto row = X.row(i).cast<double>();
        if (y[i])
            m.var1.array() += (row.transpose().array() - m.mean1.array()).square();
        else
            m.var0.array() += (row.transpose().array() - m.mean0.array()).square();
    }
    m.var0 /= n0;
    m.var1 /= n1;
    m.prior1 = static_cast<double>(n1) / n;

    // Floor: 1e-9 times the mean pooled feature variance (plus an absolute
    // epsilon so fully constant data stays finite).
    const double pooled =
        ((m.var0 * n0 + m.var1 * n1) / static_cast<double>(n)).mean();
    m.variance_floor = std::max(1e-9 * pooled, 1e-30);
    m.var0 = m.var0.cwiseMax(m.variance_floor);
    m.var1 = m.var1.cwiseMax(m.variance_floor);
    return m;
}

double predict_nb(const NaiveBayesModel& model, const Eigen::VectorXf& x) {
    if (x.size() != model.mean0.size())
        throw ValidationError("naive bayes: feature dimension mismatch");
    const Eigen::ArrayXd xa = x.cast<double>().array();
    const Eigen::ArrayXd d1 = xa - model.mean1.array();
    const Eigen::ArrayXd d0 = xa - model.mean0.array();
    double log_odds = std::log(model.prior1) - std::log1p(-model.prior1);
    log_odds += 0.5 * ((d0.square() / model.var0.array()) -
                       (d1.square() / model.var1.array()) +
                       (model.var0.array().log() - model.var1.array().log()))
                          .sum();
    return sigmoid(log_odds);
}

// --- K nearest neighbors ---------------------------------------------------------

std::vector<int> knn_neighbors(const Eigen::MatrixXf& train, const Eigen::VectorXf& x, int k) {
    const int n = static_cast<int>(train.rows());
    if (n == 0) throw ValidationError("knn: empty training set");
    if (k < 1 || k > n) throw ValidationError("knn: k out of range");
    std::vector<std::pair<float, int>> dist(n);
    for (int i = 0; i < n; ++i) {
        const float d2 = (train.row(i).transpose() - x).squaredNorm();
        dist[i] = {d2, i};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    std::vector<int> idx(k);
    for (int i = 0; i < k; ++i) idx[i] = dist[i].second;
    return idx;
}

std::vector<std::string> knn_predict(const Eigen::MatrixXf& train,
                                     const std::vector<const std::vector<std::string>*>& term_sets,
                                     const Eigen::VectorXf& x, const KnnConfig& config) {
    if (term_sets.size() != static_cast<std::size_t>(train.rows()))
        throw ValidationError("knn: term sets do not match training rows");
    const auto nbrs = knn_neighbors(train, x, config.k);
    std::unordered_map<std::string, int> votes;
    for (int i : nbrs)
        for (const auto& t : *term_sets[i]) ++votes[t];
    std::vector<std::string> out;
    for (const auto& [term, v] : votes)
        if (2 * v > config.k) out.push_back(term);
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace cogmap::clf
