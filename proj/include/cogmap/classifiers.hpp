#pragma once
// Reverse-inference predictors: weighted L2 logistic regression with the
// prior-shift decision rule, plus Gaussian naive Bayes and K-NN baselines.

#include <string>
#include <vector>

#include <Eigen/Core>

#include "cogmap/common.hpp"

namespace cogmap::clf {

struct LogisticModel {
    Eigen::VectorXd weights; // per feature
    double intercept = 0.0;
    double lambda = 0.0;
    double rho_term = 0.0; // training prevalence of the positive class
    bool weighted = false;
};

struct LogisticOpts {
    // Convergence: ||grad||_inf <= tol_scale * max(1, n).
    double tol_scale = 1e-6;
    int max_iter = 500;
    int memory = 20;          // L-BFGS history
    bool newton_polish = true;
    int polish_steps = 2;
    const LogisticModel* warm = nullptr; // optional warm start
};

// Minimizes sum_i w_i log(1 + exp(-yt_i (x_i' b + c))) + lambda/2 ||b||^2 with
// yt in {-1,+1} and the intercept unpenalized. L-BFGS with a strong-Wolfe line
// search, optionally followed by Newton steps for a machine-precision optimum.
LogisticModel fit_logistic(const Eigen::MatrixXd& X, const std::vector<int>& y,
                           const Eigen::VectorXd& sample_weights, double lambda,
                           const LogisticOpts& opts = {});

// Objective and analytic gradient (features then intercept), exposed so tests
// can check against finite differences and derivative-free minimizers.
double logistic_objective(const Eigen::MatrixXd& X, const std::vector<int>& y,
                          const Eigen::VectorXd& w, double lambda, const Eigen::VectorXd& beta,
                          double intercept);
Eigen::VectorXd logistic_gradient(const Eigen::MatrixXd& X, const std::vector<int>& y,
                                  const Eigen::VectorXd& w, double lambda,
                                  const Eigen::VectorXd& beta, double intercept);

// w_i = n / (2 * count(class of i)); weighted prevalence becomes exactly 1/2.
Eigen::VectorXd balance_weights(const std::vector<int>& y);

enum class BiasMode { Literal, Normalized };

struct BiasedPrediction {
    double p = 0.0;        // logistic probability
    double p_biased = 0.0; // prior-shifted score (mode-dependent)
    bool present = false;  // decision, equal to p >= 0.5 in both modes
};

double sigmoid(double z);
BiasedPrediction predict_biased(const LogisticModel& model, const Eigen::VectorXd& x,
                                BiasMode mode = BiasMode::Normalized);

// --- Gaussian naive Bayes -----------------------------------------------------

struct NaiveBayesModel {
    Eigen::VectorXd mean0, var0; // negative class, per feature
    Eigen::VectorXd mean1, var1; // positive class
    double prior1 = 0.5;
    double variance_floor = 0.0;
};

NaiveBayesModel fit_naive_bayes(const Eigen::MatrixXf& X, const std::vector<int>& y);
// Posterior P(class 1 | x) by Bayes' rule with training priors.
double predict_nb(const NaiveBayesModel& model, const Eigen::VectorXf& x);

// --- K nearest neighbors ------------------------------------------------------

struct KnnConfig {
    int k = 5; // valid range [5, 20]
};

// Indices of the k nearest training rows by Euclidean distance; distance ties
// broken by lower training index.
std::vector<int> knn_neighbors(const Eigen::MatrixXf& train, const Eigen::VectorXf& x, int k);

// A term is predicted iff strictly more than k/2 of the neighbors contain it.
std::vector<std::string> knn_predict(const Eigen::MatrixXf& train,
                                     const std::vector<const std::vector<std::string>*>& term_sets,
                                     const Eigen::VectorXf& x, const KnnConfig& config);

} // namespace cogmap::clf
