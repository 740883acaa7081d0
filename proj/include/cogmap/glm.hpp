#pragma once
// Mass-univariate forward inference: per-voxel least squares on the term
// design, term-versus-rest contrasts, Student-t inference, Bonferroni FWER.

#include <string>
#include <vector>

#include <Eigen/Core>

#include "cogmap/corpus.hpp"

namespace cogmap::glm {

enum class ContrastMode {
    Coefficient,  // c = indicator of the term's column (default)
    CategoryMean, // term coefficient vs mean of the other same-category columns
};

struct GlmFit {
    corpus::DesignMatrix design;
    Eigen::MatrixXd beta;              // k_total x p
    Eigen::VectorXd residual_variance; // p
    int dof = 0;                       // n - rank(Y)
    Eigen::MatrixXd xtx_inv;           // (Y'Y)^-1, cached for contrast variances
};

struct ContrastResult {
    std::string term;
    Eigen::VectorXd t_values; // p
    Eigen::VectorXd p_values; // p, two-sided
    double alpha = 0.05;
    double fwer_threshold_t = 0.0; // |t| threshold equivalent to p <= alpha/p
    std::vector<std::uint8_t> significant;
    int n_significant = 0;
};

// Least squares via the normal equations; rejects rank-deficient designs with
// the offending near-collinear column pairs (|r| > 0.999) named.
GlmFit fit_glm(const Eigen::MatrixXf& maps, const corpus::DesignMatrix& design);
GlmFit fit_glm(const Eigen::MatrixXd& maps, const corpus::DesignMatrix& design);

// Two-sided per-voxel t threshold for family-wise level alpha over p tests
// (Bonferroni).
double fwer_threshold(int p, double alpha, int dof);

// taxonomy is required for ContrastMode::CategoryMean and ignored otherwise.
ContrastResult term_contrast(const GlmFit& fit, const std::string& term, double alpha = 0.05,
                             ContrastMode mode = ContrastMode::Coefficient,
                             const corpus::Taxonomy* taxonomy = nullptr);

// Pearson correlation matrix of the design's term columns.
Eigen::MatrixXd design_correlation(const corpus::DesignMatrix& design);

} // namespace cogmap::glm
