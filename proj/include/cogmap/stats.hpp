#pragma once
// Special functions for Student-t inference: regularized incomplete beta via
// Lentz's continued fraction, t-distribution tails and quantiles. Accurate to
// ~1e-12 so significance thresholds are platform-stable.

namespace cogmap::stats {

// Regularized incomplete beta I_x(a, b), x in [0,1], a,b > 0.
double ibeta(double a, double b, double x);

// Two-sided survival: P(|T| >= t) for Student t with dof degrees of freedom.
double t_two_sided_p(double t, double dof);

// One-sided survival: P(T >= t).
double t_sf(double t, double dof);

// Quantile: smallest t >= 0 with P(|T| >= t) == p_two_sided.
double t_two_sided_quantile(double p_two_sided, double dof);

// One-way ANOVA F statistic between two groups identified by a binary label.
// Zero within-group variance yields 0 when between-variance is also 0,
// +infinity otherwise (callers floor it; selection treats it as maximal).
double f_oneway_binary(const double* values, const int* labels, int n);

} // namespace cogmap::stats
