#include "cogmap/stats.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "cogmap/common.hpp"

namespace cogmap::stats {

namespace {

// Continued fraction for the incomplete beta (modified Lentz).
double betacf(double a, double b, double x) {
    constexpr int max_iter = 300;
    constexpr double eps = 1e-15;
    constexpr double fpmin = 1e-300;

    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < fpmin) d = fpmin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= max_iter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < eps) return h;
    }
    throw NumericalError("incomplete beta continued fraction did not converge");
}

} // namespace

double ibeta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0)) throw NumericalError("ibeta: a, b must be positive");
    if (x < 0.0 || x > 1.0) throw NumericalError("ibeta: x outside [0,1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(ln_front);
    // Use the symmetry relation to keep the continued fraction convergent.
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * betacf(a, b, x) / a;
    }
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

double t_two_sided_p(double t, double dof) {
    if (dof <= 0.0) throw NumericalError("t distribution: dof must be positive");
    if (std::isinf(t)) return 0.0;
    if (std::isnan(t)) return std::numeric_limits<double>::quiet_NaN();
    const double t2 = t * t;
    // P(|T| >= t) = I_{dof/(dof+t^2)}(dof/2, 1/2)
    return ibeta(0.5 * dof, 0.5, dof / (dof + t2));
}

double t_sf(double t, double dof) {
    const double p = t_two_sided_p(t, dof);
    return t >= 0.0 ? 0.5 * p : 1.0 - 0.5 * p;
}

double t_two_sided_quantile(double p_two_sided, double dof) {
    if (!(p_two_sided > 0.0) || !(p_two_sided < 1.0))
        throw NumericalError("t quantile: p must lie in (0,1)");
    // Bisection on the monotone two-sided tail; bracket grows until it
    // contains the root. 200 halvings push the interval far below 1e-12.
    double lo = 0.0, hi = 1.0;
    while (t_two_sided_p(hi, dof) > p_two_sided) {
        hi *= 2.0;
        if (hi > 1e12) throw NumericalError("t quantile: bracket failure");
    }
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        if (t_two_sided_p(mid, dof) > p_two_sided)
            lo = mid;
        else
            hi = mid;
        if (hi - lo < 1e-13 * (1.0 + hi)) break;
    }
    return 0.5 * (lo + hi);
}

double f_oneway_binary(const double* values, const int* labels, int n) {
    double s0 = 0.0, s1 = 0.0;
    int n0 = 0, n1 = 0;
    for (int i = 0; i < n; ++i) {
        if (labels[i]) {
            s1 += values[i];
            ++n1;
        } else {
            s0 += values[i];
            ++n0;
        }
    }
    if (n0 == 0 || n1 == 0) throw ValidationError("ANOVA requires both classes non-empty");
    if (n0 + n1 < 3) throw ValidationError("ANOVA requires at least 3 samples");
    const double m0 = s0 / n0, m1 = s1 / n1;
    const double grand = (s0 + s1) / n;
    double ssw = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = values[i] - (labels[i] ? m1 : m0);
        ssw += d * d;
    }
    const double ssb = n0 * (m0 - grand) * (m0 - grand) + n1 * (m1 - grand) * (m1 - grand);
    const double msb = ssb / 1.0;              // k - 1 = 1
    const double msw = ssw / (n - 2);          // n - k
    if (msw <= 0.0) return msb <= 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return msb / msw;
}

} // namespace cogmap::stats
