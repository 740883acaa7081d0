"""Cross-study activation-map meta-analysis: python layer over the C++ core."""

from ._core import (
    ValidationError,
    NumericalError,
    anova_select,
    balance_weights,
    biased_probability,
    default_taxonomy,
    fit_logistic,
    ibeta,
    logistic_objective,
    smooth,
    t_two_sided_p,
    t_two_sided_quantile,
    top_fraction_mask,
    ward_labels,
)

__all__ = [
    "ValidationError",
    "NumericalError",
    "anova_select",
    "balance_weights",
    "biased_probability",
    "default_taxonomy",
    "fit_logistic",
    "ibeta",
    "logistic_objective",
    "smooth",
    "t_two_sided_p",
    "t_two_sided_quantile",
    "top_fraction_mask",
    "ward_labels",
]
