"""Two-stage estimation of marginal treatment effects with cluster bootstrap inference."""

from .bootstrap import BootstrapResult, attach_bootstrap, cluster_bootstrap, resample_clusters
from .data import MteData, independent_columns
from .errors import EstimationError, SupportError
from .mte import (
    PERCENTILES,
    MteFit,
    SupportRegion,
    ate_from_mte,
    common_support,
    mills_treated,
    mills_untreated,
    mte_curve,
    mte_parametric,
    mte_semiparametric,
    percentile_key,
)
from .ols import OlsFit, ols
from .probit import ProbitFit, probit_fit, propensity
from .smoothing import local_polynomial, local_polynomial_grid, rule_of_thumb_bandwidth

ESTIMATORS = {"normal": mte_parametric, "semipar": mte_semiparametric}

__all__ = [
    "BootstrapResult",
    "ESTIMATORS",
    "EstimationError",
    "MteData",
    "independent_columns",
    "MteFit",
    "OlsFit",
    "PERCENTILES",
    "ProbitFit",
    "SupportError",
    "SupportRegion",
    "ate_from_mte",
    "attach_bootstrap",
    "cluster_bootstrap",
    "common_support",
    "local_polynomial",
    "local_polynomial_grid",
    "mills_treated",
    "mills_untreated",
    "mte_curve",
    "mte_parametric",
    "mte_semiparametric",
    "ols",
    "percentile_key",
    "probit_fit",
    "propensity",
    "resample_clusters",
    "rule_of_thumb_bandwidth",
]
