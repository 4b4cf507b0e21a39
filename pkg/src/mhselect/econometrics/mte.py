"""
Marginal treatment effects in a binary Roy model.

Both estimators share a probit first stage of treatment on
``[1, instruments, covariates]``.  Treatment is taken when the latent
resistance ``U_D`` falls below the propensity score, so low ``u`` means
most eager to take the treatment.

* ``normal``: switching regressions with truncated-normal control
  functions.  The treated arm regresses the outcome on ``[1, X,
  mills_treated(p)]`` and the untreated arm on ``[1, X,
  mills_untreated(p)]``; the control-function coefficients are the
  covariances of each arm's unobservable with the selection error.
* ``semipar``: local instrumental variables on the partially linear model
  ``y = X b0 + p X (b1 - b0) + K(p) + e`` fitted by double residualisation,
  with ``MTE(x, u) = x (b1 - b0) + K'(u)`` on the common support only.
  The intercept gap is not separable from ``K`` (the regressor ``p * 1``
  is a function of ``p``) and is carried inside ``K'``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.special import ndtri
from scipy.stats import norm

from .data import MteData
from .errors import EstimationError, SupportError
from .ols import ols
from .probit import ProbitFit, probit_fit, propensity
from .smoothing import local_polynomial, local_polynomial_grid, rule_of_thumb_bandwidth

__all__ = [
    "PERCENTILES",
    "SupportRegion",
    "MteFit",
    "mills_treated",
    "mills_untreated",
    "common_support",
    "mte_parametric",
    "mte_semiparametric",
    "ate_from_mte",
    "mte_curve",
]

PERCENTILES = (0.01, 0.10, 0.25, 0.50, 0.75, 0.90, 0.99)
U_STEP = 0.01
# residualisation smooths on a grid and interpolates; spacing relative to bandwidth
_GRID_PER_BANDWIDTH = 8
_MAX_GRID = 600


def _check_open_unit(p, what="p"):
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0.0) | (p >= 1.0)) or np.any(~np.isfinite(p)):
        raise ValueError(f"{what} must lie strictly inside (0, 1)")
    return p


def mills_treated(p):
    """``E[V | V < Phi^-1(p)] = -phi(Phi^-1(p)) / p`` for standard normal V."""
    p = _check_open_unit(p)
    return -norm.pdf(ndtri(p)) / p


def mills_untreated(p):
    """``E[V | V > Phi^-1(p)] = phi(Phi^-1(p)) / (1 - p)``."""
    p = _check_open_unit(p)
    return norm.pdf(ndtri(p)) / (1.0 - p)


@dataclass(frozen=True)
class SupportRegion:
    """Propensity-score bins populated by both arms.

    ``p_lo`` and ``p_hi`` are the outer edges of the longest contiguous run of
    bins in which each arm has at least ``min_count`` observations.
    """

    bin_width: float
    min_count: int
    treated_counts: np.ndarray
    untreated_counts: np.ndarray
    first_bin: int
    last_bin: int

    @property
    def p_lo(self) -> float:
        return round(self.first_bin * self.bin_width, 12)

    @property
    def p_hi(self) -> float:
        return round((self.last_bin + 1) * self.bin_width, 12)

    @property
    def n_bins(self) -> int:
        return self.last_bin - self.first_bin + 1

    def contains(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return (u >= self.p_lo - 1e-12) & (u <= self.p_hi + 1e-12)

    def as_rows(self):
        for b in range(len(self.treated_counts)):
            lo = round(b * self.bin_width, 12)
            yield (lo, round(lo + self.bin_width, 12), int(self.treated_counts[b]),
                   int(self.untreated_counts[b]), self.first_bin <= b <= self.last_bin)


def _bin_index(p, bin_width, n_bins):
    # rounding before floor so that e.g. 0.30 lands in bin 30, not 29
    idx = np.floor(np.round(np.asarray(p, dtype=float) / bin_width, 9)).astype(int)
    return np.clip(idx, 0, n_bins - 1)


def common_support(p, d, bin_width=0.01, min_count=1) -> SupportRegion:
    """Longest contiguous run of bins where both arms have ``min_count`` observations.

    Ties between equally long runs go to the run with more observations,
    then the lower one.

    Raises
    ------
    SupportError
        If no bin is populated by both arms.
    """
    p = _check_open_unit(p)
    d = np.asarray(d).astype(int)
    n_bins = int(round(1.0 / bin_width))
    idx = _bin_index(p, bin_width, n_bins)
    treated = np.bincount(idx[d == 1], minlength=n_bins)
    untreated = np.bincount(idx[d == 0], minlength=n_bins)
    ok = (treated >= min_count) & (untreated >= min_count)
    if not ok.any():
        raise SupportError("treated and untreated propensity scores share no bin")
    best, start = None, None
    total = treated + untreated
    for b in range(n_bins + 1):
        if b < n_bins and ok[b]:
            if start is None:
                start = b
            continue
        if start is not None:
            key = (b - start, int(total[start:b].sum()), -start)
            if best is None or key > best[0]:
                best = (key, start, b - 1)
            start = None
    _, first, last = best
    return SupportRegion(bin_width, min_count, treated, untreated, first, last)


@dataclass(frozen=True)
class MteFit:
    """A fitted two-stage MTE model.

    ``mte_table`` holds MTE at ``percentiles`` evaluated at ``x_bar``; entries
    are NaN when the estimator is not defined there (outside support for
    ``semipar``).  ``ci`` maps statistic names to percentile-bootstrap bounds
    once :func:`~mhselect.econometrics.bootstrap.attach_bootstrap` has run.
    """

    kind: str
    probit: ProbitFit
    first_stage_names: tuple[str, ...]
    instrument_names: tuple[str, ...]
    covariate_names: tuple[str, ...]
    beta0: np.ndarray
    delta: np.ndarray
    x_bar: np.ndarray
    support: SupportRegion | None
    percentiles: tuple[float, ...]
    mte_table: np.ndarray
    ate: float
    n: int
    sigma_1v: float | None = None
    sigma_0v: float | None = None
    u_grid: np.ndarray | None = None
    k_slope: np.ndarray | None = None
    bandwidth: float | None = None
    degree: int | None = None
    outside_support: tuple[bool, ...] = ()
    ci: Mapping[str, tuple[float, float]] | None = None
    bootstrap_reps: int = 0
    bootstrap_failed: int = 0
    _smooth_p: np.ndarray | None = field(default=None, repr=False)
    _smooth_r: np.ndarray | None = field(default=None, repr=False)

    @property
    def cov_gap(self) -> float | None:
        if self.kind != "normal":
            return None
        return self.sigma_1v - self.sigma_0v

    @property
    def treatment_effect_at_mean(self) -> float:
        return float(self.x_bar @ self.delta)

    def mte(self, u) -> np.ndarray:
        """MTE at ``x_bar`` for quantiles ``u``; NaN outside support for ``semipar``."""
        u = _check_open_unit(u, "u")
        scalar = u.ndim == 0
        u = np.atleast_1d(u)
        if self.kind == "normal":
            out = self.treatment_effect_at_mean + self.cov_gap * ndtri(u)
        else:
            out = np.full(u.shape, np.nan)
            inside = self.support.contains(u)
            for i in np.flatnonzero(inside):
                out[i] = self.treatment_effect_at_mean + self.k_prime(u[i])
        return out[0] if scalar else out

    def k_prime(self, u) -> float:
        if self.kind != "semipar":
            raise AttributeError("K' is only defined for the semiparametric estimator")
        return float(local_polynomial(self._smooth_p, self._smooth_r, u,
                                      self.bandwidth, self.degree)[1])

    def first_stage_coef(self, name) -> float:
        return float(self.probit.coef[self.first_stage_names.index(name)])

    def statistics(self) -> dict[str, float]:
        """Flat name -> value map of every reported statistic (bootstrap targets)."""
        stats = {"ate": float(self.ate)}
        for u, v in zip(self.percentiles, self.mte_table):
            stats[percentile_key(u)] = float(v)
        if self.kind == "normal":
            stats["cov_gap"] = float(self.cov_gap)
            stats["sigma_1v"] = float(self.sigma_1v)
            stats["sigma_0v"] = float(self.sigma_0v)
        for name in self.instrument_names:
            stats[f"fs_{name}"] = self.first_stage_coef(name)
        return stats

    def with_bootstrap(self, ci, reps, failed) -> "MteFit":
        return replace(self, ci=dict(ci), bootstrap_reps=int(reps), bootstrap_failed=int(failed))


def percentile_key(u) -> str:
    return f"mte_p{int(round(u * 100)):02d}"


def _first_stage(data: MteData):
    if data.d.min() == data.d.max():
        raise EstimationError("treatment has a single class; both arms must be non-empty")
    Z = data.first_stage_design()
    fit = probit_fit(data.d, Z)
    if not fit.converged:
        raise EstimationError("first-stage probit did not converge")
    return fit, propensity(fit, Z)


def _safe_support(p, d, bin_width, min_count):
    try:
        return common_support(p, d, bin_width, min_count)
    except SupportError:
        return None


def mte_parametric(data: MteData, percentiles=PERCENTILES, bin_width=0.01, min_count=1) -> MteFit:
    """Parametric-normal MTE via control-function switching regressions.

    Percentiles outside the common support are still reported (the normal
    model extrapolates) but flagged in ``outside_support``.
    """
    fit, p = _first_stage(data)
    X1 = np.column_stack([np.ones(data.n), data.covariates])
    treated = data.d == 1
    arms = {}
    for arm, mask, control in ((1, treated, mills_treated), (0, ~treated, mills_untreated)):
        W = np.column_stack([X1[mask], control(p[mask])])
        try:
            arms[arm] = ols(data.y[mask], W, data.clusters[mask])
        except EstimationError:
            raise EstimationError(
                f"control-function term is collinear in the {'treated' if arm else 'untreated'} arm "
                "(instruments carry no independent variation)"
            ) from None
    b1, b0 = arms[1].coef, arms[0].coef
    delta = b1[:-1] - b0[:-1]
    x_bar = X1.mean(axis=0)
    sigma_1v, sigma_0v = float(b1[-1]), float(b0[-1])
    support = _safe_support(p, data.d, bin_width, min_count)
    percentiles = tuple(percentiles)
    u = np.asarray(percentiles)
    ate = float(x_bar @ delta)
    table = ate + (sigma_1v - sigma_0v) * ndtri(u)
    outside = tuple(bool(not support.contains(v)) if support else True for v in u)
    return MteFit(
        kind="normal", probit=fit, first_stage_names=data.first_stage_names,
        instrument_names=data.instrument_names, covariate_names=data.covariate_names,
        beta0=b0[:-1], delta=delta, x_bar=x_bar, support=support,
        percentiles=percentiles, mte_table=table, ate=ate, n=data.n,
        sigma_1v=sigma_1v, sigma_0v=sigma_0v, outside_support=outside,
    )


def _residualise(p, columns, bandwidth, degree):
    lo, hi = float(p.min()), float(p.max())
    n_grid = int(min(_MAX_GRID, max(50, np.ceil((hi - lo) / bandwidth * _GRID_PER_BANDWIDTH) + 1)))
    grid = np.linspace(lo, hi, n_grid)
    fitted, _ = local_polynomial_grid(p, columns, grid, bandwidth, degree)
    expected = np.column_stack([np.interp(p, grid, fitted[:, j]) for j in range(columns.shape[1])])
    return columns - expected


def mte_semiparametric(data: MteData, bandwidth=None, degree=2, percentiles=PERCENTILES,
                       bin_width=0.01, min_count=1) -> MteFit:
    """Local-IV MTE on the common support of the estimated propensity score.

    Observations with propensity outside the support are dropped before the
    second stage.  ``bandwidth`` defaults to the rule of thumb on the trimmed
    propensity scores.  ATE is the mean MTE over the 0.01-step grid of ``u``
    inside the support.

    Raises
    ------
    SupportError
        If the support is empty or contains none of ``percentiles``.
    """
    fit, p = _first_stage(data)
    support = common_support(p, data.d, bin_width, min_count)
    percentiles = tuple(percentiles)
    inside_pct = support.contains(np.asarray(percentiles))
    if not inside_pct.any():
        raise SupportError(
            f"common support [{support.p_lo:.2f}, {support.p_hi:.2f}] contains none of the "
            "reported percentiles"
        )
    keep = support.contains(p)
    p_s = p[keep]
    y_s = data.y[keep]
    X_s = data.covariates[keep]
    k = X_s.shape[1]
    h = rule_of_thumb_bandwidth(p_s) if bandwidth is None else float(bandwidth)

    beta0 = np.zeros(k)
    dbeta = np.zeros(k)
    if k:
        columns = np.column_stack([y_s, X_s, p_s[:, None] * X_s])
        resid = _residualise(p_s, columns, h, degree)
        try:
            second = ols(resid[:, 0], resid[:, 1:], data.clusters[keep])
        except EstimationError:
            raise EstimationError("residualised covariates are collinear") from None
        beta0, dbeta = second.coef[:k], second.coef[k:]
    r = y_s - X_s @ beta0 - p_s * (X_s @ dbeta)

    j_lo = int(np.ceil(round(support.p_lo / U_STEP, 9)))
    j_hi = int(np.floor(round(support.p_hi / U_STEP, 9)))
    u_grid = np.array([j * U_STEP for j in range(max(j_lo, 1), min(j_hi, 99) + 1)])
    _, k_slope = local_polynomial_grid(p_s, r, u_grid, h, degree)

    x_bar = np.concatenate([[1.0], data.covariates.mean(axis=0)])
    delta = np.concatenate([[0.0], dbeta])
    shift = float(x_bar @ delta)
    curve = shift + k_slope
    table = np.full(len(percentiles), np.nan)
    for i, u in enumerate(percentiles):
        if inside_pct[i]:
            table[i] = shift + local_polynomial(p_s, r, u, h, degree)[1]
    return MteFit(
        kind="semipar", probit=fit, first_stage_names=data.first_stage_names,
        instrument_names=data.instrument_names, covariate_names=data.covariate_names,
        beta0=np.concatenate([[np.nan], beta0]), delta=delta, x_bar=x_bar, support=support,
        percentiles=percentiles, mte_table=table, ate=float(curve.mean()), n=int(keep.sum()),
        u_grid=u_grid, k_slope=k_slope, bandwidth=h, degree=degree,
        outside_support=tuple(bool(not v) for v in inside_pct),
        _smooth_p=p_s, _smooth_r=r,
    )


def ate_from_mte(fit: MteFit) -> float:
    """Average treatment effect implied by a fitted MTE curve.

    Normal: ``x_bar @ delta`` (the quantile term integrates to zero over
    (0, 1)).  Semiparametric: the mean of the MTE over the support grid.
    """
    if fit.kind == "normal":
        return float(fit.x_bar @ fit.delta)
    return float(np.mean(fit.treatment_effect_at_mean + fit.k_slope))


def mte_curve(fit: MteFit, step=U_STEP):
    """``(u, mte)`` on a regular grid: (0, 1) for normal, the support for semipar."""
    if fit.kind == "semipar":
        if np.isclose(step, U_STEP):
            return fit.u_grid.copy(), fit.treatment_effect_at_mean + fit.k_slope
        u = np.arange(step, 1.0 - step / 2, step)
        u = u[fit.support.contains(u)]
        return u, fit.mte(u)
    u = np.round(np.arange(1, int(round(1 / step))) * step, 12)
    return u, fit.mte(u)
