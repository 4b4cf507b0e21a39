"""Probit maximum likelihood by Newton-Raphson on the exact score and Hessian."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.special import log_ndtr, ndtr

from .errors import EstimationError

__all__ = ["ProbitFit", "probit_fit", "propensity", "PROPENSITY_CLAMP"]

PROPENSITY_CLAMP = 1e-6
GRADIENT_TOL = 1e-8
MAX_ITER = 100
DIVERGENCE_NORM = 1e4
# fitted indices beyond this trigger the separation check
SEPARATION_INDEX = 6.0

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class ProbitFit:
    """Result of :func:`probit_fit`.

    Attributes
    ----------
    coef : ndarray
        Coefficient vector in the column order of the design.
    cov : ndarray
        Inverse observed information at ``coef``.
    loglik : float
    converged : bool
    iterations : int
    gradient_norm : float
        Euclidean norm of the score with respect to the coefficients of the
        RMS-scaled design columns (equal to the raw score norm when every
        column has unit root-mean-square, e.g. an intercept).
    """

    coef: np.ndarray
    cov: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    gradient_norm: float

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


def _inverse_mills(q, index):
    # phi(q*xb) / Phi(q*xb), computed in logs so it stays finite in the tails
    t = q * index
    return np.exp(-0.5 * t * t - _LOG_SQRT_2PI - log_ndtr(t))


def _loglik(d_sign, index):
    return float(np.sum(log_ndtr(d_sign * index)))


def _score_hessian(Z, d_sign, index):
    lam = d_sign * _inverse_mills(d_sign, index)
    grad = Z.T @ lam
    weight = lam * (lam + index)
    hess = -(Z * weight[:, None]).T @ Z
    return grad, hess


def _separated(Zs, d_sign) -> bool:
    # a direction b with sign_i * z_i @ b >= 0 for every row and > 0 for some
    # row makes the likelihood increase without bound along b
    A = Zs * d_sign[:, None]
    res = linprog(-A.sum(axis=0), A_ub=-A, b_ub=np.zeros(A.shape[0]),
                  bounds=[(-1.0, 1.0)] * A.shape[1], method="highs")
    return bool(res.status == 0 and -res.fun > 1e-7 * A.shape[0])


def probit_fit(d, Z, start=None) -> ProbitFit:
    """Fit ``P(d = 1 | Z) = Phi(Z @ coef)`` by maximum likelihood.

    Parameters
    ----------
    d : array_like, shape (n,)
        Binary outcome.
    Z : array_like, shape (n, k)
        Design matrix, including an intercept column if wanted.

    Raises
    ------
    EstimationError
        On a single-class outcome, a rank-deficient design, or diverging
        coefficients (separation).
    """
    d = np.asarray(d, dtype=float).ravel()
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[0] != d.shape[0]:
        raise EstimationError(f"design has {Z.shape[0]} rows but outcome has {d.shape[0]}")
    if not np.all((d == 0) | (d == 1)):
        raise EstimationError("probit outcome must be binary 0/1")
    if d.min() == d.max():
        raise EstimationError("probit outcome has a single class")
    if np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise EstimationError("probit design is rank deficient")

    # Newton runs on RMS-scaled columns; the score of badly scaled columns
    # (CHF incomes, premiums) otherwise has a floating-point floor above the tolerance
    scale_cols = np.sqrt(np.mean(Z * Z, axis=0))
    scale_cols[scale_cols == 0] = 1.0
    Zs = Z / scale_cols
    d_sign = 2.0 * d - 1.0
    coef = np.zeros(Z.shape[1]) if start is None else np.asarray(start, dtype=float) * scale_cols
    index = Zs @ coef
    ll = _loglik(d_sign, index)
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        grad, hess = _score_hessian(Zs, d_sign, index)
        if np.linalg.norm(grad) < GRADIENT_TOL:
            converged = True
            it -= 1
            break
        step = np.linalg.solve(hess, -grad)
        # step halving keeps the likelihood monotone far from the optimum
        step_scale = 1.0
        for _ in range(40):
            trial = coef + step_scale * step
            trial_index = Zs @ trial
            trial_ll = _loglik(d_sign, trial_index)
            if trial_ll >= ll - 1e-12 * abs(ll):
                break
            step_scale *= 0.5
        coef, index, ll = trial, trial_index, trial_ll
        if np.linalg.norm(coef / scale_cols) > DIVERGENCE_NORM:
            raise EstimationError("probit coefficients diverge (quasi-complete separation)")
        if np.linalg.norm(step_scale * step) <= 1e-15 * (1.0 + np.linalg.norm(coef)):
            # no further progress possible in floating point
            break

    if np.max(np.abs(index)) > SEPARATION_INDEX and _separated(Zs, d_sign):
        raise EstimationError("probit coefficients diverge (quasi-complete separation)")
    grad, hess = _score_hessian(Zs, d_sign, index)
    grad_norm = float(np.linalg.norm(grad))
    converged = converged or grad_norm < GRADIENT_TOL
    try:
        cov_scaled = np.linalg.inv(-hess)
    except np.linalg.LinAlgError:
        raise EstimationError("observed information is singular at the probit optimum") from None
    cov = cov_scaled / np.outer(scale_cols, scale_cols)
    return ProbitFit(coef / scale_cols, cov, ll, converged, it, grad_norm)


def propensity(fit: ProbitFit, Z) -> np.ndarray:
    """Fitted probabilities ``Phi(Z @ coef)`` clamped to ``[1e-6, 1 - 1e-6]``."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[None, :]
    if Z.shape[1] != fit.coef.shape[0]:
        raise EstimationError(
            f"design has {Z.shape[1]} columns but the fit has {fit.coef.shape[0]} coefficients"
        )
    return np.clip(ndtr(Z @ fit.coef), PROPENSITY_CLAMP, 1.0 - PROPENSITY_CLAMP)
