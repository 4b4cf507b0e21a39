"""Gaussian-kernel local polynomial regression with derivative output."""

from __future__ import annotations

import numpy as np

from .errors import EstimationError

__all__ = ["local_polynomial", "local_polynomial_grid", "rule_of_thumb_bandwidth"]

# weights below this are treated as zero when counting local support
_MIN_WEIGHT = 1e-12


def rule_of_thumb_bandwidth(x) -> float:
    """Silverman's ``1.06 * sd(x) * n**(-1/5)``."""
    x = np.asarray(x, dtype=float)
    return 1.06 * float(np.std(x, ddof=1)) * x.size ** (-0.2)


def local_polynomial(xs, ys, x0, bandwidth, degree=1):
    """Fit a weighted polynomial in ``xs - x0`` and return (value, derivative) at ``x0``.

    Weights are ``exp(-((xs - x0) / bandwidth)**2 / 2)``.  ``ys`` may be a
    matrix, in which case every column is smoothed with the same weights and
    the returned value and derivative are arrays.

    Raises
    ------
    EstimationError
        If fewer than ``degree + 1`` points carry non-negligible weight or the
        local design is singular.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    if degree < 1:
        raise ValueError("degree must be at least 1 to return a derivative")
    u = (xs - x0) / bandwidth
    w = np.exp(-0.5 * u * u)
    active = w > _MIN_WEIGHT
    if np.count_nonzero(active) < degree + 1:
        raise EstimationError(f"fewer than {degree + 1} points near x0={x0:.4g}")
    # powers of the scaled offset keep the local design well conditioned
    X = np.vander(u[active], degree + 1, increasing=True)
    wa = w[active]
    XtW = X.T * wa
    gram = XtW @ X
    if np.linalg.cond(gram) > 1e12:
        raise EstimationError(f"singular local design at x0={x0:.4g}")
    beta = np.linalg.solve(gram, XtW @ ys[active])
    return beta[0], beta[1] / bandwidth


def local_polynomial_grid(xs, ys, grid, bandwidth, degree=1):
    """Evaluate :func:`local_polynomial` at every grid point.

    Returns arrays of fitted values and derivatives with leading dimension
    ``len(grid)``.
    """
    values, slopes = [], []
    for x0 in np.asarray(grid, dtype=float):
        v, s = local_polynomial(xs, ys, x0, bandwidth, degree)
        values.append(v)
        slopes.append(s)
    return np.asarray(values), np.asarray(slopes)
