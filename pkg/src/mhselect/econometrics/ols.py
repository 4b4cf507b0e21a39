from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EstimationError

__all__ = ["OlsFit", "ols"]


@dataclass(frozen=True)
class OlsFit:
    coef: np.ndarray
    cov: np.ndarray
    resid: np.ndarray
    n_clusters: int | None

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


def ols(y, W, clusters=None) -> OlsFit:
    """Least squares via the normal equations with a sandwich covariance.

    With ``clusters`` the meat sums scores within clusters before taking
    outer products; without, each row is its own cluster (HC0).  No
    finite-sample correction is applied.
    """
    y = np.asarray(y, dtype=float).ravel()
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    n, k = W.shape
    if n != y.shape[0]:
        raise EstimationError(f"regressor matrix has {n} rows but outcome has {y.shape[0]}")
    if n < k or np.linalg.matrix_rank(W) < k:
        raise EstimationError("regressor matrix is rank deficient")
    gram = W.T @ W
    coef = np.linalg.solve(gram, W.T @ y)
    resid = y - W @ coef
    bread = np.linalg.inv(gram)
    scores = W * resid[:, None]
    if clusters is None:
        meat = scores.T @ scores
        n_groups = None
    else:
        codes, inverse = np.unique(np.asarray(clusters), return_inverse=True)
        summed = np.zeros((codes.size, k))
        np.add.at(summed, inverse, scores)
        meat = summed.T @ summed
        n_groups = int(codes.size)
    return OlsFit(coef, bread @ meat @ bread, resid, n_groups)
