from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import EstimationError

__all__ = ["MteData", "independent_columns"]

_COLLINEAR_TOL = 1e-8


def independent_columns(matrix, names, base=None):
    """Greedy left-to-right choice of non-constant columns that are linearly
    independent of ``base`` and of the columns already chosen.

    Returns ``(kept indices, [(name, "constant" | "collinear"), ...])``.
    """
    matrix = np.asarray(matrix, dtype=float)
    n = matrix.shape[0]
    basis = np.ones((n, 1)) if base is None else np.asarray(base, dtype=float).reshape(n, -1)
    basis, _ = np.linalg.qr(basis)
    keep, dropped = [], []
    for j, name in enumerate(names):
        col = matrix[:, j]
        sd = col.std()
        if sd == 0:
            dropped.append((name, "constant"))
            continue
        v = (col - col.mean()) / sd
        resid = v - basis @ (basis.T @ v)
        norm = np.linalg.norm(resid)
        if norm < _COLLINEAR_TOL * np.sqrt(n):
            dropped.append((name, "collinear"))
            continue
        basis = np.column_stack([basis, resid / norm])
        keep.append(j)
    return keep, dropped


@dataclass(frozen=True)
class MteData:
    """Arrays for a two-stage MTE fit.

    ``covariates`` enter both stages; ``instruments`` are excluded from the
    outcome equation.  Neither matrix carries an intercept column.
    """

    y: np.ndarray
    d: np.ndarray
    covariates: np.ndarray
    instruments: np.ndarray
    clusters: np.ndarray
    covariate_names: tuple[str, ...] = field(default=())
    instrument_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        d = np.asarray(self.d).ravel().astype(int)
        X = np.asarray(self.covariates, dtype=float).reshape(len(y), -1)
        Z = np.asarray(self.instruments, dtype=float).reshape(len(y), -1)
        clusters = np.asarray(self.clusters).ravel()
        if not (len(d) == len(clusters) == len(y)):
            raise EstimationError("outcome, treatment and cluster arrays differ in length")
        if not np.all((d == 0) | (d == 1)):
            raise EstimationError("treatment must be binary 0/1")
        if Z.shape[1] == 0:
            raise EstimationError("at least one excluded instrument is required")
        for name, arr in (("outcome", y), ("covariates", X), ("instruments", Z)):
            if not np.all(np.isfinite(arr)):
                raise EstimationError(f"{name} contain missing or non-finite values")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "instruments", Z)
        object.__setattr__(self, "clusters", clusters)
        cov_names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        ins_names = tuple(self.instrument_names) or tuple(f"z{j + 1}" for j in range(Z.shape[1]))
        if len(cov_names) != X.shape[1] or len(ins_names) != Z.shape[1]:
            raise EstimationError("column names do not match the covariate/instrument matrices")
        object.__setattr__(self, "covariate_names", cov_names)
        object.__setattr__(self, "instrument_names", ins_names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def first_stage_design(self) -> np.ndarray:
        """``[1, instruments, covariates]``."""
        return np.column_stack([np.ones(self.n), self.instruments, self.covariates])

    @property
    def first_stage_names(self) -> tuple[str, ...]:
        return ("const",) + self.instrument_names + self.covariate_names

    def take(self, idx) -> "MteData":
        idx = np.asarray(idx)
        return replace(self, y=self.y[idx], d=self.d[idx], covariates=self.covariates[idx],
                       instruments=self.instruments[idx], clusters=self.clusters[idx])

    def prune_covariates(self) -> "MteData":
        """Drop covariates that are constant or collinear with the intercept,
        the instruments and earlier covariates, e.g. the fixed effects of
        clusters that a bootstrap draw left out."""
        keep, _ = independent_columns(self.covariates, self.covariate_names,
                                      np.column_stack([np.ones(self.n), self.instruments]))
        if len(keep) == self.covariates.shape[1]:
            return self
        return replace(self, covariates=self.covariates[:, keep],
                       covariate_names=tuple(self.covariate_names[j] for j in keep))

    def flip_treatment(self) -> "MteData":
        return replace(self, d=1 - self.d)

    def shift_outcome(self, constant: float) -> "MteData":
        return replace(self, y=self.y + constant)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, outcome: str, treatment: str,
                   covariates, instruments, cluster: str) -> "MteData":
        covariates, instruments = list(covariates), list(instruments)
        missing = [c for c in [outcome, treatment, cluster, *covariates, *instruments]
                   if c not in frame.columns]
        if missing:
            raise EstimationError(f"columns not found: {', '.join(missing)}")
        return cls(
            y=frame[outcome].to_numpy(float),
            d=frame[treatment].to_numpy(),
            covariates=frame[covariates].to_numpy(float) if covariates else np.empty((len(frame), 0)),
            instruments=frame[instruments].to_numpy(float),
            clusters=frame[cluster].to_numpy(),
            covariate_names=tuple(covariates),
            instrument_names=tuple(instruments),
        )
