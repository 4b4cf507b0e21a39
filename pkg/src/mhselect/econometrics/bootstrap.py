"""Cluster (block) bootstrap with percentile confidence intervals."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Mapping

import numpy as np

from .data import MteData
from .errors import EstimationError
from .mte import MteFit

__all__ = ["BootstrapResult", "cluster_bootstrap", "resample_clusters", "attach_bootstrap"]

log = logging.getLogger(__name__)

MAX_FAILURE_SHARE = 0.5


@dataclass(frozen=True)
class BootstrapResult:
    names: tuple[str, ...]
    draws: np.ndarray
    failed: int
    reps: int
    alpha: float

    @property
    def succeeded(self) -> int:
        return self.reps - self.failed

    def interval(self, name) -> tuple[float, float]:
        col = self.draws[:, self.names.index(name)]
        col = col[np.isfinite(col)]
        if col.size == 0:
            return (np.nan, np.nan)
        lo, hi = np.percentile(col, [100 * self.alpha / 2, 100 * (1 - self.alpha / 2)])
        return float(lo), float(hi)

    def intervals(self) -> dict[str, tuple[float, float]]:
        return {name: self.interval(name) for name in self.names}


def _replicate_rng(seed, rep):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(rep)]))


def resample_clusters(data: MteData, rng) -> MteData:
    """Draw as many clusters as the data has, with replacement.

    Each drawn copy gets a fresh cluster label so that duplicates stay
    distinct clusters downstream.
    """
    labels, inverse = np.unique(data.clusters, return_inverse=True)
    members = [np.flatnonzero(inverse == g) for g in range(labels.size)]
    picks = rng.integers(0, labels.size, size=labels.size)
    idx = np.concatenate([members[g] for g in picks])
    new_labels = np.concatenate([np.full(members[g].size, pos) for pos, g in enumerate(picks)])
    return replace(data.take(idx), clusters=new_labels)


def _one_replicate(data, estimator, seed, rep, names):
    sample = resample_clusters(data, _replicate_rng(seed, rep))
    try:
        stats = estimator(sample)
    except (EstimationError, np.linalg.LinAlgError, ValueError) as exc:
        return rep, None, f"{type(exc).__name__}: {exc}"
    return rep, np.array([stats.get(n, np.nan) for n in names], dtype=float), None


def cluster_bootstrap(data: MteData, estimator: Callable[[MteData], Mapping[str, float]],
                      reps=50, seed=0, alpha=0.05, names=None, n_jobs=1) -> BootstrapResult:
    """Re-run ``estimator`` on cluster-resampled data and collect its statistics.

    ``estimator`` maps an :class:`MteData` to a ``name -> value`` mapping and
    must re-run every estimation stage.  Replicate ``r`` uses a generator
    seeded from ``(seed, r)``, so results do not depend on execution order or
    ``n_jobs``.  Replicates that raise an estimation error are counted as
    failures and excluded.

    Raises
    ------
    EstimationError
        With fewer than two clusters, or when more than half of the
        replicates fail.
    """
    if np.unique(data.clusters).size < 2:
        raise EstimationError("cluster bootstrap needs at least two clusters")
    if reps < 1:
        raise ValueError("reps must be positive")
    if names is None:
        names = tuple(estimator(data).keys())
    names = tuple(names)

    if n_jobs == 1:
        results = [_one_replicate(data, estimator, seed, r, names) for r in range(reps)]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(
            delayed(_one_replicate)(data, estimator, seed, r, names) for r in range(reps)
        )
    results.sort(key=lambda item: item[0])
    draws = np.full((reps, len(names)), np.nan)
    failed = 0
    for rep, values, err in results:
        if values is None:
            failed += 1
            log.debug("bootstrap replicate %d failed: %s", rep, err)
        else:
            draws[rep] = values
    if failed > MAX_FAILURE_SHARE * reps:
        raise EstimationError(f"{failed} of {reps} bootstrap replicates failed")
    if failed:
        log.warning("%d of %d bootstrap replicates failed and were excluded", failed, reps)
    return BootstrapResult(names, draws, failed, reps, alpha)


def attach_bootstrap(fit: MteFit, data: MteData, estimator: Callable[[MteData], MteFit],
                     reps=50, seed=0, alpha=0.05, n_jobs=1) -> MteFit:
    """Return ``fit`` with percentile CIs for every statistic it reports."""
    result = cluster_bootstrap(data, lambda sample: estimator(sample).statistics(), reps=reps,
                               seed=seed, alpha=alpha, names=tuple(fit.statistics()), n_jobs=n_jobs)
    return fit.with_bootstrap(result.intervals(), result.reps, result.failed)
