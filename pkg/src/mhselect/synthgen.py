"""
Synthetic panels for Monte Carlo validation and demonstration.

Two generators:

* :func:`simulate_roy` draws from a binary Roy model with jointly normal
  unobservables ``(omega0, omega1, V)`` and a probit selection index, and
  returns the exact MTE oracle alongside the data.
* :func:`simulate_structural` routes a population of structural agents
  through a deductible menu priced per canton: each agent picks a plan,
  draws a need state and consumes care at the period-2 optimum.

Selection-index coefficients are ordered ``[intercept, premium,
supplementary insurance, covariates...]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.special import ndtr, ndtri

from . import market, model
from .econometrics.data import MteData

__all__ = [
    "CovariateSpec",
    "InstrumentSpec",
    "DgpConfig",
    "SyntheticPanel",
    "MteOracle",
    "StructuralPanel",
    "draw_population",
    "simulate_roy",
    "true_mte",
    "simulate_structural",
    "export_pipeline",
    "INSTRUMENT_NAMES",
    "PIPELINE_FILLERS",
]

INSTRUMENT_NAMES = ("avg_premium", "suppl_ins")
_DISTRIBUTIONS = {"normal": 2, "uniform": 2, "randint": 2, "bernoulli": 1}


@dataclass(frozen=True)
class CovariateSpec:
    """One covariate: ``normal(mean, sd)``, ``uniform(lo, hi)``,
    ``randint(lo, hi)`` (inclusive) or ``bernoulli(p)``."""

    name: str
    dist: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.dist not in _DISTRIBUTIONS:
            raise ValueError(f"covariate {self.name}: unknown distribution {self.dist!r}")
        if len(self.params) != _DISTRIBUTIONS[self.dist]:
            raise ValueError(f"covariate {self.name}: {self.dist} takes "
                             f"{_DISTRIBUTIONS[self.dist]} parameter(s)")
        a = self.params[0]
        if self.dist == "normal" and self.params[1] < 0:
            raise ValueError(f"covariate {self.name}: negative standard deviation")
        if self.dist in ("uniform", "randint") and self.params[1] < a:
            raise ValueError(f"covariate {self.name}: upper bound below lower bound")
        if self.dist == "bernoulli" and not 0 <= a <= 1:
            raise ValueError(f"covariate {self.name}: probability outside [0, 1]")

    @property
    def integer_valued(self) -> bool:
        return self.dist in ("randint", "bernoulli")

    @property
    def mean(self) -> float:
        if self.dist == "bernoulli":
            return float(self.params[0])
        return 0.5 * (self.params[0] + self.params[1]) if self.dist != "normal" else float(self.params[0])

    def draw(self, rng, n) -> np.ndarray:
        a = self.params[0]
        if self.dist == "normal":
            return rng.normal(a, self.params[1], n)
        if self.dist == "uniform":
            return rng.uniform(a, self.params[1], n)
        if self.dist == "randint":
            return rng.integers(int(a), int(self.params[1]) + 1, n).astype(float)
        return (rng.random(n) < a).astype(float)

    def describe(self) -> str:
        args = ", ".join(_fmt(v) for v in self.params)
        return f"{self.dist}({args})"


def _fmt(v) -> str:
    return repr(int(v)) if float(v).is_integer() else repr(float(v))


@dataclass(frozen=True)
class InstrumentSpec:
    """Premium-like continuous instrument and binary supplementary insurance.

    The premium is a canton-level normal draw plus a deviation per
    (canton, plan type) cell, optionally plus individual noise, rounded to the
    cent.  Without individual noise the instrument is exactly representable
    as a market premium table and the panel can be exported to CSV.
    """

    premium_mean: float = 400.0
    premium_cluster_sd: float = 60.0
    premium_cell_sd: float = 15.0
    premium_individual_sd: float = 0.0
    managed_share: float = 0.4
    suppl_prob: float = 0.35

    def __post_init__(self):
        if min(self.premium_cluster_sd, self.premium_cell_sd, self.premium_individual_sd) < 0:
            raise ValueError("premium standard deviations must be non-negative")
        for name in ("managed_share", "suppl_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")


def _sqrt_psd(sigma) -> np.ndarray:
    vals, vecs = np.linalg.eigh(sigma)
    if vals.min() < -1e-10 * max(1.0, abs(vals).max()):
        raise ValueError("error covariance is not positive semi-definite")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True)
class DgpConfig:
    """Full description of a synthetic Roy data-generating process.

    ``sigma`` is the covariance of ``(omega0, omega1, V)`` with ``Var(V) = 1``
    (the probit scale normalisation).
    """

    n_agents: int
    covariates: tuple[CovariateSpec, ...]
    psi: tuple[float, ...]
    alpha0: float
    alpha1: float
    beta0: tuple[float, ...]
    beta1: tuple[float, ...]
    sigma: tuple[tuple[float, ...], ...]
    instruments: InstrumentSpec = field(default_factory=InstrumentSpec)
    n_clusters: int = 26
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "psi", tuple(float(v) for v in self.psi))
        object.__setattr__(self, "beta0", tuple(float(v) for v in self.beta0))
        object.__setattr__(self, "beta1", tuple(float(v) for v in self.beta1))
        object.__setattr__(self, "sigma", tuple(tuple(float(v) for v in row) for row in self.sigma))
        k = len(self.covariates)
        if int(self.n_agents) < 1:
            raise ValueError(f"n_agents must be at least 1, got {self.n_agents}")
        if int(self.n_clusters) < 1:
            raise ValueError(f"n_clusters must be at least 1, got {self.n_clusters}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a non-negative 64-bit integer")
        if len(self.psi) != k + len(INSTRUMENT_NAMES) + 1:
            raise ValueError(f"psi needs {k + len(INSTRUMENT_NAMES) + 1} entries "
                             f"(intercept, {len(INSTRUMENT_NAMES)} instruments, {k} covariates), "
                             f"got {len(self.psi)}")
        if len(self.beta0) != k or len(self.beta1) != k:
            raise ValueError(f"beta0 and beta1 need {k} entries each")
        names = [c.name for c in self.covariates]
        if len(set(names)) != k:
            raise ValueError("covariate names must be unique")
        sigma = np.asarray(self.sigma)
        if sigma.shape != (3, 3):
            raise ValueError("sigma must be 3x3")
        if not np.allclose(sigma, sigma.T, atol=1e-12):
            raise ValueError("sigma must be symmetric")
        if abs(sigma[2, 2] - 1.0) > 1e-12:
            raise ValueError("Var(V) = sigma[2][2] must equal 1")
        _sqrt_psd(sigma)

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)

    @property
    def covariate_means(self) -> np.ndarray:
        return np.array([c.mean for c in self.covariates])

    def oracle(self) -> "MteOracle":
        return MteOracle(
            delta_intercept=self.alpha1 - self.alpha0,
            delta_beta=tuple(b1 - b0 for b1, b0 in zip(self.beta1, self.beta0)),
            cov_gap=self.sigma[1][2] - self.sigma[0][2],
        )

    def with_seed(self, seed) -> "DgpConfig":
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class MteOracle:
    """Exact MTE parameters of a Roy DGP."""

    delta_intercept: float
    delta_beta: tuple[float, ...]
    cov_gap: float

    def ate(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(self.delta_intercept + x @ np.asarray(self.delta_beta))

    def to_dict(self) -> dict:
        return {"delta_intercept": self.delta_intercept,
                "delta_beta": list(self.delta_beta), "cov_gap": self.cov_gap}

    @classmethod
    def from_dict(cls, d) -> "MteOracle":
        return cls(float(d["delta_intercept"]), tuple(float(v) for v in d["delta_beta"]),
                   float(d["cov_gap"]))


def true_mte(oracle: MteOracle, x, u):
    """``delta_intercept + x @ delta_beta + cov_gap * Phi^-1(u)``."""
    u_arr = np.asarray(u, dtype=float)
    if np.any((u_arr <= 0) | (u_arr >= 1)) or np.any(~np.isfinite(u_arr)):
        raise ValueError("u must lie strictly inside (0, 1)")
    out = oracle.ate(x) + oracle.cov_gap * ndtri(u_arr)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class SyntheticPanel:
    """Agent-level draws of a Roy DGP.

    Outcome fields (``d``, ``y0``, ``y1``, ``y``) are ``None`` until
    :func:`simulate_roy` fills them.
    """

    config: DgpConfig
    covariates: np.ndarray
    instruments: np.ndarray
    clusters: np.ndarray
    plan_type: np.ndarray
    omega0: np.ndarray
    omega1: np.ndarray
    v: np.ndarray
    p_true: np.ndarray
    d: np.ndarray | None = None
    y0: np.ndarray | None = None
    y1: np.ndarray | None = None
    y: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.v.shape[0]

    def selection_index(self) -> np.ndarray:
        return _selection_index(self.config, self.instruments, self.covariates)

    def to_mte_data(self, treatment="lowest") -> MteData:
        """Estimation arrays; ``highest`` relabels the untreated arm as treated."""
        if self.y is None:
            raise ValueError("panel has no outcomes; run simulate_roy")
        d = self.d if treatment == "lowest" else 1 - self.d
        if treatment not in ("lowest", "highest"):
            raise ValueError(f"unknown treatment side {treatment!r}")
        return MteData(self.y, d, self.covariates, self.instruments, self.clusters,
                       self.config.covariate_names, INSTRUMENT_NAMES)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.covariates, columns=list(self.config.covariate_names))
        for j, name in enumerate(INSTRUMENT_NAMES):
            frame[name] = self.instruments[:, j]
        frame["cluster"] = self.clusters
        frame["plan_type"] = self.plan_type
        frame["v"] = self.v
        frame["p_true"] = self.p_true
        for name in ("d", "y0", "y1", "y"):
            if getattr(self, name) is not None:
                frame[name] = getattr(self, name)
        return frame


def _selection_index(config, instruments, covariates):
    psi = np.asarray(config.psi)
    return psi[0] + instruments @ psi[1:1 + instruments.shape[1]] + covariates @ psi[1 + instruments.shape[1]:]


def draw_population(config: DgpConfig) -> SyntheticPanel:
    """Draw covariates, instruments, clusters and unobservables (no outcomes).

    Deterministic given ``config.seed``.
    """
    rng = np.random.default_rng(int(config.seed))
    n, g = int(config.n_agents), int(config.n_clusters)
    spec = config.instruments
    clusters = rng.integers(0, g, n)
    cluster_premium = rng.normal(spec.premium_mean, spec.premium_cluster_sd, g)
    cell_noise = rng.normal(0.0, spec.premium_cell_sd, (g, 2))
    cell_premium = np.round(cluster_premium[:, None] + cell_noise, 2)
    plan_type = (rng.random(n) < spec.managed_share).astype(int)
    premium = cell_premium[clusters, plan_type]
    if spec.premium_individual_sd > 0:
        premium = np.round(premium + rng.normal(0.0, spec.premium_individual_sd, n), 2)
    suppl = (rng.random(n) < spec.suppl_prob).astype(float)
    instruments = np.column_stack([premium, suppl])
    if config.covariates:
        covariates = np.column_stack([c.draw(rng, n) for c in config.covariates])
    else:
        covariates = np.empty((n, 0))
    errors = rng.standard_normal((n, 3)) @ _sqrt_psd(np.asarray(config.sigma)).T
    p_true = ndtr(_selection_index(config, instruments, covariates))
    return SyntheticPanel(config, covariates, instruments, clusters, plan_type,
                          errors[:, 0], errors[:, 1], errors[:, 2], p_true)


def simulate_roy(config: DgpConfig) -> tuple[SyntheticPanel, MteOracle]:
    """Draw a Roy-model panel and return it with its MTE oracle.

    ``D = 1`` iff the selection index exceeds ``V``; potential outcomes are
    linear in the covariates plus ``omega0`` / ``omega1``.
    """
    panel = draw_population(config)
    index = panel.selection_index()
    d = (index - panel.v > 0).astype(int)
    X = panel.covariates
    y0 = config.alpha0 + X @ np.asarray(config.beta0) + panel.omega0
    y1 = config.alpha1 + X @ np.asarray(config.beta1) + panel.omega1
    y = np.where(d == 1, y1, y0)
    return replace(panel, d=d, y0=y0, y1=y1, y=y), config.oracle()


# values written for pipeline fields that the DGP does not draw
PIPELINE_FILLERS = {
    "age": 50, "gender": 0, "educ_years": 14, "hh_size": 2, "income_pm": 60000,
    "employment": "active", "subsidy": 0, "self_health": 2, "illness": 0,
    "chronic": 0, "smoke": 0, "phys_act": 1, "med_need": 0,
}
_EXPORT_YEARS = (2017, 2018, 2019)


def export_pipeline(panel: SyntheticPanel, lowest=300, highest=2500):
    """Render a simulated Roy panel as raw pipeline input.

    Returns ``(panel_frame, premium_table)``.  Each agent becomes a person
    observed in 2017, 2018 and 2019 with identical characteristics, so the
    2019 wave is estimable and every person is stable across 2018-2019.
    Treated agents hold the ``lowest`` deductible and untreated agents the
    ``highest``.  ``visits`` carries ``exp(y)`` at full
    float precision so that ``log(visits)`` reproduces the latent outcome.
    The premium table lists three insurers per (canton, plan type,
    deductible) cell whose mean equals the drawn instrument; premiums do not
    vary with the deductible, so the joined instrument is independent of the
    chosen arm.
    """
    if panel.y is None:
        raise ValueError("panel has no outcomes; run simulate_roy")
    config = panel.config
    if config.n_clusters > len(market.CANTONS):
        raise ValueError(f"export supports at most {len(market.CANTONS)} clusters (cantons)")
    unknown = [c for c in config.covariate_names if c not in PIPELINE_FILLERS]
    if unknown:
        raise ValueError(f"covariates without a pipeline column: {', '.join(unknown)}")
    cantons = np.asarray(market.CANTONS)[panel.clusters]
    plan = np.where(panel.plan_type == 1, "managed", "free")
    base = {name: np.full(panel.n, value, dtype=object) for name, value in PIPELINE_FILLERS.items()}
    for j, spec in enumerate(config.covariates):
        col = panel.covariates[:, j]
        base[spec.name] = col.astype(int) if spec.integer_valued else col
    rows = []
    for year in _EXPORT_YEARS:
        frame = pd.DataFrame({
            "person_id": np.arange(1, panel.n + 1),
            "year": year,
            "canton": cantons,
            "age": base["age"],
            "gender": base["gender"],
            "educ_years": base["educ_years"],
            "hh_size": base["hh_size"],
            "income_pm": base["income_pm"],
            "employment": base["employment"],
            "subsidy": base["subsidy"],
            "suppl_ins": panel.instruments[:, 1].astype(int),
            "deductible": np.where(panel.d == 1, lowest, highest),
            "plan_type": plan,
            "visits": np.exp(panel.y),
            "self_health": base["self_health"],
            "illness": base["illness"],
            "chronic": base["chronic"],
            "smoke": base["smoke"],
            "phys_act": base["phys_act"],
            "med_need": base["med_need"],
        })
        rows.append(frame)
    out = pd.concat(rows, ignore_index=True).sort_values(["person_id", "year"], kind="stable")

    premium_rows = []
    cells = {}
    for c, t, prem in zip(panel.clusters, panel.plan_type, panel.instruments[:, 0]):
        cells[(int(c), int(t))] = float(prem)
    for (c, t), prem in sorted(cells.items()):
        for ded in market.DEDUCTIBLES:
            for k, offset in enumerate((-10.0, 0.0, 10.0)):
                premium_rows.append(market.PremiumRow(
                    market.CANTONS[c], "adult", ded, "managed" if t else "free",
                    f"INS{k + 1}", round(prem + offset, 2)))
    return out.reset_index(drop=True), market.PremiumTable(tuple(premium_rows))


@dataclass(frozen=True)
class StructuralPanel:
    """Outcome of routing structural agents through a priced plan menu."""

    cluster: np.ndarray
    deductible: np.ndarray
    plan_index: np.ndarray
    copay: np.ndarray
    premium: np.ndarray
    lowest_premium: np.ndarray
    expected_need: np.ndarray
    omega: np.ndarray
    high_need: np.ndarray
    lambda_realized: np.ndarray
    m_star: np.ndarray
    visits: np.ndarray

    def to_mte_data(self, treatment="lowest", need_proxy=False) -> MteData:
        """Log visits on the lowest/highest-deductible indicator.

        The instrument is the cluster's premium for the lowest-deductible
        plan.  By default there are no covariates: conditioning on expected
        need holds fixed the channel through which moral hazard drives plan
        choice, since period-1 utility counts money only.  ``need_proxy=True``
        adds expected need as a covariate.
        """
        if treatment not in ("lowest", "highest"):
            raise ValueError(f"unknown treatment side {treatment!r}")
        target = min(market.DEDUCTIBLES) if treatment == "lowest" else max(market.DEDUCTIBLES)
        d = (self.deductible == target).astype(int)
        X = self.expected_need[:, None] if need_proxy else np.empty((d.size, 0))
        return MteData(np.log(self.visits), d, X, self.lowest_premium[:, None], self.cluster,
                       ("expected_need",) if need_proxy else (), ("lowest_premium",))


def simulate_structural(prefs_population: Sequence[model.AgentPreferences],
                        menu, shock_probabilities=None, clusters=None,
                        visits_per_chf=0.002, seed=0) -> StructuralPanel:
    """Simulate plan choice and care use for a population of structural agents.

    Parameters
    ----------
    menu : sequence of (PlanSpec, annual premium) or mapping cluster -> such sequence
        Plans on offer; a mapping gives each cluster its own prices.
    shock_probabilities : sequence of float, optional
        Probability of the high-need state per agent; defaults to each
        agent's ``p_high``.
    clusters : sequence of int, optional
        Cluster (canton) of each agent; required when ``menu`` is a mapping.
    visits_per_chf : float
        Mean additional doctor visits per CHF of care spending.

    Each agent faces, for every plan, the co-payment rate in force at its
    expected need (``market.marginal_price``) and picks the plan with
    ``model.choose_plan``.  Visits are ``1 + Poisson(visits_per_chf *
    max(0, m*))`` so every record has at least one visit.
    """
    n = len(prefs_population)
    rng = np.random.default_rng(int(seed))
    if isinstance(menu, Mapping):
        if clusters is None:
            raise ValueError("clusters are required when the menu varies by cluster")
        menus = {k: list(v) for k, v in menu.items()}
    else:
        menus = {0: list(menu)}
        clusters = np.zeros(n, dtype=int) if clusters is None else clusters
    clusters = np.asarray(clusters, dtype=int)
    if clusters.shape[0] != n:
        raise ValueError("one cluster id per agent is required")
    for key, plans in menus.items():
        if not plans:
            raise ValueError(f"empty menu for cluster {key}")
        for plan, premium in plans:
            if not isinstance(plan, market.PlanSpec):
                raise TypeError("menu entries must be (PlanSpec, premium) pairs")
    probs = (np.array([a.p_high for a in prefs_population]) if shock_probabilities is None
             else np.asarray(shock_probabilities, dtype=float))
    if probs.shape[0] != n or np.any((probs < 0) | (probs > 1)):
        raise ValueError("shock probabilities must be one value in [0, 1] per agent")

    out = {name: np.empty(n) for name in ("deductible", "plan_index", "copay", "premium",
                                          "lowest_premium", "expected_need", "omega",
                                          "high_need", "lambda_realized", "m_star", "visits")}
    for i, prefs in enumerate(prefs_population):
        plans = menus[int(clusters[i])] if isinstance(menu, Mapping) else menus[0]
        agent = replace(prefs, p_high=float(probs[i]))
        e_need = agent.expected_need
        choices = [(market.marginal_price(e_need, plan.deductible), float(premium))
                   for plan, premium in plans]
        try:
            k = model.choose_plan(agent, choices)
        except model.BankruptcyError:
            raise model.BankruptcyError(f"agent {i} cannot afford any plan on the menu") from None
        c, premium = choices[k]
        high = rng.random() < agent.p_high
        lam = agent.lambda_high if high else agent.lambda_low
        m_star = model.optimal_utilization(agent.omega, c, lam)
        out["deductible"][i] = plans[k][0].deductible
        out["plan_index"][i] = k
        out["copay"][i] = c
        out["premium"][i] = premium
        out["lowest_premium"][i] = min(float(p) for plan, p in plans
                                       if plan.deductible == min(q.deductible for q, _ in plans))
        out["expected_need"][i] = e_need
        out["omega"][i] = agent.omega
        out["high_need"][i] = high
        out["lambda_realized"][i] = lam
        out["m_star"][i] = m_star
        out["visits"][i] = 1 + rng.poisson(visits_per_chf * max(0.0, m_star))
    return StructuralPanel(
        cluster=clusters,
        deductible=out["deductible"].astype(int),
        plan_index=out["plan_index"].astype(int),
        copay=out["copay"],
        premium=out["premium"],
        lowest_premium=out["lowest_premium"],
        expected_need=out["expected_need"],
        omega=out["omega"],
        high_need=out["high_need"].astype(bool),
        lambda_realized=out["lambda_realized"],
        m_star=out["m_star"],
        visits=out["visits"].astype(int),
    )
