from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate
from scipy.special import ndtr

from mhselect import market, model, pipeline
from mhselect.econometrics import mte_parametric, probit_fit
from mhselect.synthgen import (
    CovariateSpec,
    DgpConfig,
    InstrumentSpec,
    MteOracle,
    draw_population,
    export_pipeline,
    simulate_roy,
    simulate_structural,
    true_mte,
)

AGE = CovariateSpec("age", "randint", (26, 80))
CHRONIC = CovariateSpec("chronic", "bernoulli", (0.3,))
IDENTITY = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


def config(n=2000, psi=(5.0, -0.01, 0.5, -0.02, 0.3), sigma=IDENTITY, **kw):
    base = dict(n_agents=n, covariates=(AGE, CHRONIC), psi=psi, alpha0=1.0, alpha1=1.35,
                beta0=(0.01, 0.3), beta1=(0.01, 0.3), sigma=sigma,
                instruments=InstrumentSpec(500.0, 120.0, 40.0), n_clusters=26, seed=11)
    base.update(kw)
    return DgpConfig(**base)


# --- configuration ----------------------------------------------------------

@pytest.mark.parametrize("change, match", [
    (dict(n_agents=0), "n_agents"),
    (dict(n_clusters=0), "n_clusters"),
    (dict(seed=-1), "seed"),
    (dict(psi=(1.0, 2.0)), "psi needs 5"),
    (dict(beta1=(0.0,)), "beta0 and beta1"),
    (dict(sigma=((1, 0.5, 0), (0.4, 1, 0), (0, 0, 1))), "symmetric"),
    (dict(sigma=((1, 0, 0), (0, 1, 0), (0, 0, 2))), "Var"),
    (dict(sigma=((1, 0, 0.9), (0, 1, 0.9), (0.9, 0.9, 1))), "positive semi-definite"),
])
def test_config_validation(change, match):
    with pytest.raises(ValueError, match=match):
        config(**change)


@pytest.mark.parametrize("dist, params", [("gamma", (1.0,)), ("normal", (0.0,)),
                                          ("bernoulli", (1.5,)), ("uniform", (2.0, 1.0))])
def test_covariate_spec_validation(dist, params):
    with pytest.raises(ValueError):
        CovariateSpec("x", dist, params)


def test_oracle_cov_gap_matches_sigma():
    sigma = ((0.2, -0.16, 0.4), (-0.16, 0.2, -0.4), (0.4, -0.4, 1.0))
    oracle = config(sigma=sigma).oracle()
    assert oracle.cov_gap == pytest.approx(-0.8)
    assert oracle.delta_intercept == pytest.approx(0.35)
    assert oracle.delta_beta == (0.0, 0.0)


# --- population -------------------------------------------------------------

def test_draw_is_deterministic():
    a, b = draw_population(config()), draw_population(config())
    for field in ("covariates", "instruments", "clusters", "omega0", "omega1", "v", "p_true"):
        assert np.array_equal(getattr(a, field), getattr(b, field))
    assert a.to_frame().to_csv() == b.to_frame().to_csv()


def test_identity_sigma_gives_uncorrelated_errors():
    panel = draw_population(config(n=100000))
    corr = np.corrcoef(np.column_stack([panel.omega0, panel.omega1, panel.v]).T)
    off = corr[np.triu_indices(3, 1)]
    assert np.all(np.abs(off) < 0.05)


def test_correlated_sigma_is_reproduced():
    sigma = ((0.2, -0.16, 0.4), (-0.16, 0.2, -0.4), (0.4, -0.4, 1.0))
    panel = draw_population(config(n=100000, sigma=sigma))
    cov = np.cov(np.column_stack([panel.omega0, panel.omega1, panel.v]).T)
    assert np.allclose(cov, sigma, atol=0.02)


def test_single_cluster():
    panel = draw_population(config(n_clusters=1))
    assert np.all(panel.clusters == panel.clusters[0])


def test_premium_is_cell_level():
    panel = draw_population(config())
    frame = panel.to_frame()
    assert frame.groupby(["cluster", "plan_type"])["avg_premium"].nunique().max() == 1


def test_individual_premium_noise():
    panel = draw_population(config(instruments=InstrumentSpec(premium_individual_sd=5.0)))
    frame = panel.to_frame()
    assert frame.groupby(["cluster", "plan_type"])["avg_premium"].nunique().max() > 1


# --- Roy outcomes -----------------------------------------------------------

def test_switching_identity_and_selection_rule():
    panel, _ = simulate_roy(config(sigma=((0.2, -0.16, 0.4), (-0.16, 0.2, -0.4), (0.4, -0.4, 1.0))))
    assert np.array_equal(panel.y, (1 - panel.d) * panel.y0 + panel.d * panel.y1)
    assert np.array_equal(panel.d == 1, panel.selection_index() - panel.v > 0)


def test_huge_intercept_treats_everyone():
    panel, _ = simulate_roy(config(psi=(50.0, 0.0, 0.0, 0.0, 0.0)))
    assert panel.d.mean() > 0.999


def test_treatment_rate_matches_true_propensity():
    panel, _ = simulate_roy(config(n=100000))
    assert abs(panel.d.mean() - ndtr(panel.selection_index()).mean()) < 0.01


def test_zero_cov_gap_gives_flat_gain_across_propensity_bins():
    sigma = ((0.5, 0.2, 0.3), (0.2, 0.5, 0.3), (0.3, 0.3, 1.0))
    panel, oracle = simulate_roy(config(n=100000, sigma=sigma))
    assert oracle.cov_gap == pytest.approx(0.0)
    gain = panel.y1 - panel.y0
    bins = np.digitize(panel.p_true, [0.2, 0.4, 0.6, 0.8])
    means = [gain[(bins == b) & (panel.d == 1)].mean() for b in range(5)]
    assert np.ptp(means) < 0.05


def test_zero_instrument_coefficients_give_no_instrument_signal():
    panel, _ = simulate_roy(config(n=20000, psi=(0.5, 0.0, 0.0, -0.01, 0.3)))
    data = panel.to_mte_data()
    fit = probit_fit(data.d, data.first_stage_design())
    z = fit.coef[1:3] / fit.std_errors[1:3]
    assert np.all(np.abs(z) < 3)


def test_highest_side_relabels_treatment():
    panel, _ = simulate_roy(config())
    assert np.array_equal(panel.to_mte_data("highest").d, 1 - panel.d)


# --- oracle -----------------------------------------------------------------

def test_true_mte_values():
    oracle = MteOracle(0.35, (0.0,), -0.8)
    assert true_mte(oracle, [1.0], 0.25) == pytest.approx(0.8896, abs=5e-5)
    assert true_mte(oracle, [1.0], 0.5) == pytest.approx(0.35, abs=1e-15)
    flat = MteOracle(0.2, (0.5,), 0.0)
    assert np.allclose(true_mte(flat, [2.0], [0.1, 0.5, 0.9]), 1.2)


@pytest.mark.parametrize("u", [0.0, 1.0, -0.1, np.nan])
def test_true_mte_rejects_boundary(u):
    with pytest.raises(ValueError):
        true_mte(MteOracle(0.0, (), 1.0), [], u)


def test_true_mte_integrates_to_ate():
    oracle = MteOracle(0.35, (0.1, -0.2), -0.8)
    x = np.array([2.0, 1.0])
    value, _ = integrate.quad(lambda u: true_mte(oracle, x, u), 0, 1, limit=200)
    assert value == pytest.approx(oracle.ate(x), abs=1e-6)


def test_oracle_dict_round_trip():
    oracle = MteOracle(0.35, (0.1, -0.2), -0.8)
    assert MteOracle.from_dict(oracle.to_dict()) == oracle


# --- pipeline export --------------------------------------------------------

def test_export_round_trips_through_pipeline():
    panel, _ = simulate_roy(config(n=500, sigma=((0.2, -0.16, 0.4), (-0.16, 0.2, -0.4), (0.4, -0.4, 1.0))))
    frame, premiums = export_pipeline(panel)
    assert list(frame.columns) == list(pipeline.PANEL_COLUMNS)
    sample = pipeline.build_sample(frame.to_csv(index=False), premiums)
    rows = sample.rows.sort_values("person_id")
    keep = rows["person_id"].to_numpy() - 1
    assert np.allclose(rows["log_visits"].to_numpy(), panel.y[keep], atol=1e-12)
    assert np.allclose(rows["avg_premium"].to_numpy(), panel.instruments[keep, 0], atol=1e-9)
    assert np.array_equal(sample.data.d[np.argsort(sample.rows["person_id"].to_numpy())], panel.d[keep])


def test_export_rejects_unknown_covariates():
    cfg = config(covariates=(CovariateSpec("zeta", "normal", (0.0, 1.0)),), psi=(0.0, 0.0, 0.0, 0.0),
                 beta0=(0.0,), beta1=(0.0,))
    panel, _ = simulate_roy(cfg)
    with pytest.raises(ValueError, match="zeta"):
        export_pipeline(panel)


# --- structural -------------------------------------------------------------

MENU = [(market.PlanSpec(d), 1500.0 - 0.2 * d) for d in market.DEDUCTIBLES]


def test_identical_agents_single_plan_identical_records():
    agent = model.AgentPreferences(800.0, 2000.0, 300.0, 0.0, 60000.0)
    sp = simulate_structural([agent] * 5, MENU[:1], seed=1)
    for field in ("deductible", "copay", "premium", "m_star", "lambda_realized"):
        assert len(set(getattr(sp, field))) == 1
    # visit counts are Poisson draws; without the draw the records coincide
    flat = simulate_structural([agent] * 5, MENU[:1], visits_per_chf=0.0, seed=1)
    assert np.all(flat.visits == 1)


def test_copayment_is_marginal_price_at_expected_need():
    rng = np.random.default_rng(0)
    agents = [model.AgentPreferences(w, lo + 1500, lo, 0.2, 60000.0)
              for w, lo in zip(rng.uniform(200, 2000, 50), rng.uniform(0, 8000, 50))]
    sp = simulate_structural(agents, MENU, seed=2)
    for i, a in enumerate(agents):
        assert sp.copay[i] == market.marginal_price(a.expected_need, sp.deductible[i])
        c = sp.copay[i]
        assert sp.m_star[i] == model.optimal_utilization(a.omega, c, sp.lambda_realized[i])
    assert np.all(sp.visits >= 1)


def test_structural_menu_needs_clusters():
    agent = model.AgentPreferences(800.0, 2000.0, 300.0, 0.2, 60000.0)
    with pytest.raises(ValueError):
        simulate_structural([agent], {0: MENU})


def moral_hazard_population(seed, n=6000, n_clusters=26):
    """omega raises the chance of the high-need state; need levels do not depend on omega."""
    rng = np.random.default_rng(seed)
    omega = rng.uniform(200, 2000, n)
    low = np.clip(rng.normal(300, 80, n), 0, None)
    p_high = 0.05 + 0.5 * (omega - 200) / 1800
    agents = [model.AgentPreferences(w, lo + 1500, lo, p, 60000.0) for w, lo, p in zip(omega, low, p_high)]
    clusters = rng.integers(0, n_clusters, n)
    gap = rng.normal(500, 150, n_clusters)
    menu = {g: [(market.PlanSpec(300), 1500.0 + gap[g]), (market.PlanSpec(2500), 1500.0)]
            for g in range(n_clusters)}
    return agents, menu, clusters


@pytest.mark.parametrize("seed", [3, 4])
def test_selection_on_moral_hazard_gives_declining_mte(seed):
    agents, menu, clusters = moral_hazard_population(seed)
    sp = simulate_structural(agents, menu, clusters=clusters, visits_per_chf=0.005, seed=seed)
    data = sp.to_mte_data()
    assert np.corrcoef(sp.omega, data.d)[0, 1] > 0.3
    fit = mte_parametric(data)
    assert fit.cov_gap < 0
    assert np.all(np.diff(fit.mte_table) < 0)


def test_structural_need_proxy_is_optional():
    agents, menu, clusters = moral_hazard_population(0, n=300)
    sp = simulate_structural(agents, menu, clusters=clusters, seed=0)
    assert sp.to_mte_data().covariates.shape == (300, 0)
    assert sp.to_mte_data(need_proxy=True).covariate_names == ("expected_need",)


def test_structural_is_deterministic():
    agents, menu, clusters = moral_hazard_population(1, n=200)
    a = simulate_structural(agents, menu, clusters=clusters, seed=9)
    b = simulate_structural(agents, menu, clusters=clusters, seed=9)
    assert np.array_equal(a.visits, b.visits) and np.array_equal(a.deductible, b.deductible)


def test_with_seed_changes_only_seed():
    cfg = config()
    assert replace(cfg.with_seed(5), seed=cfg.seed) == cfg
