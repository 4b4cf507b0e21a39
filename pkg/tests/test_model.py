import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from mhselect import model
from mhselect.model import AgentPreferences, BankruptcyError, LinearTariff


def prefs(omega=2.0, high=3.0, low=1.0, p=0.3, income=50.0):
    return AgentPreferences(omega, high, low, p, income)


FLAT = LinearTariff(2.0, 0.0)


# --- period 2 ---------------------------------------------------------------

@pytest.mark.parametrize("m, lam, omega, expected", [
    (5.0, 5.0, 2.0, 0.0),
    (7.0, 5.0, 2.0, 1.0),
])
def test_health_utility_values(m, lam, omega, expected):
    assert model.health_utility(m, lam, omega) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("lam, omega", [(0.0, 1.0), (5.0, 2.0), (3.5, 0.25), (10.0, 7.0)])
def test_health_utility_argmax_on_grid(lam, omega):
    grid = np.linspace(lam - 3 * omega, lam + 3 * omega, 60001)
    best = grid[np.argmax(model.health_utility(grid, lam, omega))]
    assert best == pytest.approx(lam + omega, abs=grid[1] - grid[0])


@pytest.mark.parametrize("omega", [0.0, -1.0])
def test_health_utility_rejects_nonpositive_omega(omega):
    with pytest.raises(ValueError):
        model.health_utility(1.0, 0.0, omega)


@pytest.mark.parametrize("m, c, base, slope, y, expected", [
    (0.0, 0.0, 0.0, 0.0, 10.0, 10.0),
    (4.0, 0.5, 1.0, 2.0, 10.0, 6.0),
])
def test_money_utility_values(m, c, base, slope, y, expected):
    assert model.money_utility(m, c, LinearTariff(base, slope), y) == pytest.approx(expected)


@pytest.mark.parametrize("m", [0.0, 1.5, 8.0])
def test_money_utility_full_copayment(m):
    assert model.money_utility(m, 1.0, LinearTariff(3.0, 0.0), 20.0) == pytest.approx(20.0 - m - 3.0)


@pytest.mark.parametrize("c", [-0.01, 1.01])
def test_money_utility_rejects_rate_outside_unit_interval(c):
    with pytest.raises(ValueError):
        model.money_utility(1.0, c, FLAT, 10.0)


@pytest.mark.parametrize("omega, c, lam, expected", [
    (2.0, 0.5, 1.0, 2.0),
    (3.0, 1.0, 4.0, 4.0),
    (3.0, 0.0, 4.0, 7.0),
])
def test_optimal_utilization_values(omega, c, lam, expected):
    assert model.optimal_utilization(omega, c, lam) == pytest.approx(expected)


@pytest.mark.parametrize("c, lam", [(0.0, 1.0), (0.3, 2.0), (0.9, 0.5)])
def test_period2_optimum_attains_grid_maximum(c, lam):
    agent = prefs(omega=2.5)
    tariff = LinearTariff(1.0, 0.5)
    m_star = model.optimal_utilization(agent.omega, c, lam)
    grid = np.linspace(0.0, 10.0, 100001)
    totals = model.period2_utility(grid, agent, lam, c, tariff).total
    assert grid[np.argmax(totals)] == pytest.approx(m_star, abs=1e-4)


def test_period2_snapshot_is_additive():
    snap = model.period2_utility(3.0, prefs(), 1.0, 0.2, LinearTariff(1.0, 0.5))
    assert snap.total == snap.health_component + snap.money_component


def test_period2_optimum_tends_to_need_as_omega_vanishes():
    assert model.optimal_utilization(1e-9, 0.0, 2.0) == pytest.approx(2.0, abs=1e-8)


@given(omega=st.floats(0.1, 10), c=st.floats(0, 0.99), lam=st.floats(0, 10),
       bump=st.floats(0.01, 1))
def test_optimal_utilization_monotone(omega, c, lam, bump):
    m = model.optimal_utilization(omega, c, lam)
    assert model.optimal_utilization(omega, min(c + bump, 1.0), lam) < m
    assert model.optimal_utilization(omega + bump, c, lam) > m
    assert model.optimal_utilization(omega, c, lam + bump) > m


# --- period 1 ---------------------------------------------------------------

def test_degenerate_probabilities_collapse_to_single_state():
    tariff = LinearTariff(2.0, 1.0)
    c = 0.4
    for p, lam in ((1.0, 3.0), (0.0, 1.0)):
        agent = prefs(p=p)
        money = agent.income - c * (agent.omega * (1 - c) + lam) - tariff.premium(c)
        assert model.expected_period1_utility(c, agent, tariff) == pytest.approx(math.log(money), abs=1e-15)


@pytest.mark.parametrize("omega, high, low", [(1.0, 2.0, 0.5), (4.0, 9.0, 3.0)])
def test_zero_copayment_utility_ignores_need(omega, high, low):
    tariff = LinearTariff(3.0, 1.0)
    value = model.expected_period1_utility(0.0, prefs(omega, high, low), tariff)
    assert value == pytest.approx(math.log(50.0 - tariff.premium(0.0)), abs=1e-15)


def test_bankruptcy_is_a_domain_error():
    poor = prefs(income=2.0)
    with pytest.raises(BankruptcyError):
        model.expected_period1_utility(0.5, poor, LinearTariff(1.0, 0.0))


def test_closed_form_vanishing_bracket():
    agent = AgentPreferences(2.0, 1.0, 0.0, 0.0, 50.0)
    assert model.copayment_closed_form(agent, LinearTariff(1.0, 0.0)) == 0.5
    solution = model.optimal_copayment(agent, LinearTariff(1.0, 0.0))
    assert solution.rate == 0.5 and not solution.at_boundary


def test_closed_form_tends_to_half_for_large_omega():
    agent = AgentPreferences(1e9, 3.0, 1.0, 0.4, 5e10)
    tariff = LinearTariff(2.0, -1.0)
    assert model.copayment_closed_form(agent, tariff) == pytest.approx(0.5, abs=1e-8)
    assert model.optimal_copayment(agent, tariff).rate == pytest.approx(0.5, abs=1e-8)


def test_boundary_case_against_grid():
    # E[lambda] = 1, slope = -1, omega = 2: 0.5 + (1 - (-1)) / 4 = 1
    agent = AgentPreferences(2.0, 1.5, 1.0, 0.0, 50.0)
    tariff = LinearTariff(3.0, -1.0)
    assert model.copayment_closed_form(agent, tariff) == pytest.approx(1.0)
    solution = model.optimal_copayment(agent, tariff)
    assert solution.rate == pytest.approx(1.0)
    grid = np.linspace(0.0, 1.0, 10001)
    values = np.array([model.expected_period1_utility(c, agent, tariff) for c in grid])
    # the objective is convex in c: the stationary point is the grid minimum
    assert grid[np.argmin(values)] == pytest.approx(solution.rate, abs=1e-4)


@pytest.mark.parametrize("agent, tariff", [
    (prefs(2.0, 1.5, 0.2, 0.3, 50.0), LinearTariff(2.0, 0.3)),
    (prefs(1.2, 0.9, 0.1, 0.6, 30.0), LinearTariff(1.0, -0.2)),
    (prefs(4.0, 3.0, 0.5, 0.2, 80.0), LinearTariff(4.0, 1.0)),
])
def test_stationary_point_matches_fine_grid(agent, tariff):
    solution = model.optimal_copayment(agent, tariff)
    assert 0 < solution.rate < 1
    w = agent.omega
    c_low = 0.5 + (agent.lambda_low - tariff.slope) / (2 * w)
    c_high = 0.5 + (agent.lambda_high - tariff.slope) / (2 * w)
    grid = np.arange(max(c_low, 0.0), min(c_high, 1.0), 1e-4)
    values = np.array([model.expected_period1_utility(c, agent, tariff) for c in grid])
    assert grid[np.argmin(values)] == pytest.approx(solution.rate, abs=1e-4)
    # close to, but not exactly, the certainty-equivalent closed form
    assert solution.rate == pytest.approx(model.copayment_closed_form(agent, tariff), abs=0.02)


def test_foc_residual_vanishes_at_solution():
    agent, tariff = prefs(2.0, 1.5, 0.2, 0.3, 50.0), LinearTariff(2.0, 0.3)
    c = model.optimal_copayment(agent, tariff).rate
    assert abs(model.foc_residual(c, agent, tariff)) < 1e-4
    assert abs(model.foc_residual_analytic(c, agent, tariff)) < 1e-8
    eps = 1e-3
    assert model.foc_residual(c - eps, agent, tariff) * model.foc_residual(c + eps, agent, tariff) < 0


def test_foc_residual_at_clamped_upper_bound():
    agent = AgentPreferences(1.0, 3.0, 2.0, 0.5, 50.0)
    tariff = LinearTariff(1.0, 0.0)
    solution = model.optimal_copayment(agent, tariff)
    assert solution.at_boundary and solution.rate == 1.0 and solution.unclamped > 1.0
    # the objective keeps falling toward the stationary point beyond c = 1
    assert model.foc_residual(1.0, agent, tariff) < 0


def test_foc_numeric_matches_analytic():
    agent, tariff = prefs(), LinearTariff(2.0, 0.5)
    for c in (0.1, 0.5, 0.9):
        assert model.foc_residual(c, agent, tariff) == pytest.approx(
            model.foc_residual_analytic(c, agent, tariff), abs=1e-7)


def test_optimal_copayment_infeasible_everywhere():
    with pytest.raises(BankruptcyError):
        model.optimal_copayment(prefs(income=0.5), LinearTariff(1.0, 0.0))


agents = st.builds(
    lambda w, low, gap, p, y: AgentPreferences(w, low + gap, low, p, y),
    st.floats(0.5, 5), st.floats(0, 2), st.floats(0.1, 2), st.floats(0.05, 0.95), st.floats(20, 100),
)


@settings(max_examples=200)
@given(agent=agents, slope=st.floats(-1, 1), scale=st.floats(1.01, 1.5))
def test_copayment_decreases_in_omega(agent, slope, scale):
    tariff = LinearTariff(2.0, slope)
    assume(agent.expected_need - slope > 0)
    base = model.optimal_copayment(agent, tariff)
    more = model.optimal_copayment(replace(agent, omega=agent.omega * scale), tariff)
    assume(0 < base.unclamped < 1 and 0 < more.unclamped < 1)
    assert more.unclamped < base.unclamped


@settings(max_examples=200)
@given(agent=agents, slope=st.floats(-1, 1), shift=st.floats(0.01, 0.5))
def test_copayment_increases_in_expected_need(agent, slope, shift):
    tariff = LinearTariff(2.0, slope)
    base = model.optimal_copayment(agent, tariff)
    shifted = replace(agent, lambda_low=agent.lambda_low + shift, lambda_high=agent.lambda_high + shift)
    more = model.optimal_copayment(shifted, tariff)
    assume(0 < base.unclamped < 1 and 0 < more.unclamped < 1)
    assert more.unclamped > base.unclamped


# --- discrete menu ----------------------------------------------------------

def test_single_entry_menu():
    assert model.choose_plan(prefs(), [(0.3, 2.0)]) == 0


def test_dominated_entry_never_chosen():
    menu = [(0.5, 2.0), (0.2, 2.0)]
    assert model.choose_plan(prefs(), menu) == 1


def test_ties_go_to_lowest_copayment():
    agent = AgentPreferences(1.0, 1.0, 0.0, 0.0, 50.0)
    # zero need and omega: spend omega (1 - c); c = 0 and c = 1 both leave 50 - premium
    menu = [(1.0, 2.0), (0.0, 2.0)]
    assert model.choose_plan(agent, menu) == 1


def test_menu_skips_infeasible_entries():
    agent = prefs(income=5.0)
    assert model.choose_plan(agent, [(0.0, 6.0), (0.5, 1.0)]) == 1
    with pytest.raises(BankruptcyError):
        model.choose_plan(agent, [(0.0, 6.0)])


def test_empty_menu():
    with pytest.raises(ValueError):
        model.choose_plan(prefs(), [])


@pytest.mark.parametrize("seed", range(5))
def test_six_plan_menu_matches_exhaustive_evaluation(seed):
    rng = np.random.default_rng(seed)
    agent = AgentPreferences(rng.uniform(200, 2000), 3000.0, rng.uniform(100, 900), 0.2, 60000.0)
    rates = [1.0, 1.0, 0.1, 0.1, 1.0, 0.1]
    premiums = list(rng.uniform(1200, 2400, 6))
    menu = list(zip(rates, premiums))
    values = [p_ * math.log(agent.income - c * (agent.omega * (1 - c) + agent.lambda_high) - prem)
              + (1 - p_) * math.log(agent.income - c * (agent.omega * (1 - c) + agent.lambda_low) - prem)
              for (c, prem), p_ in zip(menu, [agent.p_high] * 6)]
    assert model.choose_plan(agent, menu) == int(np.argmax(values))


@settings(max_examples=100)
@given(agent=agents, rates=st.lists(st.floats(0, 1), min_size=1, max_size=6),
       premiums=st.lists(st.floats(0.5, 5), min_size=6, max_size=6), extra=st.floats(0.01, 1))
def test_choice_invariant_to_dominated_addition(agent, rates, premiums, extra):
    menu = list(zip(rates, premiums))
    chosen = model.choose_plan(agent, menu)
    c, prem = menu[chosen]
    # same co-payment, strictly higher premium: dominated by the chosen plan
    assert model.choose_plan(agent, menu + [(c, prem + extra)]) == chosen
