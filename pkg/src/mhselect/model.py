"""
Two-period model of coverage choice under heterogeneous moral hazard.

Period 2: given a co-payment rate ``c`` and a realized need ``lambda``, the
agent picks care spending ``m`` to maximise a quadratic health benefit plus
money left over.  Period 1: the agent evaluates the expected log of money
left over across a high and a low need state and picks a co-payment rate
(continuous) or a plan from a discrete menu.

Note on the period-1 problem
----------------------------
Out-of-pocket spending ``c * m*(c)`` is concave in ``c``, so money left over
is convex in ``c`` and the stationary point returned by
:func:`optimal_copayment` is where the expected log objective is *lowest*
over the interval between the two single-state stationary points.  It is the
root of the exact first-order condition and reduces to the familiar closed
form (:func:`copayment_closed_form`) when income is large relative to
spending.  Discrete choice over a plan menu (:func:`choose_plan`) maximises
the objective directly and is what the simulators use.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from typing import NamedTuple, Sequence

from scipy.optimize import brentq

__all__ = [
    "AgentPreferences",
    "LinearTariff",
    "UtilitySnapshot",
    "CopaymentSolution",
    "BankruptcyError",
    "health_utility",
    "money_utility",
    "period2_utility",
    "optimal_utilization",
    "expected_period1_utility",
    "copayment_closed_form",
    "optimal_copayment",
    "foc_residual",
    "foc_residual_analytic",
    "choose_plan",
]

FOC_STEP = 1e-6


class BankruptcyError(ValueError):
    """Raised when money left over is non-positive, so log utility is undefined."""


@dataclass(frozen=True)
class AgentPreferences:
    """Structural parameters of one agent.

    Parameters
    ----------
    omega : float
        Moral-hazard coefficient (monetized care units), > 0.
    lambda_high, lambda_low : float
        Need realizations in money units, ``lambda_high > lambda_low >= 0``.
    p_high : float
        Probability of the high-need state.
    income : float
        Period income, > 0.
    """

    omega: float
    lambda_high: float
    lambda_low: float
    p_high: float
    income: float

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError(f"omega must be positive, got {self.omega}")
        if not self.lambda_high > self.lambda_low >= 0:
            raise ValueError("need lambda_high > lambda_low >= 0")
        if not 0.0 <= self.p_high <= 1.0:
            raise ValueError(f"p_high must lie in [0, 1], got {self.p_high}")
        if not self.income > 0:
            raise ValueError(f"income must be positive, got {self.income}")

    @property
    def expected_need(self) -> float:
        return self.p_high * self.lambda_high + (1.0 - self.p_high) * self.lambda_low


@dataclass(frozen=True)
class LinearTariff:
    """Premium as an affine function of the covered share ``1 - c``.

    ``premium(coverage) = base + slope * coverage``; the derivative with
    respect to coverage is ``slope`` (signed).
    """

    base: float
    slope: float

    def __post_init__(self):
        if self.base < 0:
            raise ValueError(f"tariff base must be non-negative, got {self.base}")
        if self.base + self.slope < 0:
            raise ValueError("tariff yields a negative premium at full coverage")

    def premium(self, c: float) -> float:
        return self.base + self.slope * (1.0 - c)


class UtilitySnapshot(NamedTuple):
    health_component: float
    money_component: float
    total: float


class CopaymentSolution(NamedTuple):
    rate: float
    unclamped: float
    at_boundary: bool


def _check_rate(c):
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"co-payment rate must lie in [0, 1], got {c}")


def health_utility(m, lam, omega):
    """Monetized health benefit ``(m - lam) - (m - lam)**2 / (2 omega)``."""
    if not omega > 0:
        raise ValueError(f"omega must be positive, got {omega}")
    net = m - lam
    return net - net * net / (2.0 * omega)


def money_utility(m, c, tariff: LinearTariff, income):
    """Money left over after co-payments and the premium."""
    _check_rate(c)
    return income - c * m - tariff.premium(c)


def period2_utility(m, prefs: AgentPreferences, lambda_realized, c, tariff: LinearTariff):
    health = health_utility(m, lambda_realized, prefs.omega)
    money = money_utility(m, c, tariff, prefs.income)
    return UtilitySnapshot(health, money, health + money)


def optimal_utilization(omega, c, lambda_realized):
    """Period-2 optimal spending ``omega * (1 - c) + lambda``."""
    if not omega > 0:
        raise ValueError(f"omega must be positive, got {omega}")
    _check_rate(c)
    return omega * (1.0 - c) + lambda_realized


def _money_left(c, prefs, lam, premium):
    return prefs.income - c * (prefs.omega * (1.0 - c) + lam) - premium


def _state_money(c, prefs, tariff):
    premium = tariff.premium(c)
    return (_money_left(c, prefs, prefs.lambda_high, premium),
            _money_left(c, prefs, prefs.lambda_low, premium))


def _expected_log(p, a_high, a_low):
    # degenerate probabilities drop the other state entirely
    terms = []
    if p > 0:
        if a_high <= 0:
            raise BankruptcyError(f"money left in the high-need state is {a_high:.6g}")
        terms.append(p * math.log(a_high))
    if p < 1:
        if a_low <= 0:
            raise BankruptcyError(f"money left in the low-need state is {a_low:.6g}")
        terms.append((1.0 - p) * math.log(a_low))
    return math.fsum(terms)


def expected_period1_utility(c, prefs: AgentPreferences, tariff: LinearTariff):
    """Expected log money over the two need states at co-payment rate ``c``.

    Raises
    ------
    BankruptcyError
        If money left over is non-positive in a state with positive probability.
    """
    _check_rate(c)
    a_high, a_low = _state_money(c, prefs, tariff)
    return _expected_log(prefs.p_high, a_high, a_low)


def _eu_unchecked(c, prefs, tariff):
    a_high, a_low = _state_money(c, prefs, tariff)
    return _expected_log(prefs.p_high, a_high, a_low)


def copayment_closed_form(prefs: AgentPreferences, tariff: LinearTariff) -> float:
    """Certainty-equivalent stationary point ``1/2 + (E[lambda] - slope) / (2 omega)``.

    Unclamped; exact when the marginal utility of money is equal across states.
    """
    return 0.5 + (prefs.expected_need - tariff.slope) / (2.0 * prefs.omega)


def _foc_numerator(c, prefs, tariff):
    # d/dc of money in state t: -omega + 2 c omega - lambda_t + slope
    w, s, p = prefs.omega, tariff.slope, prefs.p_high
    a_high, a_low = _state_money(c, prefs, tariff)
    d_high = -w + 2.0 * c * w - prefs.lambda_high + s
    d_low = -w + 2.0 * c * w - prefs.lambda_low + s
    return p * d_high * a_low + (1.0 - p) * d_low * a_high


def foc_residual_analytic(c, prefs: AgentPreferences, tariff: LinearTariff):
    """Exact derivative of :func:`expected_period1_utility` in ``c``."""
    a_high, a_low = _state_money(c, prefs, tariff)
    if (prefs.p_high > 0 and a_high <= 0) or (prefs.p_high < 1 and a_low <= 0):
        raise BankruptcyError("objective undefined at this co-payment rate")
    w, s, p = prefs.omega, tariff.slope, prefs.p_high
    total = 0.0
    if p > 0:
        total += p * (-w + 2.0 * c * w - prefs.lambda_high + s) / a_high
    if p < 1:
        total += (1.0 - p) * (-w + 2.0 * c * w - prefs.lambda_low + s) / a_low
    return total


def foc_residual(c, prefs: AgentPreferences, tariff: LinearTariff, step: float = FOC_STEP):
    """Central-difference derivative of the period-1 objective at ``c``.

    The rate is not restricted to [0, 1] so the derivative can be taken at
    (or just past) a boundary.
    """
    up = _eu_unchecked(c + step, prefs, tariff)
    down = _eu_unchecked(c - step, prefs, tariff)
    return (up - down) / (2.0 * step)


def optimal_copayment(prefs: AgentPreferences, tariff: LinearTariff) -> CopaymentSolution:
    """Root of the exact first-order condition of the period-1 objective.

    The root lies between the two single-state stationary points
    ``1/2 + (lambda_t - slope) / (2 omega)``; it is found by bracketing on the
    polynomial form of the condition, then clamped to [0, 1].

    Raises
    ------
    BankruptcyError
        If money left over is non-positive at the root, or the objective is
        undefined over all of [0, 1].
    """
    w, s = prefs.omega, tariff.slope
    c_high = 0.5 + (prefs.lambda_high - s) / (2.0 * w)
    c_low = 0.5 + (prefs.lambda_low - s) / (2.0 * w)
    p = prefs.p_high
    if p >= 1.0:
        root = c_high
    elif p <= 0.0:
        root = c_low
    else:
        f_lo = _foc_numerator(c_low, prefs, tariff)
        f_hi = _foc_numerator(c_high, prefs, tariff)
        if not (f_lo <= 0.0 <= f_hi):
            raise BankruptcyError("first-order condition has no root with positive money in both states")
        root = brentq(_foc_numerator, c_low, c_high, args=(prefs, tariff),
                      xtol=1e-15, rtol=4 * sys.float_info.epsilon, maxiter=200)

    rate = min(max(root, 0.0), 1.0)
    try:
        _eu_unchecked(rate, prefs, tariff)
    except BankruptcyError:
        if not any(_feasible(c, prefs, tariff) for c in (0.0, 0.25, 0.5, 0.75, 1.0)):
            raise BankruptcyError("objective undefined over all of [0, 1]") from None
        raise
    return CopaymentSolution(rate, root, rate != root)


def _feasible(c, prefs, tariff):
    try:
        _eu_unchecked(c, prefs, tariff)
    except BankruptcyError:
        return False
    return True


def choose_plan(prefs: AgentPreferences, menu: Sequence[tuple[float, float]]) -> int:
    """Index of the menu entry with the highest expected period-1 utility.

    Each entry is ``(co-payment rate, premium)`` with the premium already
    evaluated.  Ties go to the lowest co-payment rate, then the earliest
    entry.  Infeasible entries (bankruptcy in some state) are skipped.
    """
    if len(menu) == 0:
        raise ValueError("plan menu is empty")
    best_idx, best_key = -1, None
    for idx, (c, premium) in enumerate(menu):
        _check_rate(c)
        try:
            value = _eu_unchecked(c, prefs, LinearTariff(premium, 0.0))
        except BankruptcyError:
            continue
        key = (value, -c)
        if best_key is None or key > best_key:
            best_idx, best_key = idx, key
    if best_idx < 0:
        raise BankruptcyError("every plan in the menu is infeasible for this agent")
    return best_idx
