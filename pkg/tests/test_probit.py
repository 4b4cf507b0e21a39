import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from mhselect.econometrics import EstimationError, probit_fit, propensity
from mhselect.econometrics.probit import PROPENSITY_CLAMP

from conftest import FIXTURES

# exhaustive grid MLE on the fixture: step 0.01 over [-3, 3]^2, then step 0.001
# over +-0.02 around the coarse optimum
GRID_MLE = (0.241, 0.594)


def load_fixture():
    frame = pd.read_csv(FIXTURES / "probit200.csv")
    d = frame["d"].to_numpy()
    Z = np.column_stack([np.ones(len(frame)), frame["z"].to_numpy()])
    return d, Z


def phi_series(x):
    """Normal CDF from the Taylor series 1/2 + phi(x) sum x^(2k+1) / (2k+1)!!."""
    term, total, k = x, x, 0
    while abs(term) > 1e-18 * max(1.0, abs(total)):
        k += 1
        term *= x * x / (2 * k + 1)
        total += term
    return 0.5 + math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi) * total


def test_fixture_matches_grid_oracle():
    d, Z = load_fixture()
    fit = probit_fit(d, Z)
    assert fit.converged
    assert np.allclose(fit.coef, GRID_MLE, atol=1e-3)


def test_score_is_zero_at_convergence():
    d, Z = load_fixture()
    fit = probit_fit(d, Z)
    index = Z @ fit.coef
    p = ndtr(index)
    pdf = np.exp(-0.5 * index ** 2) / np.sqrt(2 * np.pi)
    score = Z.T @ ((d - p) * pdf / (p * (1 - p)))
    assert np.all(np.abs(score) < 1e-6)
    assert fit.gradient_norm < 1e-8


def test_badly_scaled_columns_converge():
    rng = np.random.default_rng(4)
    income = rng.normal(60000, 15000, 3000)
    d = (1e-5 * (income - 60000) + rng.standard_normal(3000) > 0).astype(int)
    fit = probit_fit(d, np.column_stack([np.ones(3000), income]))
    assert fit.converged
    assert fit.coef[1] == pytest.approx(1e-5, rel=0.4)


def test_intercept_only_balanced_is_zero():
    d = np.array([0, 1] * 50)
    fit = probit_fit(d, np.ones((100, 1)))
    assert fit.coef[0] == 0.0
    assert fit.iterations == 0


@pytest.mark.parametrize("share", [0.2, 0.7])
def test_intercept_only_recovers_quantile(share):
    n = 1000
    d = (np.arange(n) < share * n).astype(int)
    fit = probit_fit(d, np.ones((n, 1)))
    assert ndtr(fit.coef[0]) == pytest.approx(share, abs=1e-12)


def test_single_class_rejected():
    with pytest.raises(EstimationError, match="single class"):
        probit_fit(np.ones(10), np.ones((10, 1)))


def test_rank_deficiency_rejected():
    z = np.arange(10.0)
    with pytest.raises(EstimationError, match="rank"):
        probit_fit(np.array([0, 1] * 5), np.column_stack([np.ones(10), z, 2 * z]))


def test_separation_rejected():
    z = np.linspace(-1, 1, 40)
    with pytest.raises(EstimationError, match="separation"):
        probit_fit((z > 0).astype(int), np.column_stack([np.ones(40), z]))


def test_quasi_complete_separation_rejected():
    # everyone with x = 1 is treated; the x = 0 group is mixed
    rng = np.random.default_rng(0)
    x = np.r_[np.zeros(20), np.ones(21)]
    d = np.where(x == 1, 1, rng.random(41) < 0.5).astype(int)
    with pytest.raises(EstimationError, match="separation"):
        probit_fit(d, np.column_stack([np.ones(41), x, rng.normal(size=41)]))


def test_standard_errors_positive():
    d, Z = load_fixture()
    assert np.all(probit_fit(d, Z).std_errors > 0)


def test_propensity_values():
    d, Z = load_fixture()
    fit = probit_fit(d, Z)
    zero = fit.__class__(np.array([0.0, 0.0]), fit.cov, 0.0, True, 0, 0.0)
    assert propensity(zero, Z[:1])[0] == 0.5
    big = fit.__class__(np.array([100.0, 0.0]), fit.cov, 0.0, True, 0, 0.0)
    assert propensity(big, Z[:1])[0] == 1.0 - PROPENSITY_CLAMP
    assert propensity(fit.__class__(np.array([-100.0, 0.0]), fit.cov, 0.0, True, 0, 0.0),
                      Z[:1])[0] == PROPENSITY_CLAMP


def test_propensity_matches_series_oracle():
    d, Z = load_fixture()
    fit = probit_fit(d, Z)
    p = propensity(fit, Z)
    for row in range(0, 200, 17):
        assert p[row] == pytest.approx(phi_series(float(Z[row] @ fit.coef)), abs=1e-12)


def test_propensity_dimension_mismatch():
    d, Z = load_fixture()
    with pytest.raises(EstimationError):
        propensity(probit_fit(d, Z), np.ones((3, 3)))


@settings(max_examples=25, deadline=None)
@given(b0=st.floats(-1, 1), b1=st.floats(-1.5, 1.5), seed=st.integers(0, 10_000))
def test_probit_recovers_coefficients(b0, b1, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=5000)
    d = (b0 + b1 * z - rng.standard_normal(5000) > 0).astype(int)
    if d.min() == d.max():
        return
    fit = probit_fit(d, np.column_stack([np.ones(5000), z]))
    assert np.all(np.abs(fit.coef - [b0, b1]) < 5 * fit.std_errors + 1e-9)
