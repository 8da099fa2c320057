import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sperl.linreg import (
    FitError,
    RegressionProblem,
    als_fit,
    ema_rate,
    ema_step,
    ols_fit,
    solve_normal,
)


def test_exact_linear_data_recovered():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 3))
    w = np.array([0.5, -2.0, 3.25])
    fit = ols_fit(RegressionProblem(X @ w + 1.5, X, fit_intercept=True))
    assert np.allclose(fit.weights, w, atol=1e-10)
    assert fit.intercept == pytest.approx(1.5, abs=1e-10)


def test_symmetric_paired_noise_gives_exact_slope():
    phi = np.repeat(np.arange(1.0, 6.0), 2)
    noise = np.tile([0.3, -0.3], 5)
    fit = ols_fit(RegressionProblem(2.0 * phi + noise, phi))
    assert fit.weights[0] == pytest.approx(2.0, abs=1e-14)


def test_matches_textbook_normal_equations():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(100, 3))
    y = rng.normal(size=100)
    textbook = np.linalg.inv(X.T @ X) @ X.T @ y
    assert np.allclose(ols_fit(RegressionProblem(y, X)).weights, textbook, atol=1e-12)
    lstsq = np.linalg.lstsq(X, y, rcond=None)[0]
    assert np.allclose(ols_fit(RegressionProblem(y, X)).weights, lstsq, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(5, 60), d=st.integers(1, 4))
def test_residuals_orthogonal_and_refit_idempotent(seed, n, d):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = rng.normal(size=n) * 3
    fit = ols_fit(RegressionProblem(y, X))
    resid = y - fit.fitted
    scale = np.linalg.norm(X, axis=0) * max(np.linalg.norm(y), 1.0)
    assert np.all(np.abs(X.T @ resid) <= 1e-8 * scale)
    again = ols_fit(RegressionProblem(fit.fitted, X))
    assert np.allclose(again.weights, fit.weights, rtol=1e-9, atol=1e-12)


def test_rank_deficient_uses_ridge():
    u = np.ones(10)
    fit = ols_fit(RegressionProblem(2 * u, np.column_stack([u, u])))
    assert fit.ridge
    assert np.allclose(fit.fitted, 2.0, atol=1e-6)
    with pytest.raises(FitError):
        solve_normal(np.zeros((5, 2)), np.zeros(5))
    with pytest.raises(FitError):
        solve_normal(np.ones((1, 2)), np.ones(1))


def test_problem_validation():
    with pytest.raises(ValueError):
        RegressionProblem(np.ones(3), np.ones((4, 1)))
    with pytest.raises(ValueError):
        RegressionProblem(np.array([1.0, np.nan]), np.ones((2, 1)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(0.1, 10.0))
def test_als_equals_ols_for_constant_residual_feature(seed, c):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(50, 2))
    y = X @ [1.0, -1.0] + rng.normal(size=50)
    prob = RegressionProblem(y, X, fit_intercept=True)
    als, diag = als_fit(prob, np.full(50, c))
    ols = ols_fit(prob)
    assert np.allclose(als.weights, ols.weights, atol=1e-8)
    assert als.intercept == pytest.approx(ols.intercept, abs=1e-8)
    assert diag.dropped == 0


def test_noiseless_data_hits_variance_floor():
    u = np.linspace(-1.5, 1.5, 30)
    y = 0.7 * u + 0.2
    als, diag = als_fit(RegressionProblem(y, u[:, None], fit_intercept=True), (u * u)[:, None])
    assert als.weights[0] == pytest.approx(0.7, abs=1e-8)
    assert als.intercept == pytest.approx(0.2, abs=1e-8)
    ols = ols_fit(RegressionProblem(y, u[:, None], fit_intercept=True))
    assert np.allclose(als.weights, ols.weights, atol=1e-8)
    assert np.all(np.isfinite(diag.variances))


def test_starved_fit_falls_back_to_floor():
    """Only one sample keeps a positive fitted variance, fewer than the two coefficients."""
    u = np.linspace(1.0, 2.0, 6)
    y = u + np.array([1, -1, 1, -1, 1, -1]) * 1e-3
    z = np.array([1.0, 0, 0, 0, 0, 0])[:, None]
    fit, diag = als_fit(RegressionProblem(y, u[:, None], fit_intercept=True), z)
    assert diag.floored == 5 and diag.dropped == 0
    assert np.all(np.isfinite(fit.weights))


def test_als_reduces_variance_under_heteroscedastic_noise():
    """Noise with standard deviation proportional to ``u``: ALS weights vary less than OLS."""
    u = np.linspace(0.05, 3.0, 200)
    ols_w, als_w = [], []
    for seed in range(500):
        rng = np.random.default_rng(seed)
        y = 0.0018 * u + 0.03 * u * rng.normal(size=u.size)
        prob = RegressionProblem(y, u[:, None], fit_intercept=True)
        ols_w.append(ols_fit(prob).weights[0])
        als_w.append(als_fit(prob, (u * u)[:, None])[0].weights[0])
    assert np.var(als_w) <= np.var(ols_w)


def test_ema_examples():
    old, new = np.array([1.0, 2.0]), np.array([3.0, -2.0])
    assert np.array_equal(ema_step(old, new, 0), new)
    assert np.array_equal(ema_step(old, new, 1), new)
    assert np.allclose(ema_step(old, new, 3), old + 0.5 * (new - old))
    assert ema_rate(0) == 1.0 and ema_rate(9) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        ema_rate(-1)


@settings(max_examples=30, deadline=None)
@given(start=st.floats(-100, 100), target=st.floats(-100, 100))
def test_ema_converges_monotonically(start, target):
    w = np.array([start])
    gaps = []
    for l in range(200):
        w = ema_step(w, np.array([target]), l)
        gaps.append(abs(w[0] - target))
    assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
