import numpy as np
import pytest

from hdiv.baselines import StepwiseRule, fit_ols, stepwise_select
from hdiv.exceptions import ConfigurationError, InputError
from hdiv.lasso import RegressionProblem
from oracles import normal_equations

X10 = np.array(
    [
        [1.0, 0.2],
        [1.0, -1.1],
        [1.0, 0.7],
        [1.0, 2.3],
        [1.0, -0.4],
        [1.0, 1.5],
        [1.0, -2.0],
        [1.0, 0.0],
        [1.0, 0.9],
        [1.0, -0.6],
    ]
)
Y10 = np.array([1.1, -0.9, 2.0, 4.2, 0.1, 3.3, -2.8, 0.6, 2.2, 0.3])


def test_ols_constant_column_gives_mean():
    y = np.array([1.0, 4.0, 2.0, 7.0])
    fit = fit_ols(RegressionProblem(y, np.ones((4, 1))))
    assert fit.coefficients[0] == pytest.approx(3.5, abs=1e-12)
    assert fit.rank_flag


def test_ols_fixture_matches_normal_equations():
    fit = fit_ols(RegressionProblem(Y10, X10))
    np.testing.assert_allclose(fit.coefficients, normal_equations(X10, Y10), atol=1e-10)
    np.testing.assert_allclose(X10.T @ fit.residuals, 0, atol=1e-8)


def test_ols_robust_covariance_formula():
    fit = fit_ols(RegressionProblem(Y10, X10))
    bread = np.linalg.inv(X10.T @ X10)
    e = fit.residuals
    meat = sum(np.outer(x, x) * ei**2 for x, ei in zip(X10, e))
    np.testing.assert_allclose(fit.robust_covariance, bread @ meat @ bread, rtol=1e-12)


def test_ols_rank_deficient_flag(rng):
    x = rng.standard_normal(12)
    fit = fit_ols(RegressionProblem(x + 1, np.c_[x, x]))
    assert not fit.rank_flag
    assert fit.coefficients[0] == pytest.approx(fit.coefficients[1])


def test_ols_zero_rows():
    with pytest.raises(InputError):
        fit_ols(RegressionProblem(np.empty(0), np.empty((0, 2))))


def test_robust_and_classical_variance_agree_homoscedastic():
    rng = np.random.default_rng(99)
    n, reps = 100, 1000
    slopes, robust, classical = [], [], []
    for _ in range(reps):
        x = rng.standard_normal(n)
        X = np.c_[np.ones(n), x]
        y = 1 + 0.5 * x + rng.standard_normal(n)
        fit = fit_ols(RegressionProblem(y, X))
        slopes.append(fit.coefficients[1])
        robust.append(fit.robust_covariance[1, 1])
        s2 = fit.residuals @ fit.residuals / (n - 2)
        classical.append(s2 * np.linalg.inv(X.T @ X)[1, 1])
    # both average variances within 10% of each other and of the Monte Carlo variance
    mc = np.var(slopes)
    assert np.mean(robust) == pytest.approx(np.mean(classical), rel=0.1)
    assert np.mean(robust) == pytest.approx(mc, rel=0.15)


def test_stepwise_rule_validation():
    with pytest.raises(ConfigurationError):
        StepwiseRule(p_enter=0.1, p_remove=0.05)
    with pytest.raises(ConfigurationError):
        StepwiseRule(max_steps=0)


def test_perfect_predictor_enters_first(rng):
    X = rng.standard_normal((60, 8))
    y = X[:, 5].copy()
    res = stepwise_select(RegressionProblem(y, X))
    assert res.history[0][:2] == ("add", 5)
    assert 5 in res.selected


def test_strong_signal_selected_almost_always():
    rng = np.random.default_rng(5)
    hits = 0
    for _ in range(500):
        X = rng.standard_normal((100, 10))
        y = 5 * X[:, 2] + rng.standard_normal(100)
        hits += 2 in stepwise_select(RegressionProblem(y, X)).selected
    assert hits / 500 >= 0.99


def test_pure_noise_terminates(rng):
    counts = []
    for _ in range(50):
        X = rng.standard_normal((200, 10))
        res = stepwise_select(RegressionProblem(rng.standard_normal(200), X))
        assert res.steps <= 20
        counts.append(res.selected.size)
    assert min(counts) >= 0


def test_p_enter_zero_adds_nothing(rng):
    X = rng.standard_normal((50, 5))
    y = X @ [3, 2, 1, 0, 0] + rng.standard_normal(50)
    res = stepwise_select(RegressionProblem(y, X), StepwiseRule(p_enter=0.0))
    assert res.selected.size == 0


def test_unpenalized_always_included(rng):
    X = np.c_[np.ones(40), rng.standard_normal((40, 4))]
    y = rng.standard_normal(40)
    res = stepwise_select(RegressionProblem(y, X, [False, True, True, True, True]))
    assert 0 in res.selected


def test_forward_steps_decrease_rss(rng):
    n = 80
    X = rng.standard_normal((n, 15))
    y = X[:, :5] @ [2, -1, 1, 0.5, 0.3] + rng.standard_normal(n)
    res = stepwise_select(RegressionProblem(y, X))
    current: list[int] = []
    prev = y @ y
    for kind, j, _ in res.history:
        if kind == "add":
            current.append(j)
            coef = np.linalg.lstsq(X[:, current], y, rcond=None)[0]
            rss = np.sum((y - X[:, current] @ coef) ** 2)
            assert rss < prev
            prev = rss
        else:
            current.remove(j)
            coef = np.linalg.lstsq(X[:, current], y, rcond=None)[0] if current else np.zeros(0)
            prev = np.sum((y - X[:, current] @ coef) ** 2)


def test_max_steps_respected(rng):
    X = rng.standard_normal((100, 30))
    y = X @ rng.normal(0, 1, 30) + rng.standard_normal(100)
    res = stepwise_select(RegressionProblem(y, X), StepwiseRule(max_steps=4))
    assert res.steps <= 4
    assert res.selected.size <= 4


def test_collinear_candidate_skipped(rng):
    x = rng.standard_normal(50)
    X = np.c_[x, 2 * x, rng.standard_normal(50)]
    y = 3 * x + 0.1 * rng.standard_normal(50)
    res = stepwise_select(RegressionProblem(y, X))
    assert len({0, 1} & set(res.selected.tolist())) == 1
    assert set(res.skipped_collinear) & {0, 1}
