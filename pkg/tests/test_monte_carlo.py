import json

import numpy as np
import pytest

from hdiv.exceptions import ConfigurationError, WeakIdentificationError
from hdiv.monte_carlo import (
    DEFAULT_ESTIMATORS,
    ESTIMATORS,
    REFERENCE_TABLE,
    SimulationConfig,
    default_workers,
    generate_dataset,
    oracle_estimate,
    run_simulation,
    true_nuisance,
)
from hdiv.orthogonal_iv import IVDataset, estimate_double_selection

SMALL = dict(n=120, p_x=30, p_z=15, replications=6, seed=7)


def test_config_defaults():
    cfg = SimulationConfig()
    assert (cfg.n, cfg.p_x, cfg.p_z, cfg.replications) == (200, 300, 150, 1000)
    assert set(REFERENCE_TABLE) == set(DEFAULT_ESTIMATORS)


@pytest.mark.parametrize(
    "bad",
    [{"n": 0}, {"error_correlation": 1.0}, {"x_correlation": -0.1}, {"test_level": 0.0}, {"seed": -1}],
)
def test_config_validation(bad):
    with pytest.raises(ConfigurationError):
        SimulationConfig(**bad)


def test_from_dict_round_trip_and_errors():
    cfg = SimulationConfig.from_dict({"n": "150", "p_x": 40.0, "error_correlation": 0.3})
    assert cfg.n == 150 and cfg.p_x == 40
    assert SimulationConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError):
        SimulationConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigurationError):
        SimulationConfig.from_dict({"n": 10.5})


def test_pi_zero_gives_vartheta_gamma():
    truth = true_nuisance(SimulationConfig(pi0=0.0, **SMALL))
    np.testing.assert_array_equal(truth.vartheta, truth.gamma)
    np.testing.assert_allclose(truth.theta, truth.beta + truth.alpha0 * truth.gamma)


def test_reduced_form_identities():
    cfg = SimulationConfig(**SMALL)
    truth = true_nuisance(cfg)
    np.testing.assert_allclose(truth.vartheta, truth.gamma + truth.Pi.T @ truth.delta)
    np.testing.assert_allclose(truth.theta, truth.beta + cfg.alpha0 * truth.vartheta)


def test_concentration_matches_analytic():
    cfg = SimulationConfig()
    truth = true_nuisance(cfg)
    vals = []
    for r in range(200):
        data, _ = generate_dataset(cfg, r, truth)
        zeta = data.Z - data.X @ truth.Pi.T
        u = data.d - data.X @ truth.gamma - data.Z @ truth.delta
        vals.append(np.sum((zeta @ truth.delta) ** 2) / np.var(u))
    assert np.mean(vals) == pytest.approx(cfg.concentration, rel=0.10)


def test_no_instrument_strength_design():
    cfg = SimulationConfig(concentration=0.0, error_correlation=0.0, **SMALL)
    data, truth = generate_dataset(cfg, 0)
    assert np.all(truth.delta == 0)
    with pytest.raises(WeakIdentificationError):
        oracle_estimate(data, truth)
    exog = IVDataset(data.y, data.d, data.X)
    est = estimate_double_selection(exog)
    assert abs(est.alpha_hat - cfg.alpha0) < 5 * est.std_error


def test_oracle_exact_without_structural_noise():
    cfg = SimulationConfig(**SMALL)
    data, truth = generate_dataset(cfg, 3)
    eps = data.y - cfg.alpha0 * data.d - data.X @ truth.beta
    clean = IVDataset(data.y - eps, data.d, data.X, data.Z)
    est = oracle_estimate(clean, truth)
    assert est.alpha_hat == pytest.approx(cfg.alpha0, abs=1e-12)


def test_oracle_fixture_n10_hand_ratio():
    cfg = SimulationConfig(n=10, p_x=3, p_z=2, replications=1, seed=1)
    data, truth = generate_dataset(cfg, 0)
    ry = data.y - data.X @ truth.theta
    rd = data.d - data.X @ truth.vartheta
    v = data.X @ truth.gamma + data.Z @ truth.delta - data.X @ truth.vartheta
    hand = sum(a * b for a, b in zip(v, ry)) / sum(a * b for a, b in zip(v, rd))
    assert oracle_estimate(data, truth).alpha_hat == pytest.approx(hand, rel=1e-12)


def test_single_replication_aggregation():
    cfg = SimulationConfig(**{**SMALL, "replications": 1})
    summary = run_simulation(cfg, DEFAULT_ESTIMATORS, workers=1)
    assert len(summary.records) == 4
    for rec in summary.records:
        if rec.ok:
            m = summary.metrics[rec.estimator]
            assert m["bias"] == pytest.approx(rec.alpha_hat - cfg.alpha0)
            assert m["mad"] == pytest.approx(abs(rec.alpha_hat - cfg.alpha0))


def test_size_equals_recount():
    cfg = SimulationConfig(**SMALL)
    summary = run_simulation(cfg, ESTIMATORS, workers=1)
    for name in ESTIMATORS:
        recs = [r for r in summary.records if r.estimator == name and r.ok]
        rejections = 0
        for r in recs:
            rejections += abs(r.alpha_hat - cfg.alpha0) / r.std_error > 1.959963984540054
        assert summary.metrics[name]["size"] == pytest.approx(rejections / len(recs))


def test_determinism_and_permutation_invariance():
    cfg = SimulationConfig(**SMALL)
    a = run_simulation(cfg, workers=1)
    b = run_simulation(cfg, workers=1)
    c = run_simulation(cfg, workers=1, replication_indices=[5, 2, 0, 4, 1, 3])
    ja = json.dumps(a.to_dict(), sort_keys=True)
    assert ja == json.dumps(b.to_dict(), sort_keys=True)
    assert ja == json.dumps(c.to_dict(), sort_keys=True)


def test_parallel_matches_serial():
    cfg = SimulationConfig(**{**SMALL, "replications": 4})
    a = run_simulation(cfg, ("oracle", "double_selection"), workers=1)
    b = run_simulation(cfg, ("oracle", "double_selection"), workers=2)
    assert a.to_dict() == b.to_dict()


def test_unknown_estimator():
    with pytest.raises(ConfigurationError):
        run_simulation(SimulationConfig(**SMALL), ("bogus",))


def test_failures_recorded_and_flagged():
    cfg = SimulationConfig(concentration=0.0, **{**SMALL, "replications": 3})
    summary = run_simulation(cfg, ("oracle",), workers=1)
    m = summary.metrics["oracle"]
    assert m["failures"] == 3 and m["invalid"]
    assert "INVALID" in summary.render_table()


def test_render_table_reference_rows():
    cfg = SimulationConfig(**{**SMALL, "replications": 2})
    table = run_simulation(cfg, ("oracle",), workers=1).render_table(reference=True)
    assert "reference: .006 / .095 / .043" in table


def test_default_workers_env(monkeypatch):
    monkeypatch.setenv("HDIV_THREADS", "3")
    assert default_workers() == 3
    monkeypatch.setenv("HDIV_THREADS", "x")
    with pytest.raises(ConfigurationError):
        default_workers()
