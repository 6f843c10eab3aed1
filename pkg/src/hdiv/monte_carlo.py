"""Simulation design, replication engine and Bias/MAD/Size summaries.

The data-generating process::

    x_i    ~ N(0, Sigma_x),  Sigma_x[j, k] = x_correlation ** |j - k|
    zeta_i ~ N(0, Sigma_x) (same Toeplitz form, dimension p_z)
    z_i    = Pi x_i + zeta_i,  Pi[j, j] = pi0 for j < min(p_z, p_x)
    (eps_i, u_i) bivariate standard normal with correlation error_correlation
    d_i    = x_i' gamma + z_i' delta + u_i
    y_i    = alpha0 d_i + x_i' beta + eps_i

with decaying coefficients ``beta_j = c_y / j**decay`` (same for
``gamma`` with ``c_d`` and ``delta`` with ``c_z``). Every coefficient is
non-zero but the tail is tiny, so the model is approximately sparse and
perfect selection is out of reach. When ``c_z`` is not given it is set
so that the concentration parameter ``n delta' Sigma_zeta delta``
equals ``concentration``.

Replication ``r`` draws from ``SeedSequence(seed, spawn_key=(r,))``. Its
stream is therefore a pure function of ``(seed, r)`` and does not depend
on scheduling.
"""

from __future__ import annotations

import dataclasses
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from hdiv.baselines import StepwiseRule
from hdiv.exceptions import ConfigurationError, HdivError
from hdiv.orthogonal_iv import (
    AlphaEstimate,
    IVDataset,
    PipelineConfig,
    ResidualTriple,
    estimate_double_selection,
    estimate_naive_nonorthogonal,
    estimate_naive_stepwise,
    estimate_union_2sls,
    fit_nuisances,
    score_statistic,
    solve_alpha,
)

__all__ = [
    "SimulationConfig",
    "TrueNuisance",
    "ReplicationRecord",
    "SimulationSummary",
    "ESTIMATORS",
    "DEFAULT_ESTIMATORS",
    "REFERENCE_TABLE",
    "generate_dataset",
    "oracle_estimate",
    "run_replication",
    "run_simulation",
    "summarize",
    "table_checks",
    "orthogonality_check",
]

ESTIMATORS = ("oracle", "naive_stepwise", "naive_nonorthogonal", "double_selection", "union_2sls")
DEFAULT_ESTIMATORS = ("oracle", "naive_stepwise", "naive_nonorthogonal", "double_selection")
LABELS = {
    "oracle": "Oracle",
    "naive_stepwise": "Naive 1",
    "naive_nonorthogonal": "Naive 2",
    "double_selection": "Double-Selection",
    "union_2sls": "Union 2SLS",
}
# Bias / MAD / Size reported for the published design (n=200, p_x=300, p_z=150).
REFERENCE_TABLE = {
    "oracle": (0.006, 0.095, 0.043),
    "naive_stepwise": (0.160, 0.227, 0.302),
    "naive_nonorthogonal": (0.035, 0.103, 0.095),
    "double_selection": (0.021, 0.099, 0.054),
}
DEFAULT_SEED = 20150105
MAX_FAILURE_SHARE = 0.20


@dataclass(frozen=True)
class SimulationConfig:
    n: int = 200
    p_x: int = 300
    p_z: int = 150
    alpha0: float = 1.0
    s: int = 10
    decay: float = 2.0
    c_y: float = 1.0
    c_d: float = 1.0
    c_z: float | None = None
    concentration: float = 150.0
    pi0: float = 0.3
    error_correlation: float = 0.6
    x_correlation: float = 0.5
    replications: int = 1000
    seed: int = DEFAULT_SEED
    test_level: float = 0.05

    def __post_init__(self):
        for name in ("n", "p_x", "replications", "s"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.p_z < 0:
            raise ConfigurationError("p_z must be non-negative")
        if self.n < 3:
            raise ConfigurationError("n must be at least 3")
        if not -1 < self.error_correlation < 1:
            raise ConfigurationError("error_correlation must lie in (-1, 1)")
        if not 0 <= self.x_correlation < 1:
            raise ConfigurationError("x_correlation must lie in [0, 1)")
        if not 0 < self.test_level < 1:
            raise ConfigurationError("test_level must lie in (0, 1)")
        if self.concentration < 0 or self.decay < 0:
            raise ConfigurationError("concentration and decay must be non-negative")
        if self.seed < 0:
            raise ConfigurationError("seed must be an unsigned integer")

    @classmethod
    def from_dict(cls, values: dict) -> "SimulationConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown simulation keys: {sorted(unknown)}")
        cast = {}
        for key, val in values.items():
            if val is None:
                cast[key] = None
            elif key in ("n", "p_x", "p_z", "s", "replications", "seed"):
                if float(val) != int(float(val)):
                    raise ConfigurationError(f"{key} must be an integer, got {val!r}")
                cast[key] = int(float(val))
            else:
                cast[key] = float(val)
        return cls(**cast)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def resolved_c_z(self) -> float:
        if self.c_z is not None:
            return float(self.c_z)
        if self.p_z == 0 or self.concentration == 0:
            return 0.0
        q = _pattern(self.p_z, self.decay)
        quad = q @ _toeplitz(self.p_z, self.x_correlation) @ q
        return float(np.sqrt(self.concentration / (self.n * quad)))


@dataclass
class TrueNuisance:
    """True coefficients of the design and the implied reduced forms."""

    alpha0: float
    beta: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    Pi: np.ndarray
    theta: np.ndarray
    vartheta: np.ndarray


def _pattern(p: int, decay: float) -> np.ndarray:
    return 1.0 / np.arange(1, p + 1, dtype=float) ** decay


def _toeplitz(p: int, rho: float) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def true_nuisance(config: SimulationConfig) -> TrueNuisance:
    beta = config.c_y * _pattern(config.p_x, config.decay)
    gamma = config.c_d * _pattern(config.p_x, config.decay)
    delta = config.resolved_c_z() * _pattern(config.p_z, config.decay)
    Pi = np.zeros((config.p_z, config.p_x))
    m = min(config.p_z, config.p_x)
    Pi[np.arange(m), np.arange(m)] = config.pi0
    vartheta = gamma + Pi.T @ delta
    theta = beta + config.alpha0 * vartheta
    return TrueNuisance(config.alpha0, beta, gamma, delta, Pi, theta, vartheta)


def _ar1_columns(rng, n, p, rho):
    e = rng.standard_normal((n, p))
    if p == 0 or rho == 0:
        return e
    out = np.empty_like(e)
    out[:, 0] = e[:, 0]
    scale = math.sqrt(1.0 - rho * rho)
    for j in range(1, p):
        out[:, j] = rho * out[:, j - 1] + scale * e[:, j]
    return out


def replication_rng(seed: int, replication_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replication_index,)))


def generate_dataset(config: SimulationConfig, replication_index: int, truth: TrueNuisance | None = None):
    """Draw one sample. Returns ``(IVDataset, TrueNuisance)``."""
    truth = true_nuisance(config) if truth is None else truth
    rng = replication_rng(config.seed, replication_index)
    n = config.n
    X = _ar1_columns(rng, n, config.p_x, config.x_correlation)
    zeta = _ar1_columns(rng, n, config.p_z, config.x_correlation)
    Z = X @ truth.Pi.T + zeta
    u = rng.standard_normal(n)
    rho = config.error_correlation
    eps = rho * u + math.sqrt(1.0 - rho * rho) * rng.standard_normal(n)
    d = X @ truth.gamma + Z @ truth.delta + u
    y = config.alpha0 * d + X @ truth.beta + eps
    return IVDataset(y=y, d=d, X=X, Z=Z), truth


def oracle_residuals(data: IVDataset, truth: TrueNuisance) -> ResidualTriple:
    rho_y = data.y - data.X @ truth.theta
    rho_d = data.d - data.X @ truth.vartheta
    v = data.X @ truth.gamma + data.Z @ truth.delta - data.X @ truth.vartheta
    return ResidualTriple(rho_y, rho_d, v)


def oracle_estimate(data: IVDataset, truth: TrueNuisance, level: float = 0.95) -> AlphaEstimate:
    """Infeasible estimator that plugs in the true nuisance parameters."""
    return solve_alpha(oracle_residuals(data, truth), level, method="oracle", d_scale=np.std(data.d))


@dataclass
class ReplicationRecord:
    estimator: str
    replication: int
    alpha_hat: float = float("nan")
    std_error: float = float("nan")
    wald_reject: bool | None = None
    score_reject: bool | None = None
    selection: dict = field(default_factory=dict)
    failure: str | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None


def run_replication(
    config: SimulationConfig,
    replication_index: int,
    estimators=DEFAULT_ESTIMATORS,
    pipeline: PipelineConfig | None = None,
    stepwise_rule: StepwiseRule | None = None,
    truth: TrueNuisance | None = None,
) -> list[ReplicationRecord]:
    """Run every requested estimator on the same simulated sample."""
    pipeline = PipelineConfig(level=1.0 - config.test_level) if pipeline is None else pipeline
    data, truth = generate_dataset(config, replication_index, truth)
    z_crit = stats.norm.ppf(1.0 - config.test_level / 2.0)
    chi_crit = stats.chi2.ppf(1.0 - config.test_level, 1)
    shared = {}

    def nuisances():
        if "nu" not in shared:
            shared["nu"] = fit_nuisances(data, pipeline)
        return shared["nu"]

    runners = {
        "oracle": lambda: oracle_estimate(data, truth, pipeline.level),
        "naive_stepwise": lambda: estimate_naive_stepwise(data, stepwise_rule, pipeline),
        "naive_nonorthogonal": lambda: estimate_naive_nonorthogonal(data, pipeline, nuisances=nuisances()),
        "double_selection": lambda: estimate_double_selection(data, pipeline, nuisances=nuisances()),
        "union_2sls": lambda: estimate_union_2sls(data, pipeline, nuisances=nuisances()),
    }
    records = []
    for name in estimators:
        rec = ReplicationRecord(estimator=name, replication=replication_index)
        try:
            est = runners[name]()
        except HdivError as exc:
            rec.failure = f"{type(exc).__name__}: {exc}"
            records.append(rec)
            continue
        rec.alpha_hat = est.alpha_hat
        rec.std_error = est.std_error
        rec.selection = dict(est.diagnostics.get("selection_counts", {}))
        if est.std_error > 0:
            rec.wald_reject = bool(abs(est.alpha_hat - config.alpha0) / est.std_error > z_crit)
        else:
            rec.wald_reject = bool(est.alpha_hat != config.alpha0)
        try:
            rec.score_reject = bool(est.score_at(config.alpha0) > chi_crit)
        except HdivError:
            rec.score_reject = None
        records.append(rec)
    return records


@dataclass
class SimulationSummary:
    config: SimulationConfig
    estimators: tuple
    metrics: dict
    records: list = field(repr=False, default_factory=list)
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        """Machine-readable summary. Excludes wall-clock time so reruns are byte-identical."""
        return {
            "schema_version": 1,
            "config": self.config.to_dict(),
            "estimators": list(self.estimators),
            "metrics": self.metrics,
        }

    def render_table(self, reference: bool = False) -> str:
        head = f"{'Estimator':<18}{'Bias':>8}{'MAD':>8}{'Size':>8}{'Score':>8}{'Fail':>6}"
        lines = [head, "-" * len(head)]
        for name in self.estimators:
            m = self.metrics[name]
            flag = "  INVALID" if m["invalid"] else ""
            lines.append(
                f"{LABELS.get(name, name):<18}{_fmt(m['bias'])}{_fmt(m['mad'])}"
                f"{_fmt(m['size'])}{_fmt(m['score_size'])}{m['failures']:>6d}{flag}"
            )
            if reference and name in REFERENCE_TABLE:
                b, mad, size = REFERENCE_TABLE[name]
                lines.append(f"  reference: {_ref(b)} / {_ref(mad)} / {_ref(size)}")
        return "\n".join(lines)


def _ref(x):
    # three decimals without the leading zero
    return f"{x:.3f}".replace("0.", ".", 1)


def _fmt(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return f"{'nan':>8}"
    return f"{x:>8.3f}"


def summarize(config: SimulationConfig, estimators, records) -> dict:
    """Bias = median(a - a0), MAD = median|a - a0|, Size = mean Wald rejection."""
    metrics = {}
    for name in estimators:
        recs = [r for r in records if r.estimator == name]
        good = [r for r in recs if r.ok]
        failures = len(recs) - len(good)
        err = np.array([r.alpha_hat - config.alpha0 for r in good])
        wald = [r.wald_reject for r in good]
        score = [r.score_reject for r in good if r.score_reject is not None]
        metrics[name] = {
            "bias": float(np.median(err)) if good else None,
            "mad": float(np.median(np.abs(err))) if good else None,
            "size": float(np.mean(wald)) if good else None,
            "score_size": float(np.mean(score)) if score else None,
            "failures": failures,
            "successes": len(good),
            "invalid": bool(recs) and failures > MAX_FAILURE_SHARE * len(recs),
        }
    return metrics


def table_checks(metrics: dict) -> list[tuple[str, bool]]:
    """Qualitative checks on a default-design summary.

    Each entry is ``(description, passed)``. A missing estimator or a
    failed metric counts as not passed.
    """

    def get(name, key):
        m = metrics.get(name)
        val = None if m is None or m.get("invalid") else m.get(key)
        return float("nan") if val is None else float(val)

    ds_b, ds_s, ds_m = get("double_selection", "bias"), get("double_selection", "size"), get("double_selection", "mad")
    or_b, or_s, or_m = get("oracle", "bias"), get("oracle", "size"), get("oracle", "mad")
    n1_s, n2_s = get("naive_stepwise", "size"), get("naive_nonorthogonal", "size")
    return [
        ("Double-Selection |bias| <= 0.05", abs(ds_b) <= 0.05),
        ("Double-Selection size in [0.03, 0.08]", 0.03 <= ds_s <= 0.08),
        ("Oracle |bias| <= 0.03", abs(or_b) <= 0.03),
        ("Oracle size in [0.03, 0.07]", 0.03 <= or_s <= 0.07),
        ("Naive 1 size >= 0.15", n1_s >= 0.15),
        ("Naive 2 size >= 0.07", n2_s >= 0.07),
        ("Naive 2 size > Double-Selection size", n2_s > ds_s),
        ("Double-Selection MAD <= 1.3 x Oracle MAD", ds_m <= 1.3 * or_m),
    ]


def _worker_init():
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(1)
    except ImportError:  # pragma: no cover
        pass


def _run_chunk(args):
    config, indices, estimators, pipeline, stepwise_rule = args
    truth = true_nuisance(config)
    out = []
    for r in indices:
        out.extend(run_replication(config, r, estimators, pipeline, stepwise_rule, truth))
    return out


def default_workers() -> int:
    env = os.environ.get("HDIV_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigurationError(f"HDIV_THREADS must be an integer, got {env!r}") from exc
    return max(1, os.cpu_count() or 1)


def run_simulation(
    config: SimulationConfig,
    estimators=DEFAULT_ESTIMATORS,
    *,
    pipeline: PipelineConfig | None = None,
    stepwise_rule: StepwiseRule | None = None,
    workers: int | None = None,
    replication_indices=None,
) -> SimulationSummary:
    """Run ``config.replications`` replications and aggregate the metrics.

    Parameters
    ----------
    config : SimulationConfig
    estimators : sequence of str
        Subset of ``ESTIMATORS``; each is run on the same sample per replication.
    workers : int, optional
        Number of processes. Defaults to ``HDIV_THREADS`` or the CPU count.
        Results do not depend on this value.
    replication_indices : sequence of int, optional
        Overrides ``range(config.replications)``. Records are always
        aggregated in index order.
    """
    estimators = tuple(estimators)
    bad = set(estimators) - set(ESTIMATORS)
    if bad:
        raise ConfigurationError(f"unknown estimators: {sorted(bad)}")
    indices = list(range(config.replications)) if replication_indices is None else list(replication_indices)
    workers = default_workers() if workers is None else max(1, int(workers))
    start = time.perf_counter()
    if workers == 1 or len(indices) < 2:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(1):
            records = _run_chunk((config, indices, estimators, pipeline, stepwise_rule))
    else:
        chunks = [indices[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init) as pool:
            parts = pool.map(
                _run_chunk, [(config, c, estimators, pipeline, stepwise_rule) for c in chunks if c]
            )
            records = [rec for part in parts for rec in part]
    records.sort(key=lambda r: (r.replication, estimators.index(r.estimator)))
    metrics = summarize(config, estimators, records)
    return SimulationSummary(config, estimators, metrics, records, time.perf_counter() - start)


# -- orthogonality diagnostic -------------------------------------------------


def _orthogonal_moment(data, alpha, theta, vartheta, gamma, delta):
    X, Z = data.X, data.Z
    resid = data.y - X @ theta - alpha * (data.d - X @ vartheta)
    return float(np.mean(resid * (X @ gamma + Z @ delta - X @ vartheta)))


def _nonorthogonal_moment(data, alpha, theta, vartheta, gamma, delta):
    X, Z = data.X, data.Z
    resid = data.y - X @ theta - alpha * (data.d - X @ vartheta)
    return float(np.mean(resid * (X @ gamma + Z @ delta)))


def _sparse_directions(rng, blocks, s, k):
    """``k`` random unit vectors supported on the leading ``s`` entries of each block."""
    total = sum(blocks)
    out = np.zeros((k, total))
    offset = 0
    cols = []
    for size in blocks:
        cols.extend(range(offset, offset + min(s, size)))
        offset += size
    cols = np.array(cols, dtype=int)
    g = rng.standard_normal((k, cols.size))
    out[:, cols] = g / np.linalg.norm(g, axis=1, keepdims=True)
    return out


def orthogonality_check(
    config: SimulationConfig,
    replications: int = 200,
    n_directions: int = 20,
    step: float = 1e-4,
    seed: int | None = None,
) -> dict:
    """Numerical nuisance derivatives of the orthogonal and naive moments.

    For each direction ``h`` the central difference of
    ``M(alpha0, eta0 + t h)`` at ``t = 0`` is averaged over replications.
    The absolute mean derivatives are then averaged over directions. The
    orthogonal moment uses directions over all four nuisance blocks. The
    naive moment uses directions over ``theta`` only. Directions are
    supported on the leading ``config.s`` coordinates of each block, the
    coordinates that carry non-negligible signal.

    Returns a dict with ``orthogonal_derivative``, ``naive_theta_derivative``
    and ``moment_mc_se`` (Monte Carlo standard error of ``M`` at the truth).
    """
    truth = true_nuisance(config)
    rng = np.random.default_rng(config.seed + 1 if seed is None else seed)
    px, pz = config.p_x, config.p_z
    dirs = _sparse_directions(rng, [px, px, px, pz], config.s, n_directions)
    theta_dirs = _sparse_directions(rng, [px], config.s, n_directions)
    eta0 = np.concatenate([truth.theta, truth.vartheta, truth.gamma, truth.delta])

    def split(eta):
        return eta[:px], eta[px : 2 * px], eta[2 * px : 3 * px], eta[3 * px :]

    a0 = config.alpha0
    moments = np.empty(replications)
    d_orth = np.empty((replications, n_directions))
    d_naive = np.empty((replications, n_directions))
    for r in range(replications):
        data, _ = generate_dataset(config, r, truth)
        moments[r] = _orthogonal_moment(data, a0, *split(eta0))
        for k in range(n_directions):
            up = _orthogonal_moment(data, a0, *split(eta0 + step * dirs[k]))
            dn = _orthogonal_moment(data, a0, *split(eta0 - step * dirs[k]))
            d_orth[r, k] = (up - dn) / (2 * step)
            h = np.zeros_like(eta0)
            h[:px] = theta_dirs[k]
            up = _nonorthogonal_moment(data, a0, *split(eta0 + step * h))
            dn = _nonorthogonal_moment(data, a0, *split(eta0 - step * h))
            d_naive[r, k] = (up - dn) / (2 * step)
    mc_se = float(np.std(moments, ddof=1) / np.sqrt(replications))
    return {
        "orthogonal_derivative": float(np.mean(np.abs(d_orth.mean(axis=0)))),
        "naive_theta_derivative": float(np.mean(np.abs(d_naive.mean(axis=0)))),
        "moment_mc_se": mc_se,
        "moment_mean": float(moments.mean()),
    }
