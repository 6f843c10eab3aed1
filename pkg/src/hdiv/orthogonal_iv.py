"""Orthogonal-moment IV estimation after Lasso selection of controls and instruments.

The structural model is ``y = alpha d + X beta + eps`` with first stage
``d = X gamma + Z delta + u``. Three selection steps estimate the nuisance
parameters:

1. ``d`` on ``[X, Z]`` gives ``gamma`` and ``delta``,
2. ``y`` on ``X`` gives ``theta``,
3. the fitted first stage ``d_hat = X gamma + Z delta`` on ``X`` gives
   ``vartheta``.

Then ``alpha`` solves the sample analogue of
``E[(rho_y - alpha rho_d) v] = 0``. Here ``rho_y = y - X theta``,
``rho_d = d - X vartheta`` and ``v = d_hat - X vartheta``. The moment
has zero derivative in the nuisance parameters at the truth. Moderate
selection mistakes therefore do not bias ``alpha`` to first order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from hdiv.baselines import StepwiseRule, stepwise_select
from hdiv.exceptions import (
    ConvergenceWarning,
    DegenerateStatisticError,
    InputError,
    WeakIdentificationError,
)
from hdiv.lasso import PenaltyRule, RegressionProblem, fit_lasso, post_lasso_refit

__all__ = [
    "IVDataset",
    "PipelineConfig",
    "NuisanceEstimates",
    "ResidualTriple",
    "AlphaEstimate",
    "moment_psi",
    "empirical_moment",
    "solve_alpha",
    "score_statistic",
    "score_confidence_set",
    "fit_nuisances",
    "residual_triple",
    "estimate_double_selection",
    "estimate_naive_stepwise",
    "estimate_naive_nonorthogonal",
    "estimate_union_2sls",
    "estimate_tsls",
    "estimate_ols",
]


@dataclass(frozen=True)
class IVDataset:
    """Outcome ``y``, endogenous ``d``, controls ``X`` and instruments ``Z``.

    ``Z`` may have zero columns, which selects the exogenous case. When
    ``intercept_index`` is given, that column of ``X`` is never penalized.
    """

    y: np.ndarray
    d: np.ndarray
    X: np.ndarray
    Z: np.ndarray | None = None
    intercept_index: int | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        d = np.asarray(self.d, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n = y.shape[0]
        Z = np.empty((n, 0)) if self.Z is None else np.asarray(self.Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        if not (d.shape[0] == X.shape[0] == Z.shape[0] == n):
            raise InputError(
                f"row counts differ: y={n}, d={d.shape[0]}, X={X.shape[0]}, Z={Z.shape[0]}"
            )
        if X.shape[1] == 0:
            raise InputError("X needs at least one column")
        for name, arr in (("y", y), ("d", d), ("X", X), ("Z", Z)):
            if not np.all(np.isfinite(arr)):
                raise InputError(f"{name} contains non-finite values")
        if self.intercept_index is not None and not 0 <= self.intercept_index < X.shape[1]:
            raise InputError("intercept_index out of range")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p_x(self) -> int:
        return self.X.shape[1]

    @property
    def p_z(self) -> int:
        return self.Z.shape[1]

    def control_flags(self) -> np.ndarray:
        flags = np.ones(self.p_x, dtype=bool)
        if self.intercept_index is not None:
            flags[self.intercept_index] = False
        return flags


@dataclass(frozen=True)
class PipelineConfig:
    """Options shared by the selection-based estimators."""

    rule: PenaltyRule = field(default_factory=PenaltyRule)
    post_lasso: bool = True
    level: float = 0.95


@dataclass
class NuisanceEstimates:
    theta: np.ndarray
    vartheta: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    selection_counts: dict = field(default_factory=dict)
    supports: dict = field(default_factory=dict)
    exogenous: bool = False
    converged: bool = True


@dataclass
class ResidualTriple:
    rho_y: np.ndarray
    rho_d: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.rho_y = np.asarray(self.rho_y, dtype=float).reshape(-1)
        self.rho_d = np.asarray(self.rho_d, dtype=float).reshape(-1)
        self.v = np.asarray(self.v, dtype=float).reshape(-1)
        if not (self.rho_y.shape == self.rho_d.shape == self.v.shape):
            raise InputError("residual vectors must have equal length")

    @property
    def n(self) -> int:
        return self.rho_y.shape[0]


def moment_psi(alpha: float, residuals: ResidualTriple) -> np.ndarray:
    """Per-observation moment ``(rho_y - alpha * rho_d) * v``."""
    return (residuals.rho_y - residuals.rho_d * alpha) * residuals.v


def empirical_moment(alpha: float, residuals: ResidualTriple) -> float:
    return float(np.mean(moment_psi(alpha, residuals)))


def score_statistic(alpha0: float, residuals: ResidualTriple) -> float:
    """``n * mean(psi)^2 / mean(psi^2)`` evaluated at ``alpha0``.

    Asymptotically chi-squared with one degree of freedom under the null.
    """
    psi = moment_psi(alpha0, residuals)
    denom = np.mean(psi**2)
    if denom <= 0:
        raise DegenerateStatisticError("moment vector is identically zero")
    return float(residuals.n * np.mean(psi) ** 2 / denom)


def score_confidence_set(residuals: ResidualTriple, level: float = 0.95) -> list[tuple[float, float]]:
    """Invert the score test: all ``alpha`` with ``C(alpha) <= chi2_1(level)``.

    ``C(alpha) <= q`` is a quadratic inequality in ``alpha``. The result is a
    list of closed intervals, possibly unbounded (``-inf``/``inf``): one
    bounded interval under strong identification, and two rays or the whole
    line when identification is weak.
    """
    q = stats.chi2.ppf(level, 1)
    n = residuals.n
    ry, rd, v = residuals.rho_y, residuals.rho_d, residuals.v
    a, b = np.mean(ry * v), np.mean(rd * v)
    A, B, D = np.mean(ry**2 * v**2), np.mean(ry * rd * v**2), np.mean(rd**2 * v**2)
    c2 = n * b * b - q * D
    c1 = -2.0 * (n * a * b - q * B)
    c0 = n * a * a - q * A
    scale = max(abs(n * b * b), q * D, 1e-300)
    if abs(c2) <= 1e-12 * scale:
        if c1 == 0:
            return [(-np.inf, np.inf)] if c0 <= 0 else []
        root = -c0 / c1
        return [(-np.inf, root)] if c1 > 0 else [(root, np.inf)]
    disc = c1 * c1 - 4.0 * c2 * c0
    if disc < 0:
        return [(-np.inf, np.inf)] if c2 < 0 else []
    sq = np.sqrt(disc)
    # stable quadratic roots
    t = -0.5 * (c1 + np.copysign(sq, c1))
    r1 = t / c2
    r2 = c0 / t if t != 0 else r1
    lo, hi = min(r1, r2), max(r1, r2)
    if c2 > 0:
        return [(float(lo), float(hi))]
    return [(-np.inf, float(lo)), (float(hi), np.inf)]


@dataclass
class AlphaEstimate:
    """Point estimate, robust standard error and score-test machinery."""

    alpha_hat: float
    std_error: float
    ci_lower: float
    ci_upper: float
    variance_V: float
    level: float
    residuals: ResidualTriple = field(repr=False)
    method: str = "orthogonal_iv"
    diagnostics: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.residuals.n

    def score_at(self, alpha: float) -> float:
        return score_statistic(alpha, self.residuals)

    def score_confidence_set(self, level: float | None = None) -> list[tuple[float, float]]:
        return score_confidence_set(self.residuals, self.level if level is None else level)

    def wald_statistic(self, alpha0: float) -> float:
        return (self.alpha_hat - alpha0) / self.std_error

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "alpha_hat": self.alpha_hat,
            "std_error": self.std_error,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "level": self.level,
            "variance_V": self.variance_V,
            "n": self.n,
            "score_set": [list(iv) for iv in self.score_confidence_set()],
            "diagnostics": _jsonable(self.diagnostics),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def solve_alpha(
    residuals: ResidualTriple,
    level: float = 0.95,
    *,
    method: str = "orthogonal_iv",
    d_scale: float | None = None,
) -> AlphaEstimate:
    """IV regression of ``rho_y`` on ``rho_d`` with instrument ``v``.

    The estimate is the exact root of the empirical moment. The variance
    plug-in is ``mean(v rho_d)^-2 * mean(psi^2)`` and
    ``std_error = sqrt(V / n)``.

    Raises
    ------
    WeakIdentificationError
        If ``|mean(v * rho_d)|`` is below ``1e-8 * sd(d) * sd(v)``.
        ``d_scale`` defaults to ``sd(rho_d)``.
    """
    n = residuals.n
    if n < 2:
        raise InputError("need at least two observations")
    ry, rd, v = residuals.rho_y, residuals.rho_d, residuals.v
    denom = float(np.mean(v * rd))
    sd_d = float(np.std(rd)) if d_scale is None else float(d_scale)
    tol = 1e-8 * sd_d * float(np.std(v))
    if denom == 0 or abs(denom) <= tol:
        raise WeakIdentificationError(
            "instrument is (numerically) uncorrelated with rho_d; "
            "use the score statistic and its inverted confidence set instead"
        )
    alpha = float(np.mean(v * ry) / denom)
    psi = (ry - rd * alpha) * v
    V = float(np.mean(psi**2) / denom**2)
    se = float(np.sqrt(V / n))
    z = stats.norm.ppf(0.5 + level / 2.0)
    diagnostics = {"first_stage_strength": denom}
    if se == 0:
        diagnostics["exact_fit"] = True
    return AlphaEstimate(
        alpha_hat=alpha,
        std_error=se,
        ci_lower=alpha - z * se,
        ci_upper=alpha + z * se,
        variance_V=V,
        level=level,
        residuals=residuals,
        method=method,
        diagnostics=diagnostics,
    )


# -- nuisance estimation ----------------------------------------------------


def _lasso_regression(design, response, flags, config):
    prob = RegressionProblem(response, design, flags)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        fit = fit_lasso(prob, config.rule)
    converged = fit.converged and not caught
    coef = post_lasso_refit(prob, fit).coefficients if config.post_lasso else fit.coefficients
    support = fit.active_set[flags[fit.active_set]]
    return coef, support, converged


def _stepwise_regression(design, response, flags, rule):
    prob = RegressionProblem(response, design, flags)
    res = stepwise_select(prob, rule)
    coef = np.zeros(design.shape[1])
    if res.selected.size:
        sol, *_ = np.linalg.lstsq(design[:, res.selected], response, rcond=None)
        coef[res.selected] = sol
    support = res.selected[flags[res.selected]]
    return coef, support, True


def fit_nuisances(
    data: IVDataset,
    config: PipelineConfig | None = None,
    *,
    selector: str = "lasso",
    stepwise_rule: StepwiseRule | None = None,
) -> NuisanceEstimates:
    """Run the three selection regressions (two in the exogenous case).

    ``selector`` is ``"lasso"`` (Lasso or Post-Lasso per ``config``) or
    ``"stepwise"`` (p-value stepwise followed by OLS on the selected set).
    """
    config = PipelineConfig() if config is None else config
    if selector == "lasso":
        regress = lambda A, b, f: _lasso_regression(A, b, f, config)  # noqa: E731
    elif selector == "stepwise":
        regress = lambda A, b, f: _stepwise_regression(A, b, f, stepwise_rule)  # noqa: E731
    else:
        raise ValueError(f"unknown selector {selector!r}")

    X, Z = data.X, data.Z
    xflags = data.control_flags()
    px = data.p_x
    theta, sup_y, ok_y = regress(X, data.y, xflags)
    if data.p_z == 0:
        vartheta, sup_d, ok_d = regress(X, data.d, xflags)
        return NuisanceEstimates(
            theta=theta,
            vartheta=vartheta,
            gamma=vartheta.copy(),
            delta=np.zeros(0),
            selection_counts={"y_on_x": int(sup_y.size), "d_on_x": int(sup_d.size)},
            supports={"y_on_x": sup_y, "d_on_x": sup_d},
            exogenous=True,
            converged=ok_y and ok_d,
        )
    XZ = np.hstack([X, Z])
    flags = np.r_[xflags, np.ones(data.p_z, dtype=bool)]
    coef1, sup1, ok1 = regress(XZ, data.d, flags)
    gamma, delta = coef1[:px], coef1[px:]
    d_hat = XZ @ coef1
    vartheta, sup3, ok3 = regress(X, d_hat, xflags)
    counts = {
        "y_on_x": int(sup_y.size),
        "d_on_xz_controls": int(np.sum(sup1 < px)),
        "d_on_xz_instruments": int(np.sum(sup1 >= px)),
        "dhat_on_x": int(sup3.size),
    }
    return NuisanceEstimates(
        theta=theta,
        vartheta=vartheta,
        gamma=gamma,
        delta=delta,
        selection_counts=counts,
        supports={
            "y_on_x": sup_y,
            "d_on_xz_controls": sup1[sup1 < px],
            "d_on_xz_instruments": sup1[sup1 >= px] - px,
            "dhat_on_x": sup3,
        },
        exogenous=False,
        converged=ok_y and ok1 and ok3,
    )


def residual_triple(data: IVDataset, nuisances: NuisanceEstimates) -> ResidualTriple:
    rho_y = data.y - data.X @ nuisances.theta
    rho_d = data.d - data.X @ nuisances.vartheta
    if nuisances.exogenous:
        return ResidualTriple(rho_y, rho_d, rho_d.copy())
    v = data.X @ nuisances.gamma + data.Z @ nuisances.delta - data.X @ nuisances.vartheta
    return ResidualTriple(rho_y, rho_d, v)


def _check_instruments(data, nuisances):
    if data.p_z and not np.any(nuisances.delta != 0):
        raise WeakIdentificationError(
            "no instrument selected in the first stage; "
            "use the score statistic and its inverted confidence set instead"
        )


def _finish(est, nuisances):
    est.diagnostics["selection_counts"] = dict(nuisances.selection_counts)
    est.diagnostics["converged"] = nuisances.converged
    if not nuisances.converged:
        warnings.warn("a selection step did not converge", ConvergenceWarning, stacklevel=3)
    return est


def estimate_double_selection(
    data: IVDataset,
    config: PipelineConfig | None = None,
    *,
    nuisances: NuisanceEstimates | None = None,
) -> AlphaEstimate:
    """Orthogonal-moment estimate of ``alpha`` after Lasso selection.

    With ``p_z == 0`` the instrument is ``rho_d`` itself and the estimator
    reduces to partialling-out with separately selected controls.

    Parameters
    ----------
    data : IVDataset
    config : PipelineConfig, optional
    nuisances : NuisanceEstimates, optional
        Precomputed output of ``fit_nuisances(data, config)``; lets several
        estimators share the selection steps.

    Returns
    -------
    AlphaEstimate
    """
    config = PipelineConfig() if config is None else config
    nu = fit_nuisances(data, config) if nuisances is None else nuisances
    _check_instruments(data, nu)
    est = solve_alpha(residual_triple(data, nu), config.level, method="double_selection", d_scale=np.std(data.d))
    return _finish(est, nu)


def estimate_naive_stepwise(
    data: IVDataset,
    rule: StepwiseRule | None = None,
    config: PipelineConfig | None = None,
) -> AlphaEstimate:
    """Same pipeline with every Lasso step replaced by stepwise + OLS."""
    config = PipelineConfig() if config is None else config
    nu = fit_nuisances(data, config, selector="stepwise", stepwise_rule=rule)
    _check_instruments(data, nu)
    est = solve_alpha(residual_triple(data, nu), config.level, method="naive_stepwise", d_scale=np.std(data.d))
    return _finish(est, nu)


def estimate_naive_nonorthogonal(
    data: IVDataset,
    config: PipelineConfig | None = None,
    *,
    nuisances: NuisanceEstimates | None = None,
    variance: str = "post_selection",
) -> AlphaEstimate:
    """IV with the raw fitted first stage ``X gamma + Z delta`` as instrument.

    Skips partialling the controls out of the instrument. The moment is
    still valid at the true nuisance values, but its derivative in
    ``theta`` is ``-E[x w] != 0``, so errors from selecting controls pass
    straight into the estimate.
    """
    config = PipelineConfig() if config is None else config
    if data.p_z == 0:
        raise InputError("the non-orthogonal estimator needs instruments (p_z >= 1)")
    nu = fit_nuisances(data, config) if nuisances is None else nuisances
    _check_instruments(data, nu)
    rho_y = data.y - data.X @ nu.theta
    rho_d = data.d - data.X @ nu.vartheta
    w = data.X @ nu.gamma + data.Z @ nu.delta
    est = solve_alpha(
        ResidualTriple(rho_y, rho_d, w), config.level, method="naive_nonorthogonal", d_scale=np.std(data.d)
    )
    if variance == "post_selection":
        V = _post_selection_variance(data, nu, est.alpha_hat)
        se = float(np.sqrt(V / data.n))
        z = stats.norm.ppf(0.5 + config.level / 2.0)
        est.diagnostics["plugin_std_error"] = est.std_error
        est.variance_V, est.std_error = V, se
        est.ci_lower, est.ci_upper = est.alpha_hat - z * se, est.alpha_hat + z * se
    elif variance != "plugin":
        raise ValueError(f"unknown variance {variance!r}")
    return _finish(est, nu)


def _post_selection_variance(data, nu, alpha):
    """Asymptotic variance of the non-orthogonal estimate with supports taken as known.

    Stacks the three OLS refits and the IV moment into one exactly
    identified M-estimator and returns the ``alpha`` entry of
    ``G^-1 Omega G^-T``. This is the variance under perfect model selection.
    """
    xflags = data.control_flags()
    unpen = np.flatnonzero(~xflags)
    px = data.p_x
    Xy = data.X[:, np.union1d(nu.supports["y_on_x"], unpen).astype(int)]
    X3 = data.X[:, np.union1d(nu.supports["dhat_on_x"], unpen).astype(int)]
    cols1 = np.union1d(np.union1d(nu.supports["d_on_xz_controls"], unpen), nu.supports["d_on_xz_instruments"] + px)
    W1 = np.hstack([data.X, data.Z])[:, cols1.astype(int)]
    y, d = data.y, data.d
    by = np.linalg.lstsq(Xy, y, rcond=None)[0]
    b1 = np.linalg.lstsq(W1, d, rcond=None)[0]
    w = W1 @ b1
    b3 = np.linalg.lstsq(X3, w, rcond=None)[0]
    rho_d = d - X3 @ b3
    e = y - Xy @ by - alpha * rho_d
    ky, k1, k3 = Xy.shape[1], W1.shape[1], X3.shape[1]
    n = data.n
    g = np.hstack(
        [
            Xy * (y - Xy @ by)[:, None],
            W1 * (d - w)[:, None],
            X3 * (w - X3 @ b3)[:, None],
            (w * e)[:, None],
        ]
    )
    k = ky + k1 + k3 + 1
    G = np.zeros((k, k))
    i1, i3, ia = ky, ky + k1, ky + k1 + k3
    G[:ky, :ky] = -Xy.T @ Xy / n
    G[i1:i3, i1:i3] = -W1.T @ W1 / n
    G[i3:ia, i1:i3] = X3.T @ W1 / n
    G[i3:ia, i3:ia] = -X3.T @ X3 / n
    G[ia, :ky] = -(w @ Xy) / n
    G[ia, i1:i3] = (e @ W1) / n
    G[ia, i3:ia] = alpha * (w @ X3) / n
    G[ia, ia] = -(w @ rho_d) / n
    omega = g.T @ g / n
    Ginv = np.linalg.pinv(G)
    return float((Ginv @ omega @ Ginv.T)[ia, ia])


def _basis(A):
    """Orthonormal basis of the column span, plus the number of dropped columns."""
    if A.shape[1] == 0:
        return A, 0
    u, s, _ = np.linalg.svd(A, full_matrices=False)
    if s[0] == 0:
        return u[:, :0], A.shape[1]
    rank = int(np.sum(s > s[0] * max(A.shape) * np.finfo(float).eps))
    return u[:, :rank], A.shape[1] - rank


def estimate_tsls(
    y,
    d,
    controls,
    instruments,
    level: float = 0.95,
    *,
    method: str = "tsls",
) -> AlphaEstimate:
    """2SLS coefficient on ``d`` with heteroscedasticity-robust (HC0) error.

    Controls and instruments are partialled out first. The estimate and
    its sandwich variance for ``d`` are then a scalar IV problem. The
    instrument is the projection of the residualized ``d`` onto the
    residualized instruments. Collinear columns are dropped and counted in
    ``diagnostics``.
    """
    y = np.asarray(y, dtype=float)
    d = np.asarray(d, dtype=float)
    W = np.asarray(controls, dtype=float).reshape(len(y), -1)
    Zi = np.asarray(instruments, dtype=float).reshape(len(y), -1)
    Qw, dropped_w = _basis(W)
    yt = y - Qw @ (Qw.T @ y)
    dt = d - Qw @ (Qw.T @ d)
    Zt = Zi - Qw @ (Qw.T @ Zi)
    Qz, dropped_z = _basis(Zt)
    if Qz.shape[1] == 0:
        raise WeakIdentificationError("no instrument variation left after partialling out controls")
    v = Qz @ (Qz.T @ dt)
    est = solve_alpha(ResidualTriple(yt, dt, v), level, method=method, d_scale=np.std(d))
    est.diagnostics.update(
        {
            "n_controls": int(W.shape[1] - dropped_w),
            "n_instruments": int(Zi.shape[1] - dropped_z),
            "dropped_collinear_controls": int(dropped_w),
            "dropped_collinear_instruments": int(dropped_z),
        }
    )
    return est


def estimate_ols(data: IVDataset, level: float = 0.95) -> AlphaEstimate:
    """OLS of ``y`` on ``d`` and all controls, treating ``d`` as exogenous."""
    return estimate_tsls(data.y, data.d, data.X, data.d[:, None], level, method="ols")


def estimate_union_2sls(
    data: IVDataset,
    config: PipelineConfig | None = None,
    *,
    nuisances: NuisanceEstimates | None = None,
) -> AlphaEstimate:
    """2SLS with Lasso-selected instruments and the union of selected controls.

    Controls come from three Lasso fits: ``d`` on ``[X, Z]``, ``d`` on
    ``X`` and ``y`` on ``X``. Instruments are those selected in the first.
    """
    config = PipelineConfig() if config is None else config
    if data.p_z == 0:
        raise InputError("union 2SLS needs instruments (p_z >= 1)")
    nu = fit_nuisances(data, config) if nuisances is None else nuisances
    xflags = data.control_flags()
    _, sup_d_x, ok = _lasso_regression(data.X, data.d, xflags, config)
    instruments = nu.supports["d_on_xz_instruments"]
    if instruments.size == 0:
        raise WeakIdentificationError("no instrument selected in the first stage")
    union = np.union1d(
        np.union1d(nu.supports["d_on_xz_controls"], nu.supports["y_on_x"]), sup_d_x
    )
    union = np.union1d(union, np.flatnonzero(~xflags)).astype(int)
    est = estimate_tsls(
        data.y, data.d, data.X[:, union], data.Z[:, instruments], config.level, method="union_2sls"
    )
    est.diagnostics["union_controls"] = union.tolist()
    est.diagnostics["selected_instruments"] = instruments.tolist()
    est.diagnostics["selection_counts"] = dict(nu.selection_counts, d_on_x=int(sup_d_x.size))
    est.diagnostics["converged"] = nu.converged and ok
    return est
