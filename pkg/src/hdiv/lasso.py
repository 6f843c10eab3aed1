"""Weighted-penalty Lasso with data-driven tuning and Post-Lasso refitting.

The estimator minimises::

    (1/n) * ||y - X b||^2 + (lambda/n) * sum_j loading_j * |b_j|

over the penalized coordinates; unpenalized columns (typically the
intercept) are profiled out exactly before coordinate descent runs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from hdiv._cd import coordinate_descent
from hdiv.exceptions import ConfigurationError, ConvergenceWarning, InputError

__all__ = [
    "RegressionProblem",
    "PenaltyRule",
    "LassoFit",
    "PostLassoFit",
    "compute_penalty_level",
    "fit_lasso",
    "post_lasso_refit",
    "kkt_violation",
    "lasso_objective",
]

CD_TOL = 1e-8
CD_MAX_SWEEPS = 10_000
_KKT_POLISH = 1e-10
_ZERO_COLUMN = 1e-12


@dataclass(frozen=True)
class RegressionProblem:
    """Response, design and which columns carry an L1 penalty."""

    response: np.ndarray
    design: np.ndarray
    penalize_flags: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.response, dtype=float)
        X = np.asarray(self.design, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if y.ndim != 1:
            y = y.reshape(-1)
        if X.ndim != 2 or X.shape[1] == 0:
            raise InputError(f"design must be a non-empty matrix, got shape {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise InputError(
                f"response has {y.shape[0]} rows but design has {X.shape[0]}"
            )
        if X.shape[0] == 0:
            raise InputError("problem has zero rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise InputError("response and design must be finite")
        if self.penalize_flags is None:
            flags = np.ones(X.shape[1], dtype=bool)
        else:
            flags = np.asarray(self.penalize_flags, dtype=bool).reshape(-1)
            if flags.shape[0] != X.shape[1]:
                raise InputError("penalize_flags length must equal number of columns")
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "penalize_flags", flags)

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def p(self) -> int:
        return self.design.shape[1]


@dataclass(frozen=True)
class PenaltyRule:
    """Tuning constants for the penalty level and loading iterations.

    Parameters
    ----------
    c : float, default=1.1
        Slack constant, must exceed one.
    gamma : float or None, default=None
        Confidence tuning in (0, 1). ``None`` resolves to
        ``0.1 / log(max(n, p))`` at fit time.
    max_loading_iterations : int, default=5
        Number of loading updates after the initial fit.
    loading_tolerance : float, default=1e-4
        Stop updating once the largest relative loading change falls below this.
    post_lasso_residuals : bool, default=True
        Update loadings from Post-Lasso residuals rather than Lasso residuals.
    """

    c: float = 1.1
    gamma: float | None = None
    max_loading_iterations: int = 5
    loading_tolerance: float = 1e-4
    post_lasso_residuals: bool = True

    def __post_init__(self):
        if not self.c > 1:
            raise ConfigurationError(f"c must exceed 1, got {self.c}")
        if self.gamma is not None and not 0 < self.gamma < 1:
            raise ConfigurationError(f"gamma must lie in (0, 1), got {self.gamma}")
        if int(self.max_loading_iterations) < 1:
            raise ConfigurationError("max_loading_iterations must be positive")
        if not self.loading_tolerance > 0:
            raise ConfigurationError("loading_tolerance must be positive")

    def resolve_gamma(self, n: int, p: int) -> float:
        if self.gamma is not None:
            return self.gamma
        return 0.1 / np.log(max(n, p))


@dataclass
class LassoFit:
    coefficients: np.ndarray
    active_set: np.ndarray
    lambda_: float
    loadings: np.ndarray
    objective: float
    iterations: int
    converged: bool
    loading_iterations: int = 0
    objective_history: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_selected(self) -> int:
        return int(self.active_set.size)


@dataclass
class PostLassoFit:
    coefficients: np.ndarray
    support: np.ndarray
    rank_deficient: bool
    empty: bool


def compute_penalty_level(n: int, p: int, rule: PenaltyRule | None = None) -> float:
    """Return ``2 c sqrt(n) * Phi^{-1}(1 - gamma / (2 p))``."""
    rule = PenaltyRule() if rule is None else rule
    if n < 2 or p < 1:
        raise ConfigurationError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
    gamma = rule.resolve_gamma(n, p)
    return float(2.0 * rule.c * np.sqrt(n) * norm.ppf(1.0 - gamma / (2.0 * p)))


def _orthonormal_basis(U: np.ndarray) -> np.ndarray:
    if U.shape[1] == 0:
        return U
    u, s, _ = np.linalg.svd(U, full_matrices=False)
    rank = int(np.sum(s > s[0] * max(U.shape) * np.finfo(float).eps)) if s[0] > 0 else 0
    return u[:, :rank]


def lasso_objective(problem: RegressionProblem, coefficients, lambda_, loadings) -> float:
    r = problem.response - problem.design @ coefficients
    pen = problem.penalize_flags
    penalty = np.sum(np.asarray(loadings)[pen] * np.abs(coefficients[pen]))
    return float(r @ r / problem.n + lambda_ / problem.n * penalty)


def kkt_violation(problem: RegressionProblem, fit: LassoFit) -> float:
    """Largest KKT violation, relative to ``(lambda/n) * max(loadings)``."""
    n = problem.n
    b = fit.coefficients
    r = problem.response - problem.design @ b
    g = 2.0 / n * (problem.design.T @ r)
    bound = fit.lambda_ / n * fit.loadings
    pen = problem.penalize_flags
    viol = np.where(
        b != 0, np.abs(g - bound * np.sign(b)), np.maximum(np.abs(g) - bound, 0.0)
    )
    viol = np.where(pen, viol, np.abs(g))
    scale = fit.lambda_ / n * np.max(fit.loadings, initial=0.0)
    if scale <= 0:
        scale = np.sqrt(np.mean(problem.response**2)) * np.max(
            np.sqrt(np.mean(problem.design**2, axis=0))
        )
        scale = scale if scale > 0 else 1.0
    return float(np.max(viol, initial=0.0) / scale)


def fit_lasso(
    problem: RegressionProblem,
    rule: PenaltyRule | None = None,
    *,
    penalty_level: float | None = None,
    loadings=None,
    track_objective: bool = False,
) -> LassoFit:
    """Fit the weighted Lasso.

    Parameters
    ----------
    problem : RegressionProblem
    rule : PenaltyRule, optional
        Defaults to ``PenaltyRule()``.
    penalty_level : float, optional
        Overrides the data-driven ``lambda``.
    loadings : array_like, optional
        Fixed penalty loadings (length ``p``); disables the iterated update.
    track_objective : bool
        Record the objective after every coordinate-descent sweep of the
        final fit in ``objective_history``.

    Returns
    -------
    LassoFit
    """
    rule = PenaltyRule() if rule is None else rule
    y, X, pen = problem.response, problem.design, problem.penalize_flags
    n, p = problem.n, problem.p
    pen_idx = np.flatnonzero(pen)
    unpen_idx = np.flatnonzero(~pen)

    basis = _orthonormal_basis(X[:, unpen_idx])
    Xp = X[:, pen_idx]
    yt = y
    if basis.shape[1]:
        Xp = Xp - basis @ (basis.T @ Xp)
        yt = y - basis @ (basis.T @ y)

    raw_rms = np.sqrt(np.mean(X[:, pen_idx] ** 2, axis=0))
    scale = np.sqrt(np.mean(Xp**2, axis=0))
    free = scale > _ZERO_COLUMN * np.maximum(raw_rms, 1.0)
    safe_scale = np.where(free, scale, 1.0)
    Xs = Xp / safe_scale

    if penalty_level is None:
        lam = compute_penalty_level(max(n, 2), max(pen_idx.size, 1), rule)
    else:
        lam = float(penalty_level)
        if lam < 0:
            raise ConfigurationError("penalty_level must be non-negative")

    G = Xs.T @ Xs / n
    c = Xs.T @ yt / n
    yy = float(yt @ yt / n)
    # pinned columns still need a usable diagonal in the kernel
    G[np.diag_indices_from(G)] = np.where(free, np.diag(G), 1.0)

    def loading_from(resid):
        return np.sqrt(np.mean(Xp**2 * resid[:, None] ** 2, axis=0))

    def residuals(bs):
        if not rule.post_lasso_residuals:
            return yt - Xs @ bs
        act = np.flatnonzero(bs != 0)
        if act.size == 0:
            return yt
        coef, *_ = np.linalg.lstsq(Xs[:, act], yt, rcond=None)
        return yt - Xs[:, act] @ coef

    def solve(ell, b0, track):
        kappa = lam / n * ell / safe_scale
        kkt_tol = _KKT_POLISH * max(np.max(kappa, initial=0.0), np.sqrt(yy), 1e-300)
        return coordinate_descent(
            G, c, yy, kappa, free, b0, CD_TOL, CD_MAX_SWEEPS, kkt_tol, track
        )

    fixed = loadings is not None
    if fixed:
        ell_full = np.asarray(loadings, dtype=float).reshape(-1)
        if ell_full.shape[0] != p or np.any(ell_full < 0):
            raise ConfigurationError("loadings must be a non-negative vector of length p")
        ell = ell_full[pen_idx]
    else:
        ell = loading_from(yt)
    ell = np.where(free, ell, 0.0)

    b = np.zeros(pen_idx.size)
    track_now = track_objective and (fixed or rule.max_loading_iterations == 0)
    b, sweeps, converged, history = solve(ell, b, track_now)
    total_sweeps = sweeps
    loading_iterations = 0
    if not fixed:
        for _ in range(int(rule.max_loading_iterations)):
            new_ell = np.where(free, loading_from(residuals(b)), 0.0)
            ref = np.where(ell > 0, ell, 1.0)
            change = np.max(np.abs(new_ell - ell) / ref, initial=0.0)
            ell = new_ell
            loading_iterations += 1
            b, sweeps, converged, history = solve(ell, b, track_objective)
            total_sweeps += sweeps
            if change < rule.loading_tolerance:
                break
    if not converged:
        warnings.warn(
            f"coordinate descent did not converge in {CD_MAX_SWEEPS} sweeps",
            ConvergenceWarning,
            stacklevel=2,
        )

    coef = np.zeros(p)
    coef[pen_idx] = np.where(free, b / safe_scale, 0.0)
    if unpen_idx.size:
        a, *_ = np.linalg.lstsq(X[:, unpen_idx], y - X[:, pen_idx] @ coef[pen_idx], rcond=None)
        coef[unpen_idx] = a
    full_ell = np.zeros(p)
    full_ell[pen_idx] = ell
    return LassoFit(
        coefficients=coef,
        active_set=np.flatnonzero(coef != 0),
        lambda_=lam,
        loadings=full_ell,
        objective=lasso_objective(problem, coef, lam, full_ell),
        iterations=int(total_sweeps),
        converged=bool(converged),
        loading_iterations=loading_iterations,
        objective_history=history if track_objective else None,
    )


def post_lasso_refit(problem: RegressionProblem, fit: LassoFit) -> PostLassoFit:
    """OLS on the selected columns plus every unpenalized column.

    Rank-deficient supports get the minimum-norm least-squares solution and
    ``rank_deficient=True``. An empty support yields the zero vector with
    ``empty=True``.
    """
    support = np.union1d(fit.active_set, np.flatnonzero(~problem.penalize_flags)).astype(int)
    coef = np.zeros(problem.p)
    if support.size == 0:
        return PostLassoFit(coef, support, rank_deficient=False, empty=True)
    sol, _, rank, _ = np.linalg.lstsq(problem.design[:, support], problem.response, rcond=None)
    coef[support] = sol
    return PostLassoFit(coef, support, rank_deficient=bool(rank < support.size), empty=False)
