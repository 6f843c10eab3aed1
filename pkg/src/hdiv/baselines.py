"""OLS with heteroscedasticity-robust covariance and p-value stepwise selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from hdiv.exceptions import ConfigurationError, InputError
from hdiv.lasso import RegressionProblem

__all__ = ["OlsFit", "StepwiseRule", "StepwiseResult", "fit_ols", "stepwise_select"]

_COLLINEAR = 1e-10


@dataclass(frozen=True)
class StepwiseRule:
    """Entry/removal thresholds for forward-backward stepwise selection.

    ``max_steps=None`` means ``2 * p``.
    """

    p_enter: float = 0.05
    p_remove: float = 0.10
    max_steps: int | None = None

    def __post_init__(self):
        if not 0 <= self.p_enter < 1 or not 0 < self.p_remove < 1:
            raise ConfigurationError("p_enter and p_remove must lie in (0, 1)")
        if self.p_enter >= self.p_remove:
            raise ConfigurationError("p_enter must be smaller than p_remove")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError("max_steps must be positive")


@dataclass
class OlsFit:
    coefficients: np.ndarray
    residuals: np.ndarray
    robust_covariance: np.ndarray
    rank_flag: bool

    @property
    def robust_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.robust_covariance))


@dataclass
class StepwiseResult:
    selected: np.ndarray
    steps: int
    skipped_collinear: list[int] = field(default_factory=list)
    history: list[tuple[str, int, float]] = field(default_factory=list)


def fit_ols(problem: RegressionProblem) -> OlsFit:
    """Least squares on every column of ``problem.design``.

    ``rank_flag`` is True for a full-rank design. Otherwise the
    minimum-norm solution is returned and the covariance uses the
    pseudo-inverse of ``X'X``.
    """
    X, y = problem.design, problem.response
    if X.shape[0] == 0:
        raise InputError("cannot fit OLS with zero rows")
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    full_rank = rank == X.shape[1]
    XtX = X.T @ X
    bread = np.linalg.inv(XtX) if full_rank else np.linalg.pinv(XtX)
    meat = (X * resid[:, None] ** 2).T @ X
    cov = bread @ meat @ bread
    return OlsFit(coef, resid, cov, bool(full_rank))


def _classical_pvalues(X, y):
    n, k = X.shape
    Q, R = np.linalg.qr(X)
    coef = np.linalg.solve(R, Q.T @ y)
    resid = y - X @ coef
    df = n - k
    sigma2 = resid @ resid / df
    Rinv = np.linalg.inv(R)
    se = np.sqrt(sigma2 * np.sum(Rinv**2, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = coef / se
    return 2 * stats.t.sf(np.abs(t), df)


def stepwise_select(problem: RegressionProblem, rule: StepwiseRule | None = None) -> StepwiseResult:
    """Forward-backward selection on classical t-test p-values.

    Unpenalized columns are always in the model (and in ``selected``) and
    are never tested. Each round tries one forward addition (smallest
    p-value below ``p_enter``) followed by one backward removal (largest
    p-value above ``p_remove``). Stops when a round changes nothing or
    after ``max_steps`` changes.
    """
    rule = StepwiseRule() if rule is None else rule
    X, y = problem.design, problem.response
    n, p = X.shape
    max_steps = 2 * p if rule.max_steps is None else rule.max_steps
    forced = list(np.flatnonzero(~problem.penalize_flags))
    chosen: list[int] = []
    skipped: set[int] = set()
    history = []
    norms = np.sum(X**2, axis=0)

    def residualize(cols):
        """Residual of y and of every column on span(X[:, cols])."""
        if not cols:
            return y.copy(), X.copy()
        Q, R = np.linalg.qr(X[:, cols])
        keep = np.abs(np.diag(R)) > _COLLINEAR * max(1.0, np.max(np.abs(np.diag(R))))
        Q = Q[:, keep]
        return y - Q @ (Q.T @ y), X - Q @ (Q.T @ X)

    r, Xr = residualize(forced)
    steps = 0
    while steps < max_steps:
        changed = False
        k_new = len(forced) + len(chosen) + 1
        df = n - k_new
        in_model = set(forced) | set(chosen)
        cand = np.array([j for j in range(p) if problem.penalize_flags[j] and j not in in_model], dtype=int)
        if cand.size and df > 0:
            ss = np.sum(Xr[:, cand] ** 2, axis=0)
            ok = ss > _COLLINEAR * np.maximum(norms[cand], 1e-300)
            for j in cand[~ok]:
                skipped.add(int(j))
            cand, ss = cand[ok], ss[ok]
        if cand.size and df > 0:
            xr = Xr[:, cand].T @ r
            rss = r @ r
            rss_new = np.maximum(rss - xr**2 / ss, 0.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (xr / ss) / np.sqrt(rss_new / df / ss)
            t = np.where(np.isnan(t), 0.0, t)
            pv = 2 * stats.t.sf(np.abs(t), df)
            best = int(np.argmin(pv))
            if pv[best] < rule.p_enter:
                j = int(cand[best])
                chosen.append(j)
                q = Xr[:, j] / np.sqrt(ss[best])
                r = r - q * (q @ r)
                Xr = Xr - np.outer(q, q @ Xr)
                steps += 1
                changed = True
                history.append(("add", j, float(pv[best])))
        if chosen and steps < max_steps and n > len(forced) + len(chosen):
            cols = forced + chosen
            pv = _classical_pvalues(X[:, cols], y)[len(forced):]
            worst = int(np.argmax(pv))
            if pv[worst] > rule.p_remove:
                j = chosen.pop(worst)
                history.append(("remove", j, float(pv[worst])))
                steps += 1
                changed = True
                r, Xr = residualize(forced + chosen)
        if not changed:
            break
    return StepwiseResult(
        selected=np.array(sorted(forced + chosen), dtype=int),
        steps=steps,
        skipped_collinear=sorted(skipped),
        history=history,
    )
