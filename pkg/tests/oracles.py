"""Independent reference computations used by the test suite."""

import itertools

import numpy as np


def lasso_objective(X, y, b, lam, loadings):
    n = len(y)
    r = y - X @ b
    return r @ r / n + lam / n * np.sum(loadings * np.abs(b))


def brute_force_lasso(X, y, lam, loadings):
    """Exact weighted-Lasso minimiser by enumerating sign patterns.

    For a fixed sign vector ``s`` the objective is a quadratic on the
    active coordinates, minimised at
    ``b_A = (X_A'X_A)^-1 (X_A'y - lam/2 * loadings_A * s_A)``. The global
    minimiser is the sign-consistent candidate with the smallest objective.
    """
    p = X.shape[1]
    best, best_val = np.zeros(p), lasso_objective(X, y, np.zeros(p), lam, loadings)
    for signs in itertools.product((-1, 0, 1), repeat=p):
        s = np.array(signs, dtype=float)
        A = np.flatnonzero(s)
        if A.size == 0:
            continue
        XA = X[:, A]
        gram = XA.T @ XA
        if np.linalg.cond(gram) > 1e12:
            continue
        bA = np.linalg.solve(gram, XA.T @ y - lam / 2 * loadings[A] * s[A])
        if np.any(np.sign(bA) != s[A]):
            continue
        b = np.zeros(p)
        b[A] = bA
        val = lasso_objective(X, y, b, lam, loadings)
        if val < best_val:
            best, best_val = b, val
    return best


def normal_equations(X, y):
    return np.linalg.solve(X.T @ X, X.T @ y)


def just_identified_iv(y, d, z, controls=None):
    """Textbook IV ``(Z'W)^-1 Z'y`` with ``W = [d, controls]``; returns the ``d`` entry."""
    n = len(y)
    C = np.empty((n, 0)) if controls is None else np.asarray(controls).reshape(n, -1)
    W = np.column_stack([d, C])
    Zf = np.column_stack([z, C])
    return np.linalg.solve(Zf.T @ W, Zf.T @ y)[0]


def tsls_hc0(y, d, controls, instruments):
    """Full-matrix 2SLS with HC0 sandwich; returns (coef on d, se on d)."""
    W = np.column_stack([d, controls])
    Zf = np.column_stack([controls, instruments])
    P = Zf @ np.linalg.pinv(Zf.T @ Zf) @ Zf.T
    What = P @ W
    b = np.linalg.solve(What.T @ W, What.T @ y)
    e = y - W @ b
    A = np.linalg.inv(What.T @ What)
    meat = (What * e[:, None] ** 2).T @ What
    V = A @ meat @ A
    return b[0], np.sqrt(V[0, 0])
