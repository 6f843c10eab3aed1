"""Covariance-update coordinate descent kernel (numba)."""

import numpy as np
from numba import njit


@njit(cache=True)
def _soft(z, t):
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@njit(cache=True)
def _objective(yy, G, c, kappa, b):
    p = b.shape[0]
    val = yy
    for j in range(p):
        if b[j] != 0.0:
            val -= 2.0 * c[j] * b[j]
            val += kappa[j] * abs(b[j])
            for k in range(p):
                if b[k] != 0.0:
                    val += b[j] * G[j, k] * b[k]
    return val


@njit(cache=True)
def _kkt_ok(G, c, kappa, free, b, kkt_tol):
    p = b.shape[0]
    Gb = G @ b
    for j in range(p):
        if not free[j]:
            continue
        g = 2.0 * (c[j] - Gb[j])
        if b[j] > 0.0:
            viol = abs(g - kappa[j])
        elif b[j] < 0.0:
            viol = abs(g + kappa[j])
        else:
            viol = abs(g) - kappa[j]
        if viol > kkt_tol:
            return False
    return True


@njit(cache=True)
def coordinate_descent(G, c, yy, kappa, free, b, tol, max_sweeps, kkt_tol, track):
    """Minimise ``yy - 2 c'b + b'Gb + sum(kappa * |b|)`` over ``b[free]``.

    ``G`` must have a positive diagonal on free coordinates. Coordinates with
    ``free[j] == False`` stay at zero. Returns the solution, the number of
    sweeps, a convergence flag and the per-sweep objective (empty unless
    ``track``).
    """
    p = b.shape[0]
    b = b.copy()
    for j in range(p):
        if not free[j]:
            b[j] = 0.0
    Gb = G @ b
    history = np.empty(max_sweeps + 1 if track else 0)
    if track:
        history[0] = _objective(yy, G, c, kappa, b)
    converged = False
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        max_delta = 0.0
        max_abs = 0.0
        for j in range(p):
            if not free[j]:
                continue
            old = b[j]
            z = c[j] - Gb[j] + G[j, j] * old
            new = _soft(z, 0.5 * kappa[j]) / G[j, j]
            if new != old:
                delta = new - old
                b[j] = new
                for k in range(p):
                    Gb[k] += delta * G[k, j]
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
            if abs(new) > max_abs:
                max_abs = abs(new)
        if track:
            history[sweeps] = _objective(yy, G, c, kappa, b)
        if max_delta < tol * (1.0 + max_abs):
            Gb = G @ b
            if _kkt_ok(G, c, kappa, free, b, kkt_tol):
                converged = True
                break
    if track:
        history = history[: sweeps + 1]
    return b, sweeps, converged, history
