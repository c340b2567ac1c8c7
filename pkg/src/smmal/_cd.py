"""Numba kernel for the L1-penalized quadratic subproblem of proximal Newton."""
import numpy as np
from numba import njit


@njit(cache=True)
def _soft(x, t):
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


@njit(cache=True)
def _sweep(G, grad, z, Gd, lam, coords):
    # one cyclic pass over `coords`; Gd holds G @ (z - b), G symmetric so rows are read
    p = G.shape[0]
    max_move = 0.0
    for jj in range(coords.shape[0]):
        j = coords[jj]
        hj = G[j, j]
        zj = z[j]
        new = _soft(zj - (grad[j] + Gd[j]) / hj, lam[j] / hj)
        delta = new - zj
        if delta != 0.0:
            z[j] = new
            for i in range(p):
                Gd[i] += delta * G[j, i]
            move = abs(delta) * np.sqrt(hj)
            if move > max_move:
                max_move = move
    return max_move


@njit(cache=True)
def quadratic_cd(G, grad, b, lam, tol, max_sweeps):
    """Minimise grad'd + d'Gd/2 + sum_j lam_j |b_j + d_j| over d, G = X'diag(h)X.

    Returns z = b + d.  Active-set strategy: after a full sweep, iterate on
    the nonzero coordinates until stable, then confirm with a full sweep.
    """
    p = G.shape[0]
    z = b.copy()
    Gd = np.zeros(p)
    everything = np.arange(p)
    sweeps = 0
    while sweeps < max_sweeps:
        move = _sweep(G, grad, z, Gd, lam, everything)
        sweeps += 1
        if move < tol:
            break
        active = np.flatnonzero(z != 0.0)
        while sweeps < max_sweeps:
            move = _sweep(G, grad, z, Gd, lam, active)
            sweeps += 1
            if move < tol:
                break
    return z, sweeps
