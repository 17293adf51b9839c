"""Damped least squares (LSQR) and ridge estimators.

Two damping conventions are in use and kept apart on purpose:

* :func:`lsqr` minimises ``|X b - y|^2 + damp^2 |b|^2`` (``damp`` squared);
* :func:`modified_ridge` solves ``(X'X + lam I) b = X'y + lam b0``.

So ``lsqr(X, y, damp)`` equals ``modified_ridge(X, y, damp**2, 0)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .sparse import amd_order, cholesky, from_scipy, solve

log = logging.getLogger(__name__)


@dataclass
class RidgeSolution:
    beta: np.ndarray
    damp: float
    iterations: int
    residual_norm: float
    converged: bool
    residual_history: list[float] = field(default_factory=list)


def lsqr(X, y, damp: float = 0.0, tol: float = 1e-10, max_iter: int | None = None) -> RidgeSolution:
    """Golub-Kahan bidiagonalization for the damped least-squares problem.

    ``residual_norm`` is ``sqrt(|X b - y|^2 + damp^2 |b|^2)``; it never
    increases between iterations. Iteration stops once the normal-equation
    residual ``|X'r - damp^2 b| / (|X| |r|)`` drops below ``tol`` or the
    residual stalls (relative change below ``tol**2``; the residual is
    quadratic in the solution error, so ``tol`` alone would stop early). Hitting ``max_iter`` returns the last iterate with
    ``converged=False``.
    """
    if damp < 0:
        raise ValueError("damp must be non-negative")
    X = sp.csr_matrix(X) if not sp.issparse(X) else X.tocsr()
    y = np.asarray(y, dtype=float)
    m, n = X.shape
    if y.shape != (m,):
        raise ValueError("y does not match the number of rows of X")
    max_iter = 4 * n if max_iter is None else max_iter
    x = np.zeros(n)

    u = y.copy()
    beta = np.linalg.norm(u)
    if beta == 0:
        return RidgeSolution(x, damp, 0, 0.0, True, [0.0])
    u /= beta
    v = X.T @ u
    alpha = np.linalg.norm(v)
    if alpha == 0:
        return RidgeSolution(x, damp, 0, beta, True, [beta])
    v /= alpha
    w = v.copy()
    phibar = beta
    rhobar = alpha
    anorm2 = 0.0
    psi_sq = 0.0
    history = [phibar]
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        u = X @ v - alpha * u
        beta = np.linalg.norm(u)
        if beta > 0:
            u /= beta
        anorm2 += alpha**2 + beta**2 + damp**2
        v = X.T @ u - beta * v
        alpha = np.linalg.norm(v)
        if alpha > 0:
            v /= alpha

        # eliminate the damping row, then the subdiagonal
        rhobar1 = np.hypot(rhobar, damp)
        cs1, sn1 = rhobar / rhobar1, damp / rhobar1
        psi = sn1 * phibar
        phibar = cs1 * phibar

        rho = np.hypot(rhobar1, beta)
        cs, sn = rhobar1 / rho, beta / rho
        theta = sn * alpha
        rhobar = -cs * alpha
        phi = cs * phibar
        phibar = sn * phibar

        x = x + (phi / rho) * w
        w = v - (theta / rho) * w

        prev = history[-1]
        psi_sq += psi**2
        res = float(np.sqrt(phibar**2 + psi_sq))
        history.append(res)
        normal_res = abs(phibar * cs) * alpha
        test_normal = normal_res / (np.sqrt(anorm2) * max(res, np.finfo(float).tiny))
        if res == 0 or test_normal < tol or (prev - res) / prev < tol**2:
            converged = True
            break
    if not converged:
        log.warning("lsqr stopped at max_iter=%d without convergence", max_iter)
    return RidgeSolution(x, damp, it, history[-1], converged, history)


def modified_ridge(X, y, lam: float, beta0=None) -> np.ndarray:
    """``(X'X + lam I)^-1 (X'y + lam beta0)`` by sparse Cholesky."""
    X = sp.csr_matrix(X) if not sp.issparse(X) else X.tocsr()
    y = np.asarray(y, dtype=float)
    n = X.shape[1]
    beta0 = np.zeros(n) if beta0 is None else np.asarray(beta0, dtype=float)
    if lam < 0:
        raise ValueError("lam must be non-negative")
    A = (X.T @ X).tocsc() + lam * sp.identity(n, format="csc")
    mat = from_scipy(A + 0.0 * sp.identity(n, format="csc"))
    F = cholesky(mat, amd_order(mat))
    return solve(F, X.T @ y + lam * beta0)
