"""Levenberg-Marquardt minimizer shared by the pose and bundle solvers.

Damping follows the Marquardt diagonal scaling with lambda starting at
1e-3, multiplied by 10 on a rejected step and divided by 10 on an
accepted one. A step is accepted only when it strictly decreases the
cost, so the accepted-cost sequence is non-increasing by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverDiverged


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    cost_trace: list[float]
    iterations: int
    converged: bool


def huber_scale(residuals: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Scalar Huber whitening: returns (scaled residuals, d(scaled)/d(raw)).

    The scaled residual has squared norm equal to the Huber cost of the
    raw residual, and is C1 across the threshold, so least squares on the
    scaled vector minimizes the robust objective.
    """
    r = np.asarray(residuals, dtype=float)
    a = np.abs(r)
    out = r.copy()
    drv = np.ones_like(r)
    big = a > delta
    if np.any(big):
        s = np.sqrt(2.0 * delta * a[big] - delta * delta)
        out[big] = np.sign(r[big]) * s
        drv[big] = delta / s
    return out, drv


def lm_minimize(
    fun: Callable[[np.ndarray], tuple[np.ndarray, "np.ndarray | sp.spmatrix"]],
    x0: np.ndarray,
    max_iterations: int = 100,
    rel_tol: float = 1e-12,
    lam0: float = 1e-3,
) -> LMResult:
    """Minimize ``0.5 * ||r(x)||^2`` where ``fun`` returns ``(r, J)``.

    ``fun`` may return residuals containing non-finite values to signal an
    infeasible point (e.g. a point moved behind the camera); such trial
    steps are rejected. ``J`` may be dense or ``scipy.sparse``.

    Raises
    ------
    SolverDiverged
        If the cost is non-finite at the initial point.
    """
    x = np.asarray(x0, dtype=float).copy()
    r, J = fun(x)
    cost = float(r @ r)
    if not np.isfinite(cost):
        raise SolverDiverged("cost is non-finite at the initial estimate")
    lam = lam0
    trace = [cost]
    iters = 0
    converged = False
    for iters in range(1, max_iterations + 1):
        sparse = sp.issparse(J)
        if sparse:
            J = J.tocsr()
            H = (J.T @ J).tocsc()
            g = J.T @ r
            diag = H.diagonal()
        else:
            H = J.T @ J
            g = J.T @ r
            diag = np.diag(H).copy()
        diag = np.maximum(diag, 1e-12)
        accepted = False
        while True:
            if sparse:
                Hd = H + sp.diags(lam * diag)
                try:
                    step = spla.spsolve(Hd, -g)
                except RuntimeError:
                    step = None
            else:
                try:
                    step = np.linalg.solve(H + lam * np.diag(diag), -g)
                except np.linalg.LinAlgError:
                    step = None
            if step is not None and np.all(np.isfinite(step)):
                x_try = x + step
                r_try, J_try = fun(x_try)
                cost_try = float(r_try @ r_try) if np.all(np.isfinite(r_try)) else np.inf
                if cost_try < cost:
                    rel_change = (cost - cost_try) / max(cost, 1e-300)
                    x, r, J, cost = x_try, r_try, J_try, cost_try
                    trace.append(cost)
                    lam = max(lam / 10.0, 1e-12)
                    accepted = True
                    if rel_change < rel_tol:
                        converged = True
                    break
            lam *= 10.0
            if lam > 1e12:
                break
        if not accepted:
            converged = True  # damping exhausted: at a (numerical) minimum
            break
        if converged:
            break
    return LMResult(x=x, cost=cost, cost_trace=trace, iterations=iters, converged=converged)
