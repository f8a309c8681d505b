"""Matrix-free GMRES and the inexact-Newton helpers around it.

The linear solver only sees an operator ``v -> J v``, never a matrix.
Restarted GMRES builds the Krylov basis by modified Gram-Schmidt with a
single reorthogonalization pass whenever a basis candidate loses three
orders of magnitude in norm, and tracks the residual through Givens
rotations, so the reported history is monotone within a restart cycle.

``forcing_term`` chooses the relative GMRES tolerance for each Newton
iteration from the ratio of successive nonlinear residuals, with the
usual safeguard against premature oversolving, and ``line_search_armijo``
provides the backtracking damping used by both nonlinear solvers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "LinearOperator",
    "GmresOptions",
    "GmresResult",
    "LineSearchError",
    "gmres",
    "forcing_term",
    "line_search_armijo",
]


class LineSearchError(Exception):
    """No step length satisfied the Armijo condition above the minimum."""

    def __init__(self, f0: float, f_last: float):
        self.f0 = f0
        self.f_last = f_last
        super().__init__(f"Armijo line search failed: f0={f0:.3e}, last trial {f_last:.3e}")


@dataclass(frozen=True)
class LinearOperator:
    """A square operator of dimension n given by its action on vectors."""

    n: int
    apply: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GmresOptions:
    rel_tol: float = 1e-6        # relative to the initial residual norm
    abs_tol: float = 1e-12
    restart: int = 50
    max_iter: int = 1000
    reorth_drop: float = 1e-3    # reorthogonalize on a larger norm drop


@dataclass
class GmresResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residuals: list[float]       # estimated norms, one per inner iteration
    breakdown: bool = False


def gmres(op: LinearOperator, rhs: np.ndarray, x0: np.ndarray | None = None,
          options: GmresOptions | None = None) -> GmresResult:
    """Solve op x = rhs by restarted GMRES.

    Stops when the residual 2-norm falls below
    ``max(rel_tol * ||rhs - op x0||, abs_tol)``.  On an unrecoverable
    basis breakdown the best iterate found so far is returned with the
    ``breakdown`` flag set.
    """
    opts = options or GmresOptions()
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (op.n,):
        raise ValueError(f"rhs has shape {rhs.shape}, operator dimension is {op.n}")
    if x0 is None:
        x = np.zeros(op.n)
        r = rhs.copy()
    else:
        x = np.array(x0, dtype=float)
        if x.shape != (op.n,):
            raise ValueError(f"x0 has shape {x.shape}, operator dimension is {op.n}")
        r = rhs - op.apply(x)
    r0_norm = float(np.linalg.norm(r))
    tol = max(opts.rel_tol * r0_norm, opts.abs_tol)
    residuals = [r0_norm]
    if r0_norm <= tol:
        return GmresResult(x, True, 0, residuals)

    m = opts.restart
    total = 0
    breakdown = False
    while True:
        beta = float(np.linalg.norm(r))
        V = np.zeros((m + 1, op.n))
        V[0] = r / beta
        H = np.zeros((m + 1, m))       # pristine Hessenberg, for the solve
        R = np.zeros((m + 1, m))       # Givens-triangularized copy
        cs = np.zeros(m)
        sn = np.zeros(m)
        s = np.zeros(m + 1)
        s[0] = beta
        j_used = 0
        stop = False
        for j in range(m):
            w = op.apply(V[j])
            if w.shape != (op.n,):
                raise ValueError("operator returned a vector of wrong dimension")
            norm_before = float(np.linalg.norm(w))
            for i in range(j + 1):
                H[i, j] = float(V[i] @ w)
                w -= H[i, j] * V[i]
            if float(np.linalg.norm(w)) < opts.reorth_drop * norm_before:
                for i in range(j + 1):
                    corr = float(V[i] @ w)
                    H[i, j] += corr
                    w -= corr * V[i]
            h_next = float(np.linalg.norm(w))
            H[j + 1, j] = h_next

            R[: j + 2, j] = H[: j + 2, j]
            for i in range(j):
                tmp = cs[i] * R[i, j] + sn[i] * R[i + 1, j]
                R[i + 1, j] = -sn[i] * R[i, j] + cs[i] * R[i + 1, j]
                R[i, j] = tmp
            denom = float(np.hypot(R[j, j], R[j + 1, j]))
            if denom == 0.0:
                cs[j], sn[j] = 1.0, 0.0
            else:
                cs[j], sn[j] = R[j, j] / denom, R[j + 1, j] / denom
            R[j, j] = cs[j] * R[j, j] + sn[j] * R[j + 1, j]
            R[j + 1, j] = 0.0
            s[j + 1] = -sn[j] * s[j]
            s[j] = cs[j] * s[j]

            total += 1
            j_used = j + 1
            residuals.append(abs(float(s[j + 1])))
            if residuals[-1] <= tol:
                stop = True
            if h_next == 0.0:
                # Happy if converged, otherwise an unrecoverable breakdown.
                breakdown = not stop
                stop = True
            if total >= opts.max_iter:
                stop = True
            if stop:
                break
            V[j + 1] = w / h_next

        # Least squares on the pristine Hessenberg; robust at breakdown.
        e1 = np.zeros(j_used + 1)
        e1[0] = beta
        y, *_ = np.linalg.lstsq(H[: j_used + 1, :j_used], e1, rcond=None)
        x = x + V[:j_used].T @ y
        r = rhs - op.apply(x)
        true_norm = float(np.linalg.norm(r))
        if true_norm <= tol:
            return GmresResult(x, True, total, residuals, breakdown=False)
        if breakdown or total >= opts.max_iter:
            return GmresResult(x, False, total, residuals, breakdown=breakdown)


def forcing_term(gamma: float, g_norm: float, g_norm_prev: float | None,
                 eta_prev: float | None, eta_min: float = 1e-4,
                 eta_max: float = 0.9) -> float:
    """Relative linear tolerance for the next Newton iteration.

    First iteration (no previous data) uses eta_max.  Afterwards the
    candidate gamma (g_k / g_{k-1})^2 is floored by gamma eta_prev^2
    whenever that safeguard exceeds 0.1, then clamped to
    [eta_min, eta_max].
    """
    if g_norm_prev is None or eta_prev is None:
        return eta_max
    if g_norm_prev == 0.0:
        return eta_min
    eta = gamma * (g_norm / g_norm_prev) ** 2
    guard = gamma * eta_prev ** 2
    if guard > 0.1:
        eta = max(eta, guard)
    return min(eta_max, max(eta_min, eta))


def line_search_armijo(f_norm: Callable[[np.ndarray], float], z: np.ndarray,
                       dz: np.ndarray, f0: float, c: float = 1e-4,
                       backtrack: float = 0.5, min_lambda: float = 2.0 ** -30
                       ) -> tuple[float, np.ndarray]:
    """Backtrack along dz until f_norm drops enough.

    Accepts the first lambda in {1, 1/2, 1/4, ...} with
    ``f_norm(z + lambda dz) <= (1 - c lambda) f0``.  A non-finite trial
    value counts as a rejection.  With f0 == 0 the caller is already
    converged and the full step is returned untested.
    """
    if f0 == 0.0:
        return 1.0, z + dz
    lam = 1.0
    f_last = np.inf
    while lam >= min_lambda:
        z_try = z + lam * dz
        f_try = f_norm(z_try)
        if np.isfinite(f_try) and f_try <= (1.0 - c * lam) * f0:
            return lam, z_try
        f_last = f_try
        lam *= backtrack
    raise LineSearchError(f0, f_last)
