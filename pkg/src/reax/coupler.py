"""Coupling of transport and chemistry over one column.

Unknowns per time step are three (n_g, n_c) fields: mobile totals C,
bulk totals T and immobile totals F, flattened cell-major so the three
vectors of one cell sit together within each block.  The backward-Euler
step demands, per mobile component j and cell i,

    block 1:  (M + dt L) C_:,j + M F_:,j - b_:,j = 0,
              b = M C^n + dt g(t_next) + M F^n
    block 2:  T - C - F = 0
    block 3:  F_i,: - psi(T_i,:) = 0,

with psi the equilibrium sorption map of the chemical system.  Three
solution strategies are provided:

* ``step_global``: inexact Newton on all blocks at once.  GMRES sees
  the Jacobian only through products, assembled analytically from the
  transport diagonals and the per-cell psi' blocks of the current
  iterate; no finite-difference Jacobians anywhere.
* ``step_sia``: block Gauss-Seidel between transport (with the sorption
  lag as a source) and per-cell chemistry, iterated to a fixed point.
* ``step_snia``: a single Gauss-Seidel sweep.

By default the block-1 rows are divided by the cell mass (the Dirichlet
row by dt) so every residual entry carries concentration units and the
inf-norm convergence test weighs all blocks alike.  The literal unscaled
form is kept for operator verification against a materialized matrix.

Chemistry is solved for all cells in one vectorized batch per residual
evaluation, warm-started from the states of the previous accepted
iterate; a failed cell marks the whole evaluation as a rejected trial.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .chem import (
    CONCENTRATION_FLOOR,
    BatchSpeciation,
    ChemicalSystem,
    NewtonOptions,
    psi_prime_batch,
    solve_equilibrium_batch,
    solve_mobile_batch,
)
from .krylov import (
    GmresOptions,
    LinearOperator,
    LineSearchError,
    forcing_term,
    gmres,
    line_search_armijo,
)
from .transport import TransportSystem, solve_tridiagonal

__all__ = [
    "SolverSettings",
    "CoupledProblem",
    "CoupledState",
    "StepStats",
    "Snapshot",
    "SimulationRecord",
    "StepFailure",
    "RunFailure",
    "StaleChemistryCache",
    "residual",
    "rhs_norm",
    "jacobian_apply",
    "step_global",
    "step_sia",
    "step_snia",
    "run",
    "make_state_from_totals",
    "make_state_from_mobile",
    "mass_balance_error",
    "workers_from_env",
]


class StepFailure(Exception):
    """A time step could not be completed at the attempted dt."""

    def __init__(self, message: str, t: float, dt: float):
        self.t = t
        self.dt = dt
        super().__init__(f"{message} (t={t:.6g}, dt={dt:.6g})")


class RunFailure(Exception):
    """A step kept failing after the maximum number of dt halvings."""


class StaleChemistryCache(Exception):
    """jacobian_apply was called without psi' blocks for the iterate."""


@dataclass(frozen=True)
class SolverSettings:
    """Tolerances and controls for the coupled steppers."""

    newton_tol: float = 1e-8
    newton_max: int = 50
    gamma: float = 0.9
    eta_min: float = 1e-4
    eta_max: float = 0.9
    gmres_restart: int = 50
    gmres_abs_tol: float = 1e-13
    gmres_max_iter: int = 2000
    sia_tol: float = 1e-10
    sia_max: int = 500
    sia_transport: str = "be"          # "be" or "split"
    cfl_factor: float = 0.9
    scaling: str = "mass"              # "mass" or "raw"
    max_halvings: int = 5
    workers: int = 1
    # Kept well below newton_tol: the coupled residual's chemistry block
    # inherits the cell solver's error, and an inner tolerance near the
    # outer threshold leaves the Newton tail iterating on noise.
    chem: NewtonOptions = field(default_factory=lambda: NewtonOptions(tol=1e-12))

    def __post_init__(self):
        if self.sia_transport not in ("be", "split"):
            raise ValueError("sia_transport must be 'be' or 'split'")
        if self.scaling not in ("mass", "raw"):
            raise ValueError("scaling must be 'mass' or 'raw'")


@dataclass(frozen=True)
class CoupledProblem:
    """One column, one chemical system, one time-stepping setup."""

    chem: ChemicalSystem
    transport: TransportSystem
    W: np.ndarray                      # (n_g, n_s) immobile totals per cell
    inflow: Callable[[float], np.ndarray]
    dt: float
    t_end: float
    settings: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        n_g, n_s = self.transport.n, self.chem.n_s
        W = np.asarray(self.W, dtype=float)
        if W.ndim <= 1:
            W = np.broadcast_to(W.reshape(1, n_s) if W.size == n_s else W,
                                (n_g, n_s)).copy()
        if W.shape != (n_g, n_s):
            raise ValueError(f"W must have shape ({n_g}, {n_s})")
        object.__setattr__(self, "W", W)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.t_end < 0:
            raise ValueError("t_end must be nonnegative")

    @property
    def n_g(self) -> int:
        return self.transport.n

    @property
    def n_dof(self) -> int:
        return 3 * self.n_g * self.chem.n_c


@dataclass
class CoupledState:
    """Fields of one time level plus the chemistry that produced them."""

    C: np.ndarray                      # (n_g, n_c) mobile totals
    T: np.ndarray                      # (n_g, n_c) bulk totals
    F: np.ndarray                      # (n_g, n_c) immobile totals
    chem_cache: BatchSpeciation | None = None
    psi_blocks: np.ndarray | None = None   # (n_g, n_c, n_c) dF/dT per cell

    def pack(self) -> np.ndarray:
        return np.concatenate([self.C.ravel(), self.T.ravel(), self.F.ravel()])

    def copy(self) -> "CoupledState":
        return CoupledState(self.C.copy(), self.T.copy(), self.F.copy(),
                            self.chem_cache, self.psi_blocks)


def _unpack(z: np.ndarray, n_g: int, n_c: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    m = n_g * n_c
    return (z[:m].reshape(n_g, n_c), z[m:2 * m].reshape(n_g, n_c),
            z[2 * m:].reshape(n_g, n_c))


@dataclass
class StepStats:
    """Per-step solver counters (one record per accepted or failed step)."""

    method: str
    t: float                           # end time of the step
    dt: float
    outer_iters: int = 0               # Newton iterations or SIA sweeps
    gmres_per_outer: list[int] = field(default_factory=list)
    residual_history: list[float] = field(default_factory=list)
    g2_history: list[float] = field(default_factory=list)
    forcing: list[float] = field(default_factory=list)
    lambdas: list[float] = field(default_factory=list)
    converged: bool = False
    halvings: int = 0
    wall_s: float = 0.0
    # Boundary fluxes as the step's own scheme moved them (per component,
    # first interior face and outlet); the mass-balance check uses these.
    flux_in: np.ndarray | None = None
    flux_out: np.ndarray | None = None

    @property
    def gmres_total(self) -> int:
        return int(sum(self.gmres_per_outer))


# ======================================================================
# Chemistry sweeps
# ======================================================================

def workers_from_env(requested: int | None = None) -> int:
    """Worker count from the REAX_THREADS environment variable.

    The variable both defaults and caps the count: with it unset the
    chemistry sweep stays serial regardless of ``requested``.
    """
    cap = os.environ.get("REAX_THREADS")
    cap = int(cap) if cap else 1
    return max(1, min(requested or 1, cap)) if requested else max(1, cap)


def _solve_cells(p: CoupledProblem, T: np.ndarray,
                 warm: BatchSpeciation | None) -> BatchSpeciation:
    """Equilibrium for every cell, warm-started when states are given.

    Cells that fail with the warm start are retried cold before the
    evaluation as a whole is declared failed (converged mask).
    """
    glc = warm.lc if warm is not None else None
    gls = warm.ls if warm is not None else None
    workers = p.settings.workers
    if workers > 1 and T.shape[0] >= 4 * workers:
        chunks = np.array_split(np.arange(T.shape[0]), workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(
                lambda idx: solve_equilibrium_batch(
                    p.chem, T[idx], p.W[idx],
                    None if glc is None else glc[idx],
                    None if gls is None else gls[idx],
                    p.settings.chem),
                chunks))
        batch = BatchSpeciation(
            np.vstack([b.lc for b in parts]), np.vstack([b.ls for b in parts]),
            np.vstack([b.x for b in parts]), np.vstack([b.y for b in parts]),
            np.vstack([b.F for b in parts]), np.concatenate([b.residual for b in parts]),
            np.concatenate([b.iterations for b in parts]),
            np.concatenate([b.converged for b in parts]))
    else:
        batch = solve_equilibrium_batch(p.chem, T, p.W, glc, gls, p.settings.chem)
    if not batch.converged.all() and warm is not None:
        bad = np.flatnonzero(~batch.converged)
        retry = solve_equilibrium_batch(p.chem, T[bad], p.W[bad], None, None,
                                        p.settings.chem)
        for name in ("lc", "ls", "x", "y", "F", "residual", "iterations", "converged"):
            getattr(batch, name)[bad] = getattr(retry, name)
    return batch


# ======================================================================
# Residual and Jacobian action
# ======================================================================

def _apply_l(ts: TransportSystem, X: np.ndarray) -> np.ndarray:
    """Tridiagonal L times every column of X."""
    lower, diag, upper = ts.l_full
    out = diag[:, None] * X
    out[1:] += lower[:, None] * X[:-1]
    out[:-1] += upper[:, None] * X[1:]
    return out


def _face_fluxes(ts: TransportSystem, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-component fluxes across the first interior face and the outlet.

    These are the faces bounding the conservation region (every cell past
    the Dirichlet inlet cell); summing the interior rows of L telescopes
    to exactly out minus in.
    """
    fin = ts.u * C[0] - ts.face_D[0] * (C[1] - C[0]) / ts.face_h[0]
    fout = ts.u * C[-1]
    return fin, fout


def _scale_block1(p: CoupledProblem, G1: np.ndarray, dt: float) -> np.ndarray:
    if p.settings.scaling == "mass":
        G1 = G1.copy()
        G1[0] /= dt
        G1[1:] /= p.transport.mass[1:, None]
    return G1


def residual(p: CoupledProblem, Z: CoupledState, c_prev: np.ndarray,
             f_prev: np.ndarray, t_next: float, dt: float | None = None,
             chem_eval: BatchSpeciation | None = None) -> np.ndarray:
    """Coupled residual G(Z) for the step ending at t_next.

    ``chem_eval`` supplies the per-cell equilibrium at Z.T; without it a
    fresh batched solve is made (and an EquilibriumDivergedError raised
    if any cell fails).  The result is the packed (3 n_g n_c) vector.
    """
    dt = p.dt if dt is None else dt
    if chem_eval is None:
        chem_eval = _solve_cells(p, Z.T, Z.chem_cache)
        if not chem_eval.converged.all():
            from .chem import EquilibriumDivergedError
            bad = int(np.flatnonzero(~chem_eval.converged)[0])
            raise EquilibriumDivergedError("cell chemistry did not converge",
                                           float(chem_eval.residual[bad]), cell=bad)
    ts = p.transport
    m_op = ts.m_op[:, None]
    G1 = m_op * (Z.C - c_prev + Z.F - f_prev) + dt * _apply_l(ts, Z.C)
    G1[0] -= dt * p.inflow(t_next)
    G1 = _scale_block1(p, G1, dt)
    G2 = Z.T - Z.C - Z.F
    G3 = Z.F - chem_eval.F
    return np.concatenate([G1.ravel(), G2.ravel(), G3.ravel()])


def rhs_norm(p: CoupledProblem, c_prev: np.ndarray, f_prev: np.ndarray,
             t_next: float, dt: float | None = None) -> float:
    """Inf-norm of the step's right-hand side, in residual scaling."""
    dt = p.dt if dt is None else dt
    ts = p.transport
    b = ts.m_op[:, None] * (c_prev + f_prev)
    b[0] = dt * p.inflow(t_next)
    b = _scale_block1(p, b, dt)
    return float(np.max(np.abs(b)))


def jacobian_apply(p: CoupledProblem, Z: CoupledState, v: np.ndarray,
                   dt: float | None = None) -> np.ndarray:
    """Analytic action of the step Jacobian at Z on a packed vector v.

    Requires the psi' blocks of the current iterate on Z; transport
    enters through its diagonals, chemistry through one (n_c, n_c)
    block per cell, so a product costs O(n_g n_c^2).
    """
    if Z.psi_blocks is None:
        raise StaleChemistryCache("psi' blocks missing; evaluate the residual "
                                  "at this iterate first")
    dt = p.dt if dt is None else dt
    n_g, n_c = p.n_g, p.chem.n_c
    vC, vT, vF = _unpack(np.asarray(v, dtype=float), n_g, n_c)
    ts = p.transport
    m_op = ts.m_op[:, None]
    out1 = m_op * (vC + vF) + dt * _apply_l(ts, vC)
    out1 = _scale_block1(p, out1, dt)
    out2 = vT - vC - vF
    out3 = vF - np.einsum("nij,nj->ni", Z.psi_blocks, vT)
    return np.concatenate([out1.ravel(), out2.ravel(), out3.ravel()])


# ======================================================================
# Steppers
# ======================================================================

def _fresh_eval(p: CoupledProblem, state: CoupledState) -> BatchSpeciation:
    ev = _solve_cells(p, state.T, state.chem_cache)
    if not ev.converged.all():
        bad = int(np.flatnonzero(~ev.converged)[0])
        raise StepFailure(f"chemistry failed at cell {bad}", math.nan, math.nan)
    return ev


def step_global(p: CoupledProblem, state_n: CoupledState, t_next: float,
                dt: float | None = None) -> tuple[CoupledState, StepStats]:
    """One backward-Euler step solved by global inexact Newton."""
    dt = p.dt if dt is None else dt
    cfg = p.settings
    t0 = time.perf_counter()
    stats = StepStats("global", t_next, dt)
    n_g, n_c = p.n_g, p.chem.n_c

    Zk = state_n.copy()
    try:
        ev_k = _fresh_eval(p, Zk)
    except StepFailure as exc:
        raise StepFailure("chemistry failed on the previous state",
                          t_next - dt, dt) from exc
    c_prev, f_prev = state_n.C, state_n.F
    Gk = residual(p, Zk, c_prev, f_prev, t_next, dt, chem_eval=ev_k)
    bnorm = rhs_norm(p, c_prev, f_prev, t_next, dt)
    threshold = cfg.newton_tol * (1.0 + bnorm)

    g2_prev: float | None = None
    eta_prev: float | None = None
    for _ in range(cfg.newton_max):
        ginf = float(np.max(np.abs(Gk)))
        stats.residual_history.append(ginf)
        if ginf <= threshold:
            stats.converged = True
            break
        g2 = float(np.linalg.norm(Gk))
        stats.g2_history.append(g2)
        eta = forcing_term(cfg.gamma, g2, g2_prev, eta_prev, cfg.eta_min, cfg.eta_max)
        stats.forcing.append(eta)

        if Zk.psi_blocks is None:
            Zk.psi_blocks = psi_prime_batch(p.chem, ev_k.lc, ev_k.ls)
        op = LinearOperator(p.n_dof, lambda v: jacobian_apply(p, Zk, v, dt))
        lin = gmres(op, -Gk, options=GmresOptions(
            rel_tol=eta, abs_tol=cfg.gmres_abs_tol, restart=cfg.gmres_restart,
            max_iter=cfg.gmres_max_iter))
        stats.gmres_per_outer.append(lin.iterations)

        trial_store: dict = {}

        def f_norm(zvec: np.ndarray) -> float:
            C, T, F = _unpack(zvec, n_g, n_c)
            cand = CoupledState(C, T, F, chem_cache=ev_k)
            ev = _solve_cells(p, T, ev_k)
            if not ev.converged.all():
                return math.inf
            G = residual(p, cand, c_prev, f_prev, t_next, dt, chem_eval=ev)
            trial_store["z"] = zvec
            trial_store["eval"] = ev
            trial_store["G"] = G
            return float(np.linalg.norm(G))

        try:
            lam, z_new = line_search_armijo(f_norm, Zk.pack(), lin.x, g2)
        except LineSearchError as exc:
            raise StepFailure("Newton line search failed", t_next - dt, dt) from exc
        stats.lambdas.append(lam)
        stats.outer_iters += 1

        C, T, F = _unpack(z_new, n_g, n_c)
        if trial_store.get("z") is z_new:
            ev_k = trial_store["eval"]
            Gk = trial_store["G"]
        else:  # f0 == 0 corner: the untested full step
            Zk_tmp = CoupledState(C, T, F, chem_cache=ev_k)
            ev_k = _fresh_eval(p, Zk_tmp)
            Gk = residual(p, Zk_tmp, c_prev, f_prev, t_next, dt, chem_eval=ev_k)
        Zk = CoupledState(C, T, F, chem_cache=ev_k)
        g2_prev, eta_prev = g2, eta
    else:
        raise StepFailure(f"Newton did not converge in {cfg.newton_max} iterations",
                          t_next - dt, dt)

    # Conservation projection.  The accepted immobile field is the
    # chemistry evaluation at the final iterate (not the raw Newton
    # unknown, which carries Krylov noise over the whole column); with F
    # frozen there, one exact tridiagonal solve of the linear transport
    # block replaces its leftover O(newton_tol) residual with solver
    # roundoff, so the accepted step conserves mass independent of the
    # Newton threshold.  The chemistry rows move by O(threshold), well
    # inside their consistency slack.
    ts = p.transport
    lower, diag, upper = ts.l_full
    F_hat = ev_k.F.copy()
    rhs = ts.m_op[:, None] * (c_prev + f_prev - F_hat)
    rhs[0] = dt * p.inflow(t_next)
    C = solve_tridiagonal(dt * lower, ts.m_op + dt * diag, dt * upper, rhs)
    state = CoupledState(C, C + F_hat, F_hat, chem_cache=ev_k, psi_blocks=None)
    stats.flux_in, stats.flux_out = _face_fluxes(ts, C)
    stats.wall_s = time.perf_counter() - t0
    return state, stats


def _transport_sweep(p: CoupledProblem, C_n: np.ndarray, F_n: np.ndarray,
                     F_lag: np.ndarray, t_start: float, t_next: float,
                     dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Transport of all components with the sorption lag as source.

    Returns the transported field plus the step-averaged boundary fluxes
    the scheme itself moved, so splitting steps can report a mass balance
    consistent with their own discretization.
    """
    ts = p.transport
    cfg = p.settings
    m_op = ts.m_op[:, None]
    if cfg.sia_transport == "be":
        lower, diag, upper = ts.l_full
        rhs = m_op * (C_n + F_n - F_lag)
        rhs[0] = dt * p.inflow(t_next)
        C = solve_tridiagonal(dt * lower, ts.m_op + dt * diag, dt * upper, rhs)
        fin, fout = _face_fluxes(ts, C)
        return C, fin, fout
    # split: explicit upwind advection substeps, then implicit diffusion
    C = np.array(C_n, dtype=float)
    adv_in = np.zeros(C.shape[1])
    adv_out = np.zeros(C.shape[1])
    if ts.u > 0.0:
        n_sub = max(1, math.ceil(dt / (cfg.cfl_factor * ts.cfl_limit())))
        dt_sub = dt / n_sub
        coef = ts.u * dt_sub / (ts.phi[1:, None] * ts.face_h[:, None])
        for m in range(n_sub):
            # Explicit upwind moves the pre-update values across the faces.
            adv_in += dt_sub * ts.u * C[0]
            adv_out += dt_sub * ts.u * C[-1]
            C[1:] -= coef * (C[1:] - C[:-1])
            C[0] = p.inflow(t_start + (m + 1) * dt_sub)
    lower, diag, upper = ts.ld
    rhs = m_op * C - m_op * (F_lag - F_n)
    rhs[0] = dt * p.inflow(t_next)
    C = solve_tridiagonal(dt * lower, ts.m_op + dt * diag, dt * upper, rhs)
    fin = adv_in / dt - ts.face_D[0] * (C[1] - C[0]) / ts.face_h[0]
    return C, fin, adv_out / dt


def _step_gauss_seidel(p: CoupledProblem, state_n: CoupledState, t_next: float,
                       dt: float | None, single_sweep: bool
                       ) -> tuple[CoupledState, StepStats]:
    dt = p.dt if dt is None else dt
    cfg = p.settings
    t0 = time.perf_counter()
    method = "snia" if single_sweep else "sia"
    stats = StepStats(method, t_next, dt)
    max_sweeps = 1 if single_sweep else cfg.sia_max

    F_n = state_n.F
    F_lag = state_n.F.copy()
    warm = state_n.chem_cache
    T = None
    ev = None
    for _ in range(max_sweeps):
        C_tr, fin, fout = _transport_sweep(p, state_n.C, F_n, F_lag,
                                           t_next - dt, t_next, dt)
        T = C_tr + F_lag
        ev = _solve_cells(p, T, warm)
        if not ev.converged.all():
            bad = int(np.flatnonzero(~ev.converged)[0])
            raise StepFailure(f"chemistry failed at cell {bad}", t_next - dt, dt)
        delta = float(np.max(np.abs(ev.F - F_lag)))
        stats.residual_history.append(delta)
        stats.outer_iters += 1
        if single_sweep or delta <= cfg.sia_tol:
            stats.converged = True
            break
        F_lag = ev.F
        warm = ev
    else:
        raise StepFailure(f"SIA did not converge in {cfg.sia_max} sweeps",
                          t_next - dt, dt)

    # Chemistry repartitions the transported totals at fixed T, so the
    # accepted step conserves exactly what transport moved.
    state = CoupledState(T - ev.F, T, ev.F, chem_cache=ev, psi_blocks=None)
    stats.flux_in, stats.flux_out = fin, fout
    stats.wall_s = time.perf_counter() - t0
    return state, stats


def step_sia(p: CoupledProblem, state_n: CoupledState, t_next: float,
             dt: float | None = None) -> tuple[CoupledState, StepStats]:
    """Operator splitting iterated to a fixed point (transport with the
    lagged sorption source, then chemistry, until F stops moving)."""
    return _step_gauss_seidel(p, state_n, t_next, dt, single_sweep=False)


def step_snia(p: CoupledProblem, state_n: CoupledState, t_next: float,
              dt: float | None = None) -> tuple[CoupledState, StepStats]:
    """Non-iterative splitting: one transport sweep, one chemistry sweep."""
    return _step_gauss_seidel(p, state_n, t_next, dt, single_sweep=True)


_STEPPERS = {"global": step_global, "sia": step_sia, "snia": step_snia}


# ======================================================================
# Initial states and diagnostics
# ======================================================================

def make_state_from_totals(p: CoupledProblem, T: np.ndarray) -> CoupledState:
    """Equilibrate every cell from prescribed bulk totals T."""
    T = np.maximum(np.array(T, dtype=float), CONCENTRATION_FLOOR)
    batch = solve_equilibrium_batch(p.chem, T, p.W, options=p.settings.chem)
    if not batch.converged.all():
        bad = int(np.flatnonzero(~batch.converged)[0])
        raise ValueError(f"initial equilibrium failed at cell {bad}")
    # Totals are honored to the equilibrium tolerance; the floor keeps
    # the mobile remainder of trace components positive.
    C = np.maximum(T - batch.F, CONCENTRATION_FLOOR)
    return CoupledState(C, C + batch.F, batch.F.copy(), chem_cache=batch)


def make_state_from_mobile(p: CoupledProblem, C: np.ndarray) -> CoupledState:
    """Equilibrate every cell from prescribed solution composition C."""
    C = np.maximum(np.array(C, dtype=float), CONCENTRATION_FLOOR)
    batch = solve_mobile_batch(p.chem, C, p.W, options=p.settings.chem)
    if not batch.converged.all():
        bad = int(np.flatnonzero(~batch.converged)[0])
        raise ValueError(f"initial equilibrium failed at cell {bad}")
    return CoupledState(C, C + batch.F, batch.F.copy(), chem_cache=batch)


def mass_balance_error(p: CoupledProblem, prev: CoupledState, new: CoupledState,
                       dt: float, flux_in: np.ndarray | None = None,
                       flux_out: np.ndarray | None = None) -> np.ndarray:
    """Relative per-component closure of the interior mass balance.

    Compares the change of total mass over the conservation cells
    (everything past the Dirichlet cell) with the boundary fluxes across
    the first interior face and the outlet.  Pass the fluxes recorded by
    the stepper (StepStats.flux_in/out) to audit a splitting step with
    its own averaged fluxes; by default the implicit-in-time fluxes of
    the fully coupled scheme are evaluated from the new state.
    """
    ts = p.transport
    mass = ts.mass[1:, None]
    lhs = np.sum(mass * (new.T[1:] - prev.T[1:]), axis=0)
    if flux_in is None or flux_out is None:
        flux_in, flux_out = _face_fluxes(ts, new.C)
    rhs = dt * (flux_in - flux_out)
    scale = np.maximum.reduce([
        np.sum(mass * (np.abs(new.T[1:]) + np.abs(prev.T[1:])), axis=0),
        dt * (np.abs(flux_in) + np.abs(flux_out)),
        np.full(p.chem.n_c, 1e-300),
    ])
    return np.abs(lhs - rhs) / scale


# ======================================================================
# Time marching
# ======================================================================

@dataclass
class Snapshot:
    t: float
    C: np.ndarray
    T: np.ndarray
    F: np.ndarray
    lc: np.ndarray
    ls: np.ndarray


@dataclass
class SimulationRecord:
    """Everything a run produces: outlet series, snapshots, counters."""

    times: np.ndarray
    outlet_C: np.ndarray
    outlet_T: np.ndarray
    outlet_F: np.ndarray
    outlet_lc: np.ndarray
    outlet_ls: np.ndarray
    profiles: list[Snapshot]
    stats: list[StepStats]
    final: CoupledState
    method: str
    wall_s: float


def _advance(p: CoupledProblem, stepper, state: CoupledState, t: float,
             dt: float, depth: int, stats_out: list[StepStats],
             observers: Sequence[Callable]) -> tuple[CoupledState, float]:
    """One step with recursive dt halving on failure."""
    try:
        new_state, st = stepper(p, state, t + dt, dt)
    except StepFailure:
        if depth >= p.settings.max_halvings:
            raise RunFailure(f"step at t={t:.6g} failed after "
                             f"{p.settings.max_halvings} dt halvings") from None
        half = dt / 2.0
        state, t = _advance(p, stepper, state, t, half, depth + 1,
                            stats_out, observers)
        return _advance(p, stepper, state, t, half, depth + 1,
                        stats_out, observers)
    st.halvings = depth
    stats_out.append(st)
    for obs in observers:
        obs(len(stats_out) - 1, t + dt, state, new_state, st)
    return new_state, t + dt


def run(p: CoupledProblem, state0: CoupledState, method: str = "global",
        observers: Sequence[Callable] = (),
        profile_times: Iterable[float] = ()) -> SimulationRecord:
    """March from t=0 to t_end with fixed dt (last step truncated).

    Observers are called after every accepted step as
    ``obs(index, t, state_before, state_after, stats)``.  Snapshots are
    taken at the recorded times closest to each requested profile time.
    With t_end = 0 the record holds the initial state only.
    """
    if method not in _STEPPERS:
        raise ValueError(f"unknown method '{method}'; use global, sia or snia")
    stepper = _STEPPERS[method]
    wall0 = time.perf_counter()

    if state0.chem_cache is None:
        state0 = replace_cache(p, state0)
    times = [0.0]
    out_C, out_T, out_F = [state0.C[-1].copy()], [state0.T[-1].copy()], [state0.F[-1].copy()]
    out_lc = [state0.chem_cache.lc[-1].copy()]
    out_ls = [state0.chem_cache.ls[-1].copy()]
    snapshots: dict[float, Snapshot] = {}
    stats: list[StepStats] = []
    requested = sorted(set(float(tp) for tp in profile_times))

    def snap(t: float, state: CoupledState):
        for tp in requested:
            best = snapshots.get(tp)
            if best is None or abs(t - tp) < abs(best.t - tp):
                cache = state.chem_cache
                snapshots[tp] = Snapshot(t, state.C.copy(), state.T.copy(),
                                         state.F.copy(), cache.lc.copy(),
                                         cache.ls.copy())

    state = state0
    snap(0.0, state)
    t = 0.0
    eps = 1e-9 * max(p.dt, 1.0)
    while t < p.t_end - eps:
        dt = min(p.dt, p.t_end - t)
        state, t = _advance(p, stepper, state, t, dt, 0, stats, observers)
        times.append(t)
        out_C.append(state.C[-1].copy())
        out_T.append(state.T[-1].copy())
        out_F.append(state.F[-1].copy())
        out_lc.append(state.chem_cache.lc[-1].copy())
        out_ls.append(state.chem_cache.ls[-1].copy())
        snap(t, state)

    profiles = [snapshots[tp] for tp in requested if tp in snapshots]
    return SimulationRecord(
        np.array(times), np.array(out_C), np.array(out_T), np.array(out_F),
        np.array(out_lc), np.array(out_ls), profiles, stats, state, method,
        time.perf_counter() - wall0)


def replace_cache(p: CoupledProblem, state: CoupledState) -> CoupledState:
    """Attach a fresh chemistry cache to a state that lacks one."""
    batch = solve_equilibrium_batch(p.chem, state.T, p.W, options=p.settings.chem)
    if not batch.converged.all():
        bad = int(np.flatnonzero(~batch.converged)[0])
        raise ValueError(f"equilibrium failed at cell {bad}")
    return CoupledState(state.C, state.T, state.F, chem_cache=batch)
