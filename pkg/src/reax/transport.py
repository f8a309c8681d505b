"""Cell-centered finite volumes for 1D advection-diffusion.

The column [0, L] is split into cells of width ``h_i`` with unknowns at
cell centers.  Diffusive face fluxes use harmonic averaging of the cell
diffusion coefficients; advective fluxes are first-order upwind with the
Darcy velocity ``u >= 0`` pointing in +x.  The semi-discrete system is

    M dc/dt + L c = hq + g,

where M is the diagonal cell mass (porosity times width), q a source
density per cell, and g carries the inflow boundary data.  The first
cell holds the Dirichlet inflow value: its row of L is the identity and
its mass-matrix entry is zero, so every scheme here pins c_1 = c_in(t)
exactly.  The geometric mass vector (all entries positive) is kept
alongside for mass accounting over the interior cells.  At the outlet
the diffusive flux is zero and mass leaves by advection only.

Two steppers are provided: a fully implicit backward-Euler step, and a
split step that advances advection by explicit upwind substeps under a
CFL bound and then makes one implicit diffusion solve over the full
step.  With u = 0 the split step reduces bitwise to backward Euler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_banded

__all__ = [
    "Grid1D",
    "TransportSystem",
    "TransportError",
    "harmonic_face_diffusion",
    "face_diffusion_profile",
    "assemble",
    "step_backward_euler",
    "step_split",
    "advection_substep_count",
    "advect",
    "boundary_fluxes",
    "solve_tridiagonal",
]


class TransportError(Exception):
    """Invalid transport configuration or a failed linear solve."""


@dataclass(frozen=True)
class Grid1D:
    """Cell widths and centers of a 1D mesh."""

    h: np.ndarray
    x: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float)
        if h.ndim != 1 or h.size < 2:
            raise TransportError("grid needs at least two cells")
        if (h <= 0).any():
            raise TransportError("nonpositive cell width")
        edges = np.concatenate([[0.0], np.cumsum(h)])
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "x", 0.5 * (edges[:-1] + edges[1:]))

    @property
    def n(self) -> int:
        return self.h.size

    @property
    def length(self) -> float:
        return float(self.h.sum())

    @classmethod
    def uniform(cls, n: int, length: float) -> "Grid1D":
        if n < 2 or length <= 0:
            raise TransportError("uniform grid needs n >= 2 and length > 0")
        return cls(np.full(n, length / n))


def harmonic_face_diffusion(d_left, d_right):
    """Harmonic mean 2ab/(a+b) of two cellwise diffusion coefficients."""
    d_left = np.asarray(d_left, dtype=float)
    d_right = np.asarray(d_right, dtype=float)
    return 2.0 * d_left * d_right / (d_left + d_right)


def face_diffusion_profile(D: np.ndarray) -> np.ndarray:
    """All n+1 face coefficients; boundary faces take the one-sided value."""
    D = np.asarray(D, dtype=float)
    return np.concatenate([[D[0]], harmonic_face_diffusion(D[:-1], D[1:]), [D[-1]]])


@dataclass(frozen=True)
class TransportSystem:
    """Assembled operators for one column and velocity.

    ``mass`` is the geometric cell mass phi_i h_i (all positive).  The
    stepping operators use ``m_op``, which zeroes the first entry
    because that row is the Dirichlet identity.  L splits into
    diffusion and advection parts so the split stepper can reuse the
    diffusion half alone; the full diagonals are their elementwise sum.
    """

    grid: Grid1D
    phi: np.ndarray
    D: np.ndarray
    u: float
    bc_left: Callable[[float], float]
    mass: np.ndarray = field(repr=False, default=None)      # type: ignore[assignment]
    m_op: np.ndarray = field(repr=False, default=None)      # type: ignore[assignment]
    face_D: np.ndarray = field(repr=False, default=None)    # type: ignore[assignment]
    face_h: np.ndarray = field(repr=False, default=None)    # type: ignore[assignment]
    ld: tuple = field(repr=False, default=None)             # type: ignore[assignment]
    la: tuple = field(repr=False, default=None)             # type: ignore[assignment]
    l_full: tuple = field(repr=False, default=None)         # type: ignore[assignment]

    @property
    def n(self) -> int:
        return self.grid.n

    def g(self, t: float) -> np.ndarray:
        """Boundary vector: the inflow value in the Dirichlet row."""
        out = np.zeros(self.n)
        out[0] = self.bc_left(t)
        return out

    def cfl_limit(self) -> float:
        """Largest stable advection substep, min_i phi_i h_{i-1/2} / u."""
        if self.u == 0.0:
            return math.inf
        return float(np.min(self.phi[1:] * self.face_h) / self.u)

    def dense_L(self, part: str = "full") -> np.ndarray:
        """Dense L (or its 'diffusion'/'advection' part), for small tests."""
        lower, diag, upper = {"full": self.l_full, "diffusion": self.ld,
                              "advection": self.la}[part]
        return np.diag(diag) + np.diag(lower, -1) + np.diag(upper, 1)


def assemble(grid: Grid1D, phi: np.ndarray, D: np.ndarray, u: float,
             bc_left: Callable[[float], float]) -> TransportSystem:
    """Validate inputs and build the finite-volume operators."""
    n = grid.n
    phi = np.broadcast_to(np.asarray(phi, dtype=float), (n,)).copy()
    D = np.broadcast_to(np.asarray(D, dtype=float), (n,)).copy()
    if (phi <= 0).any():
        raise TransportError("nonpositive porosity")
    if (D <= 0).any():
        raise TransportError("nonpositive diffusion coefficient")
    if u < 0:
        raise TransportError("negative velocity (flow must go in +x)")

    face_D = harmonic_face_diffusion(D[:-1], D[1:])
    face_h = 0.5 * (grid.h[:-1] + grid.h[1:])
    w = face_D / face_h  # conductance of interior face i+1/2

    ld_lower = np.zeros(n - 1)
    ld_diag = np.zeros(n)
    ld_upper = np.zeros(n - 1)
    # Dirichlet identity row for the inflow cell.
    ld_diag[0] = 1.0
    ld_lower[:] = -w
    ld_upper[1:] = -w[1:]
    ld_upper[0] = 0.0
    ld_diag[1:-1] = w[:-1] + w[1:]
    ld_diag[-1] = w[-1]

    la_lower = np.full(n - 1, -u)
    la_diag = np.full(n, u)
    la_diag[0] = 0.0
    la_upper = np.zeros(n - 1)

    l_full = (ld_lower + la_lower, ld_diag + la_diag, ld_upper + la_upper)

    mass = phi * grid.h
    m_op = mass.copy()
    m_op[0] = 0.0
    return TransportSystem(grid, phi, D, float(u), bc_left,
                           mass=mass, m_op=m_op, face_D=face_D, face_h=face_h,
                           ld=(ld_lower, ld_diag, ld_upper),
                           la=(la_lower, la_diag, la_upper),
                           l_full=l_full)


def solve_tridiagonal(lower: np.ndarray, diag: np.ndarray, upper: np.ndarray,
                      rhs: np.ndarray) -> np.ndarray:
    """Solve the tridiagonal system given by its three diagonals."""
    n = diag.size
    ab = np.zeros((3, n))
    ab[0, 1:] = upper
    ab[1, :] = diag
    ab[2, :-1] = lower
    try:
        return solve_banded((1, 1), ab, rhs)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - defensive
        raise TransportError("singular tridiagonal system") from exc


def _implicit_solve(ts: TransportSystem, lop: tuple, c_n: np.ndarray,
                    q: np.ndarray | None, dt: float, t_next: float) -> np.ndarray:
    lower, diag, upper = lop
    rhs = ts.m_op * c_n + dt * ts.g(t_next)
    if q is not None:
        src = ts.grid.h * np.asarray(q, dtype=float)
        src[0] = 0.0  # the Dirichlet cell takes no source
        rhs += dt * src
    return solve_tridiagonal(dt * lower, ts.m_op + dt * diag, dt * upper, rhs)


def step_backward_euler(ts: TransportSystem, c_n: np.ndarray,
                        q: np.ndarray | None, dt: float, t_next: float) -> np.ndarray:
    """One implicit step: (M + dt L) c = M c_n + dt (hq + g(t_next))."""
    if dt <= 0:
        raise TransportError("nonpositive time step")
    return _implicit_solve(ts, ts.l_full, c_n, q, dt, t_next)


def advection_substep_count(ts: TransportSystem, dt: float, cfl_factor: float) -> int:
    """Number of explicit substeps covering dt under the CFL bound."""
    if ts.u == 0.0:
        return 0
    return max(1, math.ceil(dt / (cfl_factor * ts.cfl_limit())))


def advect(ts: TransportSystem, c: np.ndarray, dt_sub: float, n_sub: int,
           t_start: float) -> np.ndarray:
    """Explicit upwind substeps with the inflow cell pinned to the
    boundary value at each substep's end time."""
    c = np.array(c, dtype=float)
    coef = ts.u * dt_sub / (ts.phi[1:] * ts.face_h)
    for m in range(n_sub):
        c[1:] -= coef * (c[1:] - c[:-1])
        c[0] = ts.bc_left(t_start + (m + 1) * dt_sub)
    return c


def step_split(ts: TransportSystem, c_n: np.ndarray, q: np.ndarray | None,
               dt: float, cfl_factor: float, t_start: float) -> np.ndarray:
    """Advection by CFL-bounded explicit substeps, then one implicit
    diffusion solve over the whole step (which carries the source)."""
    if dt <= 0:
        raise TransportError("nonpositive time step")
    if not 0 < cfl_factor <= 1:
        raise TransportError("cfl_factor must lie in (0, 1]")
    n_sub = advection_substep_count(ts, dt, cfl_factor)
    if n_sub:
        c = advect(ts, c_n, dt / n_sub, n_sub, t_start)
    else:
        c = c_n
    return _implicit_solve(ts, ts.ld, c, q, dt, t_start + dt)


def boundary_fluxes(ts: TransportSystem, c: np.ndarray) -> tuple[float, float]:
    """Fluxes into and out of the interior cells, as the scheme sees
    them: across the face after the inflow cell and across the outlet."""
    inflow = ts.u * c[0] - ts.face_D[0] * (c[1] - c[0]) / ts.face_h[0]
    outflow = ts.u * c[-1]
    return float(inflow), float(outflow)
