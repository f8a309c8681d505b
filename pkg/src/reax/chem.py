"""Multi-species chemical equilibrium in tableau form.

The aqueous phase is described by mobile components with concentrations
``c`` (length ``n_c``) and immobile (sorbed) components with
concentrations ``s`` (length ``n_s``).  Secondary species form from the
components by mass action:

    mobile    x_i = Kx_i * prod_j c_j ** S[i, j]
    immobile  y_i = Ky_i * prod_j c_j ** A[i, j] * prod_k s_k ** B[i, k]

All logarithms are natural; equilibrium constants are stored as ln K.
Scenario files carry log10 values and convert once at load time.

Writing ``lc = ln c`` and ``ls = ln s``, the component totals are

    T = c + S^T x + A^T y        (mobile totals)
    W = s + B^T y                (immobile totals, e.g. exchange capacity)

and the equilibrium problem for given (T, W) is H(lc, ls) = [T; W] with

    H(lc, ls) = [exp(lc) + S^T x + A^T y,  exp(ls) + B^T y].

H is solved by a damped Newton iteration in log concentrations, which
keeps every species positive by construction.  Its Jacobian

    H' = diag([c; s]) + P^T diag([x; y]) P,     P = [[S, 0], [A, B]]

is symmetric positive definite, so the linearization cannot become
singular at finite log concentrations.

Transport coupling only needs the map ``psi: T -> F = A^T y`` (the
immobile part of the mobile totals, W held fixed) and its Jacobian
``psi'``.  Both are provided in single-cell form and in batched form
over many independent cells, which is how the coupler calls them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "ChemicalSystem",
    "ChemicalTotals",
    "ChemicalState",
    "Speciation",
    "BatchSpeciation",
    "NewtonOptions",
    "EquilibriumError",
    "ConcentrationOverflowError",
    "EquilibriumDivergedError",
    "CONCENTRATION_FLOOR",
    "eval_secondary",
    "eval_h",
    "eval_h_jacobian",
    "solve_equilibrium",
    "solve_equilibrium_batch",
    "solve_mobile_batch",
    "psi",
    "psi_prime",
    "psi_prime_batch",
]

# Totals at or below this value (mol/L) are clamped before solving, so
# "empty" components stay representable in log space.
CONCENTRATION_FLOOR = 1e-30

_LN10 = np.log(10.0)


# ======================================================================
# Errors
# ======================================================================

class EquilibriumError(Exception):
    """Base class for equilibrium solver failures."""


class ConcentrationOverflowError(EquilibriumError):
    """A species concentration overflowed in exp(); reports the species."""

    def __init__(self, kind: str, index: int, name: str | None = None):
        self.kind = kind
        self.index = index
        self.name = name
        label = f"{kind}[{index}]" if name is None else f"{kind} '{name}'"
        super().__init__(f"concentration overflow in {label}")


class EquilibriumDivergedError(EquilibriumError):
    """Newton failed to converge; carries the best residual reached."""

    def __init__(self, message: str, best_residual: float, cell: int | None = None):
        self.best_residual = best_residual
        self.cell = cell
        where = "" if cell is None else f" (cell {cell})"
        super().__init__(f"{message}{where}; best residual {best_residual:.3e}")


# ======================================================================
# Data types
# ======================================================================

@dataclass(frozen=True)
class ChemicalSystem:
    """Stoichiometry and equilibrium constants of one chemical system.

    Attributes
    ----------
    components : tuple of str
        Names of the mobile components (length n_c >= 1).
    fixed_components : tuple of str
        Names of the immobile components (length n_s >= 0).
    mobile_species, fixed_species : tuple of str
        Names of the secondary species.
    S : ndarray (n_x, n_c)
        Stoichiometry of mobile secondary species over mobile components.
    A : ndarray (n_y, n_c)
        Stoichiometry of fixed secondary species over mobile components.
    B : ndarray (n_y, n_s)
        Stoichiometry of fixed secondary species over fixed components.
    log_kx, log_ky : ndarray
        Natural-log equilibrium constants of the secondary species.
    """

    components: tuple[str, ...]
    fixed_components: tuple[str, ...] = ()
    mobile_species: tuple[str, ...] = ()
    fixed_species: tuple[str, ...] = ()
    S: np.ndarray = field(default=None)  # type: ignore[assignment]
    A: np.ndarray = field(default=None)  # type: ignore[assignment]
    B: np.ndarray = field(default=None)  # type: ignore[assignment]
    log_kx: np.ndarray = field(default=None)  # type: ignore[assignment]
    log_ky: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        n_c, n_s = len(self.components), len(self.fixed_components)
        n_x, n_y = len(self.mobile_species), len(self.fixed_species)
        if n_c < 1:
            raise ValueError("at least one mobile component is required")
        names = self.components + self.fixed_components + self.mobile_species + self.fixed_species
        if len(set(names)) != len(names):
            raise ValueError("component and species names must be unique")

        def norm(mat, shape, name):
            if mat is None:
                mat = np.zeros(shape)
            mat = np.asarray(mat, dtype=float)
            if mat.size == 0:
                mat = mat.reshape(shape)
            if mat.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {mat.shape}")
            return mat

        object.__setattr__(self, "S", norm(self.S, (n_x, n_c), "S"))
        object.__setattr__(self, "A", norm(self.A, (n_y, n_c), "A"))
        object.__setattr__(self, "B", norm(self.B, (n_y, n_s), "B"))
        object.__setattr__(self, "log_kx", norm(self.log_kx, (n_x,), "log_kx"))
        object.__setattr__(self, "log_ky", norm(self.log_ky, (n_y,), "log_ky"))
        # Full stoichiometry over (lc, ls), used by H' and psi'.
        p_top = np.hstack([self.S, np.zeros((n_x, n_s))])
        p_bot = np.hstack([self.A, self.B])
        object.__setattr__(self, "_P", np.vstack([p_top, p_bot]))
        object.__setattr__(self, "_AB", p_bot)

    @property
    def n_c(self) -> int:
        return len(self.components)

    @property
    def n_s(self) -> int:
        return len(self.fixed_components)

    @property
    def n_x(self) -> int:
        return len(self.mobile_species)

    @property
    def n_y(self) -> int:
        return len(self.fixed_species)

    @property
    def n(self) -> int:
        """Number of equilibrium unknowns per cell."""
        return self.n_c + self.n_s

    @classmethod
    def from_log10(cls, components, fixed_components=(), mobile_species=(),
                   fixed_species=(), S=None, A=None, B=None,
                   log10_kx=None, log10_ky=None) -> "ChemicalSystem":
        """Build a system from log10 equilibrium constants."""
        kx = None if log10_kx is None else np.asarray(log10_kx, dtype=float) * _LN10
        ky = None if log10_ky is None else np.asarray(log10_ky, dtype=float) * _LN10
        return cls(tuple(components), tuple(fixed_components), tuple(mobile_species),
                   tuple(fixed_species), S=S, A=A, B=B, log_kx=kx, log_ky=ky)


@dataclass(frozen=True)
class ChemicalTotals:
    """Component totals (T, W) of one cell."""

    T: np.ndarray
    W: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "T", np.asarray(self.T, dtype=float))
        object.__setattr__(self, "W", np.asarray(self.W, dtype=float))


@dataclass(frozen=True)
class ChemicalState:
    """Log component concentrations and the secondary species they imply."""

    lc: np.ndarray
    ls: np.ndarray
    x: np.ndarray
    y: np.ndarray

    @property
    def c(self) -> np.ndarray:
        return np.exp(self.lc)

    @property
    def s(self) -> np.ndarray:
        return np.exp(self.ls)


@dataclass(frozen=True)
class Speciation:
    """Result of one equilibrium solve."""

    state: ChemicalState
    F: np.ndarray            # A^T y, immobile part of the mobile totals
    residual: float          # inf-norm of H - [T; W] at the solution
    iterations: int
    converged: bool


@dataclass
class BatchSpeciation:
    """Equilibrium solves for a batch of independent cells.

    Arrays are row-per-cell; ``converged`` flags cells individually so a
    caller probing a tentative state can treat failures as a rejected
    trial instead of an error.
    """

    lc: np.ndarray           # (N, n_c)
    ls: np.ndarray           # (N, n_s)
    x: np.ndarray            # (N, n_x)
    y: np.ndarray            # (N, n_y)
    F: np.ndarray            # (N, n_c)
    residual: np.ndarray     # (N,)
    iterations: np.ndarray   # (N,)
    converged: np.ndarray    # (N,) bool

    def cell(self, i: int) -> ChemicalState:
        return ChemicalState(self.lc[i].copy(), self.ls[i].copy(),
                             self.x[i].copy(), self.y[i].copy())


@dataclass(frozen=True)
class NewtonOptions:
    """Controls for the equilibrium Newton iteration."""

    tol: float = 1e-10
    max_iter: int = 200
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 2.0 ** -30
    # Largest log-concentration move per iteration.  Cold starts far from
    # the root can produce Newton steps of hundreds of log units whose
    # trial points all overflow; capping keeps the line search useful.
    step_max: float = 20.0


# ======================================================================
# Pointwise evaluation
# ======================================================================

def eval_secondary(system: ChemicalSystem, lc: np.ndarray, ls: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Secondary species concentrations (x, y) from log components.

    Raises
    ------
    ConcentrationOverflowError
        If any mass-action product overflows, identifying the species.
    """
    lc = np.asarray(lc, dtype=float)
    ls = np.asarray(ls, dtype=float)
    with np.errstate(over="ignore"):
        x = np.exp(system.log_kx + system.S @ lc)
        y = np.exp(system.log_ky + system.A @ lc + system.B @ ls)
    for kind, names, vals in (("mobile species", system.mobile_species, x),
                              ("fixed species", system.fixed_species, y)):
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            i = int(bad[0])
            raise ConcentrationOverflowError(kind, i, names[i])
    return x, y


def eval_h(system: ChemicalSystem, lc: np.ndarray, ls: np.ndarray) -> np.ndarray:
    """Total-concentration map H(lc, ls), length n_c + n_s."""
    x, y = eval_secondary(system, lc, ls)
    h_c = np.exp(np.asarray(lc, dtype=float)) + system.S.T @ x + system.A.T @ y
    h_s = np.exp(np.asarray(ls, dtype=float)) + system.B.T @ y
    return np.concatenate([h_c, h_s])


def eval_h_jacobian(system: ChemicalSystem, lc: np.ndarray, ls: np.ndarray) -> np.ndarray:
    """Jacobian of H with respect to (lc, ls); symmetric positive definite."""
    x, y = eval_secondary(system, lc, ls)
    w = np.concatenate([x, y])
    P = system._P
    jac = P.T @ (w[:, None] * P)
    diag = np.concatenate([np.exp(np.asarray(lc, dtype=float)),
                           np.exp(np.asarray(ls, dtype=float))])
    jac[np.diag_indices_from(jac)] += diag
    return jac


# ======================================================================
# Batched kernels
# ======================================================================

def _secondary_batch(system: ChemicalSystem, LC: np.ndarray, LS: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray]:
    # Overflow is allowed here; callers reject non-finite rows.
    with np.errstate(over="ignore"):
        X = np.exp(system.log_kx[None, :] + LC @ system.S.T)
        Y = np.exp(system.log_ky[None, :] + LC @ system.A.T + LS @ system.B.T)
    return X, Y


def _h_batch(system: ChemicalSystem, Z: np.ndarray) -> np.ndarray:
    n_c = system.n_c
    LC, LS = Z[:, :n_c], Z[:, n_c:]
    X, Y = _secondary_batch(system, LC, LS)
    with np.errstate(over="ignore", invalid="ignore"):
        H_c = np.exp(LC) + X @ system.S + Y @ system.A
        H_s = np.exp(LS) + Y @ system.B
    return np.hstack([H_c, H_s])


def _h_jacobian_batch(system: ChemicalSystem, Z: np.ndarray) -> np.ndarray:
    n_c = system.n_c
    LC, LS = Z[:, :n_c], Z[:, n_c:]
    X, Y = _secondary_batch(system, LC, LS)
    W = np.hstack([X, Y])
    P = system._P
    with np.errstate(over="ignore", invalid="ignore"):
        jac = np.einsum("mi,Nm,mj->Nij", P, W, P, optimize=True)
        diag = np.hstack([np.exp(LC), np.exp(LS)])
    idx = np.arange(system.n)
    jac[:, idx, idx] += diag
    return jac


def _row_norms(R: np.ndarray, ord_inf: bool) -> np.ndarray:
    # Huge trial residuals may overflow the squared sum; they come out
    # as inf either way, which is what a rejected trial should score.
    with np.errstate(over="ignore", invalid="ignore"):
        vals = np.max(np.abs(R), axis=1) if ord_inf else np.linalg.norm(R, axis=1)
    return np.where(np.isfinite(vals), vals, np.inf)


def _shifted_direction(J: np.ndarray, r: np.ndarray) -> np.ndarray | None:
    """Direction from a diagonally shifted Jacobian for one row.

    When a single species dominates every total, the mass-action
    Jacobian collapses to a rank-one matrix in floating point and the
    plain LU fails.  The Jacobian is positive semidefinite, so adding a
    small multiple of the identity restores solvability while keeping a
    descent direction for the line search.
    """
    scale = np.max(np.abs(J))
    if not np.isfinite(scale) or scale == 0.0:
        return None
    eye = np.eye(J.shape[0])
    for shift in (1e-14, 1e-10, 1e-6, 1e-2):
        try:
            d = np.linalg.solve(J + shift * scale * eye, -r)
        except np.linalg.LinAlgError:
            continue
        if np.isfinite(d).all():
            return d
    return None


def _newton_batch(residual_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
                  jacobian_fn: Callable[[np.ndarray], np.ndarray],
                  Z0: np.ndarray, scale: np.ndarray, options: NewtonOptions
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Damped Newton over a batch of independent rows.

    ``residual_fn(Z_rows, rows)`` evaluates the subset ``rows`` of the
    batch at iterates ``Z_rows``; non-finite residuals act as rejected
    line-search trials.  A row converges when its residual inf-norm
    drops below ``tol * max(1, scale_row)``.

    Returns (Z, residual_inf_norms, iterations, converged).
    """
    Z = Z0.copy()
    N = Z.shape[0]
    all_rows = np.arange(N)
    target = options.tol * np.maximum(1.0, scale)
    R = residual_fn(Z, all_rows)
    norm_inf = _row_norms(R, ord_inf=True)
    iterations = np.zeros(N, dtype=int)
    failed = np.zeros(N, dtype=bool)

    for _ in range(options.max_iter):
        active = (norm_inf > target) & ~failed
        if not active.any():
            break
        ia = np.flatnonzero(active)
        Ja = jacobian_fn(Z[ia])
        ok = np.isfinite(R[ia]).all(axis=1) & np.isfinite(Ja).all(axis=(1, 2))
        if not ok.all():
            failed[ia[~ok]] = True
            ia = ia[ok]
            if ia.size == 0:
                continue
            Ja = Ja[ok]
        # Equilibrate rows before factorizing: components pinned at the
        # concentration floor leave rows ~1e-30 next to rows of order
        # one, and the unscaled LU then underflows into a zero pivot.
        D = np.max(np.abs(Ja), axis=2)
        D[D == 0.0] = 1.0
        Js = Ja / D[:, :, None]
        Rs = R[ia] / D
        try:
            # Trailing singleton axis: solve a batch of vectors, not a matrix.
            delta = np.linalg.solve(Js, -Rs[..., None])[..., 0]
            retry = ~np.isfinite(delta).all(axis=1)
        except np.linalg.LinAlgError:
            delta = np.empty_like(Rs)
            retry = np.ones(ia.size, dtype=bool)
        if retry.any():
            # Singular or overflowed rows: try a plain row solve first,
            # then the shifted fallback before giving up on the row.
            Ra = R[ia]
            keep = np.ones(ia.size, dtype=bool)
            for k in np.flatnonzero(retry):
                try:
                    d = np.linalg.solve(Js[k], -Rs[k])
                except np.linalg.LinAlgError:
                    d = None
                if d is None or not np.isfinite(d).all():
                    d = _shifted_direction(Ja[k], Ra[k])
                if d is None:
                    keep[k] = False
                else:
                    delta[k] = d
            failed[ia[~keep]] = True
            ia, delta = ia[keep], delta[keep]
            if ia.size == 0:
                continue
        # Cap the per-row step length; a scaled Newton or shifted
        # direction still reduces the residual under backtracking.
        dmax = np.max(np.abs(delta), axis=1)
        over = dmax > options.step_max
        if over.any():
            delta[over] *= (options.step_max / dmax[over])[:, None]

        Za = Z[ia]
        f0 = _row_norms(R[ia], ord_inf=False)
        lam = np.ones(ia.size)
        accepted = np.zeros(ia.size, dtype=bool)
        Zacc, Racc = Za.copy(), R[ia].copy()
        while True:
            todo = np.flatnonzero(~accepted)
            cand = Za[todo] + lam[todo, None] * delta[todo]
            Rc = residual_fn(cand, ia[todo])
            fc = _row_norms(Rc, ord_inf=False)
            good = fc <= (1.0 - options.armijo_c * lam[todo]) * f0[todo]
            hit = todo[good]
            Zacc[hit] = cand[good]
            Racc[hit] = Rc[good]
            accepted[hit] = True
            if accepted.all():
                break
            lam[~accepted] *= options.backtrack
            dead = ~accepted & (lam < options.min_step)
            if dead.any():
                # Leave dead rows at their pre-step iterate.
                failed[ia[dead]] = True
                accepted[dead] = True
                if accepted.all():
                    break
        moved = ~failed[ia]
        im = ia[moved]
        Z[im] = Zacc[moved]
        R[im] = Racc[moved]
        norm_inf[im] = _row_norms(Racc[moved], ord_inf=True)
        iterations[im] += 1

    converged = (norm_inf <= target) & ~failed
    return Z, norm_inf, iterations, converged


# ======================================================================
# Equilibrium solves
# ======================================================================

def _clamp(vals: np.ndarray) -> np.ndarray:
    return np.maximum(vals, CONCENTRATION_FLOOR)


def solve_equilibrium_batch(system: ChemicalSystem, T: np.ndarray, W: np.ndarray,
                            guess_lc: np.ndarray | None = None,
                            guess_ls: np.ndarray | None = None,
                            options: NewtonOptions | None = None) -> BatchSpeciation:
    """Solve H(lc, ls) = [T; W] for every row of (T, W).

    Totals below the concentration floor are clamped to it.  Rows that
    fail to converge are flagged in ``converged`` instead of raising;
    use :func:`solve_equilibrium` for the raising single-cell form.
    """
    opts = options or NewtonOptions()
    T = np.array(T, dtype=float, ndmin=2)
    N = T.shape[0]
    W = np.asarray(W, dtype=float).reshape(N, system.n_s)
    TW = np.hstack([_clamp(T), _clamp(W) if system.n_s else W])

    LC0 = np.log(TW[:, :system.n_c]) if guess_lc is None \
        else np.asarray(guess_lc, dtype=float).reshape(N, system.n_c)
    LS0 = np.log(TW[:, system.n_c:]) if guess_ls is None \
        else np.asarray(guess_ls, dtype=float).reshape(N, system.n_s)
    Z0 = np.hstack([LC0, LS0])

    Z, res, iters, conv = _newton_batch(
        lambda Zk, rows: _h_batch(system, Zk) - TW[rows],
        lambda Zk: _h_jacobian_batch(system, Zk),
        Z0, np.max(np.abs(TW), axis=1), opts)

    LC, LS = Z[:, :system.n_c], Z[:, system.n_c:]
    X, Y = _secondary_batch(system, LC, LS)
    F = Y @ system.A if system.n_y else np.zeros((N, system.n_c))
    return BatchSpeciation(LC, LS, X, Y, F, res, iters, conv)


def solve_equilibrium(system: ChemicalSystem, totals: ChemicalTotals,
                      guess: ChemicalState | None = None,
                      options: NewtonOptions | None = None) -> Speciation:
    """Speciate one cell from totals (T, W).

    Raises
    ------
    EquilibriumDivergedError
        If Newton hits the iteration cap or the line search dies.
    """
    glc = None if guess is None else guess.lc
    gls = None if guess is None else guess.ls
    batch = solve_equilibrium_batch(system, totals.T[None, :], totals.W[None, :],
                                    guess_lc=glc, guess_ls=gls, options=options)
    spec = Speciation(batch.cell(0), batch.F[0], float(batch.residual[0]),
                      int(batch.iterations[0]), bool(batch.converged[0]))
    if not spec.converged:
        raise EquilibriumDivergedError("equilibrium Newton did not converge",
                                       spec.residual)
    return spec


def solve_mobile_batch(system: ChemicalSystem, C: np.ndarray, W: np.ndarray,
                       guess_lc: np.ndarray | None = None,
                       guess_ls: np.ndarray | None = None,
                       options: NewtonOptions | None = None) -> BatchSpeciation:
    """Speciate cells whose *mobile* totals C are prescribed.

    Solves exp(lc) + S^T x = C together with exp(ls) + B^T y = W, i.e.
    the solution composition is given and the sorbed phase equilibrates
    against it.  This is how scenarios state initial conditions as water
    analyses rather than as bulk totals.
    """
    opts = options or NewtonOptions()
    C = np.array(C, dtype=float, ndmin=2)
    N = C.shape[0]
    W = np.asarray(W, dtype=float).reshape(N, system.n_s)
    CW = np.hstack([_clamp(C), _clamp(W) if system.n_s else W])
    n_c, n_s, n = system.n_c, system.n_s, system.n

    LC0 = np.log(CW[:, :n_c]) if guess_lc is None \
        else np.asarray(guess_lc, dtype=float).reshape(N, n_c)
    LS0 = np.log(CW[:, n_c:]) if guess_ls is None \
        else np.asarray(guess_ls, dtype=float).reshape(N, n_s)
    Z0 = np.hstack([LC0, LS0])

    def res(Zk, rows):
        LC, LS = Zk[:, :n_c], Zk[:, n_c:]
        X, Y = _secondary_batch(system, LC, LS)
        with np.errstate(over="ignore", invalid="ignore"):
            top = np.exp(LC) + X @ system.S - CW[rows, :n_c]
            bot = np.exp(LS) + Y @ system.B - CW[rows, n_c:]
        return np.hstack([top, bot])

    def jac(Zk):
        LC, LS = Zk[:, :n_c], Zk[:, n_c:]
        X, Y = _secondary_batch(system, LC, LS)
        J = np.zeros((Zk.shape[0], n, n))
        with np.errstate(over="ignore", invalid="ignore"):
            J[:, :n_c, :n_c] = np.einsum("mi,Nm,mj->Nij", system.S, X, system.S,
                                         optimize=True)
            J[:, n_c:, :n_c] = np.einsum("mk,Nm,mj->Nkj", system.B, Y, system.A,
                                         optimize=True)
            J[:, n_c:, n_c:] = np.einsum("mk,Nm,ml->Nkl", system.B, Y, system.B,
                                         optimize=True)
            diag = np.hstack([np.exp(LC), np.exp(LS)])
        idx = np.arange(n)
        J[:, idx, idx] += diag
        return J

    Z, resn, iters, conv = _newton_batch(res, jac, Z0,
                                         np.max(np.abs(CW), axis=1), opts)
    LC, LS = Z[:, :n_c], Z[:, n_c:]
    X, Y = _secondary_batch(system, LC, LS)
    F = Y @ system.A if system.n_y else np.zeros((N, n_c))
    return BatchSpeciation(LC, LS, X, Y, F, resn, iters, conv)


# ======================================================================
# The transport-facing map psi and its Jacobian
# ======================================================================

def psi(system: ChemicalSystem, T: np.ndarray, W: np.ndarray,
        guess: ChemicalState | None = None,
        options: NewtonOptions | None = None) -> np.ndarray:
    """Immobile part F = A^T y of the mobile totals, W held fixed."""
    totals = ChemicalTotals(np.asarray(T, dtype=float), np.asarray(W, dtype=float))
    return solve_equilibrium(system, totals, guess=guess, options=options).F


def psi_prime_batch(system: ChemicalSystem, LC: np.ndarray, LS: np.ndarray
                    ) -> np.ndarray:
    """dF/dT blocks, one (n_c, n_c) matrix per batch row.

    Differentiating F = A^T y along the equilibrium manifold gives

        psi' = A^T diag(y) [A B] (H')^{-1} [I; 0],

    evaluated at converged states (LC, LS).
    """
    N = LC.shape[0]
    n_c, n = system.n_c, system.n
    if system.n_y == 0:
        return np.zeros((N, n_c, n_c))
    Z = np.hstack([LC, LS])
    Hp = _h_jacobian_batch(system, Z)
    rhs = np.zeros((n, n_c))
    rhs[:n_c, :] = np.eye(n_c)
    sol = np.linalg.solve(Hp, rhs[None, :, :].repeat(N, axis=0))
    _, Y = _secondary_batch(system, LC, LS)
    tmp = np.einsum("ym,Nmk->Nyk", system._AB, sol, optimize=True)
    tmp *= Y[:, :, None]
    return np.einsum("yc,Nyk->Nck", system.A, tmp, optimize=True)


def psi_prime(system: ChemicalSystem, state: ChemicalState) -> np.ndarray:
    """dF/dT at one converged equilibrium state."""
    return psi_prime_batch(system, state.lc[None, :], state.ls[None, :])[0]
