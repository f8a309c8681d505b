"""1D reactive transport with equilibrium chemistry.

Finite-volume advection-diffusion on a one-dimensional column, coupled
to multi-species chemical equilibrium either globally (one Newton-Krylov
solve per time step over all cells and species) or by operator splitting
(sequential iterative or non-iterative).
"""

from .chem import (
    ChemicalSystem,
    ChemicalTotals,
    ChemicalState,
    Speciation,
    NewtonOptions,
    solve_equilibrium,
    psi,
    psi_prime,
)
from .transport import Grid1D, TransportSystem, assemble, step_backward_euler, step_split
from .krylov import LinearOperator, GmresOptions, gmres, forcing_term, line_search_armijo
from .coupler import (
    CoupledProblem,
    CoupledState,
    SolverSettings,
    residual,
    jacobian_apply,
    step_global,
    step_sia,
    step_snia,
    run,
)
from .scenario import Scenario, parse_scenario, builtin_scenario, run_scenario

__version__ = "0.1.0"
