"""Scenario files: parsing, validation, problem building and output.

A scenario is a line-oriented text file with ``[section]`` headers and
``key = value`` entries; ``#`` starts a comment anywhere on a line.
Sections are [chemistry], [media], [boundary], [time], [solver] and
[output]; repeatable keys (species, zones, compositions, inflow steps)
simply appear once per item.  Equilibrium constants are written as
log10 and converted to natural logs exactly once, here.  The parser
reports positions for syntax problems and field paths for semantic
ones, and ``serialize_scenario`` writes a canonical form that parses
back to an identical scenario.

The same module turns a parsed scenario into a coupled problem plus its
initial state, converts raw simulation records into labeled series, and
writes the CSV outputs (17 significant digits, bitwise reproducible).
"""

from __future__ import annotations

import importlib.resources
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import chem as _chem
from .chem import ChemicalSystem, NewtonOptions
from .coupler import (
    CoupledProblem,
    CoupledState,
    SimulationRecord,
    SolverSettings,
    make_state_from_mobile,
    make_state_from_totals,
    run,
)
from .series import ProfileBlock, TimeSeries
from .transport import Grid1D, assemble

__all__ = [
    "Scenario",
    "SpeciesDef",
    "ZoneDef",
    "ScenarioError",
    "parse_scenario",
    "serialize_scenario",
    "load_scenario_file",
    "builtin_scenario",
    "available_builtins",
    "build_problem",
    "run_scenario",
    "speciate_outputs",
    "record_to_series",
    "write_csv",
    "write_profiles",
    "write_stats",
]

_QUANTITY_CHOICES = ("mobile", "total", "fixed", "species", "all")
_METHOD_CHOICES = ("global", "sia", "snia")
_NAME_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_+\-]*$")


class ScenarioError(Exception):
    """Malformed or inconsistent scenario content."""


@dataclass(frozen=True)
class SpeciesDef:
    """One secondary species: name, log10 K, stoichiometric coefficients."""

    name: str
    log10_k: float
    coeffs: tuple[tuple[str, float], ...]


@dataclass(frozen=True)
class ZoneDef:
    """One homogeneous interval of the column."""

    x_start: float
    x_end: float
    phi: float
    D: float
    W: tuple[float, ...] = ()


@dataclass(frozen=True)
class Scenario:
    """Validated content of one scenario file."""

    components: tuple[str, ...]
    fixed_components: tuple[str, ...]
    mobile_species: tuple[SpeciesDef, ...]
    fixed_species: tuple[SpeciesDef, ...]
    length: float
    cells: int
    velocity: float
    zones: tuple[ZoneDef, ...]
    initial_kind: str
    initial: tuple[tuple[int | None, tuple[tuple[str, float], ...]], ...]
    inflow: tuple[tuple[float, tuple[tuple[str, float], ...]], ...]
    dt: float
    t_end: float
    cfl_factor: float
    profile_times: tuple[float, ...]
    method: str
    solver: tuple[tuple[str, str], ...]
    outlet: bool
    quantities: str


# ======================================================================
# Parsing
# ======================================================================

def _strip(line: str) -> str:
    cut = line.find("#")
    if cut >= 0:
        line = line[:cut]
    return line.strip()


def _err(source: str, lineno: int, message: str) -> ScenarioError:
    return ScenarioError(f"{source}:{lineno}: {message}")


def _parse_float(tok: str, source: str, lineno: int, what: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise _err(source, lineno, f"{what}: not a number: {tok!r}") from None


def _parse_pairs(tokens: list[str], sep: str, source: str, lineno: int,
                 what: str) -> tuple[tuple[str, float], ...]:
    out = []
    for tok in tokens:
        if sep not in tok:
            raise _err(source, lineno, f"{what}: expected name{sep}value, got {tok!r}")
        name, _, val = tok.partition(sep)
        out.append((name, _parse_float(val, source, lineno, what)))
    return tuple(out)


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    """Parse and validate scenario text.

    Raises
    ------
    ScenarioError
        With the source name and line number for syntax errors, or the
        offending field path for semantic ones.
    """
    sections: dict[str, list[tuple[int, str, str]]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip(raw)
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            if current not in ("chemistry", "media", "boundary", "time",
                               "solver", "output"):
                raise _err(source, lineno, f"unknown section [{current}]")
            sections.setdefault(current, [])
            continue
        if current is None:
            raise _err(source, lineno, "entry before any [section] header")
        if "=" not in line:
            raise _err(source, lineno, f"expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        sections[current].append((lineno, key.strip().lower(), value.strip()))

    for required in ("chemistry", "media", "boundary", "time"):
        if required not in sections:
            raise ScenarioError(f"{source}: missing required section [{required}]")

    # ------------------------------------------------------------------
    # [chemistry]
    components: tuple[str, ...] = ()
    fixed_components: tuple[str, ...] = ()
    mobile_species: list[SpeciesDef] = []
    fixed_species: list[SpeciesDef] = []
    for lineno, key, value in sections["chemistry"]:
        if key == "components":
            components = tuple(value.split())
        elif key == "fixed_components":
            fixed_components = tuple(value.split())
        elif key in ("mobile_species", "fixed_species"):
            toks = value.split()
            if len(toks) < 2:
                raise _err(source, lineno, "species needs: name log10K coefficients")
            name = toks[0]
            log10_k = _parse_float(toks[1], source, lineno, f"species {name}")
            coeffs = _parse_pairs(toks[2:], ":", source, lineno, f"species {name}")
            target = mobile_species if key == "mobile_species" else fixed_species
            target.append(SpeciesDef(name, log10_k, coeffs))
        else:
            raise _err(source, lineno, f"unknown [chemistry] key {key!r}")
    if not components:
        raise ScenarioError(f"{source}: chemistry.components: at least one "
                            "mobile component is required")
    all_names = components + fixed_components + \
        tuple(s.name for s in mobile_species) + tuple(s.name for s in fixed_species)
    for name in all_names:
        if not _NAME_RE.match(name):
            raise ScenarioError(f"{source}: chemistry: invalid name {name!r}")
    if len(set(all_names)) != len(all_names):
        raise ScenarioError(f"{source}: chemistry: duplicate component or "
                            "species name")
    for sp in mobile_species:
        for cname, _ in sp.coeffs:
            if cname not in components:
                raise ScenarioError(
                    f"{source}: chemistry.mobile_species.{sp.name}: unknown or "
                    f"non-mobile component {cname!r}")
    for sp in fixed_species:
        for cname, _ in sp.coeffs:
            if cname not in components and cname not in fixed_components:
                raise ScenarioError(
                    f"{source}: chemistry.fixed_species.{sp.name}: unknown "
                    f"component {cname!r}")

    # ------------------------------------------------------------------
    # [media]
    length = cells = cell_width = velocity = None
    zones: list[ZoneDef] = []
    n_s = len(fixed_components)
    for lineno, key, value in sections["media"]:
        if key == "length":
            length = _parse_float(value, source, lineno, "media.length")
        elif key == "cells":
            try:
                cells = int(value)
            except ValueError:
                raise _err(source, lineno, f"media.cells: not an integer: {value!r}")
        elif key == "h":
            cell_width = _parse_float(value, source, lineno, "media.h")
        elif key == "velocity":
            velocity = _parse_float(value, source, lineno, "media.velocity")
        elif key == "zone":
            toks = value.split()
            if len(toks) < 2:
                raise _err(source, lineno, "zone needs: x_start x_end key=value...")
            x0 = _parse_float(toks[0], source, lineno, "zone.x_start")
            x1 = _parse_float(toks[1], source, lineno, "zone.x_end")
            props = dict()
            for tok in toks[2:]:
                if "=" not in tok:
                    raise _err(source, lineno, f"zone: expected key=value, got {tok!r}")
                k, _, v = tok.partition("=")
                props[k.lower()] = v
            if "phi" not in props or "d" not in props:
                raise _err(source, lineno, "zone needs phi= and D=")
            phi = _parse_float(props.pop("phi"), source, lineno, "zone.phi")
            dval = _parse_float(props.pop("d"), source, lineno, "zone.D")
            wtok = props.pop("w", None)
            extra = set(props)
            if extra:
                raise _err(source, lineno, f"zone: unknown keys {sorted(extra)}")
            if wtok is None:
                wvals: tuple[float, ...] = ()
            else:
                wvals = tuple(_parse_float(v, source, lineno, "zone.W")
                              for v in wtok.split(","))
            zones.append(ZoneDef(x0, x1, phi, dval, wvals))
        else:
            raise _err(source, lineno, f"unknown [media] key {key!r}")
    if length is None or length <= 0:
        raise ScenarioError(f"{source}: media.length: must be given and positive")
    if velocity is None:
        raise ScenarioError(f"{source}: media.velocity: must be given")
    if velocity < 0:
        raise ScenarioError(f"{source}: media.velocity: negative velocity is "
                            "not supported; flow must go in +x")
    if (cells is None) == (cell_width is None):
        raise ScenarioError(f"{source}: media: give exactly one of cells or h")
    if cell_width is not None:
        if cell_width <= 0:
            raise ScenarioError(f"{source}: media.h: must be positive")
        cells = max(2, round(length / cell_width))
    if cells < 2:
        raise ScenarioError(f"{source}: media.cells: need at least 2")
    if not zones:
        raise ScenarioError(f"{source}: media: at least one zone is required")
    zones.sort(key=lambda z: z.x_start)
    tol = 1e-9 * length
    if abs(zones[0].x_start) > tol:
        raise ScenarioError(f"{source}: media.zone: first zone must start at 0")
    for a, b in zip(zones, zones[1:]):
        if abs(a.x_end - b.x_start) > tol:
            raise ScenarioError(f"{source}: media.zone: gap or overlap at "
                                f"x={a.x_end!r}")
    if abs(zones[-1].x_end - length) > tol:
        raise ScenarioError(f"{source}: media.zone: zones must end at length")
    for i, z in enumerate(zones, start=1):
        if z.x_end <= z.x_start:
            raise ScenarioError(f"{source}: media.zone[{i}]: empty interval")
        if z.phi <= 0:
            raise ScenarioError(f"{source}: media.zone[{i}].phi: must be positive")
        if z.D <= 0:
            raise ScenarioError(f"{source}: media.zone[{i}].D: must be positive")
        if len(z.W) != n_s:
            raise ScenarioError(
                f"{source}: media.zone[{i}].W: expected {n_s} value(s) for "
                f"fixed components {list(fixed_components)}, got {len(z.W)}")
        if any(w < 0 for w in z.W):
            raise ScenarioError(f"{source}: media.zone[{i}].W: negative capacity")

    # ------------------------------------------------------------------
    # [boundary]
    initial_kind = "aqueous"
    initial: list[tuple[int | None, tuple[tuple[str, float], ...]]] = []
    inflow: list[tuple[float, tuple[tuple[str, float], ...]]] = []
    for lineno, key, value in sections["boundary"]:
        if key == "initial_kind":
            if value not in ("aqueous", "totals"):
                raise _err(source, lineno, "initial_kind must be aqueous or totals")
            initial_kind = value
        elif key == "initial":
            toks = value.split()
            zone_ref: int | None = None
            if toks and toks[0].lower().startswith("zone:"):
                try:
                    zone_ref = int(toks[0][5:])
                except ValueError:
                    raise _err(source, lineno, f"bad zone reference {toks[0]!r}")
                toks = toks[1:]
            comp = _parse_pairs(toks, "=", source, lineno, "initial composition")
            initial.append((zone_ref, comp))
        elif key == "inflow":
            toks = value.split()
            if not toks or not toks[0].lower().startswith("t:"):
                raise _err(source, lineno, "inflow needs a leading t:<seconds>")
            t0 = _parse_float(toks[0][2:], source, lineno, "inflow.t")
            comp = _parse_pairs(toks[1:], "=", source, lineno, "inflow composition")
            inflow.append((t0, comp))
        else:
            raise _err(source, lineno, f"unknown [boundary] key {key!r}")
    if not initial:
        raise ScenarioError(f"{source}: boundary.initial: required")
    if not inflow:
        raise ScenarioError(f"{source}: boundary.inflow: required")
    for zone_ref, comp in initial:
        if zone_ref is not None and not 1 <= zone_ref <= len(zones):
            raise ScenarioError(f"{source}: boundary.initial: zone {zone_ref} "
                                f"does not exist (have {len(zones)})")
        for cname, val in comp:
            if cname not in components:
                raise ScenarioError(f"{source}: boundary.initial: unknown mobile "
                                    f"component {cname!r}")
            if val < 0:
                raise ScenarioError(f"{source}: boundary.initial.{cname}: negative")
    covered = {z for z in range(1, len(zones) + 1)}
    explicit = {z for z, _ in initial if z is not None}
    if not any(z is None for z, _ in initial) and explicit != covered:
        missing = sorted(covered - explicit)
        raise ScenarioError(f"{source}: boundary.initial: zones {missing} have "
                            "no composition and no default was given")
    times_seen = [t for t, _ in inflow]
    if times_seen[0] != 0.0:
        raise ScenarioError(f"{source}: boundary.inflow: first entry must be t:0")
    if any(b <= a for a, b in zip(times_seen, times_seen[1:])):
        raise ScenarioError(f"{source}: boundary.inflow: times must increase")
    for _, comp in inflow:
        for cname, val in comp:
            if cname not in components:
                raise ScenarioError(f"{source}: boundary.inflow: unknown mobile "
                                    f"component {cname!r}")
            if val < 0:
                raise ScenarioError(f"{source}: boundary.inflow.{cname}: negative")

    # ------------------------------------------------------------------
    # [time]
    dt = t_end = None
    cfl_factor = 0.9
    profile_times: tuple[float, ...] = ()
    for lineno, key, value in sections["time"]:
        if key == "dt":
            dt = _parse_float(value, source, lineno, "time.dt")
        elif key == "t_end":
            t_end = _parse_float(value, source, lineno, "time.t_end")
        elif key == "cfl_factor":
            cfl_factor = _parse_float(value, source, lineno, "time.cfl_factor")
        elif key == "profile_times":
            profile_times = tuple(_parse_float(v, source, lineno, "profile_times")
                                  for v in value.split())
        else:
            raise _err(source, lineno, f"unknown [time] key {key!r}")
    if dt is None or dt <= 0:
        raise ScenarioError(f"{source}: time.dt: must be given and positive")
    if t_end is None or t_end < 0:
        raise ScenarioError(f"{source}: time.t_end: must be given and nonnegative")
    if not 0 < cfl_factor <= 1:
        raise ScenarioError(f"{source}: time.cfl_factor: must lie in (0, 1]")
    for tp in profile_times:
        if tp < 0 or tp > t_end:
            raise ScenarioError(f"{source}: time.profile_times: {tp!r} outside "
                                "[0, t_end]")

    # ------------------------------------------------------------------
    # [solver]
    method = "global"
    solver_pairs: list[tuple[str, str]] = []
    known_solver = {"newton_tol", "newton_max", "gamma", "eta_min", "eta_max",
                    "gmres_restart", "gmres_abs_tol", "gmres_max_iter",
                    "sia_tol", "sia_max", "sia_transport", "scaling",
                    "workers", "chem_tol", "chem_max"}
    for lineno, key, value in sections.get("solver", []):
        if key == "method":
            if value not in _METHOD_CHOICES:
                raise _err(source, lineno,
                           f"method must be one of {', '.join(_METHOD_CHOICES)}")
            method = value
        elif key in known_solver:
            solver_pairs.append((key, value))
        else:
            raise _err(source, lineno, f"unknown [solver] key {key!r}")

    # ------------------------------------------------------------------
    # [output]
    outlet = True
    quantities = "mobile"
    for lineno, key, value in sections.get("output", []):
        if key == "outlet":
            if value not in ("on", "off"):
                raise _err(source, lineno, "outlet must be on or off")
            outlet = value == "on"
        elif key == "quantities":
            if value not in _QUANTITY_CHOICES:
                raise _err(source, lineno,
                           f"quantities must be one of {', '.join(_QUANTITY_CHOICES)}")
            quantities = value
        else:
            raise _err(source, lineno, f"unknown [output] key {key!r}")

    scn = Scenario(
        components=components, fixed_components=fixed_components,
        mobile_species=tuple(mobile_species), fixed_species=tuple(fixed_species),
        length=length, cells=cells, velocity=velocity, zones=tuple(zones),
        initial_kind=initial_kind, initial=tuple(initial), inflow=tuple(inflow),
        dt=dt, t_end=t_end, cfl_factor=cfl_factor, profile_times=profile_times,
        method=method, solver=tuple(solver_pairs), outlet=outlet,
        quantities=quantities)
    # Building the solver settings validates the override values too.
    _settings_from(scn, None)
    return scn


# ======================================================================
# Serialization
# ======================================================================

def _fmt(x: float) -> str:
    return repr(float(x))


def serialize_scenario(scn: Scenario) -> str:
    """Canonical text form; parses back to an identical scenario."""
    out = ["[chemistry]"]
    out.append("components = " + " ".join(scn.components))
    if scn.fixed_components:
        out.append("fixed_components = " + " ".join(scn.fixed_components))
    for key, species in (("mobile_species", scn.mobile_species),
                         ("fixed_species", scn.fixed_species)):
        for sp in species:
            coeffs = " ".join(f"{n}:{_fmt(v)}" for n, v in sp.coeffs)
            out.append(f"{key} = {sp.name} {_fmt(sp.log10_k)} {coeffs}".rstrip())
    out.append("")
    out.append("[media]")
    out.append(f"length = {_fmt(scn.length)}")
    out.append(f"cells = {scn.cells}")
    out.append(f"velocity = {_fmt(scn.velocity)}")
    for z in scn.zones:
        line = f"zone = {_fmt(z.x_start)} {_fmt(z.x_end)} phi={_fmt(z.phi)} D={_fmt(z.D)}"
        if z.W:
            line += " W=" + ",".join(_fmt(w) for w in z.W)
        out.append(line)
    out.append("")
    out.append("[boundary]")
    out.append(f"initial_kind = {scn.initial_kind}")
    for zone_ref, comp in scn.initial:
        prefix = "" if zone_ref is None else f"zone:{zone_ref} "
        vals = " ".join(f"{n}={_fmt(v)}" for n, v in comp)
        out.append(f"initial = {prefix}{vals}")
    for t0, comp in scn.inflow:
        vals = " ".join(f"{n}={_fmt(v)}" for n, v in comp)
        out.append(f"inflow = t:{_fmt(t0)} {vals}")
    out.append("")
    out.append("[time]")
    out.append(f"dt = {_fmt(scn.dt)}")
    out.append(f"t_end = {_fmt(scn.t_end)}")
    out.append(f"cfl_factor = {_fmt(scn.cfl_factor)}")
    if scn.profile_times:
        out.append("profile_times = " + " ".join(_fmt(t) for t in scn.profile_times))
    out.append("")
    out.append("[solver]")
    out.append(f"method = {scn.method}")
    for key, value in scn.solver:
        out.append(f"{key} = {value}")
    out.append("")
    out.append("[output]")
    out.append(f"outlet = {'on' if scn.outlet else 'off'}")
    out.append(f"quantities = {scn.quantities}")
    return "\n".join(out) + "\n"


def load_scenario_file(path: str | Path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(encoding="utf-8"), source=str(path))


_BUILTIN_FILES = {
    "ion-exchange": "ion_exchange.scn",
    "tracer": "tracer.scn",
    "momas-demo": "momas_demo.scn",
}


def available_builtins() -> list[str]:
    return sorted(_BUILTIN_FILES)


def builtin_scenario(name: str) -> Scenario:
    """Load one of the packaged scenarios by name."""
    key = name.strip().lower().replace("_", "-")
    if key not in _BUILTIN_FILES:
        raise ScenarioError(f"unknown builtin scenario {name!r}; available: "
                            + ", ".join(available_builtins()))
    res = importlib.resources.files("reax").joinpath("scenarios",
                                                     _BUILTIN_FILES[key])
    return parse_scenario(res.read_text(encoding="utf-8"), source=f"builtin:{key}")


# ======================================================================
# Problem building
# ======================================================================

def _chem_system(scn: Scenario) -> ChemicalSystem:
    n_c, n_s = len(scn.components), len(scn.fixed_components)
    cindex = {n: i for i, n in enumerate(scn.components)}
    sindex = {n: i for i, n in enumerate(scn.fixed_components)}
    S = np.zeros((len(scn.mobile_species), n_c))
    for i, sp in enumerate(scn.mobile_species):
        for name, coef in sp.coeffs:
            S[i, cindex[name]] += coef
    A = np.zeros((len(scn.fixed_species), n_c))
    B = np.zeros((len(scn.fixed_species), n_s))
    for i, sp in enumerate(scn.fixed_species):
        for name, coef in sp.coeffs:
            if name in cindex:
                A[i, cindex[name]] += coef
            else:
                B[i, sindex[name]] += coef
    return ChemicalSystem.from_log10(
        scn.components, scn.fixed_components,
        tuple(sp.name for sp in scn.mobile_species),
        tuple(sp.name for sp in scn.fixed_species),
        S=S, A=A, B=B,
        log10_kx=[sp.log10_k for sp in scn.mobile_species],
        log10_ky=[sp.log10_k for sp in scn.fixed_species])


def _settings_from(scn: Scenario, workers: int | None) -> SolverSettings:
    kw: dict = {}
    chem_kw: dict = {}
    casts = {"newton_tol": float, "gamma": float, "eta_min": float,
             "eta_max": float, "gmres_abs_tol": float, "sia_tol": float,
             "newton_max": int, "gmres_restart": int, "gmres_max_iter": int,
             "sia_max": int, "workers": int,
             "sia_transport": str, "scaling": str}
    for key, value in scn.solver:
        try:
            if key == "chem_tol":
                chem_kw["tol"] = float(value)
            elif key == "chem_max":
                chem_kw["max_iter"] = int(value)
            else:
                kw[key] = casts[key](value)
        except ValueError:
            raise ScenarioError(f"solver.{key}: bad value {value!r}") from None
    kw["cfl_factor"] = scn.cfl_factor
    if chem_kw:
        kw["chem"] = NewtonOptions(**chem_kw)
    if workers is not None:
        kw["workers"] = workers
    try:
        return SolverSettings(**kw)
    except ValueError as exc:
        raise ScenarioError(f"solver: {exc}") from None


def _composition_vector(components: tuple[str, ...],
                        comp: tuple[tuple[str, float], ...]) -> np.ndarray:
    vec = np.zeros(len(components))
    for name, val in comp:
        vec[components.index(name)] = val
    return vec


def build_problem(scn: Scenario, *, method: str | None = None,
                  dt: float | None = None, cells: int | None = None,
                  cfl: float | None = None, workers: int | None = None
                  ) -> tuple[CoupledProblem, CoupledState, str]:
    """Materialize (problem, initial state, method) from a scenario.

    Keyword overrides replace the file's mesh, step size, CFL factor and
    method without touching the scenario object.
    """
    if cells is not None and cells < 2:
        raise ScenarioError("cells override: need at least 2")
    if dt is not None and dt <= 0:
        raise ScenarioError("dt override: must be positive")
    if cfl is not None and not 0 < cfl <= 1:
        raise ScenarioError("cfl override: must lie in (0, 1]")
    if method is not None and method not in _METHOD_CHOICES:
        raise ScenarioError(f"method override: unknown method {method!r}")
    if cfl is not None:
        scn = replace(scn, cfl_factor=cfl)

    system = _chem_system(scn)
    n_cells = cells if cells is not None else scn.cells
    grid = Grid1D.uniform(n_cells, scn.length)

    # Zone lookup by cell center.
    zone_of = np.empty(n_cells, dtype=int)
    for i, xc in enumerate(grid.x):
        for k, z in enumerate(scn.zones):
            if z.x_start <= xc <= z.x_end:
                zone_of[i] = k
                break
        else:  # pragma: no cover - tiling is validated at parse time
            raise ScenarioError(f"cell center {xc} not covered by any zone")
    phi = np.array([scn.zones[k].phi for k in zone_of])
    D = np.array([scn.zones[k].D for k in zone_of])
    W = np.array([scn.zones[k].W for k in zone_of], dtype=float
                 ).reshape(n_cells, system.n_s)

    inflow_times = np.array([t for t, _ in scn.inflow])
    inflow_vals = np.vstack([_composition_vector(scn.components, comp)
                             for _, comp in scn.inflow])

    def inflow(t: float) -> np.ndarray:
        k = int(np.searchsorted(inflow_times, t, side="right")) - 1
        return inflow_vals[max(k, 0)]

    ts = assemble(grid, phi, D, scn.velocity,
                  bc_left=lambda t: float(inflow(t)[0]))
    settings = _settings_from(scn, workers)
    problem = CoupledProblem(system, ts, W, inflow,
                             dt if dt is not None else scn.dt,
                             scn.t_end, settings)

    comp0 = np.zeros((n_cells, system.n_c))
    default = next((comp for z, comp in scn.initial if z is None), None)
    per_zone = {z: comp for z, comp in scn.initial if z is not None}
    for i in range(n_cells):
        comp = per_zone.get(int(zone_of[i]) + 1, default)
        comp0[i] = _composition_vector(scn.components, comp)
    if scn.initial_kind == "aqueous":
        state0 = make_state_from_mobile(problem, comp0)
    else:
        state0 = make_state_from_totals(problem, comp0)
    return problem, state0, (method or scn.method)


# ======================================================================
# Output shaping
# ======================================================================

def speciate_outputs(system: ChemicalSystem, C: np.ndarray, T: np.ndarray,
                     F: np.ndarray, lc: np.ndarray, ls: np.ndarray,
                     quantities: str = "mobile") -> tuple[list[str], np.ndarray]:
    """Labeled output columns for rows of simulation fields.

    ``mobile`` gives the solution totals per component (plain component
    names); ``total``/``fixed`` give T and F with _T/_F suffixes;
    ``species`` gives free components and every secondary species by
    name; ``all`` concatenates mobile, total and fixed.
    """
    if quantities not in _QUANTITY_CHOICES:
        raise ValueError(f"unknown quantity set {quantities!r}")
    names = list(system.components)
    if quantities == "mobile":
        return names, np.atleast_2d(C)
    if quantities == "total":
        return [f"{n}_T" for n in names], np.atleast_2d(T)
    if quantities == "fixed":
        return [f"{n}_F" for n in names], np.atleast_2d(F)
    if quantities == "all":
        labels = names + [f"{n}_T" for n in names] + [f"{n}_F" for n in names]
        return labels, np.hstack([np.atleast_2d(C), np.atleast_2d(T),
                                  np.atleast_2d(F)])
    lc = np.atleast_2d(lc)
    ls = np.atleast_2d(ls)
    X, Y = _chem._secondary_batch(system, lc, ls)
    labels = (names + list(system.fixed_components)
              + list(system.mobile_species) + list(system.fixed_species))
    vals = np.hstack([np.exp(lc), np.exp(ls), X, Y])
    return labels, vals


def record_to_series(system: ChemicalSystem, rec: SimulationRecord,
                     grid_x: np.ndarray, quantities: str = "mobile") -> TimeSeries:
    """Label a raw simulation record per the requested quantity set."""
    labels, outlet = speciate_outputs(system, rec.outlet_C, rec.outlet_T,
                                      rec.outlet_F, rec.outlet_lc, rec.outlet_ls,
                                      quantities)
    profiles = []
    for snap in rec.profiles:
        plabels, vals = speciate_outputs(system, snap.C, snap.T, snap.F,
                                         snap.lc, snap.ls, quantities)
        profiles.append(ProfileBlock(snap.t, grid_x.copy(), vals, plabels))
    return TimeSeries(rec.times.copy(), outlet, labels, profiles, list(rec.stats))


def run_scenario(scn: Scenario, *, method: str | None = None,
                 dt: float | None = None, cells: int | None = None,
                 cfl: float | None = None, workers: int | None = None,
                 observers=()) -> tuple[TimeSeries, SimulationRecord, CoupledProblem]:
    """Build and run a scenario; return labeled series and raw record."""
    problem, state0, use_method = build_problem(
        scn, method=method, dt=dt, cells=cells, cfl=cfl, workers=workers)
    rec = run(problem, state0, method=use_method, observers=observers,
              profile_times=scn.profile_times)
    series = record_to_series(problem.chem, rec, problem.transport.grid.x,
                              scn.quantities)
    return series, rec, problem


# ======================================================================
# CSV output
# ======================================================================

def _fmt17(x: float) -> str:
    return format(float(x), ".17g")


def write_csv(path: str | Path, series: TimeSeries) -> Path:
    """Outlet history as CSV: t plus one column per quantity."""
    path = Path(path)
    lines = ["t," + ",".join(series.labels)]
    for t, row in zip(series.times, series.outlet):
        lines.append(",".join([_fmt17(t)] + [_fmt17(v) for v in row]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_profiles(path: str | Path, series: TimeSeries) -> Path:
    """All recorded profiles stacked: time, x, then quantity columns."""
    path = Path(path)
    labels = series.profiles[0].labels if series.profiles else series.labels
    lines = ["time,x," + ",".join(labels)]
    for block in series.profiles:
        for xi, row in zip(block.x, block.values):
            lines.append(",".join([_fmt17(block.time), _fmt17(xi)]
                                  + [_fmt17(v) for v in row]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_stats(path: str | Path, series: TimeSeries) -> Path:
    """Per-iteration solver counters, one row per outer iteration.

    ``k`` counts outer iterations within the step; the residual in row
    k is measured before iteration k, so the last row of a converged
    step shows the final residual with empty iteration columns.
    """
    path = Path(path)
    header = ("step,t,dt,method,k,residual,gmres,cum_gmres,eta,lambda,"
              "halvings,wall_s")
    lines = [header]
    for idx, st in enumerate(series.stats):
        cum = 0
        rows = max(len(st.residual_history), 1)
        for k in range(rows):
            res = st.residual_history[k] if k < len(st.residual_history) else ""
            if k < len(st.gmres_per_outer):
                cum += st.gmres_per_outer[k]
                gm = str(st.gmres_per_outer[k])
                cumtxt = str(cum)
            else:
                gm = cumtxt = ""
            eta = _fmt17(st.forcing[k]) if k < len(st.forcing) else ""
            lam = _fmt17(st.lambdas[k]) if k < len(st.lambdas) else ""
            lines.append(",".join([
                str(idx), _fmt17(st.t), _fmt17(st.dt), st.method, str(k),
                _fmt17(res) if res != "" else "", gm, cumtxt, eta, lam,
                str(st.halvings), _fmt17(st.wall_s)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
