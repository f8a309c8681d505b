"""Command line front end.

Two subcommands:

* ``reax run``: simulate one scenario and write ``outlet.csv``,
  ``profiles.csv``, ``stats.csv`` and ``summary.json`` into the output
  directory.
* ``reax compare``: run the same scenario across meshes and coupling
  methods, collecting solver effort into ``compare.csv``.

Exit codes: 0 success, 2 usage error, 3 scenario error, 4 solver
failure, 5 output I/O error.  Thread use for the per-cell chemistry is
opt-in through the REAX_THREADS environment variable; ``--deterministic``
forces a single worker regardless.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .chem import EquilibriumError
from .coupler import RunFailure, StepFailure, workers_from_env
from .scenario import (
    Scenario,
    ScenarioError,
    available_builtins,
    builtin_scenario,
    load_scenario_file,
    run_scenario,
    write_csv,
    write_profiles,
    write_stats,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SCENARIO = 3
EXIT_SOLVER = 4
EXIT_IO = 5


def _add_scenario_args(cmd: argparse.ArgumentParser) -> None:
    which = cmd.add_mutually_exclusive_group(required=True)
    which.add_argument("--scenario", metavar="PATH",
                       help="scenario file to simulate")
    which.add_argument("--builtin", metavar="NAME",
                       help="packaged scenario: " + ", ".join(available_builtins()))
    cmd.add_argument("--dt", type=float, default=None,
                     help="override the scenario time step [s]")
    cmd.add_argument("--cfl", type=float, default=None,
                     help="override the CFL safety factor for split advection")
    cmd.add_argument("--out", metavar="DIR", default=".",
                     help="output directory (created if missing)")
    cmd.add_argument("--deterministic", action="store_true",
                     help="single-threaded chemistry regardless of REAX_THREADS")
    cmd.add_argument("--verbose", action="store_true",
                     help="print per-step solver progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reax",
        description="1D reactive transport with equilibrium chemistry.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_cmd = sub.add_parser("run", help="simulate one scenario")
    _add_scenario_args(run_cmd)
    run_cmd.add_argument("--method", choices=("global", "sia", "snia"),
                         default=None, help="override the coupling method")
    run_cmd.add_argument("--cells", type=int, default=None,
                         help="override the mesh size")

    cmp_cmd = sub.add_parser(
        "compare", help="run several meshes and methods, tabulate solver effort")
    _add_scenario_args(cmp_cmd)
    cmp_cmd.add_argument("--cells", default=None, metavar="N1,N2,...",
                         help="comma separated mesh sizes (default: scenario mesh)")
    cmp_cmd.add_argument("--methods", default="global,sia,snia",
                         metavar="M1,M2,...", help="methods to compare")
    return parser


def _load(args: argparse.Namespace) -> Scenario:
    if args.builtin:
        return builtin_scenario(args.builtin)
    return load_scenario_file(args.scenario)


def _workers(args: argparse.Namespace) -> int:
    return 1 if args.deterministic else workers_from_env()


def _progress(index: int, t: float, _before, _after, st) -> None:
    print(f"  step {index + 1}: t={t:.6g} s, {st.method}, "
          f"outer={st.outer_iters}, gmres={st.gmres_total}, "
          f"residual={st.residual_history[-1]:.3e}, wall={st.wall_s:.3f} s")


def cmd_run(args: argparse.Namespace) -> int:
    scenario = _load(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    observers = (_progress,) if args.verbose else ()
    series, rec, problem = run_scenario(
        scenario, method=args.method, dt=args.dt, cells=args.cells,
        cfl=args.cfl, workers=_workers(args), observers=observers)

    write_csv(out_dir / "outlet.csv", series)
    write_profiles(out_dir / "profiles.csv", series)
    write_stats(out_dir / "stats.csv", series)
    summary = {
        "scenario": args.builtin or str(args.scenario),
        "method": rec.method,
        "cells": int(problem.transport.n),
        "components": list(problem.chem.components),
        "dt": float(problem.dt),
        "t_end": float(problem.t_end),
        "steps": len(rec.stats),
        "outer_total": int(sum(st.outer_iters for st in rec.stats)),
        "gmres_total": int(sum(st.gmres_total for st in rec.stats)),
        "halvings": int(sum(1 for st in rec.stats if st.halvings)),
        "wall_s": float(rec.wall_s),
        "outputs": ["outlet.csv", "profiles.csv", "stats.csv"],
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out_dir / 'outlet.csv'} ({len(series.times)} rows), "
          f"profiles for {len(series.profiles)} time(s), "
          f"{summary['steps']} steps in {summary['wall_s']:.2f} s")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    scenario = _load(args)
    if args.cells:
        try:
            meshes = [int(tok) for tok in args.cells.split(",") if tok.strip()]
        except ValueError:
            raise ScenarioError(f"--cells: not integers: {args.cells!r}") from None
    else:
        meshes = [scenario.cells]
    methods = [tok.strip() for tok in args.methods.split(",") if tok.strip()]
    for m in methods:
        if m not in ("global", "sia", "snia"):
            raise ScenarioError(f"--methods: unknown method {m!r}")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = _workers(args)
    rows = ["cells,method,status,steps,outer_total,outer_mean,outer_max,"
            "gmres_total,wall_s"]
    any_ok = False
    for cells in meshes:
        for method in methods:
            t0 = time.perf_counter()
            try:
                _, rec, _ = run_scenario(scenario, method=method, dt=args.dt,
                                         cells=cells, cfl=args.cfl,
                                         workers=workers)
            except (RunFailure, StepFailure, EquilibriumError) as exc:
                wall = time.perf_counter() - t0
                if args.verbose:
                    print(f"  {cells} cells, {method}: failed: {exc}")
                rows.append(f"{cells},{method},failed,,,,,,{wall:.6g}")
                continue
            any_ok = True
            outers = [st.outer_iters for st in rec.stats]
            mean = sum(outers) / len(outers) if outers else 0.0
            rows.append(",".join([
                str(cells), method, "ok", str(len(rec.stats)),
                str(int(sum(outers))), f"{mean:.6g}",
                str(max(outers) if outers else 0),
                str(int(sum(st.gmres_total for st in rec.stats))),
                f"{rec.wall_s:.6g}"]))
            if args.verbose:
                print(f"  {cells} cells, {method}: {len(rec.stats)} steps, "
                      f"{rec.wall_s:.2f} s")
    path = out_dir / "compare.csv"
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"wrote {path} ({len(rows) - 1} rows)")
    return EXIT_OK if any_ok else EXIT_SOLVER


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_compare(args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except (RunFailure, StepFailure, EquilibriumError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
