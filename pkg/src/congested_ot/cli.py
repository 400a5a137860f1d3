"""Command line tools for congested transport on grid graphs.

Exit status: 0 success (converged / verified), 1 solver or check failure,
2 invalid input, 3 cyclic flux.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .beckmann import DEFAULT_MAX_ITERS, DEFAULT_TOL, Problem, primal_energy, solve, sobolev_dual_norm
from .cost import CostModel
from .dipoles import Dipole, dipole_source, scaling_experiment
from .grid import Grid, SourceMeasure
from .lagrangian import CyclicFluxError, DecompositionError, cancel_cycles, decompose, traffic_intensity, wardrop_energy

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_CYCLE = 0, 1, 2, 3


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _load_problem(path):
    try:
        return io.load_problem(path)
    except io.SchemaError as exc:
        _err(f"{path}: {exc}")
    except (OSError, ValueError) as exc:
        _err(f"{path}: {exc}")
    return None


def cmd_solve(args) -> int:
    problem = _load_problem(args.problem)
    if problem is None:
        return EXIT_INPUT
    f, v, report = solve(problem, args.tol, args.max_iters, method=args.method)
    io.save_solution(args.out, f, v, report)
    print(f"primal {report.primal_energy:.12g}  dual {report.dual_energy:.12g}  "
          f"gap {report.gap:.3e}  residual {report.divergence_residual:.3e}  "
          f"iterations {report.iterations}")
    if not report.converged:
        _err("solver did not converge (converged=false written to output)")
        return EXIT_FAIL
    return EXIT_OK


def cmd_decompose(args) -> int:
    problem = _load_problem(args.problem)
    if problem is None:
        return EXIT_INPUT
    grid = problem.grid
    try:
        sol = io.load_solution(args.solution, grid)
    except (OSError, ValueError) as exc:
        _err(f"{args.solution}: {exc}")
        return EXIT_INPUT
    f = sol.flux
    if args.cancel_cycles:
        f = cancel_cycles(grid, f, args.eps or 0.0)
    try:
        paths = decompose(grid, f, problem.source, args.eps)
    except CyclicFluxError as exc:
        _err(f"{exc} (or pass --cancel-cycles)")
        return EXIT_CYCLE
    except DecompositionError as exc:
        _err(str(exc))
        return EXIT_FAIL
    io.save_paths(args.out, paths, problem.cost)

    iv = traffic_intensity(paths).vector
    scale = max(float(np.abs(f).max(initial=0.0)), 1e-300)
    rec = float(np.abs(iv - f).max(initial=0.0)) / scale
    push = float(np.abs(paths.boundary() - problem.t).max(initial=0.0))
    W = wardrop_energy(paths, problem.cost)
    P = primal_energy(problem, f)
    print(f"paths {len(paths)}  mass {paths.mass:.12g}")
    print(f"reconstruction_residual {rec:.3e}")
    print(f"pushforward_residual {push:.3e}")
    print(f"energy_difference {abs(W - P):.3e}")
    return EXIT_OK


def cmd_norm(args) -> int:
    problem = _load_problem(args.problem)
    if problem is None:
        return EXIT_INPUT
    p = problem.cost.p if args.p is None else args.p
    if not p > 1:
        _err(f"--p must exceed 1, got {p}")
        return EXIT_INPUT
    methods = ["min_flux", "dual_formula"] if args.method == "both" else [args.method]
    vals = {}
    try:
        for m in methods:
            vals[m] = sobolev_dual_norm(problem.source, p, m, args.tol, args.max_iters)
    except RuntimeError as exc:
        _err(str(exc))
        return EXIT_FAIL
    for m, x in vals.items():
        print(f"{m} {x!r}")
    if len(vals) == 2:
        a, b = vals["min_flux"], vals["dual_formula"]
        rel = abs(a - b) / max(abs(a), abs(b)) if max(abs(a), abs(b)) > 0 else 0.0
        print(f"relative_disagreement {rel:.3e}")
    return EXIT_OK


def cmd_dipole(args) -> int:
    hs = [1.0 / n for n in args.refinements]
    try:
        res = scaling_experiment(args.N, args.p, args.separations, hs, tolerance=args.tol)
    except ValueError as exc:
        _err(str(exc))
        return EXIT_INPUT
    except RuntimeError as exc:
        _err(str(exc))
        return EXIT_FAIL

    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        # one "# key=value" line per field; values may contain spaces
        meta = {"N": res.N, "p": res.p, "target_exponent": res.target, "slope": res.slope,
                "offset_exponent": res.offset_exponent, "flag": res.flag or ""}
        for k, v in meta.items():
            fh.write(f"# {k}={v if isinstance(v, str) else repr(v)}\n")
        w = csv.writer(fh)
        w.writerow(["separation", "spacing", "cells", "norm", "norm_p"])
        for s, h, n, e in res.rows:
            w.writerow([repr(s), repr(h), round(1 / h), repr(n), repr(e)])
    if not args.no_figure:
        from .plotting import plot_scaling

        plot_scaling(res, args.figure or out.with_suffix(".png"))

    if res.slope is None:
        print(f"no slope: {res.flag}")
    else:
        print(f"slope {res.slope:.6f}  target {res.target:g}"
              + (f"  offset_exponent {res.offset_exponent:.6f}" if res.offset_exponent else "")
              + (f"  ({res.flag})" if res.flag else ""))
    return EXIT_OK


def cmd_make_problem(args) -> int:
    try:
        grid = Grid(tuple(args.dims), args.spacing or 1.0 / args.dims[0])
        if args.kind == "power":
            cost = CostModel.power(args.p, args.alpha)
        else:
            cost = CostModel.power_delta(args.p, args.delta, args.alpha)
        if args.dipole:
            k = grid.ndim
            a, b = args.dipole[:k], args.dipole[k:]
            if len(a) != k or len(b) != k:
                raise ValueError(f"--dipole needs {2 * k} coordinates")
            source = dipole_source(grid, Dipole(a, b))
        else:
            rng = np.random.default_rng(args.seed)
            t = rng.normal(size=grid.num_nodes)
            source = SourceMeasure(grid, t - t.mean())
    except ValueError as exc:
        _err(str(exc))
        return EXIT_INPUT
    io.save_problem(args.out, Problem(grid, source, cost))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="congested-ot", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve a problem file")
    s.add_argument("problem")
    s.add_argument("out")
    s.add_argument("--tol", type=float, default=DEFAULT_TOL)
    s.add_argument("--max-iters", type=int, default=DEFAULT_MAX_ITERS)
    s.add_argument("--method", choices=["newton", "lbfgs", "agd"], default="newton")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("decompose", help="split a solved flux into paths")
    s.add_argument("solution")
    s.add_argument("problem")
    s.add_argument("out")
    s.add_argument("--eps", type=float, default=None,
                   help="drop edges with |f| <= eps (default 1e-14 max|f|)")
    s.add_argument("--cancel-cycles", action="store_true")
    s.set_defaults(func=cmd_decompose)

    s = sub.add_parser("norm", help="dual Sobolev norm of a problem's source")
    s.add_argument("problem")
    s.add_argument("--p", type=float, default=None, help="exponent (default: the cost's p)")
    s.add_argument("--method", choices=["both", "min_flux", "dual_formula"], default="both")
    s.add_argument("--tol", type=float, default=DEFAULT_TOL)
    s.add_argument("--max-iters", type=int, default=DEFAULT_MAX_ITERS)
    s.set_defaults(func=cmd_norm)

    s = sub.add_parser("dipole", help="dipole scaling experiment (CSV + PNG)")
    s.add_argument("out", help="CSV table path")
    s.add_argument("--N", type=int, default=2)
    s.add_argument("--p", type=float, default=1.2)
    s.add_argument("--separations", type=float, nargs="+", default=[0.25, 0.125, 0.0625])
    s.add_argument("--refinements", type=int, nargs="+", default=[8, 16, 32, 64, 128],
                   help="cells per axis of the unit box")
    s.add_argument("--tol", type=float, default=DEFAULT_TOL)
    s.add_argument("--figure", default=None, help="PNG path (default: OUT with .png)")
    s.add_argument("--no-figure", action="store_true")
    s.set_defaults(func=cmd_dipole)

    s = sub.add_parser("make-problem", help="write a random or dipole problem file")
    s.add_argument("out")
    s.add_argument("--dims", type=int, nargs="+", default=[32, 32])
    s.add_argument("--spacing", type=float, default=None, help="default 1/dims[0]")
    s.add_argument("--kind", choices=["power", "power_delta"], default="power")
    s.add_argument("--p", type=float, default=2.0)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--delta", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dipole", type=float, nargs="+", default=None,
                   help="coordinates of a then b instead of a random source")
    s.set_defaults(func=cmd_make_problem)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
