"""JSON files for problems, solutions and path decompositions.

Arrays are flat lists: node arrays row-major with the last axis fastest, edge
arrays in the grid's edge order (all axis-0 faces, then axis-1, ...).  Floats
are written with ``repr``, so reading back gives the same doubles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .beckmann import Problem, SolveReport
from .cost import KINDS, CostModel
from .grid import Grid, SourceMeasure
from .lagrangian import PathMeasure, traffic_intensity, wardrop_energy

SOURCE_RTOL = 1e-9


class SchemaError(ValueError):
    """A file does not match its schema; ``key`` is the offending key path."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


def _get(doc: dict, key: str, path: str):
    if not isinstance(doc, dict):
        raise SchemaError(path or "<root>", "expected an object")
    if key not in doc:
        raise SchemaError(f"{path}.{key}" if path else key, "missing")
    return doc[key]


def _number(x, path: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise SchemaError(path, f"expected a number, got {type(x).__name__}")
    if not np.isfinite(x):
        raise SchemaError(path, "must be finite")
    return float(x)


def _array(x, path: str, size: Optional[int] = None, integer: bool = False) -> np.ndarray:
    if not isinstance(x, list):
        raise SchemaError(path, "expected a list")
    for i, v in enumerate(x):
        if integer:
            if isinstance(v, bool) or not isinstance(v, int):
                raise SchemaError(f"{path}[{i}]", "expected an integer")
        else:
            _number(v, f"{path}[{i}]")
    if size is not None and len(x) != size:
        raise SchemaError(path, f"expected {size} entries, got {len(x)}")
    return np.array(x, dtype=np.int64 if integer else float)


def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def read_json(path) -> Any:
    with open(path) as fh:
        return json.load(fh)


def _dumps(value) -> str:
    return json.dumps(value, allow_nan=False)


def write_json(path, doc: dict) -> None:
    """One top-level key per line; lists of objects get one object per line."""
    parts = []
    for key, value in doc.items():
        if isinstance(value, list) and value and isinstance(value[0], dict):
            body = ",\n".join("  " + _dumps(v) for v in value)
            text = "[\n" + body + "\n ]"
        else:
            text = _dumps(value)
        parts.append(f" {_dumps(key)}: {text}")
    Path(path).write_text("{\n" + ",\n".join(parts) + "\n}\n")


# --- problems --------------------------------------------------------------------


def problem_to_dict(problem: Problem) -> dict:
    g, c = problem.grid, problem.cost
    cost = {"kind": c.kind, "p": c.p, "alpha": c.alpha, "delta": c.delta}
    if c.weights is not None:
        cost["weights"] = _floats(c.weights)
    return {
        "grid": {"dims": list(g.dims), "spacing": g.spacing},
        "cost": cost,
        "source": _floats(problem.t),
    }


def problem_from_dict(doc: dict) -> Problem:
    """Validate and build a :class:`Problem`.

    Raises:
        SchemaError: naming the key path of the first problem found.
    """
    gd = _get(doc, "grid", "")
    dims = _array(_get(gd, "dims", "grid"), "grid.dims", integer=True)
    if not 1 <= dims.size <= 3 or np.any(dims < 1):
        raise SchemaError("grid.dims", "need 1 to 3 positive integers")
    spacing = _number(_get(gd, "spacing", "grid"), "grid.spacing")
    if spacing <= 0:
        raise SchemaError("grid.spacing", "must be positive")
    grid = Grid(tuple(int(d) for d in dims), spacing)

    cd = _get(doc, "cost", "")
    kind = _get(cd, "kind", "cost")
    if kind not in KINDS:
        raise SchemaError("cost.kind", f"must be one of {KINDS}")
    p = _number(_get(cd, "p", "cost"), "cost.p")
    if p <= 1:
        raise SchemaError("cost.p", "must exceed 1")
    alpha = _number(cd.get("alpha", 1.0), "cost.alpha")
    if alpha <= 0:
        raise SchemaError("cost.alpha", "must be positive")
    delta = _number(cd.get("delta", 0.0), "cost.delta")
    if delta < 0 or (kind == "power" and delta != 0):
        raise SchemaError("cost.delta", "must be 0 for 'power' and nonnegative for 'power_delta'")
    weights = None
    if cd.get("weights") is not None:
        weights = _array(cd["weights"], "cost.weights", grid.num_edges)
        if np.any(weights <= 0):
            raise SchemaError("cost.weights", "must be positive")
    cost = CostModel(kind, p, alpha, delta, weights)

    t = _array(_get(doc, "source", ""), "source", grid.num_nodes)
    scale = np.abs(t).sum()
    if abs(t.sum()) > SOURCE_RTOL * scale:
        raise SchemaError("source", f"must sum to zero, sums to {t.sum():.6g}")
    return Problem(grid, SourceMeasure(grid, t, rtol=SOURCE_RTOL), cost)


def load_problem(path) -> Problem:
    return problem_from_dict(read_json(path))


def save_problem(path, problem: Problem) -> None:
    write_json(path, problem_to_dict(problem))


# --- solutions ---------------------------------------------------------------------


@dataclass
class Solution:
    flux: np.ndarray
    potential: np.ndarray
    report: SolveReport


REPORT_KEYS = ("primal_energy", "dual_energy", "gap", "divergence_residual",
               "iterations", "converged")


def solution_to_dict(flux, potential, report: SolveReport) -> dict:
    return {
        "flux": _floats(flux),
        "potential": _floats(potential),
        "report": report.as_dict(),
    }


def solution_from_dict(doc: dict, grid: Grid) -> Solution:
    flux = _array(_get(doc, "flux", ""), "flux", grid.num_edges)
    pot = _array(_get(doc, "potential", ""), "potential", grid.num_nodes)
    rd = _get(doc, "report", "")
    vals = {}
    for k in REPORT_KEYS:
        v = _get(rd, k, "report")
        if k == "converged":
            if not isinstance(v, bool):
                raise SchemaError("report.converged", "expected true or false")
        elif k == "iterations":
            if isinstance(v, bool) or not isinstance(v, int):
                raise SchemaError("report.iterations", "expected an integer")
        else:
            v = _number(v, f"report.{k}")
        vals[k] = v
    return Solution(flux, pot, SolveReport(**vals))


def save_solution(path, flux, potential, report: SolveReport) -> None:
    write_json(path, solution_to_dict(flux, potential, report))


def load_solution(path, grid: Grid) -> Solution:
    return solution_from_dict(read_json(path), grid)


# --- paths ------------------------------------------------------------------------


def paths_to_dict(paths: PathMeasure, cost: CostModel) -> dict:
    inten = traffic_intensity(paths)
    return {
        "paths": [{"nodes": [int(i) for i in p], "weight": float(w)}
                  for p, w in zip(paths.paths, paths.weights)],
        "intensity": _floats(inten.scalar),
        "vector_intensity": _floats(inten.vector),
        "wardrop_energy": wardrop_energy(paths, cost),
    }


def paths_from_dict(doc: dict, grid: Grid) -> tuple[PathMeasure, dict]:
    """Rebuild the path measure; the stored intensities and energy come back as a dict."""
    items = _get(doc, "paths", "")
    if not isinstance(items, list):
        raise SchemaError("paths", "expected a list")
    nodes, weights = [], []
    for k, item in enumerate(items):
        nodes.append(_array(_get(item, "nodes", f"paths[{k}]"), f"paths[{k}].nodes", integer=True))
        weights.append(_number(_get(item, "weight", f"paths[{k}]"), f"paths[{k}].weight"))
    extra = {
        "intensity": _array(_get(doc, "intensity", ""), "intensity", grid.num_edges),
        "vector_intensity": _array(_get(doc, "vector_intensity", ""), "vector_intensity",
                                   grid.num_edges),
        "wardrop_energy": _number(_get(doc, "wardrop_energy", ""), "wardrop_energy"),
    }
    try:
        pm = PathMeasure(grid, nodes, weights)
    except ValueError as exc:
        raise SchemaError("paths", str(exc)) from None
    return pm, extra


def save_paths(path, paths: PathMeasure, cost: CostModel) -> None:
    write_json(path, paths_to_dict(paths, cost))


def load_paths(path, grid: Grid) -> tuple[PathMeasure, dict]:
    return paths_from_dict(read_json(path), grid)
