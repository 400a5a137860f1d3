"""Path measures on the grid: acyclicity, cycle cancellation, flow
decomposition, traffic intensities and the route-based (Wardrop) side.

A path is a node sequence in which consecutive nodes share an edge.  Fluxes are
read as directed graphs: edge ``e`` carries ``|f_e|`` units from tail to head if
``f_e > 0`` and from head to tail if ``f_e < 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sps
from scipy.sparse.csgraph import dijkstra

from .cost import CostModel
from .grid import Grid, SourceMeasure


class CyclicFluxError(ValueError):
    """The flux contains a directed cycle; ``cycle`` is a witness node sequence."""

    def __init__(self, cycle: Sequence[int]):
        self.cycle = list(cycle)
        super().__init__(
            f"flux has a directed cycle through nodes {self.cycle}; "
            "run cancel_cycles first"
        )


class DecompositionError(ValueError):
    """Raised when a flux cannot be split into paths matching the source."""


@dataclass
class PathMeasure:
    """Finitely many weighted simple paths.

    Args:
        grid: the grid the node indices refer to.
        paths: node sequences.
        weights: positive weight of each path.
    """

    grid: Grid
    paths: list = field(default_factory=list)
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.paths = [np.asarray(p, dtype=np.int64) for p in self.paths]
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if len(self.paths) != self.weights.size:
            raise ValueError(f"{len(self.paths)} paths but {self.weights.size} weights")
        if np.any(~(self.weights > 0)) or np.any(~np.isfinite(self.weights)):
            raise ValueError("path weights must be positive and finite")
        for k, p in enumerate(self.paths):
            if p.ndim != 1 or p.size < 2:
                raise ValueError(f"path {k} needs at least two nodes")
            if np.unique(p).size != p.size:
                raise ValueError(f"path {k} repeats a node")
        self._index_edges()

    def _index_edges(self):
        n = self.grid.num_nodes
        if not self.paths:
            self._edges, self._signs, self._ptr = (np.zeros(0, np.int64), np.zeros(0),
                                                   np.zeros(1, np.int64))
            return
        tails = np.concatenate([p[:-1] for p in self.paths])
        heads = np.concatenate([p[1:] for p in self.paths])
        if np.any(tails < 0) or np.any(tails >= n) or np.any(heads < 0) or np.any(heads >= n):
            raise ValueError("path node index out of range")
        edges = self.grid.edges_between(tails, heads)
        bad = np.flatnonzero(edges < 0)
        self._ptr = np.concatenate([[0], np.cumsum([p.size - 1 for p in self.paths])])
        if bad.size:
            k = int(np.searchsorted(self._ptr, bad[0], side="right") - 1)
            raise ValueError(
                f"path {k}: nodes {tails[bad[0]]} and {heads[bad[0]]} are not adjacent"
            )
        self._edges = edges
        self._signs = np.where(heads > tails, 1.0, -1.0)

    def __len__(self):
        return len(self.paths)

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def edges_of(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Edge indices along path ``k`` and the traversal sign of each (+1 = tail to head)."""
        sl = slice(self._ptr[k], self._ptr[k + 1])
        return self._edges[sl], self._signs[sl]

    def pushforward(self) -> tuple[np.ndarray, np.ndarray]:
        """Start and end masses per node (the images of the path measure)."""
        n = self.grid.num_nodes
        start, end = np.zeros(n), np.zeros(n)
        for p, w in zip(self.paths, self.weights):
            start[p[0]] += w
            end[p[-1]] += w
        return start, end

    def boundary(self) -> np.ndarray:
        """End mass minus start mass; equals the source for a decomposition."""
        start, end = self.pushforward()
        return end - start


@dataclass
class IntensityPair:
    """Scalar traffic ``i`` and vector traffic ``iv`` per edge, ``|iv| <= i``."""

    scalar: np.ndarray
    vector: np.ndarray


# --- cycles -------------------------------------------------------------------


def _directed_adjacency(grid: Grid, flux: np.ndarray, eps: float):
    """CSR-like out-lists of above-threshold edges, each sorted by edge index."""
    active = np.flatnonzero(np.abs(flux) > eps)
    fwd = flux[active] > 0
    src = np.where(fwd, grid.tails[active], grid.heads[active])
    dst = np.where(fwd, grid.heads[active], grid.tails[active])
    order = np.lexsort((active, src))
    ptr = np.zeros(grid.num_nodes + 1, dtype=np.int64)
    np.add.at(ptr, src + 1, 1)
    return np.cumsum(ptr), active[order], dst[order]


def _find_cycle(grid: Grid, flux: np.ndarray, eps: float) -> Optional[list]:
    """Iterative DFS in node order; returns the first directed cycle met."""
    ptr, edges, dst = _directed_adjacency(grid, flux, eps)
    ptr, dst = ptr.tolist(), dst.tolist()
    color = [0] * grid.num_nodes  # 0 new, 1 on stack, 2 done
    nxt = ptr[:-1]
    for root in range(grid.num_nodes):
        if color[root] or ptr[root] == ptr[root + 1]:
            continue
        stack = [root]
        color[root] = 1
        while stack:
            u = stack[-1]
            if nxt[u] < ptr[u + 1]:
                w = dst[nxt[u]]
                nxt[u] += 1
                if color[w] == 0:
                    color[w] = 1
                    stack.append(w)
                elif color[w] == 1:
                    return stack[stack.index(w):]
            else:
                color[u] = 2
                stack.pop()
    return None


def is_acyclic(grid: Grid, flux, eps: float = 0.0) -> tuple[bool, Optional[list]]:
    """Test whether edges with ``|f_e| > eps`` form a directed acyclic graph.

    Returns:
        ``(True, None)`` or ``(False, cycle)`` with ``cycle`` a node sequence
        whose consecutive nodes (and last to first) follow the flux.
    """
    f = grid.check_edges(flux, "flux")
    cycle = _find_cycle(grid, f, eps)
    return cycle is None, cycle


def _cycle_edges(grid: Grid, cycle: list) -> tuple[np.ndarray, np.ndarray]:
    nodes = cycle + cycle[:1]
    edges = np.array([grid.find_edge(a, b) for a, b in zip(nodes[:-1], nodes[1:])])
    signs = np.array([1.0 if b > a else -1.0 for a, b in zip(nodes[:-1], nodes[1:])])
    return edges, signs


def cancel_cycles(grid: Grid, flux, eps: float = 0.0) -> np.ndarray:
    """Remove directed cycles by subtracting the smallest flux along each.

    Every cancellation sets at least one edge of the cycle to exactly zero, so
    the loop ends.  Divergence is unchanged and no ``|f_e|`` grows.
    """
    f = np.array(grid.check_edges(flux, "flux"), dtype=float)
    while True:
        cycle = _find_cycle(grid, f, eps)
        if cycle is None:
            return f
        edges, signs = _cycle_edges(grid, cycle)
        along = f[edges] * signs  # all > eps
        k = int(np.argmin(along))
        f[edges] -= along[k] * signs
        f[edges[k]] = 0.0


# --- decomposition --------------------------------------------------------------


def decompose(
    grid: Grid,
    flux,
    source: SourceMeasure,
    eps: Optional[float] = None,
    atol: float = 1e-9,
) -> PathMeasure:
    """Split an acyclic flux into weighted simple paths from ``T-`` to ``T+``.

    Edges with ``|f_e| <= eps`` (default ``1e-14 * max|f|``) are dropped first.
    Paths are traced from the lowest-index node with unsent mass, always
    leaving through the lowest-index edge with residual flux, and stop at the
    first node that still has mass to receive.

    Raises:
        CyclicFluxError: the thresholded flux has a directed cycle.
        DecompositionError: its divergence differs from the source by more
            than ``atol * (1 + max|t|)``, or more than that much mass is
            stranded.
    """
    f = np.array(grid.check_edges(flux, "flux"), dtype=float)
    if source.grid != grid:
        raise DecompositionError("source belongs to a different grid")
    fmax = float(np.abs(f).max()) if f.size else 0.0
    if eps is None:
        eps = 1e-14 * fmax
    f[np.abs(f) <= eps] = 0.0

    div = grid.divergence(f)
    t = source.values
    mismatch = np.abs(div - t)
    if mismatch.max(initial=0.0) > atol * (1.0 + np.abs(t).max(initial=0.0)):
        i = int(np.argmax(mismatch))
        raise DecompositionError(
            f"divergence of flux differs from source by {mismatch[i]:.3e} at node {i}"
        )
    cycle = _find_cycle(grid, f, 0.0)
    if cycle is not None:
        raise CyclicFluxError(cycle)

    # the flux itself defines the excesses; the source check above bounds the gap
    ptr, edges, dst = _directed_adjacency(grid, f, 0.0)
    ptr, edges, dst = ptr.tolist(), edges.tolist(), dst.tolist()
    resid = np.abs(f).tolist()
    send = np.maximum(-div, 0.0).tolist()
    recv = np.maximum(div, 0.0).tolist()
    zero = max(eps, 8 * np.finfo(float).eps * max(fmax, np.abs(t).max(initial=0.0)))
    # subtracting thousands of path weights leaves roundoff above ``zero``;
    # leftovers below this are dropped, anything larger is an error
    slack = max(zero, atol * (1.0 + np.abs(t).max(initial=0.0)))
    nxt = ptr[:-1]

    paths, weights = [], []
    for s in range(grid.num_nodes):
        while send[s] > zero:
            nodes, used = [s], []
            u = s
            while u == s or recv[u] <= zero:
                while nxt[u] < ptr[u + 1] and resid[edges[nxt[u]]] <= zero:
                    nxt[u] += 1
                if nxt[u] < ptr[u + 1]:
                    used.append(edges[nxt[u]])
                    u = dst[nxt[u]]
                    nodes.append(u)
                    continue
                left = send[s] if u == s else resid[used[-1]]
                if left > slack:
                    raise DecompositionError(
                        f"stranded mass {left:.3e}: path from node {s} stuck at node {u}"
                    )
                if u == s:
                    send[s] = 0.0
                else:
                    resid[used[-1]] = 0.0
                break
            else:
                w = min(send[s], recv[u], min(resid[e] for e in used))
                send[s] -= w
                recv[u] -= w
                for e in used:
                    resid[e] -= w
                paths.append(nodes)
                weights.append(w)

    left = max(max(recv, default=0.0), max(resid, default=0.0))
    if left > slack:
        raise DecompositionError(f"stranded residual mass {left:.3e} after decomposition")
    return PathMeasure(grid, paths, weights)


# --- intensities and energies -------------------------------------------------------


def traffic_intensity(paths: PathMeasure) -> IntensityPair:
    """``i_e`` sums path weights through ``e``; ``iv_e`` signs them by direction."""
    m = paths.grid.num_edges
    w = np.repeat(paths.weights, np.diff(paths._ptr))
    i = np.bincount(paths._edges, weights=w, minlength=m)
    iv = np.bincount(paths._edges, weights=w * paths._signs, minlength=m)
    return IntensityPair(i, iv)


def wardrop_energy(paths: PathMeasure, cost: CostModel, grid: Optional[Grid] = None) -> float:
    """Congestion cost of the traffic ``sum_e h^N H(i_e / h^(N-1))``."""
    grid = paths.grid if grid is None else grid
    if grid != paths.grid:
        raise ValueError("paths belong to a different grid")
    cost.check_grid(grid.num_edges)
    i = traffic_intensity(paths).scalar
    return float(grid.cell_volume * cost.H(i / grid.face_area).sum())


@dataclass
class EquilibriumReport:
    """Outcome of :func:`equilibrium_check`.

    ``length_mismatch[k]`` is ``length_k - gain_k`` for path ``k``;
    ``shortcut[k]`` is how much cheaper the best route between the same
    endpoints is.  ``violations`` lists ``(path index, reason, amount)``.
    """

    length_mismatch: np.ndarray
    shortcut: np.ndarray
    violations: list

    @property
    def passed(self) -> bool:
        return not self.violations

    @property
    def max_mismatch(self) -> float:
        return float(np.abs(self.length_mismatch).max(initial=0.0))

    @property
    def max_shortcut(self) -> float:
        return float(self.shortcut.max(initial=0.0))


def marginal_edge_costs(paths: PathMeasure, cost: CostModel) -> np.ndarray:
    """``h * H'(i_e / h^(N-1))`` per edge: the toll charged for one more unit."""
    g = paths.grid
    return g.h * cost.dH(traffic_intensity(paths).scalar / g.face_area)


def equilibrium_check(
    paths: PathMeasure, potential, cost: CostModel, tol: float = 1e-6
) -> EquilibriumReport:
    """Check that every used path is a shortest route for the marginal tolls.

    Each path must gain ``v(end) - v(start)`` equal to its toll length within
    ``tol * max(1, length)``, and no route between the same endpoints may be
    cheaper by more than that margin.
    """
    g = paths.grid
    v = g.check_nodes(potential, "potential")
    c = marginal_edge_costs(paths, cost)
    # csgraph drops explicit zeros, so keep free edges as tiny positive weights
    w = np.maximum(c, np.finfo(float).tiny)
    adj = sps.coo_matrix((w, (g.tails, g.heads)), shape=(g.num_nodes,) * 2).tocsr()

    n = len(paths)
    mismatch, shortcut, violations = np.zeros(n), np.zeros(n), []
    if n == 0:
        return EquilibriumReport(mismatch, shortcut, violations)
    starts = np.array([p[0] for p in paths.paths])
    ends = np.array([p[-1] for p in paths.paths])
    uniq, row = np.unique(starts, return_inverse=True)
    dist = dijkstra(adj, directed=False, indices=uniq)

    lengths = np.add.reduceat(c[paths._edges], paths._ptr[:-1])
    for k in range(n):
        length = float(lengths[k])
        margin = tol * max(1.0, abs(length))
        mismatch[k] = length - (v[ends[k]] - v[starts[k]])
        shortcut[k] = length - dist[row[k], ends[k]]
        if abs(mismatch[k]) > margin:
            violations.append((k, "length differs from potential gain", float(mismatch[k])))
        if shortcut[k] > margin:
            violations.append((k, "cheaper route exists", float(shortcut[k])))
    return EquilibriumReport(mismatch, shortcut, violations)
