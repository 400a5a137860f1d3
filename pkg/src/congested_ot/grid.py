"""Regular box grids with staggered (face) fluxes.

Nodes are the cells of an axis-aligned box, numbered row-major with the last
axis fastest.  Edges are the interior faces between axis-adjacent cells,
oriented from the lower to the higher node index.  Edges are numbered axis by
axis: all axis-0 edges (row-major over their tail cells), then axis-1, and so
on.  No edge crosses the boundary, so a flux on the edges always has zero
normal component on the box boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sps


class GridMismatchError(ValueError):
    """Raised when an array does not belong to the grid it is used with."""


@dataclass(frozen=True)
class Grid:
    """A box ``[0, dims[0]*h] x ... x [0, dims[N-1]*h]`` split into cubic cells.

    Args:
        dims: number of cells per axis (1 to 3 axes).
        spacing: cell side length ``h``.
    """

    dims: tuple[int, ...]
    spacing: float = 1.0

    def __post_init__(self):
        dims = tuple(int(d) for d in np.atleast_1d(self.dims))
        if not 1 <= len(dims) <= 3:
            raise ValueError(f"grid dimension must be 1, 2 or 3, got {len(dims)}")
        if any(d < 1 for d in dims):
            raise ValueError(f"dims must be positive, got {dims}")
        if not (np.isfinite(self.spacing) and self.spacing > 0):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", float(self.spacing))

    @classmethod
    def unit_box(cls, ndim: int, cells_per_axis: int) -> "Grid":
        """Grid of the unit cube with ``cells_per_axis`` cells along each axis."""
        return cls((cells_per_axis,) * ndim, 1.0 / cells_per_axis)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def h(self) -> float:
        return self.spacing

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.dims))

    @property
    def num_edges(self) -> int:
        return int(self.axis_offsets[-1])

    @property
    def cell_volume(self) -> float:
        return self.h**self.ndim

    @property
    def face_area(self) -> float:
        return self.h ** (self.ndim - 1)

    @property
    def lengths(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=float) * self.h

    @cached_property
    def axis_offsets(self) -> np.ndarray:
        """Start index of each axis block in the edge numbering (length ndim+1)."""
        counts = []
        for k in range(self.ndim):
            shape = list(self.dims)
            shape[k] -= 1
            counts.append(int(np.prod(shape)))
        return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    @cached_property
    def _topology(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        ids = np.arange(self.num_nodes).reshape(self.dims)
        tails, heads, axes = [], [], []
        for k in range(self.ndim):
            lo = [slice(None)] * self.ndim
            hi = [slice(None)] * self.ndim
            lo[k] = slice(0, -1)
            hi[k] = slice(1, None)
            t = ids[tuple(lo)].ravel()
            tails.append(t)
            heads.append(ids[tuple(hi)].ravel())
            axes.append(np.full(t.size, k))
        cat = lambda xs: np.concatenate(xs).astype(np.int64) if xs else np.zeros(0, np.int64)
        return cat(tails), cat(heads), cat(axes)

    @property
    def tails(self) -> np.ndarray:
        return self._topology[0]

    @property
    def heads(self) -> np.ndarray:
        return self._topology[1]

    @property
    def edge_axes(self) -> np.ndarray:
        return self._topology[2]

    @cached_property
    def incidence(self) -> sps.csr_matrix:
        """Edge-by-node matrix with +1 at the head and -1 at the tail."""
        m = self.num_edges
        rows = np.concatenate([np.arange(m), np.arange(m)])
        cols = np.concatenate([self.heads, self.tails])
        vals = np.concatenate([np.ones(m), -np.ones(m)])
        return sps.csr_matrix((vals, (rows, cols)), shape=(m, self.num_nodes))

    @cached_property
    def incidence_t(self) -> sps.csr_matrix:
        return self.incidence.T.tocsr()

    @cached_property
    def node_centers(self) -> np.ndarray:
        """Cell centers, shape ``(num_nodes, ndim)``."""
        axes = [(np.arange(d) + 0.5) * self.h for d in self.dims]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @cached_property
    def edge_midpoints(self) -> np.ndarray:
        """Face centers, shape ``(num_edges, ndim)``."""
        return 0.5 * (self.node_centers[self.tails] + self.node_centers[self.heads])

    def node_index(self, multi_index: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(multi_index), self.dims))

    def nearest_node(self, point: Sequence[float]) -> int:
        """Index of the cell whose center is nearest to ``point``.

        This is the cell containing the point; points on a face go to the upper
        cell, points outside the box to the closest boundary cell.
        """
        x = np.asarray(point, dtype=float)
        if x.shape != (self.ndim,):
            raise ValueError(f"point must have {self.ndim} coordinates")
        m = np.clip(np.floor(x / self.h), 0, np.asarray(self.dims) - 1)
        return self.node_index(m.astype(int))

    def find_edge(self, i: int, j: int) -> int | None:
        """Index of the edge joining nodes ``i`` and ``j``, or None."""
        lo, hi = min(i, j), max(i, j)
        mi = np.unravel_index(lo, self.dims)
        mj = np.unravel_index(hi, self.dims)
        diff = np.subtract(mj, mi)
        if np.abs(diff).sum() != 1:
            return None
        k = int(np.flatnonzero(diff)[0])
        shape = list(self.dims)
        shape[k] -= 1
        return int(self.axis_offsets[k] + np.ravel_multi_index(mi, shape))

    def edges_between(self, u, v) -> np.ndarray:
        """Vectorised :meth:`find_edge`: edge index per node pair, -1 if not adjacent."""
        u = np.asarray(u, dtype=np.int64)
        v = np.asarray(v, dtype=np.int64)
        lo, hi = np.minimum(u, v), np.maximum(u, v)
        out = np.full(lo.shape, -1, dtype=np.int64)
        if lo.size == 0:
            return out
        multi = np.unravel_index(lo, self.dims)
        strides = np.cumprod((self.dims[1:] + (1,))[::-1])[::-1]
        for k in range(self.ndim):
            hit = (hi - lo == strides[k]) & (multi[k] < self.dims[k] - 1)
            if np.any(hit):
                shape = list(self.dims)
                shape[k] -= 1
                sub = tuple(m[hit] for m in multi)
                out[hit] = self.axis_offsets[k] + np.ravel_multi_index(sub, shape)
        return out

    # --- fields -------------------------------------------------------------

    def check_nodes(self, values, name: str = "node array") -> np.ndarray:
        arr = np.asarray(values, dtype=float)
        if arr.shape != (self.num_nodes,):
            raise GridMismatchError(
                f"{name} has shape {arr.shape}, grid has {self.num_nodes} nodes"
            )
        return arr

    def check_edges(self, values, name: str = "edge array") -> np.ndarray:
        arr = np.asarray(values, dtype=float)
        if arr.shape != (self.num_edges,):
            raise GridMismatchError(
                f"{name} has shape {arr.shape}, grid has {self.num_edges} edges"
            )
        return arr

    def divergence(self, flux) -> np.ndarray:
        """Net inflow at every node.

        ``d_i = sum(f_e, head(e) = i) - sum(f_e, tail(e) = i)``.  With this sign
        the transport constraint reads ``divergence(f) == t``: mass leaves the
        negative part of ``t`` and arrives at the positive part.
        """
        f = self.check_edges(flux, "flux")
        return self.incidence_t @ f

    def gradient(self, potential) -> np.ndarray:
        """Forward difference ``(v_head - v_tail) / h`` on every edge."""
        v = self.check_nodes(potential, "potential")
        return (self.incidence @ v) / self.h

    def laplacian(self, weights=None) -> sps.csr_matrix:
        """Weighted graph Laplacian ``G^T diag(w) G`` (unit weights by default)."""
        G = self.incidence
        if weights is None:
            return (self.incidence_t @ G).tocsr()
        w = self.check_edges(weights, "weights")
        return (self.incidence_t @ sps.diags(w) @ G).tocsr()


class SourceMeasure:
    """Zero-sum node masses ``t_i`` (the transport datum).

    Values whose total is within ``rtol * sum|t|`` of zero are accepted and the
    leftover mean is removed, so the stored array sums to zero up to roundoff.
    """

    __slots__ = ("grid", "values")

    def __init__(self, grid: Grid, values, rtol: float = 1e-12):
        t = np.array(grid.check_nodes(values, "source"), dtype=float)
        if not np.all(np.isfinite(t)):
            raise ValueError("source contains non-finite values")
        total, scale = t.sum(), np.abs(t).sum()
        if abs(total) > rtol * scale:
            raise ValueError(
                f"source must sum to zero: sum = {total:.3e}, sum|t| = {scale:.3e}"
            )
        if total != 0.0:
            t -= total / t.size
        t.setflags(write=False)
        self.grid = grid
        self.values = t

    @classmethod
    def zeros(cls, grid: Grid) -> "SourceMeasure":
        return cls(grid, np.zeros(grid.num_nodes))

    @property
    def positive(self) -> np.ndarray:
        """``T+``: where paths end."""
        return np.maximum(self.values, 0.0)

    @property
    def negative(self) -> np.ndarray:
        """``T-``: where paths start."""
        return np.maximum(-self.values, 0.0)

    @property
    def mass(self) -> float:
        """Half the total variation, i.e. the mass of ``T+``."""
        return float(self.positive.sum())

    def __mul__(self, c: float) -> "SourceMeasure":
        return SourceMeasure(self.grid, c * self.values)

    __rmul__ = __mul__

    def __repr__(self):
        return f"SourceMeasure(grid={self.grid!r}, mass={self.mass:.6g})"
