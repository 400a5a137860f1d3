"""Point dipoles: the explicit cone field, the L^p scaling of their dual norm,
and clouds of many small disjoint dipoles.

A dipole sends ``mass`` from ``a`` to ``b``.  Its cone field lives on the
double cone ``D = {x : |y1| + |y'| <= tau}`` around the midpoint ``m``, where
``tau = |b - a| / 2``, ``y1 = (x - m) . u`` with ``u = (b - a) / |b - a|`` and
``y'`` is the part of ``x - m`` orthogonal to ``u``.  On the half next to
``a`` it is ``(x - a) / |y1 + tau|^N``, on the half next to ``b`` it is
``(b - x) / |tau - y1|^N``.  Both halves push mass from ``a`` towards ``b``;
the flux through every cross-section equals the volume of the unit
``(N-1)``-ball, so we divide by that constant to carry exactly ``mass``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import quad

from .beckmann import DEFAULT_TOL, Problem, solve, sobolev_dual_norm
from .cost import CostModel
from .grid import Grid, SourceMeasure
from .lagrangian import PathMeasure, cancel_cycles, decompose

DEFAULT_RESOLUTIONS = (1 / 8, 1 / 16, 1 / 32, 1 / 64, 1 / 128)
CENTER_OFFSET = 1e-3  # keeps dipole ends off cell faces


def unit_ball_volume(k: int) -> float:
    """Volume of the unit ball in R^k (1 for k = 0)."""
    return math.pi ** (k / 2) / math.gamma(k / 2 + 1)


def scaling_exponent(N: int, p: float) -> float:
    """``N - p(N-1)``: the power of ``|a-b|`` in the cone field's ``p``-energy."""
    return N - p * (N - 1)


@dataclass(frozen=True)
class Dipole:
    """Unit of transport from ``a`` to ``b`` (``mass`` > 0)."""

    a: tuple
    b: tuple
    mass: float = 1.0

    def __post_init__(self):
        a = tuple(float(x) for x in np.atleast_1d(self.a))
        b = tuple(float(x) for x in np.atleast_1d(self.b))
        if len(a) != len(b):
            raise ValueError("dipole ends have different dimensions")
        if a == b:
            raise ValueError("dipole ends must differ")
        if not self.mass > 0:
            raise ValueError(f"dipole mass must be positive, got {self.mass}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "mass", float(self.mass))

    @property
    def separation(self) -> float:
        return float(np.linalg.norm(np.subtract(self.b, self.a)))

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.a) + np.asarray(self.b))

    @property
    def direction(self) -> np.ndarray:
        d = np.subtract(self.b, self.a)
        return d / np.linalg.norm(d)

    def half_extent(self) -> np.ndarray:
        """Half-width of the double cone's bounding box along each axis."""
        u = self.direction
        return 0.5 * self.separation * np.maximum(np.abs(u), np.sqrt(np.clip(1 - u**2, 0, None)))

    @classmethod
    def centered(cls, center, separation: float, axis: int = 0, mass: float = 1.0) -> "Dipole":
        """Dipole of the given separation parallel to ``axis``."""
        c = np.asarray(center, dtype=float)
        e = np.zeros(c.size)
        e[axis] = 0.5 * separation
        return cls(tuple(c - e), tuple(c + e), mass)


def _check_dim(grid: Grid, dipole: Dipole):
    if len(dipole.a) != grid.ndim:
        raise ValueError(f"dipole lives in R^{len(dipole.a)}, grid in R^{grid.ndim}")


def dipole_source(grid: Grid, dipole: Dipole) -> SourceMeasure:
    """``-mass`` at the node nearest ``a``, ``+mass`` at the node nearest ``b``."""
    _check_dim(grid, dipole)
    L = grid.lengths
    for name, x in (("a", dipole.a), ("b", dipole.b)):
        if np.any(np.asarray(x) <= 0) or np.any(np.asarray(x) >= L):
            raise ValueError(f"dipole end {name}={x} is not strictly inside the box")
    ia, ib = grid.nearest_node(dipole.a), grid.nearest_node(dipole.b)
    if ia == ib:
        raise ValueError(
            f"dipole ends snap to the same node {ia}; separation "
            f"{dipole.separation:.3g} is too small for spacing {grid.h:.3g}"
        )
    t = np.zeros(grid.num_nodes)
    t[ia], t[ib] = -dipole.mass, dipole.mass
    return SourceMeasure(grid, t)


def cone_field(points, dipole: Dipole) -> np.ndarray:
    """The normalised cone field at ``points`` (shape ``(n, N)``)."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    N = x.shape[1]
    u, m = dipole.direction, dipole.midpoint
    tau = 0.5 * dipole.separation
    d = x - m
    y1 = d @ u
    r = np.linalg.norm(d - y1[:, None] * u, axis=1)
    inside = r + np.abs(y1) <= tau

    V = np.zeros_like(x)
    dist = np.where(y1 < 0, y1 + tau, tau - y1)  # distance to the near apex along u
    vec = np.where((y1 < 0)[:, None], d + tau * u, tau * u - d)
    ok = inside & (dist > 0)
    V[ok] = vec[ok] / dist[ok, None] ** N
    return V * dipole.mass / unit_ball_volume(N - 1)


def sample_Vab(grid: Grid, dipole: Dipole) -> np.ndarray:
    """Rasterise the cone field: normal component at face centers times face area.

    Raises:
        ValueError: the double cone leaves the box.
    """
    _check_dim(grid, dipole)
    m, ext = dipole.midpoint, dipole.half_extent()
    if np.any(m - ext < 0) or np.any(m + ext > grid.lengths):
        raise ValueError("cone support exits the domain")
    V = cone_field(grid.edge_midpoints, dipole)
    return V[np.arange(grid.num_edges), grid.edge_axes] * grid.face_area


def cone_energy_constant(N: int, p: float) -> float:
    """``C`` with ``||V_ab||_p^p = C |a-b|^(N - p(N-1))`` for the continuum field.

    In cone coordinates ``rho = y1 + tau``, ``y' = rho * eta`` one half of the
    double cone contributes ``tau**beta / beta`` times the integral of
    ``(1 + |eta|^2)^(p/2)`` over the unit ``(N-1)``-ball.  Infinite when
    ``beta <= 0``.
    """
    beta = scaling_exponent(N, p)
    if beta <= 0:
        return math.inf
    if N == 1:
        K = 1.0
    elif N == 2:
        K = quad(lambda e: (1 + e * e) ** (p / 2), -1.0, 1.0)[0]
    else:
        K = 2 * math.pi * (2 ** (p / 2 + 1) - 1) / (p + 2)
    return 2 * 0.5**beta / beta * K / unit_ball_volume(N - 1) ** p


def flux_energy(grid: Grid, flux, p: float) -> float:
    """Discrete ``||f||_p^p = sum h^N |f / h^(N-1)|^p``."""
    z = np.abs(grid.check_edges(flux, "flux")) / grid.face_area
    return float(grid.cell_volume * (z**p).sum())


# --- scaling ------------------------------------------------------------------


@dataclass
class ScalingResult:
    """Output of :func:`scaling_experiment`.

    ``rows`` holds ``(separation, spacing, norm, norm**p)``.  ``slope`` is the
    least-squares slope of ``log(norm**p)`` against ``log(separation)`` over
    the three smallest separations at the finest spacing; it is None and
    ``flag`` explains why when that fit is degenerate.  ``offset_exponent`` is
    ``log((E1-E2)/(E2-E3)) / log(s1/s2)`` on the same three points when they
    are geometric: it cancels a constant offset in ``E``.
    """

    N: int
    p: float
    rows: list
    slope: Optional[float]
    offset_exponent: Optional[float] = None
    flag: Optional[str] = None

    @property
    def target(self) -> float:
        return scaling_exponent(self.N, self.p)

    def refinement(self, separation: float) -> list:
        """``(spacing, norm)`` pairs for one separation, coarse to fine."""
        pairs = [(h, n) for s, h, n, _ in self.rows if s == separation]
        return sorted(pairs, key=lambda r: -r[0])

    @property
    def finest(self) -> list:
        hmin = min(r[1] for r in self.rows)
        return [r for r in self.rows if r[1] == hmin]


def _cells(N: int, h: float) -> Grid:
    n = round(1.0 / h)
    if n < 2 or abs(n * h - 1.0) > 1e-9:
        raise ValueError(f"spacing {h} does not divide the unit box")
    return Grid.unit_box(N, n)


def fit_slope(separations, energies) -> tuple[Optional[float], Optional[float], Optional[str]]:
    """Slope and offset-cancelling exponent of ``energies`` against ``separations``."""
    s = np.asarray(separations, dtype=float)
    E = np.asarray(energies, dtype=float)
    if np.unique(s).size < 2:
        return None, None, "degenerate fit: need at least two separations"
    if np.any(E <= 0):
        return None, None, "degenerate fit: zero norm"
    order = np.argsort(s)[:3]
    s, E = s[order], E[order]
    slope = float(np.polyfit(np.log(s), np.log(E), 1)[0])
    offset = None
    if s.size == 3 and math.isclose(s[1] / s[0], s[2] / s[1], rel_tol=1e-9):
        d1, d2 = E[1] - E[0], E[2] - E[1]
        if d1 > 0 and d2 > 0:
            offset = float(math.log(d2 / d1) / math.log(s[1] / s[0]))
    flag = "fit uses only two separations" if s.size == 2 else None
    return slope, offset, flag


def scaling_experiment(
    N: int,
    p: float,
    separations: Sequence[float],
    grid_resolutions: Sequence[float] = DEFAULT_RESOLUTIONS,
    tolerance: float = DEFAULT_TOL,
    center: Optional[Sequence[float]] = None,
) -> ScalingResult:
    """Dual norm of an axis-parallel dipole for every separation and spacing.

    Dipoles sit on the unit box, centered slightly off its middle (so ends
    do not fall on faces) and aligned with axis 0.

    Raises:
        ValueError: bad ranges, or a separation smaller than some spacing or
            too large for the box (infeasible geometry).
    """
    if N not in (1, 2, 3):
        raise ValueError(f"N must be 1, 2 or 3, got {N}")
    if not p > 1:
        raise ValueError(f"p must exceed 1, got {p}")
    seps = [float(s) for s in separations]
    hs = sorted({float(h) for h in grid_resolutions}, reverse=True)
    if not seps or not hs:
        raise ValueError("need at least one separation and one resolution")
    if any(s <= 0 for s in seps) or any(b >= a for a, b in zip(seps, seps[1:])):
        raise ValueError("separations must be positive and strictly decreasing")
    c = np.full(N, 0.5 + CENTER_OFFSET) if center is None else np.asarray(center, float)

    rows = []
    for s in seps:
        dip = Dipole.centered(c, s)
        for h in hs:
            if s < h:
                raise ValueError(f"infeasible geometry: separation {s:g} below spacing {h:g}")
            grid = _cells(N, h)
            norm = sobolev_dual_norm(dipole_source(grid, dip), p, tolerance=tolerance)
            rows.append((s, h, norm, norm**p))

    hmin = hs[-1]
    fine = [(s, e) for s, h, _, e in rows if h == hmin]
    slope, offset, flag = fit_slope(*zip(*fine))
    return ScalingResult(N, float(p), rows, slope, offset, flag)


# --- clouds ----------------------------------------------------------------------


def cones_disjoint(d1: Dipole, d2: Dipole) -> bool:
    """Whether two double cones are disjoint (closed sets).

    Exact in one and two dimensions (separating axes of the two squares).  In
    three dimensions only bounding boxes and balls are compared, so touching
    or interlocking cones are conservatively reported as overlapping.
    """
    m1, m2 = d1.midpoint, d2.midpoint
    gap = np.abs(m1 - m2) - d1.half_extent() - d2.half_extent()
    if np.any(gap > 0):
        return True
    N = m1.size
    r1, r2 = 0.5 * d1.separation, 0.5 * d2.separation
    if N == 1:
        return False
    if N == 3:
        return np.linalg.norm(m1 - m2) > r1 + r2

    def corners(d, r):
        u = d.direction
        w = np.array([-u[1], u[0]])
        return d.midpoint + r * np.array([u, w, -u, -w])

    P1, P2 = corners(d1, r1), corners(d2, r2)
    for d in (d1, d2):
        u = d.direction
        w = np.array([-u[1], u[0]])
        for axis in (u + w, u - w):
            a, b = P1 @ axis, P2 @ axis
            if a.max() < b.min() or b.max() < a.min():
                return True
    return False


def check_disjoint(dipoles: Sequence[Dipole]) -> None:
    for i in range(len(dipoles)):
        for j in range(i + 1, len(dipoles)):
            if not cones_disjoint(dipoles[i], dipoles[j]):
                raise ValueError(f"double cones of dipoles {i} and {j} overlap")


def cloud_separations(count: int, base_separation: float, decay: float) -> np.ndarray:
    """``base * decay**i`` for ``i = 0 .. count-1``."""
    if not 0 < decay < 1:
        raise ValueError(f"decay must lie in (0, 1), got {decay}")
    if not base_separation > 0:
        raise ValueError("base separation must be positive")
    return base_separation * decay ** np.arange(count)


def place_cloud(grid: Grid, separations: Sequence[float], gap_cells: float = 2.0) -> list:
    """Shelf-pack axis-0 dipoles of the given (decreasing) separations.

    Cones are laid left to right along axis 0 with ``gap_cells`` cells between
    bounding boxes and walls; a new shelf starts along axis 1 when a row is
    full.  Remaining axes use the box middle.

    Raises:
        ValueError: the cloud does not fit, or a dipole is shorter than two
            cells.
    """
    L = grid.lengths
    gap = gap_cells * grid.h
    dipoles = []
    x0, y0, shelf = gap, gap, 0.0
    for s in separations:
        if s < 2 * grid.h * (1 - 1e-9):
            raise ValueError(f"separation {s:g} is below two cells ({2 * grid.h:g})")
        if x0 + s + gap > L[0]:
            x0, y0, shelf = gap, y0 + shelf + gap, 0.0
        c = 0.5 * L + CENTER_OFFSET
        c[0] = x0 + 0.5 * s + 0.25 * grid.h
        if grid.ndim > 1:
            c[1] = y0 + 0.5 * s + 0.25 * grid.h
            if y0 + s + gap > L[1]:
                raise ValueError("dipole cloud does not fit in the box")
        elif x0 + s + gap > L[0]:
            raise ValueError("dipole cloud does not fit in the box")
        dipoles.append(Dipole.centered(c, s))
        x0 += s + gap
        shelf = max(shelf, s)
    check_disjoint(dipoles)
    return dipoles


@dataclass
class CloudResult:
    """Solution of a truncated dipole cloud and its path decomposition.

    ``flux_energy`` is ``||f||_p^p`` of the optimal flux and
    ``bound_constant * s_i**exponent`` is the continuum energy of dipole
    ``i``'s cone field (see :func:`cone_energy_constant`).
    """

    dipoles: list
    source: SourceMeasure
    flux: np.ndarray
    paths: PathMeasure
    path_mass: float
    flux_energy: float
    bound_constant: float
    exponent: float
    converged: bool = True
    separations: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def bound(self, first: int, last: int) -> float:
        """``C * sum(s_i**exponent)`` for dipoles ``first .. last-1``."""
        return float(self.bound_constant * (self.separations[first:last] ** self.exponent).sum())


def dipole_cloud(
    grid: Grid,
    count: int,
    base_separation: float = 0.25,
    decay: float = 2 ** (-4 / 15),
    p: float = 1.5,
    tolerance: float = DEFAULT_TOL,
    dipoles: Optional[Sequence[Dipole]] = None,
) -> CloudResult:
    """Solve and decompose the first ``count`` dipoles of a cloud.

    Dipoles are placed by :func:`place_cloud` unless given explicitly; either
    way their double cones must be pairwise disjoint.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    if dipoles is None:
        seps = cloud_separations(count, base_separation, decay)
        dipoles = place_cloud(grid, seps)
    else:
        dipoles = list(dipoles)[:count]
        check_disjoint(dipoles)
        seps = np.array([d.separation for d in dipoles])

    t = sum(dipole_source(grid, d).values for d in dipoles)
    source = SourceMeasure(grid, t)
    f, _, report = solve(Problem(grid, source, CostModel.power(p)), tolerance)
    f = cancel_cycles(grid, f)
    paths = decompose(grid, f, source)

    beta = scaling_exponent(grid.ndim, p)
    C = cone_energy_constant(grid.ndim, p)
    return CloudResult(
        dipoles=dipoles,
        source=source,
        flux=f,
        paths=paths,
        path_mass=paths.mass,
        flux_energy=flux_energy(grid, f, p),
        bound_constant=C,
        exponent=beta,
        converged=report.converged,
        separations=np.asarray(seps, dtype=float),
    )
