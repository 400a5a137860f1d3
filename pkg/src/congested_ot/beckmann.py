"""Discrete Beckmann problem and its dual.

Primal (flux ``f`` on edges)::

    P(f) = sum_e h^N H(x_e, |f_e| / h^(N-1))      subject to  divergence(f) = t

Dual (potential ``v`` on nodes, zero mean)::

    D(v) = <t, v> - sum_e h^N H*(x_e, g_e(v)),     g_e(v) = (v_head - v_tail) / h

The dual is unconstrained, so it is solved first; the flux is then recovered
from ``f_e = h^(N-1) dH*(g_e)`` and made exactly feasible by a small
least-squares correction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla
from scipy.optimize import minimize_scalar

from .cost import CostModel
from .grid import Grid, SourceMeasure

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_RESIDUAL_TOL = 1e-10
DEFAULT_MAX_ITERS = 500


class InfeasibleFluxError(ValueError):
    """The flux does not carry the prescribed source."""

    def __init__(self, node: int, residual: float, tol: float):
        self.node = node
        self.residual = residual
        super().__init__(
            f"flux is infeasible at node {node}: |divergence - source| = "
            f"{residual:.3e} > {tol:.1e}"
        )


@dataclass(frozen=True)
class Problem:
    grid: Grid
    source: SourceMeasure
    cost: CostModel

    def __post_init__(self):
        if self.source.grid != self.grid:
            raise ValueError("source lives on a different grid")
        self.cost.check_grid(self.grid.num_edges)

    @property
    def t(self) -> np.ndarray:
        return self.source.values


@dataclass(frozen=True)
class DualResult:
    dual_energy: float
    iterations: int
    converged: bool
    stationarity: float


@dataclass(frozen=True)
class SolveReport:
    primal_energy: float
    dual_energy: float
    gap: float
    divergence_residual: float
    iterations: int
    converged: bool

    def as_dict(self) -> dict:
        return {
            "primal_energy": float(self.primal_energy),
            "dual_energy": float(self.dual_energy),
            "gap": float(self.gap),
            "divergence_residual": float(self.divergence_residual),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }


# --- energies --------------------------------------------------------------


def primal_energy(problem: Problem, flux) -> float:
    g = problem.grid
    f = g.check_edges(flux, "flux")
    return float(g.cell_volume * problem.cost.H(np.abs(f) / g.face_area).sum())


def dual_energy(problem: Problem, potential) -> float:
    g = problem.grid
    v = g.check_nodes(potential, "potential")
    return float(problem.t @ v - g.cell_volume * problem.cost.H_star(g.gradient(v)).sum())


def divergence_residual(problem: Problem, flux) -> np.ndarray:
    return problem.grid.divergence(flux) - problem.t


# --- dual solver -----------------------------------------------------------


class _DualObjective:
    """``F(v) = -D(v)`` with gradient and a positive definite Hessian model."""

    def __init__(self, problem: Problem):
        self.grid = problem.grid
        self.cost = problem.cost
        self.t = problem.t
        self.hN = self.grid.cell_volume
        self.hN1 = self.grid.face_area
        self.nevals = 0

    def value(self, v) -> float:
        self.nevals += 1
        gr = self.grid.gradient(v)
        return float(self.hN * self.cost.H_star(gr).sum() - self.t @ v)

    def flux(self, v) -> np.ndarray:
        return self.hN1 * self.cost.grad_H_star(self.grid.gradient(v))

    def grad(self, v) -> np.ndarray:
        return self.grid.divergence(self.flux(v)) - self.t

    def curvature(self, v) -> np.ndarray:
        """Per-edge second derivatives, clipped away from 0 and infinity.

        The clipping keeps the Newton matrix nonsingular where ``H*`` is flat
        (``q > 2`` or inside the ``delta`` kink) and bounded where it is
        singular (``q < 2`` at zero slope).
        """
        c = self.cost
        gr = self.grid.gradient(v)
        w = c.edge_weights()
        s = np.maximum(np.abs(gr) / w - c.delta, 0.0)
        smax = s.max() if s.size else 0.0
        floor = max(1e-6 * smax, 1e-12) if smax > 0 else 1.0
        q = c.q
        s_eff = np.maximum(s, floor)
        curv = c.alpha ** (1.0 - q) * (q - 1.0) * s_eff ** (q - 2.0) / w
        if c.delta > 0:
            # flat region: keep a small multiple of the typical active curvature
            active = curv[s > 0]
            ref = np.median(active) if active.size else c.alpha ** (1.0 - q) / np.mean(w)
            curv = np.where(s > 0, curv, 1e-6 * ref)
        return self.hN / self.grid.h**2 * curv


def _zero_mean(v: np.ndarray) -> np.ndarray:
    return v - v.mean()


def _solve_grounded(K: sps.csr_matrix, rhs: np.ndarray) -> np.ndarray:
    """Solve the singular Laplacian-type system ``K x = rhs`` (zero-sum rhs)."""
    n = K.shape[0]
    if n == 1:
        return np.zeros(1)
    Kr = K[1:, 1:].tocsc()
    x = np.zeros(n)
    x[1:] = spla.splu(Kr, permc_spec="MMD_AT_PLUS_A").solve(rhs[1:])
    return _zero_mean(x)


def _newton(obj: _DualObjective, v: np.ndarray, tol: float, max_iters: int):
    grid = obj.grid
    scale = 1.0 + np.abs(obj.t).max(initial=0.0)
    F = obj.value(v)
    it = 0
    gnorm = np.inf
    for it in range(max_iters + 1):
        G = obj.grad(v)
        gnorm = np.abs(G).max(initial=0.0)
        if gnorm <= tol * scale:
            return v, it, True, gnorm
        if it == max_iters:
            break
        K = grid.laplacian(obj.curvature(v))
        d = _solve_grounded(K, -G)
        slope = float(G @ d)
        if not slope < 0:
            d, slope = -G, -float(G @ G)

        if it == 0 and not np.any(v):
            # from the flat/singular start a scalar search sets the scale
            res = minimize_scalar(lambda a: obj.value(v + a * d), bracket=(0.0, 1.0))
            a = float(res.x) if res.fun < F else 1.0
            v_new = v + a * d
            F_new = obj.value(v_new)
        else:
            a = 1.0
            while True:
                v_new = v + a * d
                F_new = obj.value(v_new)
                slack = 1e-14 * (abs(F) + 1.0)
                if F_new <= F + 1e-4 * a * slope + slack:
                    break
                a *= 0.5
                if a < 1e-12:
                    break
        if F_new > F + 1e-12 * (abs(F) + 1.0):
            logger.debug("newton: line search failed at iteration %d", it)
            break
        v, F = _zero_mean(v_new), F_new
    return v, it, False, gnorm


def _lbfgs(obj: _DualObjective, v: np.ndarray, tol: float, max_iters: int, memory: int = 10):
    scale = 1.0 + np.abs(obj.t).max(initial=0.0)
    F, G = obj.value(v), obj.grad(v)
    S, Y = [], []
    gnorm = np.abs(G).max(initial=0.0)
    for it in range(max_iters + 1):
        gnorm = np.abs(G).max(initial=0.0)
        if gnorm <= tol * scale:
            return v, it, True, gnorm
        if it == max_iters:
            break
        # two-loop recursion
        r = G.copy()
        alphas = []
        for s, y in zip(reversed(S), reversed(Y)):
            a = (s @ r) / (y @ s)
            alphas.append(a)
            r -= a * y
        if S:
            r *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        else:
            r /= max(np.abs(G).max(), 1e-300)
        for (s, y), a in zip(zip(S, Y), reversed(alphas)):
            b = (y @ r) / (y @ s)
            r += (a - b) * s
        d = -r
        slope = float(G @ d)
        if not slope < 0:
            S.clear(), Y.clear()
            d, slope = -G, -float(G @ G)
        step = 1.0
        while True:
            v_new = _zero_mean(v + step * d)
            F_new = obj.value(v_new)
            if F_new <= F + 1e-4 * step * slope + 1e-14 * (abs(F) + 1.0):
                break
            step *= 0.5
            if step < 1e-16:
                return v, it, False, gnorm
        G_new = obj.grad(v_new)
        s, y = v_new - v, G_new - G
        if s @ y > 1e-16 * np.sqrt((s @ s) * (y @ y)):
            S.append(s), Y.append(y)
            if len(S) > memory:
                S.pop(0), Y.pop(0)
        v, F, G = v_new, F_new, G_new
    return v, it, False, gnorm


def _agd(obj: _DualObjective, v: np.ndarray, tol: float, max_iters: int):
    """Nesterov accelerated gradient with adaptive restart.

    Both the step-size test (a local Lipschitz bound on the gradient) and the
    restart test use gradients only; value comparisons drown in roundoff
    near the optimum.
    """
    scale = 1.0 + np.abs(obj.t).max(initial=0.0)
    L = 1.0
    x_prev = v.copy()
    y = v.copy()
    theta = 1.0
    gnorm = np.inf
    for it in range(max_iters + 1):
        Gv = obj.grad(v)
        gnorm = np.abs(Gv).max(initial=0.0)
        if gnorm <= tol * scale:
            return v, it, True, gnorm
        if it == max_iters:
            break
        Gy = obj.grad(y)
        while True:
            x = _zero_mean(y - Gy / L)
            dx = x - y
            dg = obj.grad(x) - Gy
            if np.sqrt(dg @ dg) <= L * np.sqrt(dx @ dx) * (1 + 1e-12):
                break
            L *= 2.0
        theta_next = 0.5 * (1 + np.sqrt(1 + 4 * theta**2))
        if Gy @ (x - x_prev) > 0:
            # momentum points uphill: restart from the last iterate
            theta_next = 1.0
            y = x.copy()
        else:
            y = x + ((theta - 1) / theta_next) * (x - x_prev)
        x_prev, v, theta = x, x, theta_next
        L *= 0.9
    return v, it, False, gnorm


def _resolvent(cost: CostModel, s: np.ndarray, kappa: float):
    """Split ``s = xi + kappa * dH*(xi)`` into ``xi`` (per edge, exact).

    Returns ``(xi, zeta, dphi)`` with ``zeta = dH*(xi)`` and
    ``dphi = d^2 H*(xi)`` (``inf`` where the slope is vertical).
    """
    q, a, delta = cost.q, cost.alpha ** (1.0 - cost.q), cost.delta
    w = np.broadcast_to(cost.edge_weights(), s.shape)
    r = np.abs(s) - w * delta
    act = r > 0
    u = np.zeros_like(s)
    ra, wa = r[act], w[act]
    e = q - 1.0
    if q == 2.0:
        u[act] = ra / (wa + kappa * a)
    elif q > 2.0:
        # F(u) = w u + kappa a u^e - r, convex increasing: Newton from the right
        x = ra / wa
        for _ in range(200):
            F = wa * x + kappa * a * x**e - ra
            step = F / (wa + kappa * a * e * x ** (e - 1.0))
            x = np.maximum(x - step, 0.0)
            if np.all(np.abs(step) <= 1e-15 * np.maximum(x, 1e-300)):
                break
        u[act] = x
    else:
        # in y = u^e: F(y) = w y^(1/e) + kappa a y - r, convex increasing
        y = ra / (kappa * a)
        inv = 1.0 / e
        for _ in range(200):
            F = wa * y**inv + kappa * a * y - ra
            step = F / (wa * inv * y ** (inv - 1.0) + kappa * a)
            y = np.maximum(y - step, 0.0)
            if np.all(np.abs(step) <= 1e-15 * np.maximum(y, 1e-300)):
                break
        u[act] = y**inv
    xi = np.where(act, np.sign(s) * w * (delta + u), s)
    zeta = (s - xi) / kappa
    with np.errstate(divide="ignore"):
        dphi = np.where(act, a * e * u ** (q - 2.0) / w, 0.0)
    if q < 2 and delta == 0:
        dphi = np.where(act, dphi, np.inf)
    return xi, zeta, dphi


def _mixed_newton(problem: Problem, v: np.ndarray, tol: float, max_iters: int):
    """Semismooth Newton on the optimality system in resolvent variables.

    Unknowns are the potential ``v`` and, per edge, ``s = xi + kappa*zeta``
    where ``zeta = dH*(xi)`` is the flux density.  Both ``xi`` and ``zeta``
    are 1-Lipschitz functions of ``s``, so the system stays well behaved
    where ``dH*`` is steep (``q < 2``) or flat (inside the ``delta`` kink).
    The equations are ``g(v) = xi(s)`` on edges and
    ``h^(N-1) divergence(zeta(s)) = t`` on nodes.
    Returns ``(flux, potential, iterations, converged, stationarity)``.
    """
    grid, cost, t = problem.grid, problem.cost, problem.t
    h, hN1 = grid.h, grid.face_area
    G = grid.incidence
    xi0 = grid.gradient(v)
    zeta0 = cost.grad_H_star(xi0)
    zmax, gmax = np.abs(zeta0).max(initial=0.0), np.abs(xi0).max(initial=0.0)
    kappa = gmax / zmax if (zmax > 0 and gmax > 0) else 1.0
    s = xi0 + kappa * zeta0
    tscale = 1.0 + np.abs(t).max(initial=0.0)

    def residuals(v, s):
        xi, zeta, dphi = _resolvent(cost, s, kappa)
        E1 = grid.gradient(v) - xi
        E2 = hN1 * grid.divergence(zeta) - t
        return xi, zeta, dphi, E1, E2

    def merit(E1, E2, xscale):
        return 0.5 * (np.sum((E1 / xscale) ** 2) + np.sum((E2 / tscale) ** 2))

    xi, zeta, dphi, E1, E2 = residuals(v, s)
    err = np.inf
    it = 0
    for it in range(max_iters + 1):
        xscale = 1.0 + np.abs(xi).max(initial=0.0)
        err = max(np.abs(E1).max(initial=0.0) / xscale, np.abs(E2).max(initial=0.0) / tscale)
        if err <= tol:
            return hN1 * zeta, _zero_mean(v), it, True, err
        if it == max_iters:
            break
        finite = dphi[np.isfinite(dphi) & (dphi > 0)]
        ref = np.median(finite) if finite.size else 1.0
        dcap = np.minimum(dphi, 1e12 * ref)
        Jp = 1.0 / (1.0 + kappa * dcap)
        weights = hN1 / h * (dcap + 1e-10 * ref)
        K = grid.laplacian(weights)
        rhs = -E2 - hN1 * grid.incidence_t @ (dcap * E1)
        dv = _solve_grounded(K, rhs - rhs.mean())
        ds = (G @ dv / h + E1) / Jp
        th = merit(E1, E2, xscale)
        a = 1.0
        while True:
            v_new, s_new = v + a * dv, s + a * ds
            cand = residuals(v_new, s_new)
            th_new = merit(cand[3], cand[4], xscale)
            if th_new <= (1.0 - 1e-4 * a) * th or a < 1e-10:
                break
            a *= 0.5
        if th_new > th:
            logger.debug("mixed newton: line search failed at iteration %d", it)
            break
        v, s = _zero_mean(v_new), s_new
        xi, zeta, dphi, E1, E2 = cand
    return hN1 * zeta, _zero_mean(v), it, False, err


_METHODS = {"newton": _newton, "lbfgs": _lbfgs, "agd": _agd}


WARM_START_ITERS = 20


def _dual_phase(problem, tolerance, max_iters, method, initial):
    """Run the dual iteration, polishing with the resolvent Newton if needed.

    Returns ``(potential, flux or None, iterations, converged, stationarity)``.
    """
    grid = problem.grid
    if initial is None:
        v = np.zeros(grid.num_nodes)
    else:
        v = _zero_mean(np.array(grid.check_nodes(initial, "initial potential")))
    if not np.any(problem.t):
        return np.zeros(grid.num_nodes), np.zeros(grid.num_edges), 0, True, 0.0
    obj = _DualObjective(problem)
    if method != "newton":
        v, iters, ok, gnorm = _METHODS[method](obj, v, tolerance, max_iters)
        return _zero_mean(v), None, iters, ok, float(gnorm)
    v, iters, ok, gnorm = _newton(obj, v, tolerance, min(WARM_START_ITERS, max_iters))
    if ok or iters >= max_iters:
        return _zero_mean(v), None, iters, ok, float(gnorm)
    f, v, more, ok, err = _mixed_newton(problem, v, tolerance, max_iters - iters)
    return v, f, iters + more, ok, float(err)


def solve_dual(
    problem: Problem,
    tolerance: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    method: str = "newton",
    initial: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, DualResult]:
    """Maximise ``D(v)`` over zero-mean potentials.

    With ``method="newton"`` a damped Newton iteration runs first; if it has
    not met ``max|dD/dv| <= tolerance * (1 + max|t|)`` after a few steps, the
    optimality system is finished by a semismooth Newton method in resolvent
    variables, whose relative residual is then the reported stationarity.
    ``"lbfgs"`` (limited-memory quasi-Newton) and ``"agd"`` (accelerated
    gradient) are available as plain first-order alternatives.  A run that
    exhausts ``max_iters`` is returned with ``converged=False`` and logged.
    """
    if method not in _METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(_METHODS)}")
    v, _, iters, ok, err = _dual_phase(problem, tolerance, max_iters, method, initial)
    if not ok:
        logger.warning("dual solver (%s) stopped after %d iterations, stationarity %.3e",
                       method, iters, err)
    return v, DualResult(dual_energy(problem, v), iters, ok, err)


def recover_flux(problem: Problem, potential) -> np.ndarray:
    """Flux from the optimality relation ``f_e = h^(N-1) dH*(g_e(v))``."""
    g = problem.grid
    return g.face_area * problem.cost.grad_H_star(g.gradient(potential))


def project_feasible(
    grid: Grid,
    flux,
    source,
    tolerance: float = DEFAULT_RESIDUAL_TOL,
    max_rounds: int = 20,
    weights=None,
) -> np.ndarray:
    """Smallest correction making ``divergence(f) = t``.

    Without ``weights`` the correction minimises the sum of squares: it is
    ``G w`` with ``G^T G w = t - divergence(f)``, solved by conjugate
    gradients.  With positive edge ``weights`` it minimises
    ``sum(df**2 / weights)`` instead, i.e. ``df = W G w`` with
    ``G^T W G w = r``, solved directly.  Rounds repeat until the residual is
    below ``tolerance``.
    """
    t = source.values if isinstance(source, SourceMeasure) else grid.check_nodes(source, "source")
    f = np.array(grid.check_edges(flux, "flux"), dtype=float)
    if abs(t.sum()) > 1e-9 * max(np.abs(t).sum(), 1e-300):
        raise ValueError("cannot project onto a source with nonzero total mass")
    if grid.num_edges == 0:
        return f
    if weights is None:
        L, W = grid.laplacian(), None
    else:
        W = grid.check_edges(weights, "weights")
        if np.any(~(W > 0)):
            raise ValueError("projection weights must be positive")
        L = grid.laplacian(W)
    for _ in range(max_rounds):
        r = t - grid.divergence(f)
        rnorm = np.abs(r).max()
        if rnorm <= tolerance:
            break
        r -= r.mean()
        if W is None:
            w, info = spla.cg(L, r, rtol=1e-10, atol=0.0, maxiter=20 * grid.num_nodes)
            f += grid.incidence @ w
        else:
            f += W * (grid.incidence @ _solve_grounded(L, r))
    else:
        logger.warning("project_feasible: residual %.3e after %d rounds", rnorm, max_rounds)
    return f


def duality_gap(problem: Problem, flux, potential, feasibility_tol: float = 1e-8) -> float:
    """``P(f) - D(v)``; nonnegative (up to roundoff) for every feasible flux."""
    r = np.abs(divergence_residual(problem, flux))
    if r.size and r.max() > feasibility_tol:
        i = int(np.argmax(r))
        raise InfeasibleFluxError(i, float(r[i]), feasibility_tol)
    return primal_energy(problem, flux) - dual_energy(problem, potential)


def solve(
    problem: Problem,
    tolerance: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    method: str = "newton",
    residual_tol: float = DEFAULT_RESIDUAL_TOL,
    initial: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray, SolveReport]:
    """Solve the discrete Beckmann problem through its dual.

    The flux comes from the optimality relation (or, after the resolvent
    polish, from the resolvent split, which avoids evaluating a steep
    ``dH*``) and is then corrected to carry ``t`` exactly.  Converged means
    ``gap <= tolerance * (1 + |P|)`` with a divergence residual of at most
    ``max(tolerance, residual_tol)``.  The gap bounds the suboptimality of
    both iterates, so it is the certificate; the dual stationarity can stall
    near ``sqrt(eps)`` when ``q < 2`` (``dH*`` is not Lipschitz at zero)
    while the gap is already at roundoff.
    """
    if method not in _METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(_METHODS)}")
    v, f, iters, ok, err = _dual_phase(problem, tolerance, max_iters, method, initial)
    if f is None:
        f = recover_flux(problem, v)
    # corrections proportional to |f| keep the support and the relative accuracy
    # of small fluxes; the floor only keeps the weighted graph connected
    fmax = float(np.abs(f).max(initial=0.0))
    weights = np.abs(f) + 1e-8 * fmax if fmax > 0 else None
    f = project_feasible(problem.grid, f, problem.source, residual_tol, weights=weights)
    P = primal_energy(problem, f)
    D = dual_energy(problem, v)
    res = float(np.abs(divergence_residual(problem, f)).max(initial=0.0))
    gap = P - D
    converged = gap <= tolerance * (1.0 + abs(P)) and res <= max(tolerance, residual_tol)
    if not ok:
        log = logger.debug if converged else logger.warning
        log("dual solver (%s) stopped after %d iterations, stationarity %.3e",
            method, iters, err)
    return f, v, SolveReport(P, D, gap, res, iters, bool(converged))


# --- negative Sobolev norm -------------------------------------------------


def sobolev_dual_norm(
    source: SourceMeasure,
    p: float,
    method: str = "min_flux",
    tolerance: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> float:
    """Discrete dual Sobolev norm of a zero-sum source.

    ``"min_flux"`` returns the smallest discrete L^p norm of a flux carrying
    ``source``; ``"dual_formula"`` returns
    ``p^(1/p) * (max_v <t, v> - (1/q) sum h^N |g(v)|^q)^(1/p)``.
    """
    if not isinstance(source, SourceMeasure):
        raise TypeError("source must be a SourceMeasure")
    if method not in ("min_flux", "dual_formula"):
        raise ValueError(f"unknown method {method!r}")
    grid = source.grid
    if not np.any(source.values):
        return 0.0
    problem = Problem(grid, source, CostModel.power(p))
    if method == "min_flux":
        f, _, report = solve(problem, tolerance, max_iters)
        _check_report(report)
        z = np.abs(f) / grid.face_area
        return float((grid.cell_volume * (z**p).sum()) ** (1.0 / p))
    _, _, report = solve(problem, tolerance, max_iters)
    _check_report(report)
    return float(p ** (1.0 / p) * max(report.dual_energy, 0.0) ** (1.0 / p))


def _check_report(report: SolveReport) -> None:
    if not report.converged:
        raise RuntimeError(
            f"solver did not converge: gap {report.gap:.3e}, "
            f"residual {report.divergence_residual:.3e}"
        )


def laplacian_solution(problem: Problem) -> np.ndarray:
    """Flux of the quadratic case (``p = 2``, unit weights) by one direct solve.

    Independent of the iterative solver: ``h^(N-2) G^T G v = t`` and
    ``f = h^(N-2) G v / alpha``.
    """
    grid = problem.grid
    c = problem.cost
    if c.p != 2 or c.delta != 0 or c.weights is not None:
        raise ValueError("direct solution only covers p=2 power costs without weights")
    L = grid.laplacian().tocsc()
    n = grid.num_nodes
    v = np.zeros(n)
    if n > 1:
        v[1:] = spla.spsolve(L[1:, 1:], problem.t[1:] * c.alpha * grid.h ** (2 - grid.ndim))
    return grid.h ** (grid.ndim - 2) * (grid.incidence @ v) / c.alpha
