import numpy as np
import pytest

from congested_ot.beckmann import Problem, primal_energy, solve
from congested_ot.cost import CostModel
from congested_ot.grid import Grid, SourceMeasure
from congested_ot.lagrangian import (
    CyclicFluxError,
    DecompositionError,
    PathMeasure,
    cancel_cycles,
    decompose,
    equilibrium_check,
    is_acyclic,
    traffic_intensity,
    wardrop_energy,
)


def square_loop(g, nodes, c=1.0):
    """Flux ``c`` around the closed node sequence ``nodes``."""
    f = np.zeros(g.num_edges)
    for a, b in zip(nodes, nodes[1:] + nodes[:1]):
        f[g.find_edge(a, b)] += c if b > a else -c
    return f


def path_flux(g, paths, weights):
    """Independent reconstruction: walk each path and add signed weights."""
    f = np.zeros(g.num_edges)
    for p, w in zip(paths, weights):
        for a, b in zip(p[:-1], p[1:]):
            f[g.find_edge(int(a), int(b))] += w if b > a else -w
    return f


def test_acyclic_trivial():
    g = Grid((2, 2))
    assert is_acyclic(g, np.zeros(g.num_edges)) == (True, None)


def test_square_cycle_witness():
    g = Grid((2, 2))
    loop = [0, 2, 3, 1]
    ok, cyc = is_acyclic(g, square_loop(g, loop))
    assert not ok
    assert sorted(cyc) == [0, 1, 2, 3]
    # the witness follows the flux direction
    i = cyc.index(0)
    assert cyc[i:] + cyc[:i] == loop
    # below the threshold it does not count
    assert is_acyclic(g, square_loop(g, loop, 1e-12), eps=1e-10)[0]


def test_cancel_cycles_recovers_feasible_flow(square2):
    g, t = square2
    base = np.array([1.0, 0.0, 0.0, 1.0])  # all mass on 0 -> 2 -> 3
    np.testing.assert_array_equal(cancel_cycles(g, base), base)
    mixed = base + square_loop(g, [0, 2, 3, 1], 0.3)  # runs with the flow on 0->2->3
    np.testing.assert_allclose(cancel_cycles(g, mixed), base, atol=1e-15)


def test_cancel_cycles_random(rng):
    for _ in range(20):
        g = Grid((5, 5))
        f = rng.normal(size=g.num_edges)
        f2 = cancel_cycles(g, f)
        np.testing.assert_allclose(g.divergence(f2), g.divergence(f), atol=1e-12)
        assert np.all(np.abs(f2) <= np.abs(f) + 1e-15)
        assert np.abs(f2).sum() <= np.abs(f).sum()
        assert is_acyclic(g, f2)[0]


def test_decompose_line(line3):
    g, t = line3
    pm = decompose(g, np.array([1.0, 1.0]), t)
    assert len(pm) == 1
    assert pm.paths[0].tolist() == [0, 1, 2] and pm.weights.tolist() == [1.0]


def test_decompose_square_half_half(square2):
    g, t = square2
    # 1-DOF family f(s) = (s, 1-s, 1-s, s); the p=2 optimum is s = 1/2 by brute force
    s_grid = np.linspace(0, 1, 1001)
    prob = Problem(g, t, CostModel.power(2.0))
    s = s_grid[np.argmin([primal_energy(prob, [x, 1 - x, 1 - x, x]) for x in s_grid])]
    f = np.array([s, 1 - s, 1 - s, s])
    pm = decompose(g, f, t)
    assert sorted(map(list, (p.tolist() for p in pm.paths))) == [[0, 1, 3], [0, 2, 3]]
    np.testing.assert_allclose(pm.weights, [0.5, 0.5])


def test_decompose_empty():
    g = Grid((3, 3))
    pm = decompose(g, np.zeros(g.num_edges), SourceMeasure.zeros(g))
    assert len(pm) == 0 and pm.mass == 0.0
    inten = traffic_intensity(pm)
    assert not inten.scalar.any() and not inten.vector.any()
    assert wardrop_energy(pm, CostModel.power(2.0)) == 0.0


def test_decompose_errors(square2):
    g, t = square2
    with pytest.raises(CyclicFluxError) as exc:
        decompose(g, np.array([1.0, 0, 0, 1.0]) + square_loop(g, [0, 2, 3, 1], 0.3), t)
    assert sorted(exc.value.cycle) == [0, 1, 2, 3]
    with pytest.raises(DecompositionError, match="differs from source"):
        decompose(g, np.array([0.5, 0, 0, 1.0]), t)


@pytest.mark.parametrize("p,delta", [(1.5, 0.0), (2.0, 0.5), (3.0, 0.0)])
def test_decompose_solver_flux(rng, p, delta):
    g = Grid.unit_box(2, 10)
    x = rng.normal(size=g.num_nodes)
    t = SourceMeasure(g, x - x.mean())
    c = CostModel.power(p) if delta == 0 else CostModel.power_delta(p, delta)
    f, v, rep = solve(Problem(g, t, c))
    assert is_acyclic(g, f, 1e-10 * np.abs(f).max())[0]
    pm = decompose(g, f, t)
    # independent reconstruction and pushforward
    np.testing.assert_allclose(path_flux(g, pm.paths, pm.weights), f, atol=1e-9 * np.abs(f).max())
    start, end = np.zeros(g.num_nodes), np.zeros(g.num_nodes)
    for path, w in zip(pm.paths, pm.weights):
        start[path[0]] += w
        end[path[-1]] += w
    np.testing.assert_allclose(start, t.negative, atol=1e-9)
    np.testing.assert_allclose(end, t.positive, atol=1e-9)
    assert pm.mass == pytest.approx(t.mass, rel=1e-9)
    inten = traffic_intensity(pm)
    np.testing.assert_allclose(inten.scalar, np.abs(inten.vector), atol=1e-12)
    assert wardrop_energy(pm, c) == pytest.approx(rep.primal_energy, rel=1e-9)
    for path in pm.paths:
        assert len(set(path.tolist())) == path.size
    assert len(pm) <= g.num_edges + np.count_nonzero(t.values)


def test_decompose_deterministic(rng):
    g = Grid.unit_box(2, 8)
    x = rng.normal(size=g.num_nodes)
    t = SourceMeasure(g, x - x.mean())
    f, _, _ = solve(Problem(g, t, CostModel.power(2.0)))
    a, b = decompose(g, f, t), decompose(g, f.copy(), t)
    assert [p.tolist() for p in a.paths] == [p.tolist() for p in b.paths]
    np.testing.assert_array_equal(a.weights, b.weights)


def test_opposite_paths_cancel():
    g = Grid((2,))
    pm = PathMeasure(g, [[0, 1], [1, 0]], [1.0, 1.0])
    inten = traffic_intensity(pm)
    assert inten.scalar.tolist() == [2.0] and inten.vector.tolist() == [0.0]
    # Wardrop energy uses i = 2: H(2) = 2 for p = 2, while zero flux costs 0
    assert wardrop_energy(pm, CostModel.power(2.0)) == 2.0
    assert pm.boundary().tolist() == [0.0, 0.0]


def test_line_wardrop_energy(line3):
    g, t = line3
    pm = decompose(g, np.array([1.0, 1.0]), t)
    assert wardrop_energy(pm, CostModel.power(2.0)) == 1.0


def test_path_measure_validation():
    g = Grid((3, 3))
    with pytest.raises(ValueError, match="not adjacent"):
        PathMeasure(g, [[0, 2]], [1.0])
    with pytest.raises(ValueError, match="not adjacent"):
        PathMeasure(g, [[2, 3]], [1.0])  # row wrap
    with pytest.raises(ValueError, match="repeats"):
        PathMeasure(g, [[0, 1, 0]], [1.0])
    with pytest.raises(ValueError, match="positive"):
        PathMeasure(g, [[0, 1]], [0.0])
    with pytest.raises(ValueError):
        PathMeasure(g, [[0, 1]], [1.0, 2.0])


def test_equilibrium_symmetric_square(square2):
    g, t = square2
    prob = Problem(g, t, CostModel.power(2.0))
    f, v, _ = solve(prob)
    pm = decompose(g, f, t)
    rep = equilibrium_check(pm, v, prob.cost)
    assert rep.passed, rep.violations
    # both routes: 2 edges, each toll h * H'(1/2) = 1/2, total 1 = v(3) - v(0)
    assert v[3] - v[0] == pytest.approx(1.0)
    np.testing.assert_allclose(rep.length_mismatch, 0.0, atol=1e-10)


def test_equilibrium_line(line3):
    g, t = line3
    f, v, _ = solve(Problem(g, t, CostModel.power(3.0)))
    assert equilibrium_check(decompose(g, f, t), v, CostModel.power(3.0)).passed


def test_equilibrium_detects_rerouted_mass(square2):
    g, t = square2
    c = CostModel.power(2.0)
    _, v, _ = solve(Problem(g, t, c))
    # everything on one route: that route's tolls double, the other is free
    pm = PathMeasure(g, [[0, 2, 3]], [1.0])
    rep = equilibrium_check(pm, v, c)
    reasons = {r for _, r, _ in rep.violations}
    assert not rep.passed
    assert reasons == {"length differs from potential gain", "cheaper route exists"}
    assert rep.max_shortcut == pytest.approx(2.0)


def test_equilibrium_delta_cost(rng):
    g = Grid.unit_box(2, 8)
    x = rng.normal(size=g.num_nodes)
    t = SourceMeasure(g, x - x.mean())
    c = CostModel.power_delta(2.0, 0.5)
    f, v, _ = solve(Problem(g, t, c))
    rep = equilibrium_check(decompose(g, f, t), v, c)
    assert rep.passed, rep.violations[:3]
