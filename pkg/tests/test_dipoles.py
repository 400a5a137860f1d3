import math

import numpy as np
import pytest
from scipy.integrate import dblquad

from congested_ot.beckmann import sobolev_dual_norm
from congested_ot.dipoles import (
    Dipole,
    cone_energy_constant,
    cone_field,
    cones_disjoint,
    dipole_cloud,
    dipole_source,
    fit_slope,
    flux_energy,
    place_cloud,
    sample_Vab,
    scaling_experiment,
    unit_ball_volume,
)
from congested_ot.grid import Grid


def test_dipole_source_basics():
    g = Grid.unit_box(2, 8)
    d = Dipole((0.2, 0.3), (0.7, 0.6))
    t = dipole_source(g, d).values
    assert t.sum() == 0 and np.count_nonzero(t) == 2
    assert t[g.nearest_node(d.a)] == -1 and t[g.nearest_node(d.b)] == 1
    t2 = dipole_source(g, Dipole(d.a, d.b, mass=2.0)).values
    assert sorted(t2[t2 != 0]) == [-2.0, 2.0]


def test_dipole_source_errors():
    g = Grid.unit_box(2, 8)
    with pytest.raises(ValueError, match="same node"):
        dipole_source(g, Dipole((0.51, 0.51), (0.53, 0.52)))
    with pytest.raises(ValueError, match="strictly inside"):
        dipole_source(g, Dipole((0.0, 0.5), (0.5, 0.5)))
    with pytest.raises(ValueError):
        Dipole((0.1, 0.1), (0.1, 0.1))
    with pytest.raises(ValueError):
        Dipole((0.1, 0.1), (0.2, 0.1), mass=0.0)
    with pytest.raises(ValueError):
        dipole_source(Grid.unit_box(3, 4), Dipole((0.1, 0.1), (0.6, 0.1)))


def test_cone_field_formula_points():
    d = Dipole((0.0, 0.0), (2.0, 0.0))  # tau = 1, m = (1, 0)
    w = unit_ball_volume(1)
    V = cone_field([[0.5, 0.2], [1.5, -0.3], [1.0, 1.5], [0.5, 0.6]], d)
    np.testing.assert_allclose(V[0], np.array([0.5, 0.2]) / 0.5**2 / w)
    np.testing.assert_allclose(V[1], np.array([0.5, 0.3]) / 0.5**2 / w)
    assert not V[2].any() and not V[3].any()  # outside the double cone


def test_sampled_field_support_and_balance():
    n = 128
    g = Grid.unit_box(2, n)
    d = Dipole((0.3 + 1e-3, 0.5 + 1e-3), (0.7 + 1e-3, 0.5 + 1e-3))
    f = sample_Vab(g, d)
    x = g.edge_midpoints
    y = x - d.midpoint
    inside = np.abs(y[:, 0]) + np.abs(y[:, 1]) <= 0.5 * d.separation + g.h
    assert not f[~inside].any()
    # mass through the mid-plane x0 = 0.5 is one unit
    plane = (g.edge_axes == 0) & np.isclose(x[:, 0], 0.5)
    assert f[plane].sum() == pytest.approx(1.0, rel=2e-2)


def test_weak_divergence_converges():
    d = Dipole((0.3, 0.45), (0.7, 0.52))
    phi = lambda x: x[..., 0] ** 2 + 0.5 * x[..., 0] * x[..., 1] - x[..., 1] ** 2 + x[..., 1]
    errs = []
    for n in (32, 64):
        g = Grid.unit_box(2, n)
        val = g.divergence(sample_Vab(g, d)) @ phi(g.node_centers)
        errs.append(abs(val - (phi(np.array(d.b)) - phi(np.array(d.a)))))
    assert errs[1] < errs[0] / 2
    assert errs[1] < 0.01


def _rotate_field(g, f):
    """Field of the 90 degree rotation x -> c + R(x - c), R = [[0, -1], [1, 0]]."""
    c = 0.5 * g.lengths
    key = lambda p: tuple(np.round(p / g.h * 2).astype(int))
    index = {key(p): e for e, p in enumerate(g.edge_midpoints)}
    out = np.zeros_like(f)
    for e, p in enumerate(g.edge_midpoints):
        q = c + np.array([-(p[1] - c[1]), p[0] - c[0]])
        e2 = index[key(q)]
        # axis-0 component becomes the axis-1 one; axis-1 turns into minus axis-0
        out[e2] = f[e] if g.edge_axes[e] == 0 else -f[e]
    return out


@pytest.mark.parametrize("a,b", [((0.27, 0.5), (0.73, 0.5)), ((0.33, 0.31), (0.64, 0.62))])
def test_rotation_covariance(a, b):
    g = Grid.unit_box(2, 32)
    c = np.array([0.5, 0.5])
    R = np.array([[0.0, -1.0], [1.0, 0.0]])
    d = Dipole(a, b)
    dr = Dipole(tuple(c + R @ (np.array(a) - c)), tuple(c + R @ (np.array(b) - c)))
    np.testing.assert_allclose(sample_Vab(g, dr), _rotate_field(g, sample_Vab(g, d)), atol=1e-9)


def test_cone_must_fit():
    g = Grid.unit_box(2, 16)
    with pytest.raises(ValueError, match="exits the domain"):
        sample_Vab(g, Dipole((0.05, 0.1), (0.5, 0.1)))


def test_cone_constant_against_quadrature():
    N, p = 2, 1.5
    s = 1.0
    tau = s / 2
    w = unit_ball_volume(N - 1)
    # left half: rho = y1 + tau in (0, tau), |y'| < rho; right half is the mirror image
    integrand = lambda yp, rho: (math.hypot(rho, yp) / rho**2 / w) ** p
    half, _ = dblquad(integrand, 0.0, tau, lambda r: -r, lambda r: r, epsabs=1e-11, epsrel=1e-10)
    assert cone_energy_constant(N, p) == pytest.approx(2 * half, rel=1e-7)
    assert cone_energy_constant(1, 3.0) == 1.0
    assert cone_energy_constant(2, 2.0) == math.inf


def test_norm_below_cone_competitor():
    g = Grid.unit_box(2, 64)
    d = Dipole((0.3 + 1e-3, 0.5 + 1e-3), (0.7 + 1e-3, 0.5 + 1e-3))
    p = 1.5
    n = sobolev_dual_norm(dipole_source(g, d), p)
    cone = flux_energy(g, sample_Vab(g, d), p) ** (1 / p)
    continuum = (cone_energy_constant(2, p) * d.separation**0.5) ** (1 / p)
    assert n <= 1.05 * min(cone, continuum)


def test_one_dimensional_dipole_bounded():
    res = scaling_experiment(1, 3.0, [0.5, 0.25, 0.125], [1 / 16, 1 / 64, 1 / 256])
    for s in (0.5, 0.25, 0.125):
        norms = [n for _, n in res.refinement(s)]
        np.testing.assert_allclose(norms, s ** (1 / 3), rtol=1e-8)
    assert res.slope == pytest.approx(1.0, abs=1e-8)


def test_scaling_degenerate_and_errors():
    res = scaling_experiment(2, 1.5, [0.25], [1 / 16])
    assert len(res.rows) == 1 and res.slope is None and "degenerate" in res.flag
    with pytest.raises(ValueError, match="decreasing"):
        scaling_experiment(2, 1.5, [0.1, 0.2], [1 / 16])
    with pytest.raises(ValueError, match="below spacing"):
        scaling_experiment(2, 1.5, [0.25, 0.01], [1 / 16])
    with pytest.raises(ValueError):
        scaling_experiment(4, 1.5, [0.25], [1 / 16])
    with pytest.raises(ValueError):
        scaling_experiment(2, 1.0, [0.25], [1 / 16])


def test_fit_slope_offset_exponent():
    s = np.array([0.25, 0.125, 0.0625])
    E = 3.0 * s**0.5 - 0.2
    slope, offset, flag = fit_slope(s, E)
    assert offset == pytest.approx(0.5, abs=1e-12)
    assert slope > 0.5  # the constant offset biases the plain fit upwards
    assert flag is None


def test_cones_disjoint_geometry():
    a = Dipole((0.2, 0.5), (0.4, 0.5))          # diamond |x-0.3| + |y-0.5| <= 0.1
    touching = Dipole((0.4, 0.5), (0.6, 0.5))   # shares the vertex (0.4, 0.5)
    apart = Dipole((0.45, 0.5), (0.65, 0.5))
    corner = Dipole((0.33, 0.62), (0.45, 0.62))  # bounding boxes overlap, diamonds do not
    assert not cones_disjoint(a, touching)
    assert cones_disjoint(a, apart)
    assert cones_disjoint(a, corner)
    tilted = Dipole((0.3, 0.45), (0.3, 0.55))   # vertical, inside a's diamond
    assert not cones_disjoint(a, tilted)


def test_cloud_single_and_overlap():
    g = Grid.unit_box(2, 64)
    r = dipole_cloud(g, 1)
    assert r.converged
    assert r.path_mass == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError, match="overlap"):
        dipole_cloud(g, 2, dipoles=[Dipole((0.2, 0.5), (0.4, 0.5)), Dipole((0.35, 0.5), (0.6, 0.5))])


def test_place_cloud():
    g = Grid.unit_box(2, 128)
    seps = 0.25 * 2 ** (-4 / 15 * np.arange(16))
    ds = place_cloud(g, seps)
    assert len(ds) == 16
    for d in ds:
        assert np.all(d.midpoint - d.half_extent() > 0)
        assert np.all(d.midpoint + d.half_extent() < 1)
    with pytest.raises(ValueError, match="two cells"):
        place_cloud(g, [0.25, 0.01])
    with pytest.raises(ValueError, match="does not fit"):
        place_cloud(g, [0.45] * 9)
