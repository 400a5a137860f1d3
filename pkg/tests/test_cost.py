import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from congested_ot.cost import CostModel, check_growth


def numeric_conjugate(c: CostModel, xi: float) -> float:
    """sup_z (xi z - H(|z|)) by bounded scalar search (an independent oracle)."""
    zmax = 10.0 + 10 * abs(xi) ** (1 / (c.p - 1)) / c.alpha ** (1 / (c.p - 1))
    res = minimize_scalar(lambda z: -(abs(xi) * z - c.eval_H(None, z)), bounds=(0, zmax),
                          method="bounded", options={"xatol": 1e-12})
    return max(-res.fun, 0.0)


COSTS = [CostModel.power(2.0), CostModel.power(1.5, alpha=2.0), CostModel.power(3.0),
         CostModel.power_delta(2.0, 0.5), CostModel.power_delta(1.3, 0.2, alpha=0.5)]


@pytest.mark.parametrize("c", COSTS)
@pytest.mark.parametrize("xi", [-3.0, -0.4, 0.0, 0.3, 1.7])
def test_conjugate_matches_numeric_sup(c, xi):
    assert c.eval_H_star(None, xi) == pytest.approx(numeric_conjugate(c, xi), rel=1e-7, abs=1e-9)


@pytest.mark.parametrize("c", COSTS)
def test_gradient_and_hessian_finite_differences(c):
    for xi in [-2.1, -0.8, 0.9, 2.5]:
        e = 1e-6
        fd = (c.eval_H_star(None, xi + e) - c.eval_H_star(None, xi - e)) / (2 * e)
        assert c.eval_grad_H_star(None, xi) == pytest.approx(fd, rel=1e-6, abs=1e-9)
        fd2 = (c.eval_grad_H_star(None, xi + e) - c.eval_grad_H_star(None, xi - e)) / (2 * e)
        if abs(abs(xi) - c.delta) > 1e-3:
            assert float(c.hess_H_star(xi)) == pytest.approx(fd2, rel=1e-5, abs=1e-8)


def test_closed_forms_power():
    c = CostModel.power(2.0)
    assert c.eval_H(None, 3.0) == 4.5
    assert c.eval_H_star(None, -2.0) == 2.0
    assert c.eval_grad_H_star(None, -2.0) == -2.0
    c3 = CostModel.power(3.0)  # q = 3/2
    assert c3.eval_H_star(None, 4.0) == pytest.approx(4.0**1.5 / 1.5)


def test_delta_flat_region():
    c = CostModel.power_delta(2.0, 0.5)
    for xi in [-0.5, -0.2, 0.0, 0.49]:
        assert c.eval_H_star(None, xi) == 0.0
        assert c.eval_grad_H_star(None, xi) == 0.0
    assert c.eval_H_star(None, 1.5) == pytest.approx(0.5)
    assert float(c.dH(0.0)) == 0.5


def test_hessian_at_zero():
    assert float(CostModel.power(3.0).hess_H_star(0.0)) == np.inf      # q < 2
    assert float(CostModel.power(1.5).hess_H_star(0.0)) == 0.0        # q > 2
    assert float(CostModel.power(2.0).hess_H_star(0.0)) == 1.0
    assert float(CostModel.power_delta(3.0, 0.1).hess_H_star(0.0)) == 0.0


def test_weights():
    w = np.array([1.0, 2.0, 4.0])
    c = CostModel.power(2.0, weights=w)
    np.testing.assert_allclose(c.H(np.ones(3)), 0.5 * w)
    np.testing.assert_allclose(c.H_star(np.ones(3)), 0.5 / w)
    assert c.eval_H(2, 1.0) == 2.0
    with pytest.raises(ValueError):
        c.check_grid(4)


@pytest.mark.parametrize("kwargs", [dict(p=1.0), dict(p=0.5), dict(p=np.inf), dict(alpha=0.0),
                                    dict(kind="power", delta=0.1), dict(kind="cubic"),
                                    dict(kind="power_delta", delta=-1.0)])
def test_validation(kwargs):
    with pytest.raises(ValueError):
        CostModel(**kwargs)
    with pytest.raises(ValueError):
        CostModel.power(2.0, weights=[1.0, 0.0])


def test_negative_argument_rejected():
    with pytest.raises(ValueError):
        CostModel.power(2.0).eval_H(0, -1.0)


def test_check_growth():
    c = CostModel.power(2.0)
    rep = check_growth(c, 0.5, [0.0, 0.5, 1.0, 3.0, 100.0])
    assert rep.passed
    # H(z) = z^2/2 cannot dominate z^2 - 1 for large z
    rep1 = check_growth(c, 1.0, [0.0, 1.0, 100.0])
    assert rep1.upper_ok and not rep1.lower_ok and rep1.lower_violations == [100.0]
    assert 0.5 <= rep1.largest_lambda < 1.0
    with pytest.raises(ValueError):
        check_growth(c, 0.0, [1.0])


@settings(max_examples=150, deadline=None)
@given(p=st.floats(1.05, 6.0), delta=st.floats(0.0, 2.0), alpha=st.floats(0.2, 5.0),
       z=st.floats(0.0, 50.0), xi=st.floats(-50.0, 50.0))
def test_fenchel_young(p, delta, alpha, z, xi):
    c = CostModel.power_delta(p, delta, alpha)
    Hz = c.eval_H(None, z)
    # inequality for any pair
    assert Hz + c.eval_H_star(None, xi) >= z * xi - 1e-9 * (1 + abs(z * xi) + Hz)
    # equality at the subgradient
    s = float(c.dH(z))
    lhs = Hz + c.eval_H_star(None, s)
    assert lhs == pytest.approx(z * s, rel=1e-9, abs=1e-9)
    # and dH* inverts dH away from the flat part
    if z > 1e-3:
        assert c.eval_grad_H_star(None, s) == pytest.approx(z, rel=1e-7)


def test_check_growth_delta_example():
    # H(100) = 10*100 + 100^2/2 = 6000 <= 10001, but 6000 < 100^2 - 1
    rep = check_growth(CostModel.power_delta(2.0, 10.0), 1.0, [100.0])
    assert rep.upper_ok and not rep.lower_ok
    assert check_growth(CostModel.power_delta(2.0, 10.0), 1.0, [0.0]).passed
