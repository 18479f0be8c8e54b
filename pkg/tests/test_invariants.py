import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from confflow import conformal as cf
from confflow import geometry as geo
from confflow import invariants as inv
from conftest import generic_data, shipped_setting


@pytest.fixture(scope="module")
def setting():
    return shipped_setting(3)


@pytest.fixture(scope="module")
def estimates(setting):
    model = setting[0]
    return inv.estimate_Y(model), inv.estimate_Qb(model)


def ratio_Y(model, phi):
    r = 2 * model.n / (model.n - 2)
    return cf.energy(model, phi) / (model.w_bulk @ phi**r) ** (2 / r)


def ratio_Q(model, phi):
    s = 2 * (model.n - 1) / (model.n - 2)
    return cf.energy(model, phi) / (model.w_bdry @ phi[[0, -1]] ** s) ** (2 / s)


def test_estimates_are_consistent(setting, estimates):
    model = setting[0]
    Y, Q = estimates
    assert not Y.flagged and not Q.flagged
    assert Y.value == pytest.approx(ratio_Y(model, Y.phi), rel=1e-12)
    assert Q.value == pytest.approx(ratio_Q(model, Q.phi), rel=1e-10)
    assert Y.value < 0 and Q.value < 0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=4, max_size=4))
def test_estimates_bound_random_fields(coef):
    model = shipped_setting(3)[0]
    Y, Q = inv.estimate_Y(model, restarts=1), inv.estimate_Qb(model, restarts=1)
    x = model.grid
    phi = np.exp(coef[0] * np.cos(np.pi * x) + coef[1] * np.sin(2 * np.pi * x) + coef[2] * x + coef[3] * x**2)
    assert Y.value <= ratio_Y(model, phi) + 1e-10 * abs(Y.value)
    assert Q.value <= ratio_Q(model, phi) + 1e-10 * abs(Q.value)


@pytest.mark.parametrize("n", [3, 4])
def test_invariance_under_constant_rescaling(n):
    s = 1.7
    R_F = -(n - 1) * (n - 2)
    a = geo.build_warped_model(n, 1.0, "1 + 0.2 * x", R_F, 81)
    b = geo.build_warped_model(n, s, f"{s} * (1 + 0.2 * x / {s})", R_F, 81)
    assert inv.estimate_Y(a).value == pytest.approx(inv.estimate_Y(b).value, rel=1e-8)
    assert inv.estimate_Qb(a).value == pytest.approx(inv.estimate_Qb(b).value, rel=1e-8)


def test_Q_is_minus_infinity_without_bulk_coercivity():
    m = geo.build_synthetic_model(3, 4.0, 81, -50.0, (-1.0, -1.0))
    est = inv.estimate_Qb(m)
    assert est.value == -np.inf and est.flagged


def test_yab_limit(setting):
    model, _, pd = setting
    res = inv.y_ab(model, pd)
    assert res.preserve_residual < 1e-13
    assert res.residuals.interior < 1e-7 and res.residuals.boundary < 1e-7
    assert res.Y_ab == pytest.approx(-res.lam)
    assert inv.scaling_consistent(model, res)


def test_sandwich_inequality(setting, estimates):
    model, _, pd = setting
    Y, Q = estimates
    C = inv.sandwich_constant(model, pd)
    assert C == pytest.approx(min(np.min(-pd.f) ** (1 / 3), 4 * np.min(-pd.h) ** 0.5))
    for a, b in ((1.0, 1.0), (0.2, 3.0), (4.0, 0.3)):
        pdw = pd.with_weights(a, b)
        assert inv.sandwich_holds(model, pdw, Y.value, Q.value, inv.y_ab(model, pdw).Y_ab)


def test_yab_depends_continuously_on_weights(setting):
    model, _, pd = setting
    gaps = inv.continuity_probe(model, pd, [1e-2, 1e-3, 1e-4])
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-3


def test_yab_is_monotone_in_weights(setting):
    model, _, pd = setting
    base = inv.y_ab(model, pd).Y_ab
    assert inv.y_ab(model, pd.with_weights(2.0, 1.0)).Y_ab > base
    assert inv.y_ab(model, pd.with_weights(1.0, 2.0)).Y_ab > base


def test_ab_search_on_generic_data(setting):
    model = setting[0]
    f, h = generic_data(model)
    r = inv.ab_search(model, f, h)
    assert abs(r.rho - 1) < 1e-6
    assert r.residual_R < 1e-6 and r.residual_h < 1e-6
    assert max(r.scaling_defects) < 1e-12
    curv = cf.curvatures(model, r.u_scaled)
    np.testing.assert_allclose(curv.h_g, h, rtol=1e-6)
    ss = [s for s, _ in r.evaluations]
    assert ss == sorted(ss) and 0.0 in ss and 1.0 in ss
