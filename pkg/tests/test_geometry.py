import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from confflow import geometry as geo
from confflow.errors import ConfigError


def scalar_curvature_sympy(coords, metric_diag):
    """Scalar curvature of a diagonal metric from Christoffel symbols."""
    dim = len(coords)
    g = sp.diag(*metric_diag)
    ginv = sp.diag(*[1 / m for m in metric_diag])
    Gam = [[[sum(ginv[a, d] * (sp.diff(g[d, b], coords[c]) + sp.diff(g[d, c], coords[b]) - sp.diff(g[b, c], coords[d])) for d in range(dim)) / 2 for c in range(dim)] for b in range(dim)] for a in range(dim)]

    def ricci(b, c):
        out = 0
        for a in range(dim):
            out += sp.diff(Gam[a][b][c], coords[a]) - sp.diff(Gam[a][b][a], coords[c])
            for d in range(dim):
                out += Gam[a][a][d] * Gam[d][b][c] - Gam[a][c][d] * Gam[d][b][a]
        return out

    return sp.simplify(sum(ginv[b, b] * ricci(b, b) for b in range(dim)))


@pytest.mark.parametrize("n, k", [(3, -1), (3, 1), (4, -1)])
def test_warped_curvature_matches_christoffel_oracle(n, k):
    x = sp.Symbol("x")
    ang = sp.symbols(f"t1:{n}")
    psi = sp.exp(x) * sp.Rational(1, 2) + sp.Rational(1, 2)
    sn = sp.sinh if k < 0 else sp.sin
    fiber = [sp.Integer(1)]
    for j in range(1, n - 1):
        trig = sn if j == 1 else sp.sin
        fiber.append(fiber[-1] * trig(ang[j - 1]) ** 2)
    R = scalar_curvature_sympy((x, *ang), [sp.Integer(1)] + [psi**2 * f for f in fiber])
    R_F = k * (n - 1) * (n - 2)
    point = {a: sp.Rational(7, 10) for a in ang}
    R_x = sp.lambdify(x, R.subs(point), "numpy")
    model = geo.build_warped_model(n, 1.0, "0.5 * exp(x) + 0.5", R_F, 33)
    np.testing.assert_allclose(model.R_bg, R_x(model.grid), rtol=1e-12, atol=1e-12)
    dpsi = sp.lambdify(x, sp.diff(psi, x) / psi, "numpy")
    np.testing.assert_allclose(model.h_bg, [-dpsi(0.0), dpsi(1.0)], rtol=1e-13)


def test_weights_and_measures():
    m = geo.build_warped_model(4, 2.0, "1 + x^2", -6, 401)
    exact_volume = sp.integrate((1 + sp.Symbol("x") ** 2) ** 3, (sp.Symbol("x"), 0, 2))
    assert m.volume == pytest.approx(float(exact_volume), rel=1e-4)
    assert m.area == pytest.approx(1 + 5**3)
    assert m.dx == pytest.approx(2.0 / 400)
    assert m.conf_const == pytest.approx(6.0)


def test_constant_psi_has_product_curvature():
    m = geo.build_warped_model(3, 1.0, 2.0, -2, 50)
    np.testing.assert_allclose(m.R_bg, -0.5)
    np.testing.assert_array_equal(m.h_bg, [0.0, 0.0])


def test_table_matches_expression_to_second_order():
    errs = []
    for N in (41, 81, 161):
        x = np.linspace(0, 1, N)
        expr = geo.build_warped_model(3, 1.0, "cosh(x)", -2, N)
        table = geo.build_warped_model(3, 1.0, np.cosh(x), -2, N)
        errs.append(np.max(np.abs(expr.R_bg - table.R_bg)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders > 1.8)


def test_laplacian_exact_on_quadratics_at_unit_warp():
    m = geo.build_synthetic_model(3, 1.5, 31, -1.0, (-1.0, -1.0))
    u = 3 * m.grid**2 - m.grid + 2
    np.testing.assert_allclose(geo.laplacian(m, u), 6.0, atol=1e-9)
    np.testing.assert_allclose(geo.normal_derivative(m, u), [1.0, 6 * 1.5 - 1], rtol=1e-9)


def test_laplacian_second_order_on_warped_model():
    x = sp.Symbol("x")
    n = 3
    psi, u = 1 + 0.3 * sp.sin(x), sp.cos(2 * x)
    exact = sp.lambdify(x, sp.diff(psi ** (n - 1) * sp.diff(u, x), x) / psi ** (n - 1), "numpy")
    errs = []
    for N in (51, 101, 201, 401):
        m = geo.build_warped_model(n, 1.0, "1 + 0.3 * sin(x)", -2, N)
        uu = np.cos(2 * m.grid)
        errs.append(np.max(np.abs(geo.laplacian(m, uu) - exact(m.grid))))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders > 1.8), orders


def test_normal_derivative_converges():
    errs = []
    for N in (51, 101, 201, 401):
        m = geo.build_warped_model(3, 1.0, "1 + 0.3 * sin(x)", -2, N)
        u = np.cos(2 * m.grid)
        exact = np.array([0.0, -2 * np.sin(2.0)])
        errs.append(np.max(np.abs(geo.normal_derivative(m, u) - exact)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders > 0.9), orders


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 6), st.integers(16, 80), st.integers(0, 2**32 - 1))
def test_green_identity_is_exact(n, N, seed):
    rng = np.random.default_rng(seed)
    m = geo.build_warped_model(n, 1.3, "1.2 + 0.5 * sin(2 * x)", -1.0, N)
    u, v = rng.standard_normal((2, N))
    lhs = m.w_bulk @ (v * geo.laplacian(m, u))
    rhs = m.w_bdry @ (v[[0, -1]] * geo.normal_derivative(m, u)) - v @ geo.stiffness_apply(m, u)
    scale = np.abs(v) @ np.abs(geo.stiffness_apply(m, np.abs(u))) + abs(lhs) + 1.0
    assert abs(lhs - rhs) <= 200 * np.finfo(float).eps * scale


def test_stiffness_bands_match_apply(rng):
    m = geo.build_warped_model(5, 1.0, "exp(x)", -12, 40)
    d, o = geo.stiffness_bands(m)
    K = np.diag(d) + np.diag(o, 1) + np.diag(o, -1)
    u = rng.standard_normal(40)
    np.testing.assert_allclose(K @ u, geo.stiffness_apply(m, u), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(K @ np.ones(40), 0.0, atol=1e-9)
    assert u @ K @ u > 0


def test_integrals():
    m = geo.build_warped_model(3, 1.0, "1", -2, 101)
    assert geo.integrate_bulk(m, m.grid) == pytest.approx(0.5)
    assert geo.integrate_boundary(m, [2.0, 3.0]) == pytest.approx(5.0)
    np.testing.assert_array_equal(geo.boundary_values(m.grid), [0.0, 1.0])


def test_model_is_immutable():
    m = geo.build_warped_model(3, 1.0, "1", -2, 20)
    with pytest.raises(ValueError):
        m.R_bg[0] = 1.0
    with pytest.raises(AttributeError):
        m.n = 4


def test_with_background_keeps_weights():
    m = geo.build_warped_model(3, 1.0, "exp(x)", -2, 20)
    s = m.with_background(-1.0, (-2.0, -3.0))
    assert s.mode == "synthetic"
    np.testing.assert_array_equal(s.w_bulk, m.w_bulk)
    np.testing.assert_array_equal(s.k_face, m.k_face)
    np.testing.assert_array_equal(s.R_bg, -1.0)


@pytest.mark.parametrize(
    "args",
    [
        (2, 1.0, "1", -1, 50),
        (3, 0.0, "1", -1, 50),
        (3, 1.0, "1", -1, 10),
        (3, 1.0, "x - 0.5", -1, 50),
        (3, 1.0, np.ones(7), -1, 50),
        (3.5, 1.0, "1", -1, 50),
    ],
)
def test_invalid_models_rejected(args):
    with pytest.raises(ConfigError):
        geo.build_warped_model(*args)


def test_synthetic_model_validation():
    with pytest.raises(ConfigError):
        geo.build_synthetic_model(3, 1.0, 20, np.ones(5), (-1, -1))
    with pytest.raises(ConfigError):
        geo.build_synthetic_model(3, 1.0, 20, -1.0, (-1, -1, -1))
    m = geo.build_synthetic_model(3, 1.0, 20, -1.0, (-1, -2))
    assert np.isnan(m.R_F) and m.volume == pytest.approx(1.0) and m.area == 2.0
