"""Conformal operators and the functionals driving the normalized flow.

Every functional accepts an optional subcritical exponent ``q``.  With
``r = q + 1`` and ``s = (q + 3) / 2`` the constraint reads

    a (int -f u^r)^(2/r) + 2(n-1) b (int_bd -h u^s)^(2/s),

and ``q = (n+2)/(n-2)`` (the default) recovers the critical exponents
2n/(n-2) and 2(n-1)/(n-2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError
from .geometry import (
    BoundaryPair,
    Field,
    WarpedModel,
    boundary_values,
    laplacian,
    normal_derivative,
    stiffness_apply,
    stiffness_bands,
)


@dataclass(frozen=True, eq=False)
class ProblemData:
    """Prescribed curvatures ``f < 0`` (nodes) and ``h < 0`` (ends), weights a, b > 0."""

    a: float
    b: float
    f: Field
    h: BoundaryPair

    def __post_init__(self):
        f = np.array(self.f, dtype=float)
        h = np.array(self.h, dtype=float)
        f.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "h", h)
        errors = []
        if not self.a > 0:
            errors.append(f"a must be positive, got {self.a}")
        if not self.b > 0:
            errors.append(f"b must be positive, got {self.b}")
        if f.ndim != 1 or not np.all(np.isfinite(f)) or np.any(f >= 0):
            errors.append("f must be finite and strictly negative at every node")
        if h.shape != (2,) or not np.all(np.isfinite(h)) or np.any(h >= 0):
            errors.append("h must be a pair of strictly negative values")
        if errors:
            raise ConfigError("; ".join(errors), errors)

    def with_weights(self, a, b) -> "ProblemData":
        return ProblemData(a, b, self.f, self.h)


@dataclass(frozen=True)
class CurvatureData:
    R_g: Field
    h_g: BoundaryPair


@dataclass(frozen=True)
class ScalarsTriple:
    alpha: float
    beta: float
    lam: float


def critical_q(n) -> float:
    return (n + 2) / (n - 2)


def exponents(n, q=None):
    """Bulk and boundary exponents (r, s) of the constraint."""
    q = critical_q(n) if q is None else float(q)
    return q + 1.0, (q + 3.0) / 2.0


def _check_problem(model, pd):
    if pd.f.shape != (model.size,):
        raise ConfigError(f"f must have {model.size} entries, got {pd.f.shape}")


def require_positive(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise NumericalError("conformal factor has non-finite entries")
    if np.any(u <= 0):
        raise NumericalError(f"conformal factor must be positive (min {u.min():.3e})")
    return u


def apply_L(model: WarpedModel, u) -> Field:
    """Conformal Laplacian -c lap u + R u at every node."""
    return -model.conf_const * laplacian(model, u) + model.R_bg * np.asarray(u, dtype=float)


def apply_B(model: WarpedModel, u) -> BoundaryPair:
    """Boundary operator d_nu u + (n-2)/2 h u."""
    return normal_derivative(model, u) + 0.5 * (model.n - 2) * model.h_bg * boundary_values(u)


def curvatures(model: WarpedModel, u) -> CurvatureData:
    u = require_positive(u)
    n = model.n
    R_g = u ** (-(n + 2) / (n - 2)) * apply_L(model, u)
    h_g = 2.0 / (n - 2) * boundary_values(u) ** (-n / (n - 2)) * apply_B(model, u)
    return CurvatureData(R_g, h_g)


def energy_bands(model: WarpedModel):
    """(diag, off) of the symmetric tridiagonal energy matrix A, E[u] = u.A.u."""
    diag, off = stiffness_bands(model)
    c = model.conf_const
    diag = c * diag + model.w_bulk * model.R_bg
    diag[[0, -1]] += 2 * (model.n - 1) * model.w_bdry * model.h_bg
    return diag, c * off


def energy_matrix(model: WarpedModel) -> np.ndarray:
    diag, off = energy_bands(model)
    return np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)


def energy_apply(model: WarpedModel, u) -> Field:
    u = np.asarray(u, dtype=float)
    out = model.conf_const * stiffness_apply(model, u) + model.w_bulk * model.R_bg * u
    out[[0, -1]] += 2 * (model.n - 1) * model.w_bdry * model.h_bg * u[[0, -1]]
    return out


def energy(model: WarpedModel, u) -> float:
    """Total scalar plus mean curvature functional of g = u^(4/(n-2)) g0."""
    u = np.asarray(u, dtype=float)
    return float(u @ energy_apply(model, u))


def _integrals(model, u, pd, q):
    r, s = exponents(model.n, q)
    Sf = float(model.w_bulk @ (-pd.f * u**r))
    Sh = float(model.w_bdry @ (-pd.h * boundary_values(u) ** s))
    return Sf, Sh


def constraint(model, u, pd: ProblemData, q=None) -> float:
    _check_problem(model, pd)
    u = np.abs(np.asarray(u, dtype=float))
    r, s = exponents(model.n, q)
    Sf, Sh = _integrals(model, u, pd, q)
    return pd.a * Sf ** (2 / r) + 2 * (model.n - 1) * pd.b * Sh ** (2 / s)


def normalize(model, u, pd: ProblemData, q=None):
    """Return ``(mu * u, mu)`` with constraint(mu * u) == 1.

    The rescaling is repeated (at most three times) to squeeze the last ulp
    of drift out of the fractional powers.
    """
    u = require_positive(u)
    mu = 1.0
    for _ in range(3):
        C = constraint(model, u, pd, q)
        if C <= 0 or not np.isfinite(C):
            raise NumericalError(f"constraint value {C} cannot be normalized")
        if C == 1.0:
            break
        k = C ** -0.5
        u = u * k
        mu *= k
    return u, mu


def functionals(model, u, pd: ProblemData, q=None) -> ScalarsTriple:
    u = require_positive(u)
    _check_problem(model, pd)
    r, s = exponents(model.n, q)
    Sf, Sh = _integrals(model, u, pd, q)
    alpha = Sf ** (1 - 2 / r) / pd.a
    beta = Sh ** (1 - 2 / s) / pd.b
    lam = -energy(model, u) / constraint(model, u, pd, q)
    return ScalarsTriple(alpha, beta, lam)


def preserve_const(model, u, pd: ProblemData, q=None) -> float:
    """a (a alpha)^(2/(r-2)) + 2(n-1) b (b beta)^(2/(s-2)); equals 1 on the constraint set.

    In the critical case the exponents are (n-2)/2 and n-2.
    """
    r, s = exponents(model.n, q)
    if r <= 2:
        raise ConfigError("identity is degenerate for q = 1")
    t = functionals(model, u, pd, q)
    return pd.a * (pd.a * t.alpha) ** (2 / (r - 2)) + 2 * (model.n - 1) * pd.b * (pd.b * t.beta) ** (2 / (s - 2))


def q_functional(model, u, pd: ProblemData, q=None) -> float:
    """E[u] / constraint(|u|), homogeneous of degree zero."""
    u = np.asarray(u, dtype=float)
    if not np.any(u):
        raise ConfigError("Q functional is undefined for the zero field")
    return energy(model, u) / constraint(model, u, pd, q)


def velocity(model, u, pd: ProblemData):
    """Pointwise speeds alpha R_g / f - lambda (nodes) and beta h_g / h - lambda (ends)."""
    t = functionals(model, u, pd)
    curv = curvatures(model, u)
    return t.alpha * curv.R_g / pd.f - t.lam, t.beta * curv.h_g / pd.h - t.lam


def flow_metric(model, u, pd: ProblemData, q=None, scalars=None) -> Field:
    """Diagonal mass M with M^-1 grad(constraint) = 2 u.

    Interior nodes carry w (-f) u^(r-2) / alpha; the two end nodes add the
    boundary mass 2(n-1) w_b (-h) u^(s-2) / beta.
    """
    u = require_positive(u)
    t = scalars if scalars is not None else functionals(model, u, pd, q)
    r, s = exponents(model.n, q)
    M = model.w_bulk * (-pd.f) * u ** (r - 2) / t.alpha
    M[[0, -1]] += 2 * (model.n - 1) * model.w_bdry * (-pd.h) * u[[0, -1]] ** (s - 2) / t.beta
    return M


def flow_velocity(model, u, pd: ProblemData, q=None, scalars=None) -> Field:
    """Nodal speed v with u_t = (n-2)/4 v u for the discrete gradient flow.

    Equals alpha R_g / f - lambda at interior nodes; at the two end nodes it
    is the mass-weighted mean of the bulk and boundary speeds.
    """
    u = require_positive(u)
    t = scalars if scalars is not None else functionals(model, u, pd, q)
    M = flow_metric(model, u, pd, q, t)
    return -energy_apply(model, u) / (u * M) - t.lam


def F_p(model, u, pd: ProblemData, p, q=None) -> float:
    """Weighted L^p size of the flow velocity; zero exactly at critical points."""
    if p < 1:
        raise ConfigError(f"F_p needs p >= 1, got {p}")
    u = require_positive(u)
    t = functionals(model, u, pd, q)
    v = np.abs(flow_velocity(model, u, pd, q, t))
    r, s = exponents(model.n, q)
    bulk = model.w_bulk @ (-pd.f * u**r * v**p) / t.alpha
    vb = v[[0, -1]]
    bd = model.w_bdry @ (-pd.h * u[[0, -1]] ** s * vb**p) / t.beta
    return float(bulk + 2 * (model.n - 1) * bd)
