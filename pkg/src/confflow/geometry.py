"""Discrete warped-product cylinders ``[0, L] x F`` with metric dx^2 + psi(x)^2 g_F.

Only fiber-invariant data is represented, so every field lives on the nodes
of a uniform grid.  The discrete Laplacian is vertex-centred finite volume in
the interior with a quadratic-extrapolation closure at the two end nodes; the
normal derivative is then *defined* so that

    sum_i w_i (lap u)_i == sum_b w_b (d_nu u)_b

holds identically, which makes every energy identity of the continuous theory
hold exactly on the grid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from numbers import Real

import numpy as np

from . import expr as _expr
from .errors import ConfigError

Field = np.ndarray
BoundaryPair = np.ndarray

MIN_GRID = 16


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class WarpedModel:
    """Immutable discrete model manifold.

    ``w_bulk`` are trapezoid weights of psi^(n-1) dx, ``w_bdry`` the fiber
    volumes psi^(n-1) at the two ends and ``k_face`` the psi^(n-1) values at
    cell midpoints used by the flux form of the Laplacian.
    """

    n: int
    L: float
    grid: Field
    psi: Field
    dpsi: Field
    d2psi: Field
    R_F: float
    R_bg: Field
    h_bg: BoundaryPair
    w_bulk: Field
    w_bdry: BoundaryPair
    k_face: np.ndarray
    mode: str = "warped"

    def __post_init__(self):
        for name in ("grid", "psi", "dpsi", "d2psi", "R_bg", "h_bg", "w_bulk", "w_bdry", "k_face"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        size = self.grid.size
        if self.R_bg.shape != (size,) or self.w_bulk.shape != (size,) or self.psi.shape != (size,):
            raise ConfigError("field shapes do not match the grid")
        if self.h_bg.shape != (2,) or self.w_bdry.shape != (2,) or self.k_face.shape != (size - 1,):
            raise ConfigError("boundary or face data has the wrong shape")
        if np.any(np.diff(self.grid) <= 0):
            raise ConfigError("grid must be strictly increasing")
        for name in ("psi", "w_bulk", "w_bdry", "k_face"):
            if np.any(getattr(self, name) <= 0):
                raise ConfigError(f"{name} must be strictly positive")
        for name in ("R_bg", "h_bg", "dpsi", "d2psi"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ConfigError(f"{name} has non-finite entries")
        if self.mode not in ("warped", "synthetic"):
            raise ConfigError(f"unknown model mode {self.mode!r}")

    @property
    def size(self) -> int:
        return self.grid.size

    @property
    def dx(self) -> float:
        return self.L / (self.size - 1)

    @property
    def conf_const(self) -> float:
        """The constant 4(n-1)/(n-2) in front of the Laplacian."""
        return 4.0 * (self.n - 1) / (self.n - 2)

    @property
    def volume(self) -> float:
        return float(self.w_bulk.sum())

    @property
    def area(self) -> float:
        return float(self.w_bdry.sum())

    def with_background(self, R_bg, h_bg) -> "WarpedModel":
        """Same weights and operators, new curvature coefficients."""
        R = np.broadcast_to(np.asarray(R_bg, dtype=float), (self.size,))
        return replace(self, R_bg=R, h_bg=np.asarray(h_bg, dtype=float), mode="synthetic")


def _check_common(n, L, grid_size):
    if int(n) != n or n < 3:
        raise ConfigError(f"dimension n must be an integer >= 3, got {n}")
    if not L > 0:
        raise ConfigError(f"interval length L must be positive, got {L}")
    if int(grid_size) != grid_size or grid_size < MIN_GRID:
        raise ConfigError(f"grid_size must be an integer >= {MIN_GRID}, got {grid_size}")


def _trap_weights(values, dx):
    w = values * dx
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def _table_derivatives(psi, dx):
    d1 = np.gradient(psi, dx, edge_order=2)
    d2 = np.empty_like(psi)
    d2[1:-1] = (psi[2:] - 2 * psi[1:-1] + psi[:-2]) / dx**2
    d2[0] = (2 * psi[0] - 5 * psi[1] + 4 * psi[2] - psi[3]) / dx**2
    d2[-1] = (2 * psi[-1] - 5 * psi[-2] + 4 * psi[-3] - psi[-4]) / dx**2
    return d1, d2


def warped_curvatures(n, R_F, psi, dpsi, d2psi):
    """Scalar curvature (interior) and mean curvature (ends) of dx^2 + psi^2 g_F."""
    R = R_F / psi**2 - 2 * (n - 1) * d2psi / psi - (n - 1) * (n - 2) * (dpsi / psi) ** 2
    h = np.array([-dpsi[0] / psi[0], dpsi[-1] / psi[-1]])
    return R, h


def build_warped_model(n, L, psi_spec, R_F, grid_size) -> WarpedModel:
    """Discretize [0, L] x F with fiber scalar curvature ``R_F``.

    ``psi_spec`` is an expression string, a parsed expression, a positive
    number, or a table of values on the ``grid_size`` nodes.
    """
    _check_common(n, L, grid_size)
    n, grid_size, L = int(n), int(grid_size), float(L)
    x = np.linspace(0.0, L, grid_size)
    dx = L / (grid_size - 1)
    if isinstance(psi_spec, Real):
        psi_spec = repr(float(psi_spec))
    if isinstance(psi_spec, (str, _expr.Node)):
        node = _expr.parse(psi_spec) if isinstance(psi_spec, str) else psi_spec
        d1n = _expr.derivative(node)
        d2n = _expr.derivative(d1n)
        psi = _expr.evaluate(node, x)
        dpsi = _expr.evaluate(d1n, x)
        d2psi = _expr.evaluate(d2n, x)
        mid = _expr.evaluate(node, 0.5 * (x[1:] + x[:-1]))
        if np.any(psi <= 0) or np.any(mid <= 0):
            raise ConfigError("warp function psi must be positive on [0, L]")
        k_face = mid ** (n - 1)
    else:
        psi = np.asarray(psi_spec, dtype=float)
        if psi.shape != (grid_size,):
            raise ConfigError(f"psi table must have {grid_size} entries, got {psi.shape}")
        if not np.all(np.isfinite(psi)):
            raise ConfigError("psi table has non-finite entries")
        if np.any(psi <= 0):
            raise ConfigError("warp function psi must be positive on [0, L]")
        dpsi, d2psi = _table_derivatives(psi, dx)
        p = psi ** (n - 1)
        k_face = 0.5 * (p[1:] + p[:-1])
    R, h = warped_curvatures(n, float(R_F), psi, dpsi, d2psi)
    return WarpedModel(
        n=n,
        L=L,
        grid=x,
        psi=psi,
        dpsi=dpsi,
        d2psi=d2psi,
        R_F=float(R_F),
        R_bg=R,
        h_bg=h,
        w_bulk=_trap_weights(psi ** (n - 1), dx),
        w_bdry=np.array([psi[0], psi[-1]]) ** (n - 1),
        k_face=k_face,
        mode="warped",
    )


def build_synthetic_model(n, L, grid_size, R_bg, h_bg) -> WarpedModel:
    """psi == 1 cylinder whose curvature data is prescribed directly."""
    _check_common(n, L, grid_size)
    n, grid_size, L = int(n), int(grid_size), float(L)
    R = np.asarray(R_bg, dtype=float)
    if R.ndim == 0:
        R = np.full(grid_size, float(R))
    if R.shape != (grid_size,):
        raise ConfigError(f"R_bg must have {grid_size} entries, got shape {R.shape}")
    h = np.asarray(h_bg, dtype=float)
    if h.shape != (2,):
        raise ConfigError(f"h_bg must be a pair, got shape {h.shape}")
    ones = np.ones(grid_size)
    return WarpedModel(
        n=n,
        L=L,
        grid=np.linspace(0.0, L, grid_size),
        psi=ones,
        dpsi=np.zeros(grid_size),
        d2psi=np.zeros(grid_size),
        R_F=float("nan"),
        R_bg=R,
        h_bg=h,
        w_bulk=_trap_weights(ones, L / (grid_size - 1)),
        w_bdry=np.ones(2),
        k_face=np.ones(grid_size - 1),
        mode="synthetic",
    )


def _check_field(model, u):
    u = np.asarray(u, dtype=float)
    if u.shape != (model.size,):
        raise ConfigError(f"field must have {model.size} entries, got shape {u.shape}")
    return u


def _check_pair(p):
    p = np.asarray(p, dtype=float)
    if p.shape != (2,):
        raise ConfigError(f"boundary pair must have 2 entries, got shape {p.shape}")
    return p


def fluxes(model, u):
    """psi^(n-1) u' on cell faces."""
    return model.k_face * np.diff(u) / model.dx


def stiffness_apply(model, u) -> Field:
    """K u where u.K.u = sum_faces k (du)^2 / dx."""
    fl = fluxes(model, _check_field(model, u))
    out = np.zeros(model.size)
    out[:-1] -= fl
    out[1:] += fl
    return out


def stiffness_bands(model):
    """(diag, off) of the symmetric tridiagonal stiffness matrix K."""
    k = model.k_face / model.dx
    diag = np.zeros(model.size)
    diag[:-1] += k
    diag[1:] += k
    return diag, -k


def laplacian(model, u) -> Field:
    u = _check_field(model, u)
    fl = fluxes(model, u)
    d = np.empty(model.size)
    d[1:-1] = (fl[1:] - fl[:-1]) / model.w_bulk[1:-1]
    d[0] = 3 * d[1] - 3 * d[2] + d[3]
    d[-1] = 3 * d[-2] - 3 * d[-3] + d[-4]
    return d


def normal_derivative(model, u) -> BoundaryPair:
    """Outward normal derivative (-u'(0), u'(L)) matched to the Laplacian closure."""
    u = _check_field(model, u)
    fl = fluxes(model, u)
    d = laplacian(model, u)
    w, wb = model.w_bulk, model.w_bdry
    return np.array([(w[0] * d[0] - fl[0]) / wb[0], (w[-1] * d[-1] + fl[-1]) / wb[1]])


def integrate_bulk(model, u) -> float:
    return float(model.w_bulk @ _check_field(model, u))


def integrate_boundary(model, p) -> float:
    return float(model.w_bdry @ _check_pair(p))


def boundary_values(u) -> BoundaryPair:
    return np.asarray(u)[[0, -1]]
