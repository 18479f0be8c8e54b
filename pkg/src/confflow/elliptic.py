"""Elliptic side: Robin solves, monotone iteration, background preparation
and subcritical minimizers.

Discrete equations are always taken in their variational (row-summed) form.
Row i of

    A u = W f u^p + 2(n-1) W_b h u^(n/(n-2))

is the finite-volume balance at node i, and the end rows combine the bulk
equation with the boundary condition exactly as the energy dictates.  The
shifted matrix A + W N + 2(n-1) W_b H used by the monotone scheme is a
symmetric M-matrix, so its inverse is entrywise positive and the iteration
is order preserving on the grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded, eigh, LinAlgError

from . import conformal as cf
from . import flow as fl
from .errors import ConfigError, NonConvergence, NumericalError
from .geometry import WarpedModel, stiffness_bands


def _upper_bands(diag, off):
    bands = np.zeros((2, diag.size))
    bands[1] = diag
    bands[0, 1:] = off
    return bands


def _shifted_bands(model, N, H):
    diag, off = cf.energy_bands(model)
    diag = diag + model.w_bulk * N
    diag[[0, -1]] += 2 * (model.n - 1) * model.w_bdry * H
    return _upper_bands(diag, off)


def _factor(bands):
    try:
        return cholesky_banded(bands, check_finite=False)
    except LinAlgError as exc:
        raise NumericalError("shifted Robin operator is not positive definite; increase the shifts") from exc


def solve_linear_robin(model: WarpedModel, shiftN, shiftH, F, G) -> np.ndarray:
    """Solve (-c lap + R + N) u = F, d_nu u + (n-2)/2 (h + H) u = G."""
    F = np.asarray(F, dtype=float)
    G = np.asarray(G, dtype=float)
    if F.shape != (model.size,) or G.shape != (2,):
        raise ConfigError("right-hand side shapes do not match the model")
    if np.any(model.R_bg + shiftN <= 0) or np.any(model.h_bg + shiftH <= 0):
        raise ConfigError("coercivity needs R_bg + N > 0 at every node and h_bg + H > 0 at both ends")
    rhs = model.w_bulk * F
    rhs[[0, -1]] += model.conf_const * model.w_bdry * G
    return cho_solve_banded((_factor(_shifted_bands(model, shiftN, shiftH)), False), rhs, check_finite=False)


@dataclass(frozen=True)
class MonotoneConfig:
    eps: float
    N: float
    H: float
    tol: float = 1e-10
    max_iter: int = 50_000

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise ConfigError(f"eps must lie in (0, 1), got {self.eps}")
        if self.N < 0 or self.H < 0 or self.tol <= 0 or self.max_iter < 1:
            raise ConfigError("shifts must be nonnegative, tol and max_iter positive")


@dataclass(frozen=True, eq=False)
class EllipticSolution:
    u: np.ndarray
    residual_interior: float
    residual_boundary: float
    iterations: int
    monotone_flag: bool
    increments: tuple = ()


def _require_admissible(model):
    if np.any(model.R_bg >= 0) or np.any(model.h_bg >= 0):
        raise ConfigError("background not admissible: R_bg and h_bg must be negative")


def choose_epsilon(model, pd: cf.ProblemData) -> float:
    """Half the largest level for which eps and 1/eps are sub- and supersolutions."""
    _require_admissible(model)
    n = model.n
    fr = pd.f / model.R_bg
    hr = pd.h / model.h_bg
    cands = (
        np.min(fr) ** ((n - 2) / 4),
        np.min(hr) ** ((n - 2) / 2),
        np.min(1 / fr) ** ((n - 2) / 4),
        np.min(1 / hr) ** ((n - 2) / 2),
    )
    return 0.5 * float(min(cands))


def choose_shifts(model, pd: cf.ProblemData, eps):
    """Shifts making s -> f s^p + N s and s -> h s^(n/(n-2)) + H s increasing on [eps, 1/eps]."""
    n = model.n
    N = np.max(-pd.f) * (n + 2) / (n - 2) * eps ** (-4 / (n - 2)) + np.max(-model.R_bg) + 1.0
    H = np.max(-pd.h) * n / (n - 2) * eps ** (-2 / (n - 2)) + np.max(-model.h_bg) + 1.0
    return float(N), float(H)


def monotone_config(model, pd, eps=None, **kw) -> MonotoneConfig:
    eps = choose_epsilon(model, pd) if eps is None else eps
    N, H = choose_shifts(model, pd, eps)
    return MonotoneConfig(eps=eps, N=N, H=H, **kw)


def discrete_residuals(model, pd, u):
    """Defects of the row-summed equations, rescaled to pointwise size.

    Interior rows are divided by the node weight; the boundary defect is the
    end-row defect divided by c w_b, i.e. measured like B u - G.
    """
    n = model.n
    r = cf.energy_apply(model, u) - model.w_bulk * pd.f * u ** ((n + 2) / (n - 2))
    r[[0, -1]] -= 2 * (n - 1) * model.w_bdry * pd.h * u[[0, -1]] ** (n / (n - 2))
    interior = float(np.max(np.abs(r[1:-1] / model.w_bulk[1:-1])))
    boundary = float(np.max(np.abs(r[[0, -1]] / (model.conf_const * model.w_bdry))))
    return interior, boundary


def monotone_solve(model, pd: cf.ProblemData, cfg: MonotoneConfig) -> EllipticSolution:
    """Iterate tilde-L u_{i+1} = F(u_i), tilde-B u_{i+1} = G(u_i) from u_1 = eps."""
    _require_admissible(model)
    n = model.n
    p = (n + 2) / (n - 2)
    pb = n / (n - 2)
    chol = _factor(_shifted_bands(model, cfg.N, cfg.H))
    u = np.full(model.size, cfg.eps)
    lo, hi = cfg.eps * (1 - 1e-14), (1 / cfg.eps) * (1 + 1e-14)
    increments = []
    for it in range(1, cfg.max_iter + 1):
        rhs = model.w_bulk * (pd.f * u**p + cfg.N * u)
        rhs[[0, -1]] += 2 * (n - 1) * model.w_bdry * (pd.h * u[[0, -1]] ** pb + cfg.H * u[[0, -1]])
        new = cho_solve_banded((chol, False), rhs, check_finite=False)
        if np.any(new < u):
            raise NumericalError(
                f"monotone iteration lost monotonicity at iterate {it} "
                f"(max decrease {np.max(u - new):.3e})"
            )
        if new.min() < lo or new.max() > hi:
            raise NumericalError(f"iterate {it} left the barrier interval [eps, 1/eps]")
        inc = float(np.max(new - u))
        increments.append(inc)
        u = new
        if inc < cfg.tol:
            ri, rb = discrete_residuals(model, pd, u)
            return EllipticSolution(u, ri, rb, it, True, tuple(increments))
    raise NonConvergence(f"monotone iteration did not reach tol {cfg.tol:g} in {cfg.max_iter} iterations", payload=u)


def steklov_min(model: WarpedModel, eps0):
    """Smallest lambda with (c K - eps0 W) phi = lambda B phi, B the boundary mass.

    Returns ``(lam1, phi)`` with sum_b w_b phi_b^2 = 1 and phi > 0.
    """
    if not eps0 > 0:
        raise ConfigError(f"eps0 must be positive, got {eps0}")
    k_diag, k_off = stiffness_bands(model)
    c = model.conf_const
    A = np.diag(c * k_diag - eps0 * model.w_bulk) + np.diag(c * k_off, 1) + np.diag(c * k_off, -1)
    interior = A[1:-1, 1:-1]
    try:
        np.linalg.cholesky(interior)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("bulk form is degenerate on fields vanishing at the boundary") from exc
    B = np.zeros_like(A)
    B[0, 0], B[-1, -1] = model.w_bdry
    sigma = -1.0
    for _ in range(200):
        try:
            np.linalg.cholesky(A - sigma * B)
            break
        except np.linalg.LinAlgError:
            sigma *= 2.0
    else:
        raise NumericalError("could not find a shift making the pencil definite")
    _, vecs = eigh(B, A - sigma * B)
    phi = vecs[:, -1]
    phi = phi / np.sqrt(model.w_bdry @ phi[[0, -1]] ** 2)
    phi *= np.sign(phi[0])
    if np.any(phi <= 0):
        raise NumericalError("first eigenfunction changes sign")
    # The pencil eigenvalue cancels O(1) entries down to O(eps0); the Rayleigh
    # quotient in squared-difference form does not.
    grad = c * np.sum(model.k_face * np.diff(phi) ** 2) / model.dx
    lam1 = (grad - eps0 * (model.w_bulk @ phi**2)) / (model.w_bdry @ phi[[0, -1]] ** 2)
    return float(lam1), phi


@dataclass(frozen=True, eq=False)
class BackgroundPrep:
    eps0: float
    lam1: float
    phi: np.ndarray
    R_new: np.ndarray
    h_new: np.ndarray
    model: WarpedModel
    E_one: float
    halvings: int


def prepare_background(model: WarpedModel, delta=1.0, max_halvings=60) -> BackgroundPrep:
    """Conformally change a background with R < 0, h = 0 into one with R < 0, h < 0.

    The new model keeps the quadrature and stiffness of the input; only the
    curvature coefficients change, to the discrete transforms of R and h
    under g -> phi^(4/(n-2)) g.
    """
    n = model.n
    if np.any(model.R_bg >= 0):
        raise ConfigError("prepare_background needs R_bg < 0 at every node")
    if np.any(model.h_bg != 0):
        raise ConfigError("prepare_background needs h_bg = (0, 0)")
    eps0 = min(float(delta), 0.5 * float(np.min(-model.R_bg)))
    for k in range(max_halvings + 1):
        lam1, phi = steklov_min(model, eps0)
        R_new = (eps0 + model.R_bg) * phi ** (-4 / (n - 2))
        h_new = lam1 / (2 * (n - 1)) * phi[[0, -1]] ** (-2 / (n - 2))
        if lam1 < 0 and np.all(R_new < 0) and np.all(h_new < 0):
            new = model.with_background(R_new, h_new)
            E1 = cf.energy(new, np.ones(model.size))
            if not E1 < 0:
                raise NumericalError(f"prepared background has E[1] = {E1:.6e} >= 0")
            return BackgroundPrep(eps0, lam1, phi, R_new, h_new, new, E1, k)
        eps0 *= 0.5
    raise NumericalError("eps0 underflow before the first eigenvalue became negative")


@dataclass(frozen=True, eq=False)
class SubcriticalResult:
    q: float
    u: np.ndarray
    mu: float
    lam: float
    alpha: float
    beta: float
    residual_interior: float
    residual_boundary: float
    energies: tuple = ()


def subcritical_solve(model, pd: cf.ProblemData, q, u0=None, flow_cfg: dict | None = None) -> SubcriticalResult:
    """Minimize E on the subcritical constraint set by the normalized flow with exponent q."""
    n = model.n
    if not 1 <= q < cf.critical_q(n):
        raise ConfigError(f"q must lie in [1, {cf.critical_q(n):g}), got {q}")
    opts = dict(tol_F2=1e-18, tol_residual=1e-8)
    opts.update(flow_cfg or {})
    cfg = fl.FlowConfig(pd=pd, q=float(q), **opts)
    u0 = np.ones(model.size) if u0 is None else u0
    try:
        state, trace = fl.flow_to_limit(model, u0, cfg)
    except NonConvergence as exc:
        raise NonConvergence(f"subcritical descent stagnated for q={q}: {exc}", payload=exc.payload) from exc
    return SubcriticalResult(
        q=float(q),
        u=state.u,
        mu=state.E / state.constraint,
        lam=state.lam,
        alpha=state.alpha,
        beta=state.beta,
        residual_interior=trace.residuals.interior,
        residual_boundary=trace.residuals.boundary,
        energies=tuple(trace.column("E")),
    )
