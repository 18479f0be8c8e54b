"""Normalized prescribed-curvature flow on a discrete model.

The semi-discrete flow is the gradient flow of E restricted to the
constraint set, taken in the diagonal metric of
:func:`confflow.conformal.flow_metric`:

    M u_t = -(n-2)/4 (A u + lambda M u).

Diffusion (the stiffness part of A) is treated implicitly and the diagonal
reaction part explicitly, inside one banded SPD solve per step.  The
constraint is restored by rescaling after every step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solveh_banded

from . import conformal as cf
from .errors import ConfigError, NonConvergence, NumericalError
from .geometry import WarpedModel, stiffness_bands

TRACE_HEADER = ("t", "E", "lambda", "alpha", "beta", "F2", "umin", "umax", "drift", "dt")


@dataclass(frozen=True)
class FlowConfig:
    pd: cf.ProblemData
    dt0: float = 1e-2
    dt_min: float = 1e-12
    dt_max: float = 2.0
    t_max: float = 1e4
    tol_F2: float = 1e-16
    tol_residual: float = 1e-7
    renorm: bool = True
    stepper: str = "imex"
    max_steps: int = 100_000
    log_every: int = 10
    grow_after: int = 10
    grow_factor: float = 1.2
    energy_tol: float = 1e-12
    q: float | None = None
    Y_ref: float | None = None
    Q_ref: float | None = None

    def __post_init__(self):
        errors = []
        if not 0 < self.dt_min <= self.dt0 <= self.dt_max:
            errors.append("time steps must satisfy 0 < dt_min <= dt0 <= dt_max")
        if not (self.tol_F2 > 0 and self.tol_residual > 0 and self.t_max > 0):
            errors.append("tolerances and t_max must be positive")
        if self.stepper not in ("imex", "explicit"):
            errors.append(f"stepper must be 'imex' or 'explicit', got {self.stepper!r}")
        if not self.renorm:
            errors.append("renormalization cannot be switched off")
        if self.log_every < 1 or self.max_steps < 1:
            errors.append("log_every and max_steps must be positive")
        if errors:
            raise ConfigError("; ".join(errors), errors)


@dataclass(frozen=True, eq=False)
class FlowState:
    t: float
    u: np.ndarray
    alpha: float
    beta: float
    lam: float
    E: float
    F2: float
    constraint: float
    dt: float
    drift: float = 0.0
    streak: int = 0
    steps: int = 0

    @property
    def scalars(self) -> cf.ScalarsTriple:
        return cf.ScalarsTriple(self.alpha, self.beta, self.lam)


def _evaluate(model, u, cfg, **kw) -> FlowState:
    pd, q = cfg.pd, cfg.q
    t = cf.functionals(model, u, pd, q)
    M = cf.flow_metric(model, u, pd, q, t)
    v = cf.flow_velocity(model, u, pd, q, t)
    u.setflags(write=False)
    return FlowState(
        u=u,
        alpha=t.alpha,
        beta=t.beta,
        lam=t.lam,
        E=cf.energy(model, u),
        F2=float(np.sum(M * u * u * v * v)),
        constraint=cf.constraint(model, u, pd, q),
        **kw,
    )


def check_admissible(model: WarpedModel):
    bad = []
    if np.any(model.R_bg >= 0):
        bad.append("background scalar curvature must be negative at every node")
    if np.any(model.h_bg >= 0):
        bad.append("background mean curvature must be negative at both ends")
    if bad:
        raise ConfigError("inadmissible background: " + "; ".join(bad), bad)


def init_state(model: WarpedModel, u0, cfg: FlowConfig) -> FlowState:
    """Normalize ``u0`` onto the constraint set and check E < 0."""
    check_admissible(model)
    u, _ = cf.normalize(model, u0, cfg.pd, cfg.q)
    E = cf.energy(model, u)
    if E >= 0:
        raise ConfigError(f"initial energy must be negative, got {E:.6e}")
    return _evaluate(model, np.array(u), cfg, t=0.0, dt=cfg.dt0)


def perturbed_constant(model: WarpedModel, amplitude=0.2, modes=3, seed=0) -> np.ndarray:
    """1 + amplitude * (random cosine series), kept positive."""
    rng = np.random.default_rng(seed)
    x = model.grid / model.L
    coef = rng.uniform(-1.0, 1.0, modes) / np.arange(1, modes + 1)
    coef /= max(1.0, np.abs(coef).sum())
    wave = sum(c * np.cos((k + 1) * np.pi * x) for k, c in enumerate(coef))
    return 1.0 + amplitude * wave


def _imex_raw(model, state, dt, cfg):
    gamma = 0.25 * (model.n - 2)
    M = cf.flow_metric(model, state.u, cfg.pd, cfg.q, state.scalars)
    kd, ko = stiffness_bands(model)
    c = model.conf_const
    bands = np.zeros((2, model.size))
    bands[1] = M + dt * gamma * c * kd
    bands[0, 1:] = dt * gamma * c * ko
    u = state.u
    react = model.w_bulk * model.R_bg * u
    react[[0, -1]] += 2 * (model.n - 1) * model.w_bdry * model.h_bg * u[[0, -1]]
    rhs = M * u - dt * gamma * (react + state.lam * M * u)
    return solveh_banded(bands, rhs, check_finite=False)


def _explicit_raw(model, state, dt, cfg):
    v = cf.flow_velocity(model, state.u, cfg.pd, cfg.q, state.scalars)
    return state.u * (1.0 + dt * 0.25 * (model.n - 2) * v)


def raw_step(model, state, dt, cfg) -> np.ndarray:
    """One unprojected step of size ``dt``."""
    if cfg.stepper == "imex":
        return _imex_raw(model, state, dt, cfg)
    return _explicit_raw(model, state, dt, cfg)


def step(state: FlowState, model: WarpedModel, cfg: FlowConfig) -> FlowState:
    """Advance one accepted step, halving dt on positivity loss or energy increase."""
    dt = min(state.dt, cfg.dt_max)
    while True:
        if dt < cfg.dt_min:
            raise NumericalError(
                f"time step underflow at t={state.t:.6g}: dt={dt:.3e} < dt_min "
                f"(E={state.E:.12g}, F2={state.F2:.3e}, min u={state.u.min():.6g})"
            )
        raw = raw_step(model, state, dt, cfg)
        if np.all(np.isfinite(raw)) and np.all(raw > 0):
            drift = cf.constraint(model, raw, cfg.pd, cfg.q) - 1.0
            u, _ = cf.normalize(model, raw, cfg.pd, cfg.q)
            E = cf.energy(model, u)
            if E <= state.E + cfg.energy_tol * abs(state.E):
                break
        dt *= 0.5
        state = replace(state, streak=0)
    streak = state.streak + 1
    next_dt = dt
    if streak >= cfg.grow_after:
        next_dt = min(dt * cfg.grow_factor, cfg.dt_max)
        streak = 0
    return _evaluate(
        model,
        np.array(u),
        cfg,
        t=state.t + dt,
        dt=next_dt,
        drift=drift,
        streak=streak,
        steps=state.steps + 1,
    )


@dataclass(frozen=True)
class LimitResiduals:
    interior: float
    boundary: float
    boundary_node_bulk: float


def limit_residuals(model, u, pd, q=None) -> LimitResiduals:
    """Sup-norm defects of the Euler-Lagrange equations.

    Critical case: |R_g - (lambda/alpha) f| on interior nodes and
    |h_g - (lambda/beta) h| at the ends.  Subcritical case: the same
    equations written as L u = (lambda/alpha) f u^q and
    B u = (n-2)/2 (lambda/beta) h u^((q+1)/2).  The bulk defect at the two
    end nodes is reported separately because it only sees the one-sided
    closure of the Laplacian.
    """
    t = cf.functionals(model, u, pd, q)
    if q is None:
        curv = cf.curvatures(model, u)
        bulk = np.abs(curv.R_g - t.lam / t.alpha * pd.f)
        bd = np.abs(curv.h_g - t.lam / t.beta * pd.h)
    else:
        ub = u[[0, -1]]
        bulk = np.abs(cf.apply_L(model, u) - t.lam / t.alpha * pd.f * u**q)
        bd = np.abs(cf.apply_B(model, u) - 0.5 * (model.n - 2) * t.lam / t.beta * pd.h * ub ** ((q + 1) / 2))
    return LimitResiduals(float(bulk[1:-1].max()), float(bd.max()), float(bulk[[0, -1]].max()))


@dataclass(frozen=True)
class DiagBounds:
    """Running extrema of alpha, beta, lambda plus epoch data for the bound checks."""

    alpha_min: float
    alpha_max: float
    beta_min: float
    beta_max: float
    lam_min: float
    lam_max: float
    u0_min: float
    u0_max: float
    C0: float
    E0: float
    vol_bounds: tuple | None = None
    area_bounds: tuple | None = None

    @property
    def V0(self):
        if self.vol_bounds is None:
            return None
        return max(self.vol_bounds[1], 1.0 / self.vol_bounds[0])

    @property
    def S0(self):
        if self.area_bounds is None:
            return None
        return max(self.area_bounds[1], 1.0 / self.area_bounds[0])

    def update(self, s: FlowState) -> "DiagBounds":
        return replace(
            self,
            alpha_min=min(self.alpha_min, s.alpha),
            alpha_max=max(self.alpha_max, s.alpha),
            beta_min=min(self.beta_min, s.beta),
            beta_max=max(self.beta_max, s.beta),
            lam_min=min(self.lam_min, s.lam),
            lam_max=max(self.lam_max, s.lam),
        )


def initial_bounds(model, state: FlowState, cfg: FlowConfig) -> DiagBounds:
    """Epoch data at ``state``: the velocity ceiling C0 and the volume windows.

    The volume windows need reference values of the two conformal invariants
    (``cfg.Y_ref``, ``cfg.Q_ref``) and are skipped without them.
    """
    n, pd = model.n, cfg.pd
    v = cf.flow_velocity(model, state.u, pd, cfg.q, state.scalars)
    vol = area = None
    if cfg.Y_ref is not None and cfg.Y_ref < 0:
        upper = pd.a ** (-n / (n - 2)) / np.min(-pd.f)
        vol = ((state.E / cfg.Y_ref) ** (n / (n - 2)), upper)
    if cfg.Q_ref is not None and cfg.Q_ref < 0:
        upper = (2 * (n - 1) * pd.b) ** (-(n - 1) / (n - 2)) / np.min(-pd.h)
        area = ((state.E / cfg.Q_ref) ** ((n - 1) / (n - 2)), upper)
    return DiagBounds(
        alpha_min=state.alpha,
        alpha_max=state.alpha,
        beta_min=state.beta,
        beta_max=state.beta,
        lam_min=state.lam,
        lam_max=state.lam,
        u0_min=float(state.u.min()),
        u0_max=float(state.u.max()),
        C0=max(float(v.max()), 0.0),
        E0=state.E,
        vol_bounds=vol,
        area_bounds=area,
    )


@dataclass(frozen=True)
class DiagRecord:
    t: float
    floor_margin: float
    ceiling_margin: float
    velocity_margin: float
    volume_ok: bool | None
    lam_rate_error: float
    preserve_residual: float
    constraint_error: float

    @property
    def floor_ok(self):
        return self.floor_margin >= 0

    @property
    def ceiling_ok(self):
        return self.ceiling_margin >= 0

    @property
    def velocity_ok(self):
        return self.velocity_margin >= 0

    @property
    def ok(self):
        return self.floor_ok and self.ceiling_ok and self.velocity_ok and self.volume_ok is not False


def u_floor_ceiling(model, pd, b: DiagBounds):
    """Lower and upper bounds for u^((n+2)/(n-2)) from the running extrema."""
    n = model.n
    p = (n + 2) / (n - 2)
    rf = model.R_bg / pd.f
    hh = model.h_bg / pd.h
    floor = min(
        b.u0_min**p,
        (b.alpha_min / b.lam_max * rf.min()) ** ((n + 2) / 4),
        (b.beta_min / b.lam_max * hh.min()) ** ((n + 2) / 2),
    )
    ceiling = max(
        b.u0_max**p,
        (b.alpha_max / b.lam_min * rf.max()) ** ((n + 2) / 4),
        (b.beta_max / b.lam_min * hh.max()) ** ((n + 2) / 2),
    )
    return floor, ceiling


def diagnostics(prev: FlowState, nxt: FlowState, bounds: DiagBounds, model, cfg: FlowConfig) -> DiagRecord:
    """Check the maximum-principle bounds and conservation laws on one step.

    ``bounds`` must already include ``nxt`` in its running extrema.
    Margins are positive when a bound holds.
    """
    n, pd = model.n, cfg.pd
    p = (n + 2) / (n - 2)
    floor, ceiling = u_floor_ceiling(model, pd, bounds)
    up = nxt.u**p
    v = cf.flow_velocity(model, nxt.u, pd, cfg.q, nxt.scalars)
    volume_ok = None
    if bounds.vol_bounds is not None or bounds.area_bounds is not None:
        volume_ok = True
        if bounds.vol_bounds is not None:
            lo, hi = bounds.vol_bounds
            vol = float(model.w_bulk @ nxt.u ** (2 * n / (n - 2)))
            volume_ok &= lo * (1 - 1e-10) <= vol <= hi * (1 + 1e-10)
        if bounds.area_bounds is not None:
            lo, hi = bounds.area_bounds
            area = float(model.w_bdry @ nxt.u[[0, -1]] ** (2 * (n - 1) / (n - 2)))
            volume_ok &= lo * (1 - 1e-10) <= area <= hi * (1 + 1e-10)
    dt = nxt.t - prev.t
    rate = (nxt.lam - prev.lam) / dt - 0.5 * (n - 2) * prev.F2
    pres = cf.preserve_const(model, nxt.u, pd, cfg.q) - 1.0 if cfg.q is None else float("nan")
    return DiagRecord(
        t=nxt.t,
        floor_margin=float(up.min() - floor * (1 - 1e-12)),
        ceiling_margin=float(ceiling * (1 + 1e-12) - up.max()),
        velocity_margin=float(bounds.C0 + 1e-8 - v.max()),
        volume_ok=None if volume_ok is None else bool(volume_ok),
        lam_rate_error=float(abs(rate)),
        preserve_residual=float(abs(pres)),
        constraint_error=float(abs(nxt.constraint - 1.0)),
    )


def fp_exponents(n):
    return (2.0, n / 2, n - 1.0, 2.0 * n)


def _trace_row(s: FlowState):
    return (s.t, s.E, s.lam, s.alpha, s.beta, s.F2, float(s.u.min()), float(s.u.max()), s.drift, s.dt)


@dataclass
class FlowTrace:
    rows: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    fp_log: list = field(default_factory=list)
    converged: bool = False
    residuals: LimitResiduals | None = None
    bounds: DiagBounds | None = None

    def column(self, name):
        i = TRACE_HEADER.index(name)
        return np.array([r[i] for r in self.rows])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            for row in self.rows:
                w.writerow([repr(float(v)) for v in row])

    def summary(self) -> dict:
        last = self.rows[-1]
        d = self.diagnostics
        out = {
            "converged": self.converged,
            "steps": len(self.rows) - 1,
            "t_final": last[0],
            "E_final": last[1],
            "lambda_final": last[2],
            "alpha_final": last[3],
            "beta_final": last[4],
            "F2_final": last[5],
        }
        if self.residuals is not None:
            out["residual_interior"] = self.residuals.interior
            out["residual_boundary"] = self.residuals.boundary
            out["residual_boundary_node_bulk"] = self.residuals.boundary_node_bulk
        if d:
            out["floor_violations"] = sum(not r.floor_ok for r in d)
            out["ceiling_violations"] = sum(not r.ceiling_ok for r in d)
            out["velocity_violations"] = sum(not r.velocity_ok for r in d)
            out["max_constraint_error"] = max(r.constraint_error for r in d)
            out["max_preserve_residual"] = max(r.preserve_residual for r in d)
        if self.fp_log:
            out["F_p_final"] = {repr(p): v for p, v in self.fp_log[-1][1].items()}
        return out


def _log_fp(model, state, cfg):
    return (state.t, {p: cf.F_p(model, state.u, cfg.pd, p, cfg.q) for p in fp_exponents(model.n)})


def run(state: FlowState, model: WarpedModel, cfg: FlowConfig):
    """Flow until F2 and the limit residuals are below tolerance.

    Returns ``(final_state, trace)``.  Raises :class:`NonConvergence` with the
    pair as payload when ``t_max`` or ``max_steps`` is hit first.
    """
    trace = FlowTrace(rows=[_trace_row(state)])
    bounds = initial_bounds(model, state, cfg)
    trace.fp_log.append(_log_fp(model, state, cfg))
    while True:
        if state.F2 < cfg.tol_F2:
            res = limit_residuals(model, state.u, cfg.pd, cfg.q)
            if max(res.interior, res.boundary) < cfg.tol_residual:
                trace.converged = True
                trace.residuals = res
                break
        if state.t >= cfg.t_max or state.steps >= cfg.max_steps:
            trace.residuals = limit_residuals(model, state.u, cfg.pd, cfg.q)
            break
        nxt = step(state, model, cfg)
        bounds = bounds.update(nxt)
        if cfg.q is None:
            trace.diagnostics.append(diagnostics(state, nxt, bounds, model, cfg))
        trace.rows.append(_trace_row(nxt))
        if nxt.steps % cfg.log_every == 0:
            trace.fp_log.append(_log_fp(model, nxt, cfg))
        state = nxt
    if trace.fp_log[-1][0] != state.t:
        trace.fp_log.append(_log_fp(model, state, cfg))
    trace.bounds = bounds
    if not trace.converged:
        raise NonConvergence(
            f"flow stopped at t={state.t:.6g} after {state.steps} steps without converging "
            f"(F2={state.F2:.3e}, residuals {trace.residuals.interior:.3e}/{trace.residuals.boundary:.3e})",
            payload=(state, trace),
        )
    return state, trace


def flow_to_limit(model, u0, cfg):
    """init_state followed by run."""
    return run(init_state(model, u0, cfg), model, cfg)


@dataclass(frozen=True)
class UniquenessReport:
    E_gap: float
    u_gap: float
    energies_match: bool
    limits_match: bool | None
    limit_a: np.ndarray
    limit_b: np.ndarray


def uniqueness_probe(model, cfg, u0_a, u0_b, energy_tol=1e-8, u_tol=1e-6) -> UniquenessReport:
    """Run two flows; equal limit energies must force equal limits."""
    sa, _ = flow_to_limit(model, u0_a, cfg)
    sb, _ = flow_to_limit(model, u0_b, cfg)
    E_gap = abs(sa.E - sb.E)
    u_gap = float(np.abs(sa.u - sb.u).max())
    match = E_gap < energy_tol
    return UniquenessReport(
        E_gap=E_gap,
        u_gap=u_gap,
        energies_match=match,
        limits_match=(u_gap < u_tol) if match else None,
        limit_a=sa.u,
        limit_b=sb.u,
    )

