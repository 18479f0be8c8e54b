"""Command-line experiment runner.

    confflow <command> --config PATH [--seed N] [--out DIR]

Each invocation writes into ``DIR/runs/<run_id>/`` and appends one record to
``DIR/registry.jsonl``.  Numeric outputs depend only on (config, seed); wall
time is kept out of the run directory and recorded in the registry only.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone

import numpy as np

from . import conformal as cf
from . import elliptic as el
from . import expr as ex
from . import flow as fl
from . import geometry as geo
from . import invariants as inv
from .config import ExperimentConfig, load_config
from .errors import ConfigError, ConfflowError, NonConvergence

COMMANDS = (
    "prepare",
    "flow",
    "solve",
    "invariants",
    "absearch",
    "subcritical-sweep",
    "uniqueness-probe",
    "report",
)


class RunWriter:
    """Sole writer for one run directory; tracks the file manifest."""

    def __init__(self, root, run_id):
        self.dir = os.path.join(root, "runs", run_id)
        os.makedirs(self.dir, exist_ok=False)
        self.files = []

    def path(self, name):
        self.files.append(name)
        return os.path.join(self.dir, name)

    def json(self, name, obj):
        with open(self.path(name), "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")

    def csv(self, name, header, rows):
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])

    def text(self, name, body):
        with open(self.path(name), "w", encoding="utf-8") as fh:
            fh.write(body)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _new_run_id(root, command, cfg_hash):
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = f"{stamp}-{command}-{cfg_hash[:8]}"
    run_id, k = base, 1
    while os.path.exists(os.path.join(root, "runs", run_id)):
        k += 1
        run_id = f"{base}-{k}"
    return run_id


def build_setting(cfg: ExperimentConfig):
    """Model (prepared if requested), preparation record and problem data from a config."""
    n, L, grid = cfg["model.n"], cfg["model.L"], cfg["model.grid"]
    x = np.linspace(0.0, L, grid)
    if cfg["model.psi"] == "synthetic":
        R = ex.evaluate(ex.parse(cfg["model.R_bg"]), x)
        model = geo.build_synthetic_model(n, L, grid, R, cfg["model.h_bg"])
    else:
        model = geo.build_warped_model(n, L, cfg["model.psi"], cfg["model.R_F"], grid)
    prep = None
    if cfg["model.prepare"] and np.all(model.h_bg == 0):
        prep = el.prepare_background(model, cfg["model.delta"])
        model = prep.model
    f = model.R_bg if cfg["problem.f"] == "background" else ex.evaluate(ex.parse(cfg["problem.f"]), x)
    h = model.h_bg if cfg["problem.h"] == "background" else np.array(cfg["problem.h"])
    return model, prep, cf.ProblemData(cfg["problem.a"], cfg["problem.b"], f, h)


def flow_config(cfg, pd, **extra) -> fl.FlowConfig:
    return fl.FlowConfig(
        pd=pd,
        dt0=cfg["flow.dt0"],
        dt_min=cfg["flow.dt_min"],
        dt_max=cfg["flow.dt_max"],
        t_max=cfg["flow.t_max"],
        tol_F2=cfg["flow.tol_F2"],
        tol_residual=cfg["flow.tol_residual"],
        stepper=cfg["flow.stepper"],
        log_every=cfg["flow.log_every"],
        max_steps=cfg["flow.max_steps"],
        **extra,
    )


def _flow_opts(cfg):
    keys = ("dt0", "dt_min", "dt_max", "t_max", "tol_F2", "tol_residual", "stepper", "log_every", "max_steps")
    return {k: cfg[f"flow.{k}"] for k in keys}


def _initial(cfg, model, seed, amplitude=None):
    amp = cfg["init.perturbation"] if amplitude is None else amplitude
    return fl.perturbed_constant(model, amp, cfg["init.modes"], seed)


def cmd_prepare(cfg, seed, w: RunWriter):
    model, prep, _ = build_setting(cfg)
    if prep is None:
        raise ConfigError("prepare needs a model with R_bg < 0 and h_bg = (0, 0) and model.prepare = true")
    w.csv("background.csv", ("x", "phi", "R_new"), zip(model.grid, prep.phi, prep.R_new))
    return {
        "eps0": prep.eps0,
        "lambda1": prep.lam1,
        "rayleigh_bound": -prep.eps0 * model.volume / model.area,
        "R_new_max": float(prep.R_new.max()),
        "R_new_min": float(prep.R_new.min()),
        "h_new": prep.h_new,
        "E_one": prep.E_one,
        "halvings": prep.halvings,
    }


def _write_flow(w, model, pd, state, trace, tag=""):
    trace.write_csv(w.path(f"trace{tag}.csv"))
    curv = cf.curvatures(model, state.u)
    w.csv(f"limit{tag}.csv", ("x", "u", "R_g", "f"), zip(model.grid, state.u, curv.R_g, pd.f))


def cmd_flow(cfg, seed, w):
    model, _, pd = build_setting(cfg)
    fc = flow_config(cfg, pd)
    state = fl.init_state(model, _initial(cfg, model, seed), fc)
    try:
        state, trace = fl.run(state, model, fc)
    except NonConvergence as exc:
        state, trace = exc.payload
        _write_flow(w, model, pd, state, trace)
        w.json("summary.json", trace.summary())
        raise
    _write_flow(w, model, pd, state, trace)
    return trace.summary()


def cmd_solve(cfg, seed, w):
    model, _, pd = build_setting(cfg)
    eps = el.choose_epsilon(model, pd) * cfg["monotone.eps_scale"]
    mc = el.monotone_config(model, pd, eps, tol=cfg["monotone.tol"], max_iter=cfg["monotone.max_iter"])
    sol = el.monotone_solve(model, pd, mc)
    w.csv("solution.csv", ("x", "u"), zip(model.grid, sol.u))
    return {
        "eps": mc.eps,
        "N": mc.N,
        "H": mc.H,
        "iterations": sol.iterations,
        "monotone": sol.monotone_flag,
        "residual_interior": sol.residual_interior,
        "residual_boundary": sol.residual_boundary,
        "u_min": float(sol.u.min()),
        "u_max": float(sol.u.max()),
    }


def cmd_invariants(cfg, seed, w):
    model, _, pd = build_setting(cfg)
    Y = inv.estimate_Y(model, cfg["invariants.restarts"], seed)
    Q = inv.estimate_Qb(model, cfg["invariants.restarts"], seed)
    res = inv.y_ab(model, pd, flow_opts=_flow_opts(cfg))
    w.csv("minimizers.csv", ("x", "phi_Y", "phi_Q", "u_ab"), zip(model.grid, Y.phi, Q.phi, res.u))
    return {
        "Y_est": Y.value,
        "Y_flagged": Y.flagged,
        "Q_est": Q.value,
        "Q_flagged": Q.flagged,
        "a": pd.a,
        "b": pd.b,
        "Y_ab": res.Y_ab,
        "lambda_final": res.lam,
        "alpha_final": res.alpha,
        "beta_final": res.beta,
        "rho": res.rho,
        "preserve_residual": res.preserve_residual,
        "sandwich_constant": inv.sandwich_constant(model, pd),
        "sandwich_holds": inv.sandwich_holds(model, pd, Y.value, Q.value, res.Y_ab),
        "residual_interior": res.residuals.interior,
        "residual_boundary": res.residuals.boundary,
    }


def cmd_absearch(cfg, seed, w):
    model, _, pd = build_setting(cfg)
    r = inv.ab_search(
        model,
        pd.f,
        pd.h,
        cfg["absearch.a0"],
        cfg["absearch.b0"],
        cfg["absearch.a1"],
        cfg["absearch.b1"],
        cfg["absearch.tol"],
        cfg["absearch.max_expand"],
        flow_opts=_flow_opts(cfg),
    )
    gap, sol = inv.verify_prescribed(model, r, pd.f, pd.h)
    w.csv("solution.csv", ("x", "u_scaled", "u_monotone"), zip(model.grid, r.u_scaled, sol.u))
    w.csv("path.csv", ("s", "rho"), r.evaluations)
    return {
        "a_star": r.a,
        "b_star": r.b,
        "rho": r.rho,
        "mu_star": r.mu,
        "endpoint_rho": list(r.endpoint_rho),
        "residual_R": r.residual_R,
        "residual_h": r.residual_h,
        "scaling_defects": list(r.scaling_defects),
        "monotone_gap": gap,
    }


def _subcritical_point(args):
    cfg_vals, q = args
    model, _, pd = build_setting(ExperimentConfig(cfg_vals))
    r = el.subcritical_solve(model, pd, q, flow_cfg=_flow_opts(ExperimentConfig(cfg_vals)))
    return q, r.mu, r.lam, r.alpha, r.beta, r.residual_interior, r.residual_boundary


def cmd_subcritical(cfg, seed, w):
    qs = cfg["subcritical.q"]
    jobs = [(cfg.values, q) for q in qs]
    if cfg["run.workers"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["run.workers"]) as pool:
            rows = list(pool.map(_subcritical_point, jobs))
    else:
        rows = [_subcritical_point(j) for j in jobs]
    model, _, pd = build_setting(cfg)
    Y = inv.y_ab(model, pd, flow_opts=_flow_opts(cfg)).Y_ab
    w.csv("sweep.csv", ("q", "mu_q", "lambda_q", "alpha_q", "beta_q", "res_int", "res_bd"), rows)
    return {"Y_ab": Y, "q": list(qs), "mu_q": [r[1] for r in rows], "gap_last": rows[-1][1] - Y}


def cmd_uniqueness(cfg, seed, w):
    model, _, pd = build_setting(cfg)
    fc = flow_config(cfg, pd)
    u_a = _initial(cfg, model, seed)
    u_b = u_a * _initial(cfg, model, seed + 1, cfg["uniqueness.perturbation"])
    rep = fl.uniqueness_probe(model, fc, u_a, u_b)
    w.csv("limits.csv", ("x", "u_a", "u_b"), zip(model.grid, rep.limit_a, rep.limit_b))
    return {
        "E_gap": rep.E_gap,
        "u_gap": rep.u_gap,
        "energies_match": rep.energies_match,
        "limits_match": rep.limits_match,
    }


REPORT_COLUMNS = ("run_id", "command", "lambda_final", "alpha_final", "beta_final", "residual_interior", "residual_boundary", "wall_time")


def read_registry(root):
    path = os.path.join(root, "registry.jsonl")
    if not os.path.exists(path):
        return []
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return "-" if v is None else str(v)


def render_report(records) -> str:
    rows = [REPORT_COLUMNS]
    for rec in records:
        m = rec.get("summary", {})
        rows.append(
            (
                rec["run_id"],
                rec["command"],
                *(_fmt(m.get(k)) for k in REPORT_COLUMNS[2:7]),
                _fmt(rec.get("wall_time")),
            )
        )
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(str(c).ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(lines) + "\n"


def cmd_report(cfg, seed, w, root):
    records = [r for r in read_registry(root) if r["command"] != "report"]
    sel = cfg["report.runs"]
    if sel != ("all",):
        records = [r for r in records if r["run_id"] in sel]
    body = render_report(records)
    w.text("report.txt", body)
    sys.stdout.write(body)
    return {"runs": [r["run_id"] for r in records]}


HANDLERS = {
    "prepare": cmd_prepare,
    "flow": cmd_flow,
    "solve": cmd_solve,
    "invariants": cmd_invariants,
    "absearch": cmd_absearch,
    "subcritical-sweep": cmd_subcritical,
    "uniqueness-probe": cmd_uniqueness,
}


def run_command(cfg: ExperimentConfig, command, seed=None, out=None):
    """Execute ``command``; returns (exit_code, run_id, summary)."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    seed = cfg["run.seed"] if seed is None else int(seed)
    root = cfg["output.dir"] if out is None else out
    os.makedirs(root, exist_ok=True)
    run_id = _new_run_id(root, command, cfg.hash)
    w = RunWriter(root, run_id)
    w.text("config.txt", cfg.canonical_text())
    t0 = time.perf_counter()
    code, summary, error = 0, {}, None
    try:
        if command == "report":
            summary = cmd_report(cfg, seed, w, root)
        else:
            summary = HANDLERS[command](cfg, seed, w)
        w.json("summary.json", summary)
    except ConfflowError as exc:
        code, error = exc.exit_code, str(exc)
        if "summary.json" not in w.files:
            w.json("summary.json", {"error": error})
    record = {
        "run_id": run_id,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config_hash": cfg.hash,
        "command": command,
        "seed": seed,
        "exit_code": code,
        "error": error,
        "summary": summary,
        "manifest": sorted(w.files),
        "wall_time": time.perf_counter() - t0,
    }
    with open(os.path.join(root, "registry.jsonl"), "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True, default=_jsonable) + "\n")
    return code, run_id, summary, error


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="confflow", description="Prescribed curvature flow laboratory.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="flat key = value config file")
    parser.add_argument("--seed", type=int, default=None, help="overrides run.seed")
    parser.add_argument("--out", default=None, help="overrides output.dir")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        code, run_id, _, error = run_command(cfg, args.command, args.seed, args.out)
    except ConfflowError as exc:
        print(f"confflow: error: {exc}", file=sys.stderr)
        return exc.exit_code
    if code:
        print(f"confflow: {args.command} failed (run {run_id}): {error}", file=sys.stderr)
    else:
        print(f"confflow: {args.command} ok (run {run_id})", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
