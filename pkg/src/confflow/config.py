"""Flat ``section.key = value`` experiment configuration.

Lines starting with ``#`` and trailing ``# ...`` are comments.  Every key has
a type and a default; parsing collects all problems before failing and
reports them with line and column.  The canonical text (resolved values,
sorted keys) is what the configuration hash is computed from.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import expr as ex
from .errors import ConfigError


def _pair(text):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError("expected two comma-separated numbers")
    return tuple(float(p) for p in parts)


def _floats(text):
    vals = [float(p) for p in text.split(",") if p.strip()]
    if not vals:
        raise ValueError("expected a comma-separated list of numbers")
    return tuple(vals)


def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError("expected true or false")


def _int(text):
    v = float(text)
    if v != int(v):
        raise ValueError("expected an integer")
    return int(v)


def _expr(text):
    return str(ex.parse(text))


def _expr_or(word):
    def conv(text):
        return word if text == word else _expr(text)

    return conv


def _pair_or(word):
    def conv(text):
        return word if text == word else _pair(text)

    return conv


def _choice(*opts):
    def conv(text):
        if text not in opts:
            raise ValueError(f"expected one of {', '.join(opts)}")
        return text

    return conv


def _words(text):
    return tuple(w.strip() for w in text.split(",") if w.strip())


# key -> (converter, default)
SCHEMA = {
    "model.n": (_int, 3),
    "model.L": (float, 1.0),
    "model.grid": (_int, 201),
    "model.psi": (_expr_or("synthetic"), "1.0"),
    "model.R_F": (float, None),
    "model.R_bg": (_expr, None),
    "model.h_bg": (_pair, None),
    "model.prepare": (_bool, True),
    "model.delta": (float, 1.0),
    "problem.a": (float, 1.0),
    "problem.b": (float, 1.0),
    "problem.f": (_expr_or("background"), "background"),
    "problem.h": (_pair_or("background"), "background"),
    "init.perturbation": (float, 0.2),
    "init.modes": (_int, 3),
    "flow.dt0": (float, 1e-2),
    "flow.dt_min": (float, 1e-12),
    "flow.dt_max": (float, 2.0),
    "flow.t_max": (float, 1e4),
    "flow.tol_F2": (float, 1e-16),
    "flow.tol_residual": (float, 1e-7),
    "flow.stepper": (_choice("imex", "explicit"), "imex"),
    "flow.log_every": (_int, 10),
    "flow.max_steps": (_int, 100_000),
    "monotone.tol": (float, 1e-10),
    "monotone.max_iter": (_int, 50_000),
    "monotone.eps_scale": (float, 1.0),
    "subcritical.q": (_floats, None),
    "absearch.a0": (float, 1e-3),
    "absearch.b0": (float, 1.0),
    "absearch.a1": (float, 1.0),
    "absearch.b1": (float, 1e-3),
    "absearch.tol": (float, 1e-6),
    "absearch.max_expand": (_int, 3),
    "invariants.restarts": (_int, 3),
    "uniqueness.perturbation": (float, 0.05),
    "run.seed": (_int, 0),
    "run.workers": (_int, 1),
    "output.dir": (str, "out"),
    "report.runs": (_words, ("all",)),
}


def _render(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_render(x) for x in v)
    return str(v)


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def replace(self, **kw) -> "ExperimentConfig":
        vals = dict(self.values)
        for k, v in kw.items():
            vals[k.replace("__", ".")] = v
        return ExperimentConfig(vals)

    def canonical_text(self) -> str:
        return "".join(f"{k} = {_render(self.values[k])}\n" for k in sorted(self.values) if self.values[k] is not None)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()


def _split_comment(line):
    i = line.find("#")
    return line if i < 0 else line[:i]


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate; raises ConfigError listing every problem found."""
    errors = []
    vals = {k: d for k, (_, d) in SCHEMA.items()}
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _split_comment(raw)
        if not line.strip():
            continue
        if "=" not in line:
            col = len(line) - len(line.lstrip()) + 1
            errors.append(f"line {lineno}, column {col}: expected 'section.key = value'")
            continue
        key_part, val_part = line.split("=", 1)
        key = key_part.strip()
        kcol = len(key_part) - len(key_part.lstrip()) + 1
        vcol = len(key_part) + 2 + len(val_part) - len(val_part.lstrip())
        value = val_part.strip()
        if key not in SCHEMA:
            errors.append(f"line {lineno}, column {kcol}: unknown key {key!r}")
            continue
        if key in seen:
            errors.append(f"line {lineno}, column {kcol}: duplicate key {key!r} (first on line {seen[key]})")
            continue
        seen[key] = lineno
        if not value:
            errors.append(f"line {lineno}, column {vcol}: empty value for {key!r}")
            continue
        conv = SCHEMA[key][0]
        try:
            vals[key] = conv(value)
        except ex.ExprError as exc:
            col = vcol + (exc.column - 1 if exc.column else 0)
            msg = str(exc).split(" (column")[0]
            errors.append(f"line {lineno}, column {col}: {key}: {msg}")
        except (ValueError, TypeError) as exc:
            errors.append(f"line {lineno}, column {vcol}: {key}: {exc}")
    if not errors:
        errors.extend(_semantic_checks(vals, seen))
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors), errors)
    if vals["model.R_F"] is None and vals["model.psi"] != "synthetic":
        n = vals["model.n"]
        vals["model.R_F"] = float(-(n - 1) * (n - 2))
    if vals["subcritical.q"] is None:
        vals["subcritical.q"] = default_q_list(vals["model.n"])
    return ExperimentConfig(vals)


def default_q_list(n):
    """Four exponents climbing toward the critical one; (1.5, 2.2, 2.8, 2.95) for n = 3."""
    qc = (n + 2) / (n - 2)
    return tuple(round(1 + (qc - 1) * t, 12) for t in (0.125, 0.3, 0.45, 0.4875))


def _where(seen, key):
    return f"line {seen[key]}: " if key in seen else ""


def _semantic_checks(vals, seen):
    errs = []
    n, L, grid = vals["model.n"], vals["model.L"], vals["model.grid"]
    if n < 3:
        errs.append(f"{_where(seen, 'model.n')}model.n must be >= 3")
    if L <= 0:
        errs.append(f"{_where(seen, 'model.L')}model.L must be positive")
    if grid < 16:
        errs.append(f"{_where(seen, 'model.grid')}model.grid must be >= 16")
    for key in ("problem.a", "problem.b"):
        if vals[key] <= 0:
            errs.append(f"{_where(seen, key)}{key} must be positive")
    if errs:
        return errs
    x = np.linspace(0.0, L, grid)
    if vals["model.psi"] == "synthetic":
        if vals["model.R_bg"] is None or vals["model.h_bg"] is None:
            errs.append("synthetic models need model.R_bg and model.h_bg")
        else:
            try:
                ex.evaluate(ex.parse(vals["model.R_bg"]), x)
            except ex.ExprError as exc:
                errs.append(f"{_where(seen, 'model.R_bg')}model.R_bg: {exc}")
    else:
        try:
            psi = ex.evaluate(ex.parse(vals["model.psi"]), x)
            if np.any(psi <= 0):
                errs.append(f"{_where(seen, 'model.psi')}model.psi must be positive on [0, L]")
        except ex.ExprError as exc:
            errs.append(f"{_where(seen, 'model.psi')}model.psi: {exc}")
    if vals["problem.f"] != "background":
        try:
            f = ex.evaluate(ex.parse(vals["problem.f"]), x)
            if np.any(f >= 0):
                errs.append(f"{_where(seen, 'problem.f')}problem.f must be negative on [0, L] (f < 0 is required)")
        except ex.ExprError as exc:
            errs.append(f"{_where(seen, 'problem.f')}problem.f: {exc}")
    h = vals["problem.h"]
    if h != "background" and any(v >= 0 for v in h):
        errs.append(f"{_where(seen, 'problem.h')}problem.h must be negative at both ends (h < 0 is required)")
    if vals["monotone.eps_scale"] <= 0 or vals["monotone.eps_scale"] > 1:
        errs.append(f"{_where(seen, 'monotone.eps_scale')}monotone.eps_scale must lie in (0, 1]")
    qc = (n + 2) / (n - 2)
    bad = [q for q in vals["subcritical.q"] or () if not 1 <= q < qc]
    if bad:
        errs.append(f"{_where(seen, 'subcritical.q')}subcritical.q entries must lie in [1, {qc:g}): {bad}")
    if vals["run.workers"] < 1:
        errs.append(f"{_where(seen, 'run.workers')}run.workers must be >= 1")
    return errs


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
