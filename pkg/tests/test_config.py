import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from confflow import config
from confflow.errors import ConfigError

BASE = """\
# comment line
model.n = 3
model.grid = 101   # trailing comment
problem.f = -(1.5 + 0.5 * sin(pi * x))
problem.h = -0.5, -1.5
"""


def test_defaults_and_derived_values():
    cfg = config.parse_config(BASE)
    assert cfg["model.n"] == 3 and cfg["model.grid"] == 101
    assert cfg["model.R_F"] == -2.0
    assert cfg["problem.h"] == (-0.5, -1.5)
    assert cfg["subcritical.q"] == (1.5, 2.2, 2.8, 2.95)
    assert cfg["flow.stepper"] == "imex" and cfg["model.prepare"] is True


def test_default_exponents_stay_subcritical():
    for n in (3, 4, 5, 6, 9):
        qs = config.default_q_list(n)
        assert all(1 < q < (n + 2) / (n - 2) for q in qs) and list(qs) == sorted(qs)


def test_canonical_text_round_trips():
    cfg = config.parse_config(BASE)
    again = config.parse_config(cfg.canonical_text())
    assert again.canonical_text() == cfg.canonical_text()
    assert again.hash == cfg.hash and len(cfg.hash) == 64


def test_hash_ignores_layout_but_not_values():
    shuffled = "problem.h = -0.5,-1.5\n\nmodel.grid=101\nproblem.f = -(1.5+0.5*sin(pi*x))\nmodel.n = 3\n"
    assert config.parse_config(shuffled).hash == config.parse_config(BASE).hash
    assert config.parse_config(BASE + "run.seed = 1\n").hash != config.parse_config(BASE).hash


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 7), st.integers(16, 400), st.floats(0.1, 10.0), st.floats(1e-4, 1.0))
def test_round_trip_property(n, grid, L, a):
    text = f"model.n = {n}\nmodel.grid = {grid}\nmodel.L = {L!r}\nproblem.a = {a!r}\n"
    cfg = config.parse_config(text)
    assert config.parse_config(cfg.canonical_text()).values == cfg.values


def test_all_errors_reported_with_positions():
    text = "model.n = 3\nmodel.nn = 4\nmodel.grid\nmodel.n = 5\nproblem.a = abc\nproblem.f = 1 +\nflow.stepper = rk4\nmodel.L =\n"
    with pytest.raises(ConfigError) as info:
        config.parse_config(text)
    errs = info.value.errors
    assert any(e.startswith("line 2, column 1") and "unknown key 'model.nn'" in e for e in errs)
    assert any(e.startswith("line 3, column 1") and "expected" in e for e in errs)
    assert any(e.startswith("line 4") and "duplicate" in e and "line 1" in e for e in errs)
    assert any(e.startswith("line 5, column 13") and "problem.a" in e for e in errs)
    assert any(e.startswith("line 6, column 16") and "problem.f" in e for e in errs)
    assert any(e.startswith("line 7") and "flow.stepper" in e for e in errs)
    assert any(e.startswith("line 8") and "empty value" in e for e in errs)
    assert len(errs) == 7


@pytest.mark.parametrize(
    "line, key",
    [
        ("problem.f = 1 + x", "problem.f"),
        ("problem.h = -1, 0.5", "problem.h"),
        ("model.psi = x - 0.5", "model.psi"),
        ("subcritical.q = 1.5, 5.0", "subcritical.q"),
        ("model.grid = 8", "model.grid"),
        ("problem.b = 0", "problem.b"),
        ("monotone.eps_scale = 2", "monotone.eps_scale"),
    ],
)
def test_semantic_errors_name_the_key(line, key):
    with pytest.raises(ConfigError) as info:
        config.parse_config("model.n = 3\n" + line + "\n")
    assert key in str(info.value) and "line 2" in str(info.value)


def test_synthetic_model_requires_curvatures():
    with pytest.raises(ConfigError, match="R_bg"):
        config.parse_config("model.psi = synthetic\n")
    cfg = config.parse_config("model.psi = synthetic\nmodel.R_bg = -1 - x\nmodel.h_bg = -1, -2\n")
    assert cfg["model.R_F"] is None and cfg["model.R_bg"] == "((-1.0) - x)"


def test_replace():
    cfg = config.parse_config(BASE).replace(run__seed=4)
    assert cfg["run.seed"] == 4


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        config.load_config(tmp_path / "nope.conf")
