import csv
import json
from importlib import resources

import numpy as np
import pytest

from confflow import cli, config

SHIPPED = resources.files("confflow").joinpath("configs", "n3.conf").read_text()


def write(tmp_path, text, name="exp.conf"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run_dir(out, run_id):
    return out / "runs" / run_id


def registry(out):
    return [json.loads(line) for line in (out / "registry.jsonl").read_text().splitlines()]


def test_flow_command_outputs(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["flow", "--config", write(tmp_path, SHIPPED), "--out", str(out)]) == 0
    (rec,) = registry(out)
    d = run_dir(out, rec["run_id"])
    assert sorted(rec["manifest"]) == sorted(p.name for p in d.iterdir())
    with open(d / "trace.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "E", "lambda", "alpha", "beta", "F2", "umin", "umax", "drift", "dt"]
    lam = np.array([float(r[2]) for r in rows[1:]])
    assert np.all(np.diff(lam) >= -1e-12 * np.abs(lam[:-1]))
    summary = json.loads((d / "summary.json").read_text())
    assert summary["converged"] and "wall_time" not in summary
    assert rec["exit_code"] == 0 and rec["config_hash"] == config.parse_config(SHIPPED).hash
    assert rec["wall_time"] > 0 and rec["seed"] == 0


def test_prepare_summary(tmp_path):
    cfg = config.parse_config(SHIPPED)
    code, _, summary, _ = cli.run_command(cfg, "prepare", out=str(tmp_path))
    assert code == 0
    assert summary["R_new_max"] < 0 and max(summary["h_new"]) < 0 and summary["E_one"] < 0
    assert summary["lambda1"] <= summary["rayleigh_bound"]


def test_seed_changes_initial_data(tmp_path):
    cfg = config.parse_config(SHIPPED)
    _, a, _, _ = cli.run_command(cfg, "flow", seed=0, out=str(tmp_path))
    _, b, _, _ = cli.run_command(cfg, "flow", seed=5, out=str(tmp_path))
    ta = (run_dir(tmp_path, a) / "trace.csv").read_text()
    tb = (run_dir(tmp_path, b) / "trace.csv").read_text()
    assert ta != tb


@pytest.mark.parametrize(
    "extra, command, code",
    [
        ("model.n = 2\n", "flow", 2),
        ("flow.max_steps = 3\n", "flow", 4),
        ("flow.stepper = explicit\nflow.dt0 = 1\nflow.dt_max = 1\nflow.dt_min = 0.5\n", "flow", 3),
        ("monotone.max_iter = 2\n", "solve", 4),
        ("model.prepare = false\n", "flow", 2),
    ],
)
def test_exit_codes(tmp_path, extra, command, code, capsys):
    text = "\n".join(line for line in SHIPPED.splitlines() if line.split("=")[0].strip() not in {k.split("=")[0].strip() for k in extra.splitlines()})
    out = tmp_path / "out"
    assert cli.main([command, "--config", write(tmp_path, text + "\n" + extra), "--out", str(out)]) == code
    assert "confflow" in capsys.readouterr().err


def test_nonconvergence_still_writes_trace(tmp_path):
    cfg = config.parse_config(SHIPPED + "flow.max_steps = 3\n")
    code, run_id, _, err = cli.run_command(cfg, "flow", out=str(tmp_path))
    assert code == 4 and "flow stopped" in err
    d = run_dir(tmp_path, run_id)
    assert len((d / "trace.csv").read_text().splitlines()) == 5
    assert json.loads((d / "summary.json").read_text())["converged"] is False


def test_config_error_message_names_line(tmp_path, capsys):
    assert cli.main(["flow", "--config", write(tmp_path, "model.n = 3\nproblem.h = 1, 2\n")]) == 2
    err = capsys.readouterr().err
    assert "line 2" in err and "problem.h" in err


def test_missing_config_file(tmp_path):
    assert cli.main(["flow", "--config", str(tmp_path / "missing.conf")]) == 2


def test_report_and_registry_integrity(tmp_path, capsys):
    cfg = config.parse_config(SHIPPED + "subcritical.q = 1.5, 2.0\n")
    for command in ("flow", "solve", "invariants", "subcritical-sweep", "uniqueness-probe", "absearch"):
        code, _, _, err = cli.run_command(cfg, command, out=str(tmp_path))
        assert code == 0, (command, err)
    code, rid, summary, _ = cli.run_command(cfg, "report", out=str(tmp_path))
    assert code == 0 and len(summary["runs"]) == 6
    text = (run_dir(tmp_path, rid) / "report.txt").read_text()
    header = text.splitlines()[0].split()
    assert header[:3] == ["run_id", "command", "lambda_final"] and header[-1] == "wall_time"
    assert len(text.splitlines()) == 7
    assert text in capsys.readouterr().out
    recs = registry(tmp_path)
    seen = {}
    for rec in recs:
        d = run_dir(tmp_path, rec["run_id"])
        assert sorted(rec["manifest"]) == sorted(p.name for p in d.iterdir())
        for name in rec["manifest"]:
            key = (rec["run_id"], name)
            assert key not in seen
            seen[key] = True
    assert len({r["run_id"] for r in recs}) == len(recs)


def test_report_selection(tmp_path):
    cfg = config.parse_config(SHIPPED)
    _, a, _, _ = cli.run_command(cfg, "prepare", out=str(tmp_path))
    cli.run_command(cfg, "prepare", out=str(tmp_path))
    _, _, summary, _ = cli.run_command(cfg.replace(report__runs=(a,)), "report", out=str(tmp_path))
    assert summary["runs"] == [a]


def test_parallel_sweep_matches_serial(tmp_path):
    base = SHIPPED + "subcritical.q = 1.5, 2.0\n"
    _, a, _, _ = cli.run_command(config.parse_config(base), "subcritical-sweep", out=str(tmp_path))
    _, b, _, _ = cli.run_command(config.parse_config(base + "run.workers = 2\n"), "subcritical-sweep", out=str(tmp_path))
    assert (run_dir(tmp_path, a) / "sweep.csv").read_text() == (run_dir(tmp_path, b) / "sweep.csv").read_text()


def test_synthetic_config(tmp_path):
    text = "model.n = 3\nmodel.psi = synthetic\nmodel.R_bg = -2 - x\nmodel.h_bg = -1, -0.5\nmodel.grid = 81\n"
    code, _, summary, _ = cli.run_command(config.parse_config(text), "flow", out=str(tmp_path))
    assert code == 0 and summary["converged"]
