import functools
from importlib import resources

import numpy as np
import pytest

from confflow import cli, config, geometry

ACCEPTANCE_LINES = []

SHIPPED = (3, 4, 5)


def shipped_config(n):
    text = resources.files("confflow").joinpath("configs", f"n{n}.conf").read_text()
    return config.parse_config(text)


@functools.lru_cache(maxsize=None)
def shipped_setting(n):
    """(prepared model, prep record, problem data) for a shipped config."""
    return cli.build_setting(shipped_config(n))


@functools.lru_cache(maxsize=None)
def raw_shipped_model(n):
    cfg = shipped_config(n)
    return geometry.build_warped_model(n, cfg["model.L"], cfg["model.psi"], cfg["model.R_F"], cfg["model.grid"])


def generic_data(model):
    x = model.grid / model.L
    return -(1.5 + 0.5 * np.sin(np.pi * x)), np.array([-0.5, -1.5])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
