from __future__ import annotations

import numpy as np
import pytest

from vflow import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def float64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def flip_backward(monkeypatch):
    """Negate the backward rule of one named primitive (mutation testing)."""
    def apply(op_name: str):
        original = T._emit

        def emit(op, arr, inputs, rule):
            if op == op_name:
                return original(op, arr, inputs, lambda g: tuple(None if x is None else -x for x in rule(g)))
            return original(op, arr, inputs, rule)

        monkeypatch.setattr(T, "_emit", emit)
    return apply


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
