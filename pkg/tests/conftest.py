from __future__ import annotations

import numpy as np
import pytest

from subgec import graph

TOY_EDGES = [(i, (i + 1) % 12) for i in range(12)] + [(0, 6), (3, 9), (2, 7)]


def toy_graph(seed=0, c=5) -> graph.Graph:
    """12-node ring with three chords and random features."""
    rng = np.random.default_rng(seed)
    labels = np.arange(12) % 3
    splits = {"train": np.arange(0, 6), "val": np.arange(6, 9), "test": np.arange(9, 12)}
    return graph.from_edges(12, TOY_EDGES, rng.normal(size=(12, c)), labels, splits, 3, "toy")


@pytest.fixture
def toy():
    return toy_graph()


def rel_err(a, b, floor=1e-6) -> float:
    """Largest entrywise |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` over every entry of ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config._acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config._acceptance_lines


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
