"""Shared graph builders for the test suite."""

import numpy as np
import pytest
from hypothesis import strategies as st

from eigenformer.graph import build_graph, is_connected


def path_graph(n, **kw):
    return build_graph(n, [(i, i + 1) for i in range(n - 1)], **kw)


def complete_graph(n, **kw):
    return build_graph(n, [(i, j) for i in range(n) for j in range(i + 1, n)], **kw)


def cycle_graph(n, **kw):
    return build_graph(n, [(i, (i + 1) % n) for i in range(n)], **kw)


def random_connected(rng, n, p=0.35, **kw):
    """Rejection-sample G(n, p) until connected."""
    while True:
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
        g = build_graph(n, pairs, **kw)
        if is_connected(g):
            return g


@st.composite
def connected_graphs(draw, min_nodes=2, max_nodes=10):
    """A random spanning tree plus random extra edges."""
    n = draw(st.integers(min_nodes, max_nodes))
    parents = [draw(st.integers(0, i - 1)) for i in range(1, n)]
    edges = {(p, i) for i, p in zip(range(1, n), parents)}
    extra = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=2 * n))
    for i, j in extra:
        if i != j:
            edges.add((min(i, j), max(i, j)))
    return build_graph(n, sorted(edges))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def report_criterion(number, passed, seconds, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'} ({seconds:.2f} s) {detail}"
    ACCEPTANCE_LINES.append(((int(str(number).rstrip("ab")), str(number)), line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
