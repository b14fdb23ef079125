import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bnpspace.data import CountMatrix, SizeFactors, SpatialGraph  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def make_counts(y):
    y = np.asarray(y, dtype=np.int64)
    n, p = y.shape
    return CountMatrix(y, [f"s{i}" for i in range(n)], [f"g{j}" for j in range(p)])


def path_graph(n):
    return SpatialGraph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


@pytest.fixture
def tiny():
    """Four spots on a path, two genes, a few zeros."""
    y = np.array([[0, 3], [1, 0], [6, 2], [5, 0]])
    return make_counts(y), SizeFactors(np.array([0.8, 1.1, 1.2, 0.9])), path_graph(4)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
