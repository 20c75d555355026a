import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from frailscan.spatial import StudyRegion  # noqa: E402


def path_region(n, spacing=1.0):
    """Units on a line, each adjacent to the next."""
    adj = np.zeros((n, n), dtype=int)
    for i in range(n - 1):
        adj[i, i + 1] = adj[i + 1, i] = 1
    coords = np.c_[spacing * np.arange(n), np.zeros(n)]
    return StudyRegion([f"u{i + 1}" for i in range(n)], coords, adj)


def random_region(rng, k, p_edge=0.4):
    """Connected random graph: a random spanning path plus extra edges."""
    adj = (rng.random((k, k)) < p_edge).astype(int)
    adj = np.triu(adj, 1)
    perm = rng.permutation(k)
    for a, b in zip(perm[:-1], perm[1:]):
        adj[min(a, b), max(a, b)] = 1
    adj = adj + adj.T
    return StudyRegion([f"u{i}" for i in range(k)], rng.uniform(0, 10, (k, 2)), adj)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
