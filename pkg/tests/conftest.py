import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ustlab import RngStream, Window
from ustlab.tree import SpanningTree
from ustlab.wilson import sample_ust

settings.register_profile("ustlab", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ustlab")


def path_tree(n, root=0):
    """Hand-built path graph 0-1-...-(n-1) laid out on the x-axis."""
    sites = [(i, 0) for i in range(n)]
    edges = [((i, 0), (i + 1, 0)) for i in range(n - 1)]
    return SpanningTree.from_edges(sites, edges, (root, 0))


def centered_path(r_arm):
    """Path graph on x in [-r_arm, r_arm]."""
    sites = [(i, 0) for i in range(-r_arm, r_arm + 1)]
    edges = [((i, 0), (i + 1, 0)) for i in range(-r_arm, r_arm)]
    return SpanningTree.from_edges(sites, edges, (0, 0))


def star_tree(k, arm):
    """k arms of length ``arm`` from the origin (k <= 4, along the axes)."""
    dirs = [(1, 0), (-1, 0), (0, 1), (0, -1)][:k]
    sites = [(0, 0)]
    edges = []
    for dx, dy in dirs:
        prev = (0, 0)
        for j in range(1, arm + 1):
            s = (dx * j, dy * j)
            sites.append(s)
            edges.append((prev, s))
            prev = s
    return SpanningTree.from_edges(sites, edges, (0, 0))


@pytest.fixture(scope="session")
def small_trees():
    """A handful of wired and free realizations reused across tests."""
    out = []
    for i, (L, Lo, b) in enumerate([(4, 8, "wired"), (6, 10, "wired"), (4, 6, "free"), (8, 12, "wired")]):
        out.append(sample_ust(Window(L, Lo, b), rng=RngStream(77, i)))
    return out


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
