import numpy as np
import pytest

from deepgntk.graph import FeatureMatrix, Graph, path_graph


@pytest.fixture
def path3():
    return path_graph(3)


@pytest.fixture
def triangle():
    return Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])


@pytest.fixture
def small_graph():
    """Connected 6-node graph with 10 edges."""
    return Graph.from_edges(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5),
                                (0, 2), (1, 3), (2, 4), (3, 5), (0, 5)])


@pytest.fixture
def random_features():
    def make(n, d=4, seed=0):
        return FeatureMatrix.from_array(np.random.default_rng(seed).standard_normal((n, d)))
    return make


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in sys.modules.items()
                if name.rsplit(".", 1)[-1] == "test_acceptance"), None)
    lines = mod.summary_lines() if mod is not None else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
