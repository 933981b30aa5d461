import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from daemon_tkg.data import SnapshotGraph  # noqa: E402


def random_snapshot(rng, num_entities, num_relations, num_edges, time=0):
    src = rng.integers(0, num_entities, num_edges)
    dst = rng.integers(0, num_entities, num_edges)
    rel = rng.integers(0, num_relations, num_edges)
    return SnapshotGraph.from_edges(time, num_entities, src, rel, dst)


def random_history(rng, num_entities, num_relations, num_snapshots, max_edges):
    return [random_snapshot(rng, num_entities, num_relations, int(rng.integers(0, max_edges + 1)), t)
            for t in range(num_snapshots)]


def perturb_params(params, rng, scale=0.3):
    """Random non-default values everywhere so zero biases / unit gains do not hide bugs."""
    return {k: v + scale * rng.standard_normal(v.shape) for k, v in params.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
