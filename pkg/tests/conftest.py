from __future__ import annotations

import itertools

import numpy as np
import pytest

from cohconf.adg import make_problem

CASE_STUDY_EDGES = [(0, 1), (0, 2), (1, 4), (2, 4), (3, 4), (4, 6), (5, 6), (6, 8), (7, 8), (8, 9), (9, 10),
                    (10, 11)]


def random_dag(rng: np.random.Generator, n: int, p_edge: float = 0.35, n_features: int = 0,
               p_false: float = 0.3, freqs: bool = False):
    """Random DAG on ``n`` claims with edges only from lower to higher ids."""
    edges = [(u, v) for u, v in itertools.combinations(range(n), 2) if rng.random() < p_edge]
    labels = (rng.random(n) >= p_false).astype(int)
    feats = rng.normal(size=(n, n_features))
    fr = rng.uniform(0, 5, size=n) if freqs else None
    return make_problem(n, edges, labels, feats, fr)


@pytest.fixture
def case_study():
    return make_problem(12, CASE_STUDY_EDGES)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance lines collected by test_acceptance, in criterion order."""
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
