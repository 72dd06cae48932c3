from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cohconf.adg import ancestors, is_coherently_factual, make_problem
from cohconf.errors import EmptyRisks, EmptyScores, MissingFrequency, SchemaMismatch
from cohconf.hard_cf import (ScorerParams, Sentinel, build_tau_grid, frequency_baseline_risk, frequency_score,
                             generate_subgraph, hard_calibrate, hard_nonconformity, hard_predict, quantile_index,
                             risk_scores, split_quantile)

from conftest import random_dag


# ------------------------------------------------------------------ oracles

def subgraph_oracle(p, risks, tau, coherence):
    """Largest subset of passing claims that is ancestor-closed, by enumeration."""
    passing = [v for v in range(p.n) if risks[v] <= tau]
    if not coherence:
        return set(passing)
    best = set()
    for k in range(len(passing) + 1):
        for s in itertools.combinations(passing, k):
            s = set(s)
            if all(ancestors(p, v) <= s for v in s) and len(s) > len(best):
                best = s
    return best


def nonconformity_oracle(p, risks, grid, coherence=True):
    """Double loop over (tau, tau') pairs, straight from the definition."""
    ok = lambda t: (is_coherently_factual(p, subgraph_oracle(p, risks, t, coherence)) if coherence
                    else all(p.labels[v] == 1 for v in subgraph_oracle(p, risks, t, coherence)))
    best = grid.values[0]
    for t in grid.values:
        if all(ok(tp) for tp in grid.values if tp <= t):
            best = t
    return float(best)


def predict_oracle(p, risks, grid, tau_hat):
    below = [t for t in grid.values if t < tau_hat]
    if not below:
        return None, set()
    t = max(below)
    return t, subgraph_oracle(p, risks, t, True)


# -------------------------------------------------------------------- tests

class TestRiskScores:
    def test_zero_scorer(self):
        p = make_problem(3, [], features=np.ones((3, 2)))
        np.testing.assert_array_equal(risk_scores(ScorerParams.zeros(2), p), 0.0)

    def test_dot_product(self):
        p = make_problem(1, [], features=np.array([[0.3, 9.9]]))
        assert risk_scores(ScorerParams([1.0, 0.0], 0.0, 1.0), p)[0] == pytest.approx(0.7)

    def test_offset_shift(self, rng):
        p = random_dag(rng, 5, n_features=3)
        sc = ScorerParams(rng.normal(size=3), 0.4, 1.0)
        shifted = ScorerParams(sc.weights, 0.4, 3.5)
        np.testing.assert_allclose(risk_scores(shifted, p) - risk_scores(sc, p), 2.5)

    def test_schema_mismatch(self):
        p = make_problem(2, [], features=np.ones((2, 3)))
        with pytest.raises(SchemaMismatch):
            risk_scores(ScorerParams.zeros(2), p)


class TestGrid:
    def test_worked_example_risks(self):
        np.testing.assert_allclose(build_tau_grid([0.2, 0.9, 0.1], 20).values, [-19.9, 0.1, 0.2, 0.9, 20.9])

    def test_single_and_duplicate(self):
        np.testing.assert_array_equal(build_tau_grid([1.0], 1).values, [0, 1, 2])
        np.testing.assert_array_equal(build_tau_grid([0.5, 0.5], 1).values, [-0.5, 0.5, 1.5])

    def test_empty(self):
        with pytest.raises(EmptyRisks):
            build_tau_grid([], 1.0)


class TestSubgraph:
    def test_coherence_removes_orphans(self):
        p = make_problem(2, [(0, 1)])
        assert generate_subgraph(p, [0.9, 0.1], 0.5) == set()
        assert generate_subgraph(p, [0.9, 0.1], 0.5, coherence=False) == {1}

    def test_threshold_only(self):
        assert generate_subgraph(make_problem(3, []), [0.2, 0.9, 0.1], 0.5) == {0, 2}

    def test_nested_and_closed(self, rng):
        for _ in range(200):
            p = random_dag(rng, int(rng.integers(1, 9)))
            r = rng.normal(size=p.n)
            grid = build_tau_grid(r, 1.0)
            for coh in (True, False):
                prev = set()
                for t in grid.values:
                    s = generate_subgraph(p, r, t, coh)
                    assert prev <= s
                    prev = s
                    if coh:
                        assert all(ancestors(p, v) <= s for v in s)


class TestNonconformity:
    def test_all_true(self):
        p = make_problem(2, [(0, 1)])
        assert hard_nonconformity(p, [0.3, 0.7], m=1.0) == pytest.approx(1.7)

    def test_chain_example(self):
        p = make_problem(2, [(0, 1)], labels=[1, 0])
        assert hard_nonconformity(p, [0.3, 0.7], m=1.0) == pytest.approx(0.3)

    def test_independent_false_claim(self):
        p = make_problem(2, [], labels=[0, 1])
        assert hard_nonconformity(p, [0.3, 0.7], m=1.0) == pytest.approx(-0.7)


class TestSplitQuantile:
    def test_orientations(self):
        scores = np.arange(1, 10)
        assert split_quantile(scores, 0.1, "upper").tau_hat == 9
        assert split_quantile(scores, 0.1, "lower").tau_hat == 1
        assert split_quantile([4.2], 0.5, "upper").tau_hat == 4.2

    def test_sentinels(self):
        assert split_quantile([1.0, 2.0], 0.1, "lower").tau_hat is Sentinel.NEG_INF
        assert split_quantile([1.0, 2.0], 0.1, "upper").tau_hat is Sentinel.POS_INF

    def test_index_guard_against_float_fuzz(self):
        assert quantile_index(9, 0.1, "upper") == 9

    def test_empty(self):
        with pytest.raises(EmptyScores):
            split_quantile([], 0.1)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=60), st.floats(0.01, 0.99))
    def test_lower_is_kth_largest(self, xs, alpha):
        th = split_quantile(xs, alpha, "lower")
        j = int(np.ceil(round((1 - alpha) * (len(xs) + 1), 9)))
        if j > len(xs):
            assert th.tau_hat is Sentinel.NEG_INF
        else:
            assert th.tau_hat == sorted(xs, reverse=True)[j - 1]


class TestPredict:
    def test_worked_example(self):
        p = make_problem(3, [])
        r = [0.2, 0.9, 0.1]
        tau_star, kept = hard_predict(p, r, build_tau_grid(r, 20), 0.5)
        assert tau_star == pytest.approx(0.2)
        assert kept == {0, 2}

    def test_threshold_below_grid(self):
        p = make_problem(3, [])
        r = [0.2, 0.9, 0.1]
        assert hard_predict(p, r, build_tau_grid(r, 20), -50.0) == (Sentinel.NEG_INF, set())

    def test_infinite_sentinels(self):
        p = make_problem(2, [(0, 1)])
        r = [0.2, 0.9]
        g = build_tau_grid(r, 1.0)
        assert hard_predict(p, r, g, Sentinel.POS_INF) == (pytest.approx(1.9), {0, 1})
        assert hard_predict(p, r, g, Sentinel.NEG_INF)[1] == set()


class TestBruteForceOracles:
    def test_five_hundred_small_problems(self, rng):
        for _ in range(500):
            p = random_dag(rng, int(rng.integers(1, 7)))
            # coarse risks force ties, which the grid must deduplicate
            r = rng.integers(0, 4, size=p.n) / 2.0
            grid = build_tau_grid(r, 1.0)
            for coh in (True, False):
                for t in grid.values:
                    assert generate_subgraph(p, r, t, coh) == subgraph_oracle(p, r, t, coh)
                assert hard_nonconformity(p, r, grid=grid, coherence=coh) == nonconformity_oracle(p, r, grid, coh)
            tau_hat = float(rng.choice(grid.values)) + float(rng.choice([0.0, 0.25]))
            t_star, kept = hard_predict(p, r, grid, tau_hat)
            t_o, kept_o = predict_oracle(p, r, grid, tau_hat)
            assert kept == kept_o
            assert (t_star is Sentinel.NEG_INF) if t_o is None else t_star == t_o


class TestFrequencyBaseline:
    def test_pure_frequency(self):
        p = make_problem(3, [(0, 1)], freqs=[1.0, 2.0, 3.0])
        np.testing.assert_array_equal(frequency_score(p, 0.0), [1, 2, 3])
        np.testing.assert_array_equal(frequency_baseline_risk(p), [2, 1, 0])

    def test_descendant_median_and_sink_fallback(self):
        p = make_problem(4, [(0, 1), (0, 2), (0, 3)], freqs=[0.0, 2.0, 4.0, 6.0])
        s = frequency_score(p, 1.0)
        assert s[0] == 4.0
        assert s[3] == 6.0

    def test_missing_frequency(self):
        with pytest.raises(MissingFrequency):
            frequency_score(make_problem(2, []), 0.0)


class TestCalibration:
    def test_calibrate_matches_direct_quantile(self, rng):
        probs = [random_dag(rng, int(rng.integers(2, 7))) for _ in range(40)]
        risks = [rng.normal(size=p.n) for p in probs]
        cal = hard_calibrate(probs, risks, m=2.0)
        direct = [hard_nonconformity(p, r, m=2.0) for p, r in zip(probs, risks)]
        assert cal.at(0.2).tau_hat == split_quantile(direct, 0.2).tau_hat
