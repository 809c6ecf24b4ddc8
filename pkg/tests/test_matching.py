import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from anat9.matching import (
    CostCoeffs,
    GroundTruth,
    MatchingError,
    Prediction,
    build_index_cost,
    cost_matrix,
    hungarian,
    match,
    pair_cost,
    steer,
)


def brute(cost):
    n, q = cost.shape
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(q), n))


def onehot(c, n):
    v = np.zeros(n + 1)
    v[c] = 1.0
    return v


T = np.full(9, 0.5)


def test_index_cost_examples():
    m = build_index_cost(10)
    assert m[3, 3] == 0
    assert m[0, 9] == pytest.approx(0.9)
    assert np.array_equal(m, m.T)


def test_pair_cost_examples():
    m = build_index_cost(24)
    c = CostCoeffs()
    assert pair_cost(Prediction(5, onehot(5, 24), T), GroundTruth(5, T), c, m) == pytest.approx(-1, abs=1e-12)
    off = T.copy()
    off[:3] += 0.01
    assert pair_cost(Prediction(5, onehot(5, 24), off), GroundTruth(5, T), c, m) == pytest.approx(-0.7, abs=1e-12)
    assert pair_cost(Prediction(1, onehot(5, 24), T), GroundTruth(5, T), c, m) == pytest.approx(
        -1 + 4 * 4 / 24, abs=1e-12)


def test_pair_cost_bad_label():
    with pytest.raises(MatchingError):
        pair_cost(Prediction(1, onehot(1, 3), T), GroundTruth(4, T), CostCoeffs(), build_index_cost(3))


def test_hungarian_examples():
    a = np.array([[0, 5, 5], [5, 0, 5], [5, 5, 0]], float)
    assert list(hungarian(a)) == [0, 1, 2]
    b = np.array([[4, 1, 3], [2, 0, 5], [3, 2, 2]], float)
    cols = hungarian(b)
    assert list(cols) == [1, 0, 2]
    assert sum(b[i, c] for i, c in enumerate(cols)) == 5 == brute(b)


def test_hungarian_random_square(rng):
    for _ in range(300):
        n = int(rng.integers(1, 8))
        c = rng.normal(size=(n, n)) * rng.choice([1, 100])
        cols = hungarian(c)
        assert len(set(cols)) == n
        assert np.isclose(sum(c[i, j] for i, j in enumerate(cols)), brute(c), rtol=0, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.integers(n, 7).flatmap(
    lambda q: arrays(np.float64, (n, q), elements=st.integers(-20, 20).map(float)))))
def test_hungarian_rectangular_integer(c):
    cols = hungarian(c)
    assert len(set(cols)) == c.shape[0]
    assert sum(c[i, j] for i, j in enumerate(cols)) == brute(c)


def test_hungarian_rejects_tall():
    with pytest.raises(MatchingError):
        hungarian(np.zeros((3, 2)))


def test_hungarian_rejects_nan():
    with pytest.raises(MatchingError):
        hungarian(np.array([[np.nan]]))


def test_zero_noise_identity():
    rng = np.random.default_rng(0)
    targets = rng.uniform(0.2, 0.8, (8, 9))
    preds = [Prediction(q, onehot(q, 8), targets[q - 1]) for q in range(1, 9)]
    gts = [GroundTruth(c, targets[c - 1]) for c in range(1, 9)]
    asg = match(preds, gts, CostCoeffs(), build_index_cost(8))
    assert asg.queries == tuple(range(1, 9))


def test_index_cost_breaks_tie():
    probs = np.full(6, 1 / 6)
    preds = [Prediction(q, probs, T) for q in range(1, 6)]
    gts = [GroundTruth(4, T), GroundTruth(3, T)]
    asg = match(preds, gts, CostCoeffs(), build_index_cost(5))
    assert asg.queries == (4, 3)
    asg0 = match(preds, gts, CostCoeffs(index=0.0), build_index_cost(5))
    assert len(set(asg0.queries)) == 2
    assert asg0.total_cost == pytest.approx(2 * -1 / 6)


def test_lambda_m_monotone_displacement(rng):
    # index displacement of the optimum never grows with lambda_m
    for _ in range(50):
        q = 7
        preds = [Prediction(i, rng.dirichlet(np.ones(q + 1)), rng.uniform(size=9)) for i in range(1, q + 1)]
        labels = rng.choice(np.arange(1, q + 1), size=5, replace=False)
        gts = [GroundTruth(int(c), rng.uniform(size=9)) for c in labels]
        m = build_index_cost(q)
        prev = None
        for lm in (0, 0.5, 1, 2, 4, 8, 16):
            asg = match(preds, gts, CostCoeffs(index=lm), m)
            disp = sum(abs(a - g.label) for a, g in zip(asg.queries, gts))
            if prev is not None:
                assert disp <= prev
            prev = disp


def test_common_scaling_keeps_argmin(rng):
    for _ in range(50):
        q = 6
        preds = [Prediction(i, rng.dirichlet(np.ones(q + 1)), rng.uniform(size=9)) for i in range(1, q + 1)]
        gts = [GroundTruth(c, rng.uniform(size=9)) for c in (1, 3, 4, 6)]
        m = build_index_cost(q)
        base = match(preds, gts, CostCoeffs(), m)
        k = float(rng.uniform(0.1, 10))
        scaled = match(preds, gts, CostCoeffs(k, 10 * k, 10 * k, 10 * k, 4 * k), m)
        assert base.columns == scaled.columns


def test_cost_matrix_matches_pair_cost(rng):
    q = 5
    preds = [Prediction(i, rng.dirichlet(np.ones(q + 1)), rng.uniform(size=9)) for i in range(1, q + 1)]
    gts = [GroundTruth(c, rng.uniform(size=9)) for c in (2, 5, 1)]
    m = build_index_cost(q)
    c = cost_matrix(preds, gts, CostCoeffs(), m)
    for i, g in enumerate(gts):
        for j, p in enumerate(preds):
            assert c[i, j] == pytest.approx(pair_cost(p, g, CostCoeffs(), m), abs=1e-12)


def test_steer():
    bank = [Prediction(q, onehot(q, 24), T) for q in range(1, 25)]
    out = steer(bank, {1, 5, 9})
    assert [p.query_index for p in out] == [1, 5, 9]
    assert steer(bank, range(1, 25)) == bank
    with pytest.raises(MatchingError):
        steer(bank, {25})


def test_prediction_validation():
    with pytest.raises(MatchingError):
        Prediction(0, onehot(1, 2), T)
    with pytest.raises(MatchingError):
        Prediction(1, [0.5, 0.6], T)
