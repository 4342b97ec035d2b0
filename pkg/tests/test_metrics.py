import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from padcl.metrics import (
    DomainResult,
    EvalReport,
    MetricError,
    ScoreSet,
    auc,
    candidate_thresholds,
    delta_m,
    eer_threshold,
    far_frr,
    hter,
    routing_accuracy,
)


def random_set(seed, n, levels=None):
    r = np.random.default_rng(seed)
    scores = r.uniform(size=n) if levels is None else r.integers(0, levels, n) / (levels - 1)
    labels = r.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    return ScoreSet(scores, labels)


def brute_hter(scores, labels, thr):
    fa = fr = nr = ns = 0
    for s, y in zip(scores, labels):
        if y == 1:
            nr += 1
            fr += s < thr
        else:
            ns += 1
            fa += s >= thr
    return (fa / ns + fr / nr) / 2


def brute_auc(scores, labels):
    real = [s for s, y in zip(scores, labels) if y == 1]
    spoof = [s for s, y in zip(scores, labels) if y == 0]
    win = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(real, spoof))
    return win / (len(real) * len(spoof))


def brute_eer(scores, labels):
    u = sorted(set(scores))
    cands = [-np.inf] + [(a + b) / 2 for a, b in zip(u, u[1:])] + [np.inf]
    best, best_gap = None, None
    for c in cands:
        fa, fr = far_frr(ScoreSet(scores, labels), c)
        gap = abs(fa - fr)
        if best_gap is None or gap < best_gap:
            best, best_gap = c, gap
    return best


# ---------------------------------------------------------------- paper arithmetic

def test_delta_m_table_values():
    assert abs(100 * delta_m((0.0043, 0.0233), (0.0043, 0.0)) - 1.17) < 0.005
    assert abs(100 * delta_m((0.0607, 0.0), (0.0043, 0.0)) - 2.83) < 0.005


def test_delta_m_identity_and_errors():
    assert delta_m((0.2, 0.1), (0.2, 0.1)) == 0.0
    assert delta_m((0.0,), (0.1,)) < 0
    with pytest.raises(MetricError):
        delta_m((0.1,), (0.1, 0.2))
    with pytest.raises(MetricError):
        delta_m((0.1,), (1.0,))


def test_delta_m_linear_in_each_entry():
    b = np.array([0.1, 0.3, 0.05])
    q = np.array([0.2, 0.4, 0.1])
    for i in range(3):
        vals = []
        for x in (0.0, 0.25, 0.5):
            qq = q.copy()
            qq[i] = x
            vals.append(delta_m(qq, b))
        assert abs((vals[2] - vals[1]) - (vals[1] - vals[0])) < 1e-15


# ---------------------------------------------------------------- hter / eer / auc

def test_hter_trivial():
    s = ScoreSet([0.9, 0.9, 0.1, 0.1], [1, 1, 0, 0])
    assert hter(s, 0.5) == 0.0
    assert hter(ScoreSet(s.scores, 1 - s.labels), 0.5) == 1.0


def test_one_class_and_bad_scores():
    with pytest.raises(MetricError):
        hter(ScoreSet([0.2, 0.4], [1, 1]), 0.5)
    with pytest.raises(MetricError):
        ScoreSet([0.2, np.nan], [1, 0])
    with pytest.raises(MetricError):
        ScoreSet([0.2, 1.5], [1, 0])


@pytest.mark.parametrize("seed", range(100))
def test_oracles_on_random_small_sets(seed):
    s = random_set(seed, 6 + seed % 15, levels=None if seed % 2 else 5)
    thr = float(np.random.default_rng(seed).uniform())
    assert hter(s, thr) == brute_hter(s.scores, s.labels, thr)
    assert auc(s) == brute_auc(s.scores, s.labels)
    assert eer_threshold(s) == brute_eer(s.scores, s.labels)


def test_eer_separated_and_degenerate():
    s = ScoreSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    thr = eer_threshold(s)
    assert thr == 0.5 and hter(s, thr) == 0.0
    flat = ScoreSet([0.5] * 4, [0, 1, 0, 1])
    # -inf accepts everything (FAR 1, FRR 0), +inf rejects everything: equal gaps, smallest wins
    assert eer_threshold(flat) == -np.inf
    assert candidate_thresholds(flat.scores).tolist() == [-np.inf, np.inf]


def test_eer_gap_is_minimal_over_candidates():
    s = random_set(7, 40)
    fa, fr = far_frr(s, eer_threshold(s))
    for c in candidate_thresholds(s.scores):
        a, b = far_frr(s, c)
        assert abs(fa - fr) <= abs(a - b)


def test_auc_trivial():
    assert auc(ScoreSet([0.1, 0.9], [0, 1])) == 1.0
    assert auc(ScoreSet([0.4] * 6, [0, 1] * 3)) == 0.5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=2, max_size=30),
       st.sampled_from(["cube", "sqrt", "affine"]))
def test_auc_monotone_invariance(pairs, kind):
    scores = np.array([p[0] for p in pairs])
    labels = np.array([p[1] for p in pairs])
    labels[0], labels[1] = 0, 1
    f = {"cube": lambda x: x ** 3, "sqrt": np.sqrt, "affine": lambda x: 0.25 + 0.5 * x}[kind]
    before = auc(ScoreSet(scores, labels))
    after = auc(ScoreSet(f(scores), labels))
    # strictly increasing transforms preserve order unless they merge values by rounding
    if len(np.unique(f(scores))) == len(np.unique(scores)):
        assert before == after
    assert abs(before - brute_auc(scores, labels)) < 1e-12


def test_routing_accuracy():
    s = ScoreSet([0.1] * 5, [0, 1, 0, 1, 0], domains=[1, 1, 2, 2, 2], routed=[1, 1, 2, 1, 1])
    assert routing_accuracy(s) == {1: 1.0, 2: 1 / 3}
    with pytest.raises(MetricError):
        routing_accuracy(ScoreSet([0.1, 0.2], [0, 1]))


def test_report_csv_roundtrip_and_text():
    rep = EvalReport(2, [DomainResult("a", 3, 4, 0.45, 0.125, 0.9375, 1.0),
                         DomainResult("b", 5, 5, float("-inf"), 0.5, 0.5, 0.8, seen=False)], delta_m=0.0117)
    csv_text = rep.to_csv()
    assert csv_text.splitlines()[0] == "domain,n_real,n_spoof,threshold,hter,auc,routing_acc"
    back = EvalReport.from_csv(csv_text, 2)
    assert [(r.domain, r.hter, r.threshold) for r in back.rows] == [("a", 0.125, 0.45), ("b", 0.5, float("-inf"))]
    text = rep.to_text()
    assert "12.50" in text and "93.75" in text and "(unseen)" in text and "1.17" in text
