import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssvep_ensemble.ensemble import (decide, dynamic_select, majority_vote, parse_mode, sweep,
                                     weighted_vote)
from ssvep_ensemble.similarity import SimilarityReport, descending_order

from oracles import brute_force


def test_worked_example():
    report = SimilarityReport.from_arrays([0.9, 0.5, 0.4], [1, 1, 2])
    labels, conf, tallies = sweep(report, 3)
    np.testing.assert_allclose(conf, [0.9, 1.4, 1.0], rtol=0, atol=1e-12)
    d = dynamic_select(report, 3)
    assert (d.chosen_k, d.label) == (2, 1)
    assert d.confidence == pytest.approx(1.4, abs=1e-12)
    v = weighted_vote(report, 3, 3)
    np.testing.assert_allclose(v.tally, [0.0, 1.4, 0.4], atol=1e-12)
    assert v.label == 1 and v.confidence == pytest.approx(1.0, abs=1e-12)


def test_single_voter_and_single_participant():
    report = SimilarityReport.from_arrays([0.1, 0.7, 0.3], [0, 2, 1])
    assert weighted_vote(report, 1, 3).label == 2
    lone = SimilarityReport.from_arrays([0.0], [4])
    d = dynamic_select(lone, 5)
    assert (d.chosen_k, d.label) == (1, 4)


def test_unanimous_ensemble_picks_all():
    report = SimilarityReport.from_arrays([0.3, 0.9, 0.2, 0.5], [3, 3, 3, 3])
    d = dynamic_select(report, 5)
    assert d.label == 3 and d.chosen_k == 4
    assert all(l == 3 for l in d.trace_labels)


def test_stable_descending_order():
    np.testing.assert_array_equal(descending_order([0.2, 0.9, 0.9, 0.1]), [1, 2, 0, 3])
    np.testing.assert_array_equal(descending_order([5.0]), [0])


def test_majority_vote():
    assert majority_vote([1, 1, 2], 3) == 1
    assert majority_vote([1, 2], 3) == 1
    rng = np.random.default_rng(0)
    for _ in range(100):
        preds = rng.integers(0, 5, rng.integers(1, 12))
        counts = {c: int(np.sum(preds == c)) for c in range(5)}
        top = max(counts.values())
        assert majority_vote(preds, 5) == min(c for c, v in counts.items() if v == top)


def test_dynamic_matches_brute_force_on_random_cases():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(2, 6))
        # coarse scores make ties between participants and between labels common
        scores = (rng.integers(0, 9, n) / 8.0).tolist()
        preds = rng.integers(0, m, n).tolist()
        labels, confs, chosen = brute_force(scores, preds, m)
        report = SimilarityReport.from_arrays(scores, preds)
        d = dynamic_select(report, m)
        assert d.trace_labels.tolist() == labels
        assert d.trace_confidence.tolist() == confs
        assert d.chosen_k == chosen and d.label == labels[chosen - 1]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 2), st.integers(0, 3)), min_size=1, max_size=10),
       st.floats(0.1, 10))
def test_positive_scaling_keeps_labels(pairs, c):
    scores = [s for s, _ in pairs]
    preds = [p for _, p in pairs]
    base = sweep(SimilarityReport.from_arrays(scores, preds), 4)[0]
    scaled = sweep(SimilarityReport.from_arrays([c * s for s in scores], preds), 4)[0]
    # exact ties may be broken differently after rounding, so compare away from ties
    tallies = sweep(SimilarityReport.from_arrays(scores, preds), 4)[2]
    for k, t in enumerate(tallies):
        top2 = np.sort(t)[-2:]
        if top2[1] - top2[0] > 1e-9 * max(1.0, top2[1]):
            assert base[k] == scaled[k]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 2), st.integers(0, 3)), min_size=1, max_size=10))
def test_decision_consistent_with_weighted_vote(pairs):
    report = SimilarityReport.from_arrays([s for s, _ in pairs], [p for _, p in pairs])
    d = decide(report, 4, "dynamic")
    assert d.label == weighted_vote(report, d.chosen_k, 4).label
    n = report.n_participants
    if d.chosen_k == n:
        assert decide(report, 4, f"fixed:{n}").label == d.label


def test_parse_mode():
    assert parse_mode("dynamic") == ("dynamic", None)
    assert parse_mode("fixed:3") == ("fixed", 3)
    assert parse_mode(2) == ("fixed", 2)
    assert parse_mode(("fixed", 4)) == ("fixed", 4)
    with pytest.raises(ValueError):
        parse_mode("best")


def test_fixed_k_out_of_range():
    report = SimilarityReport.from_arrays([0.5, 0.4], [0, 1])
    with pytest.raises(ValueError):
        decide(report, 2, "fixed:3")
    with pytest.raises(ValueError):
        weighted_vote(report, 0, 2)


def test_majority_mode_uses_all_predictions():
    report = SimilarityReport.from_arrays([0.9, 0.1, 0.1], [0, 1, 1])
    d = decide(report, 2, "majority")
    assert d.label == 1 and d.mode == "majority" and d.chosen_k == 3
