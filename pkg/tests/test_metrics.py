import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_labels
from oracles import accuracy_oracle, edit_oracle, f1_oracle
from tasseg.metrics import (
    OVERLAPS,
    average_reports,
    edit_score,
    evaluate_corpus,
    f1_at_k,
    f1_counts,
    frame_accuracy,
    levenshtein,
)
from tasseg.tensor import ContractError

A, B, C, D = 0, 1, 2, 3


def test_accuracy_examples():
    gt = np.arange(10) % 3
    assert frame_accuracy(gt, gt) == 100.0
    assert frame_accuracy(gt + 5, gt) == 0.0
    half = gt.copy()
    half[:5] += 7
    assert frame_accuracy(half, gt) == 50.0


def test_accuracy_length_mismatch():
    with pytest.raises(ContractError):
        frame_accuracy([0, 1], [0, 1, 1])


def test_edit_examples():
    gt = [A] * 3 + [B] * 2 + [C] * 4
    assert edit_score(gt, gt) == 100.0
    assert edit_score([A] * 5 + [C] * 4, gt) == pytest.approx(100 * (1 - 1 / 3))
    doubled = [A] * 6 + [B] * 4 + [C] * 8
    assert edit_score(doubled, [A] * 3 + [B] * 2 + [C] * 4) == 100.0


def test_levenshtein_basics():
    assert levenshtein([], [1, 2]) == 2
    assert levenshtein([1, 2, 3], [1, 3]) == 1
    assert levenshtein([1, 2], [2, 1]) == 2


def test_f1_examples():
    gt = [A] * 100
    assert all(f1_at_k(gt, gt, k) == 100.0 for k in OVERLAPS)
    pred = [A] * 60 + [B] * 40  # A-segment IoU 0.6
    assert f1_counts(pred, gt, 50) == (1, 1, 0)
    assert f1_counts(pred, gt, 10) == (1, 1, 0)
    pred = [A] * 20 + [B] * 80  # IoU 0.2
    assert f1_counts(pred, gt, 10) == (1, 1, 0)
    assert f1_counts(pred, gt, 25) == (0, 2, 1)
    assert f1_counts(pred, gt, 50) == (0, 2, 1)


def test_f1_threshold_is_strict():
    gt = [A] * 10
    halves = [A] * 5 + [B] * 5
    # IoU exactly 0.5 is not a match at k=50
    assert f1_counts(halves, gt, 50) == (0, 2, 1)
    assert f1_counts(halves, gt, 49) == (1, 1, 0)


def test_f1_split_segment():
    gt = [A] * 10 + [B] * 10
    pred = [A] * 5 + [C] * 1 + [A] * 4 + [B] * 10  # A split in two
    tp, fp, fn = f1_counts(pred, gt, 10)
    assert (tp, fp, fn) == (2, 2, 0)
    assert f1_at_k(pred, gt, 10) == pytest.approx(f1_oracle(pred, gt, 10))


def test_optimal_matching_beats_greedy_on_crowded_layout():
    gt = [A] * 10 + [B] + [A] * 10
    pred = [C] * 8 + [A] * 9 + [D] + [A] * 3
    assert f1_counts(pred, gt, 10, method="greedy")[0] == 1
    assert f1_counts(pred, gt, 10, method="optimal")[0] == 2
    assert f1_at_k(pred, gt, 10) == pytest.approx(f1_oracle(pred, gt, 10))


def test_unknown_matching_method():
    with pytest.raises(ValueError):
        f1_counts([0], [0], 10, method="hungarian-ish")


def test_random_pairs_against_oracles():
    rng = np.random.default_rng(7)
    for _ in range(60):
        t = int(rng.integers(1, 41))
        gt = random_labels(rng, t, 4, max_segments=6)
        pred = random_labels(rng, t, 4, max_segments=6)
        assert edit_score(pred, gt) == edit_oracle(pred, gt)
        assert frame_accuracy(pred, gt) == pytest.approx(accuracy_oracle(pred, gt), abs=1e-12)
        for k in OVERLAPS:
            assert f1_at_k(pred, gt, k) == pytest.approx(f1_oracle(pred, gt, k), abs=1e-12)


labels_st = st.integers(1, 30).flatmap(
    lambda t: st.tuples(
        st.lists(st.integers(0, 3), min_size=t, max_size=t),
        st.lists(st.integers(0, 3), min_size=t, max_size=t),
    )
)


@settings(max_examples=150, deadline=None)
@given(labels_st, st.permutations(range(4)))
def test_metrics_invariant_under_relabeling(pair, perm):
    pred, gt = (np.array(x) for x in pair)
    perm = np.array(perm)
    assert frame_accuracy(perm[pred], perm[gt]) == frame_accuracy(pred, gt)
    assert edit_score(perm[pred], perm[gt]) == edit_score(pred, gt)
    for k in OVERLAPS:
        assert f1_at_k(perm[pred], perm[gt], k) == f1_at_k(pred, gt, k)


@settings(max_examples=150, deadline=None)
@given(labels_st)
def test_f1_non_increasing_in_k(pair):
    pred, gt = pair
    values = [f1_at_k(pred, gt, k) for k in range(0, 100, 5)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert all(0.0 <= v <= 100.0 for v in values)


@settings(max_examples=100, deadline=None)
@given(labels_st, st.lists(st.integers(1, 4), min_size=30, max_size=30))
def test_edit_ignores_durations(pair, stretch):
    pred, gt = pair
    stretched = np.repeat(pred, stretch[: len(pred)])
    assert edit_score(stretched, gt) == edit_score(pred, gt)


def test_corpus_aggregation():
    rng = np.random.default_rng(3)
    pairs = [(f"v{i}", random_labels(rng, 20 + i, 3, 5), random_labels(rng, 20 + i, 3, 5))
             for i in range(5)]
    rep = evaluate_corpus(pairs)
    frames = sum(len(g) for _, _, g in pairs)
    pooled = 100.0 * sum(int((p == g).sum()) for _, p, g in pairs) / frames
    assert rep.acc == pytest.approx(pooled)
    assert rep.edit == pytest.approx(np.mean([edit_oracle(p, g) for _, p, g in pairs]))
    for k in OVERLAPS:
        assert rep.f1[k] == pytest.approx(np.mean([f1_oracle(p, g, k) for _, p, g in pairs]))
    single = evaluate_corpus(pairs[:1])
    assert single.acc == pytest.approx(frame_accuracy(pairs[0][1], pairs[0][2]))
    twice = evaluate_corpus([pairs[0], ("copy", pairs[0][1], pairs[0][2])])
    assert twice.row() == pytest.approx(single.row())


def test_corpus_records_length_mismatch():
    rep = evaluate_corpus([("ok", [0, 1], [0, 1]), ("bad", [0], [0, 1])])
    assert "bad" in rep.errors and "ok" in rep.per_video
    with pytest.raises(ContractError):
        evaluate_corpus([("bad", [0], [0, 1])])


def test_report_serialisation_and_table():
    rep = evaluate_corpus([("v1", [0, 0, 1], [0, 1, 1])])
    d = json.loads(rep.to_json())
    assert set(d["f1"]) == {"10", "25", "50"}
    lines = rep.table("fold1").splitlines()
    assert lines[0].split() == ["F1@10", "F1@25", "F1@50", "Edit", "Acc"]
    assert lines[1].startswith("fold1") and lines[2].startswith("v1")
    avg = average_reports([rep, rep])
    assert avg.row() == pytest.approx(rep.row())
