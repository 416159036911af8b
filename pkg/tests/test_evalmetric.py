import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qfvs.evalmetric import (
    evaluate_summary,
    f1_score,
    iou,
    matching_total,
    max_weight_matching,
)


def brute_force_total(w):
    """Best matching total over every injective row-to-column assignment."""
    w = np.asarray(w)
    rows, cols = w.shape
    if rows > cols:
        return brute_force_total(w.T)
    return max(sum(w[r, c] for r, c in zip(range(rows), perm)) for perm in itertools.permutations(range(cols), rows))


matrices = st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31)).map(
    lambda t: np.random.default_rng(t[2]).random((t[0], t[1]))
)


def test_iou_worked_example():
    assert iou({"CAR", "MEN"}, {"MEN", "TREE", "SIGN"}) == 0.25


def test_iou_edge_cases():
    assert iou({"A", "B"}, {"B", "A"}) == 1.0
    assert iou({"A"}, {"B"}) == 0.0
    assert iou(set(), set()) == 0.0
    assert iou(set(), {"A"}) == 0.0


def test_matching_identity():
    pairs = max_weight_matching([[1, 0], [0, 1]])
    assert sorted(pairs) == [(0, 0, 1.0), (1, 1, 1.0)]


def test_matching_single_row():
    assert max_weight_matching([[0.2, 0.9, 0.4]]) == [(0, 1, 0.9)]


def test_matching_drops_zero_pairs():
    assert max_weight_matching([[0.0, 0.0], [0.0, 0.5]]) == [(1, 1, 0.5)]


def test_matching_rejects_negative_weights():
    with pytest.raises(ValueError):
        max_weight_matching([[-1.0]])


@given(matrices)
def test_matching_equals_brute_force(w):
    pairs = max_weight_matching(w)
    assert matching_total(pairs) == pytest.approx(brute_force_total(w), abs=1e-12)
    assert len({r for r, _, _ in pairs}) == len(pairs) == len({c for _, c, _ in pairs})


@given(matrices, st.integers(0, 2**31))
def test_matching_permutation_invariant(w, seed):
    rng = np.random.default_rng(seed)
    shuffled = w[rng.permutation(w.shape[0])][:, rng.permutation(w.shape[1])]
    a = matching_total(max_weight_matching(w))
    b = matching_total(max_weight_matching(shuffled))
    assert a == pytest.approx(b, abs=1e-12)


# ---------------------------------------------------------------------------
# evaluate_summary
# ---------------------------------------------------------------------------

TAGS = [{"CAR", "MEN"}, {"MEN", "TREE", "SIGN"}, {"SKY"}, {"CAR"}, set(), {"MEN"}]


def test_evaluate_identical_summary():
    r = evaluate_summary([0, 1, 2], [0, 1, 2], TAGS)
    assert (r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0)


def test_evaluate_disjoint_tags():
    r = evaluate_summary([2], [0, 1], TAGS)
    assert (r.precision, r.recall, r.f1) == (0.0, 0.0, 0.0)
    assert r.pairs == []


def test_evaluate_hand_computed():
    # gt {0, 2}, machine {1, 3, 5}: best matching 0-3 (0.5) and nothing for 2
    r = evaluate_summary([0, 2], [1, 3, 5], TAGS)
    assert r.pairs == [(0, 3, 0.5)]
    assert r.precision == pytest.approx(0.5 / 3)
    assert r.recall == pytest.approx(0.5 / 2)
    assert r.f1 == pytest.approx(f1_score(0.5 / 3, 0.25))


@pytest.mark.parametrize("gt,machine,flag", [([], [1], "empty-ground-truth"), ([1], [], "empty-machine-summary")])
def test_evaluate_empty_flags(gt, machine, flag):
    r = evaluate_summary(gt, machine, TAGS)
    assert flag in r.flags and r.f1 == 0.0


@given(
    st.lists(st.integers(0, 5), min_size=1, max_size=6, unique=True),
    st.lists(st.integers(0, 5), min_size=1, max_size=6, unique=True),
)
def test_evaluate_swap_exchanges_precision_and_recall(gt, machine):
    a = evaluate_summary(gt, machine, TAGS)
    b = evaluate_summary(machine, gt, TAGS)
    assert a.precision == pytest.approx(b.recall, abs=1e-12)
    assert a.recall == pytest.approx(b.precision, abs=1e-12)
    assert 0.0 <= a.precision <= 1.0 and 0.0 <= a.recall <= 1.0
    assert matching_total(a.pairs) <= min(len(gt), len(machine)) + 1e-12


@given(
    st.lists(st.integers(0, 5), min_size=1, max_size=5, unique=True),
    st.lists(st.integers(0, 5), min_size=1, max_size=5, unique=True),
)
def test_evaluate_matches_exhaustive_oracle(gt, machine):
    w = np.array([[iou(TAGS[g], TAGS[m]) for m in machine] for g in gt])
    total = brute_force_total(w)
    r = evaluate_summary(gt, machine, TAGS)
    assert r.precision == pytest.approx(total / len(machine), abs=1e-12)
    assert r.recall == pytest.approx(total / len(gt), abs=1e-12)


def test_report_lines():
    lines = evaluate_summary([0], [3], TAGS).to_lines("q0.")
    assert lines[0] == "q0.precision = 0.5"
    assert lines[-1] == "q0.pair = 0,3,0.5"
