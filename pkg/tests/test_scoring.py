import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qfvs import tensor as T
from qfvs.backbone import LearnedShotFeatures
from qfvs.scoring import (
    ScoringConfig,
    ScoringHead,
    bce_loss,
    fuse,
    score_shots,
    select_summary,
    summary_length,
)
from qfvs.tensor import GRAD_RTOL_OP
from qfvs.trainer import AdamState, adam_step


def _head(visual=6, query=5, seed=0):
    return ScoringHead(visual, query, ScoringConfig.test_profile(), T.Rng(seed))


def _brute_force_select(scores):
    k = max(1, len(scores) // 50)
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(ranked[:k])


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

def test_fuse_zero_query(rng):
    v = rng.normal(size=(3, 4))
    out = fuse(v, np.zeros(4)).numpy()
    np.testing.assert_array_equal(out, np.concatenate([v, np.zeros((3, 4)), v, np.zeros((3, 4))], axis=1))


def test_fuse_equal_inputs(rng):
    v = rng.normal(size=4)
    out = fuse(v[None, :], v).numpy()[0]
    np.testing.assert_allclose(out, np.concatenate([2 * v, v * v, v, v]))


def test_fuse_random_matches_recomputation(rng):
    v, q = rng.normal(size=(5, 300)), rng.normal(size=300)
    out = fuse(v, q).numpy()
    assert out.shape == (5, 1200)
    ref = np.hstack([v + q, v * q, v, np.tile(q, (5, 1))])
    np.testing.assert_array_equal(out, ref)


def test_fuse_dimension_error():
    with pytest.raises(T.DimensionError):
        fuse(np.ones((2, 3)), np.ones(4))


def test_default_fused_width():
    assert ScoringConfig().fused_dim == 1200


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def test_scores_in_unit_interval_and_identical_shots_equal(rng):
    head = _head()
    feats = rng.normal(size=(2, 4, 6)) * 3
    feats[1, 2] = feats[0, 1]
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], bool)
    scores = score_shots(LearnedShotFeatures(T.Tensor(feats), mask), rng.normal(size=5), head).numpy()
    assert scores.shape == (7,)
    assert ((scores >= 0) & (scores <= 1)).all()
    assert scores[1] == scores[3 + 2]


def test_scores_follow_valid_slots_in_order(rng):
    head = _head()
    feats = rng.normal(size=(2, 3, 6))
    mask = np.array([[1, 1, 0], [1, 0, 0]], bool)
    h_q = rng.normal(size=5)
    got = score_shots(LearnedShotFeatures(T.Tensor(feats), mask), h_q, head).numpy()
    want = head.score_rows(T.Tensor(feats[mask]), h_q).numpy()
    np.testing.assert_array_equal(got, want)


@given(st.integers(1, 8), st.integers(0, 2**31))
def test_head_permutation_consistent(n, seed):
    rng = np.random.default_rng(seed)
    head = _head(seed=seed % 5)
    rows, h_q = rng.normal(size=(n, 6)), rng.normal(size=5)
    perm = rng.permutation(n)
    a = head.score_rows(T.Tensor(rows), h_q).numpy()
    b = head.score_rows(T.Tensor(rows[perm]), h_q).numpy()
    np.testing.assert_allclose(a[perm], b, rtol=1e-12, atol=1e-15)


def test_trained_head_is_query_sensitive():
    rng = np.random.default_rng(0)
    protos = rng.normal(size=(3, 6))
    emb = rng.normal(size=(3, 5))
    concept = rng.integers(0, 3, size=60)
    rows = protos[concept] + 0.05 * rng.normal(size=(60, 6))
    head = _head()
    params = list(head.named_parameters())
    state = AdamState()
    for _ in range(150):
        head.zero_grad()
        for c in range(3):
            loss = bce_loss(head.score_rows(T.Tensor(rows), emb[c]), (concept == c).astype(float))
            T.backward(T.mul(loss, 1 / 3))
        adam_step(params, state, 1e-2)
    s0 = head.score_rows(T.Tensor(rows), emb[0]).numpy()
    s1 = head.score_rows(T.Tensor(rows), emb[1]).numpy()
    assert not np.allclose(s0, s1)
    assert s0[concept == 0].mean() > s0[concept != 0].mean() + 0.5
    assert s1[concept == 1].mean() > s1[concept != 1].mean() + 0.5


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def test_bce_half_scores_is_ln2():
    loss = bce_loss(T.Tensor(np.full(10, 0.5)), np.array([0, 1] * 5)).item()
    assert abs(loss - math.log(2)) < 1e-12


def test_bce_perfect_scores_near_zero():
    labels = np.array([0, 1, 1, 0], float)
    assert 0 <= bce_loss(T.Tensor(labels), labels).item() < 1e-6


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=12), st.integers(0, 2**31))
def test_bce_nonnegative(scores, seed):
    labels = np.random.default_rng(seed).integers(0, 2, size=len(scores))
    assert bce_loss(T.Tensor(np.array(scores)), labels).item() >= 0.0


def test_bce_zero_only_when_clamped_scores_match():
    eps = 1e-7
    labels = np.array([1.0, 0.0])
    exact = bce_loss(T.Tensor([1 - eps, eps]), labels, eps).item()
    off = bce_loss(T.Tensor([0.9, 0.1]), labels, eps).item()
    assert exact < 1e-6 < off


def test_bce_gradcheck(rng):
    s = T.parameter(rng.uniform(0.05, 0.95, size=8))
    labels = rng.integers(0, 2, size=8)
    errors = T.check_gradients(lambda: bce_loss(s, labels), [s])
    assert max(errors.values()) < GRAD_RTOL_OP


def test_bce_empty_raises():
    with pytest.raises(T.ContractError):
        bce_loss(T.Tensor(np.zeros(0)), np.zeros(0))


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------

def test_select_top_two_of_hundred():
    scores = np.linspace(0, 1, 100)[::-1].copy()
    scores[[10, 70]] = [2.0, 3.0]
    assert select_summary(scores).indices.tolist() == [10, 70]


def test_select_all_equal_takes_first():
    assert select_summary(np.ones(250)).indices.tolist() == [0, 1, 2, 3, 4]


@pytest.mark.parametrize("n,k", [(1, 1), (49, 1), (50, 1), (99, 1), (100, 2), (149, 2), (150, 3), (200, 4)])
def test_summary_length(n, k):
    assert summary_length(n) == k


@given(st.lists(st.integers(0, 5), min_size=1, max_size=300))
def test_select_matches_sort_oracle_with_ties(values):
    scores = np.array(values, dtype=float)
    chosen = select_summary(scores).indices.tolist()
    assert chosen == _brute_force_select(values)
    assert chosen == sorted(set(chosen))


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=200))
def test_select_invariant_to_monotone_transform(values):
    scores = np.array(values)
    a = select_summary(scores).indices
    b = select_summary(np.tanh(scores) * 3 + 1).indices
    # tanh can merge nearly equal scores into ties; compare only when order survives
    if len(set(np.tanh(scores) * 3 + 1)) == len(set(scores)):
        np.testing.assert_array_equal(a, b)


def test_select_empty_raises():
    with pytest.raises(T.ContractError):
        select_summary(np.zeros(0))
