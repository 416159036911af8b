import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qfvs.segmentation import (
    SegmentBoundaries,
    best_split,
    build_segmented,
    cosine_gram,
    exhaustive_split,
    flatten,
    kts_segment,
    read_boundaries,
    scatter_matrix,
    segments_cost,
    split_oversized,
    write_boundaries,
)
from qfvs.tensor import ContractError


def plateaus(lengths, dim=16, sigma=0.0, seed=0):
    """Piecewise-constant features with one random direction per plateau."""
    rng = np.random.default_rng(seed)
    levels = rng.normal(size=(len(lengths), dim))
    x = np.repeat(levels, lengths, axis=0)
    truth = tuple(np.cumsum(lengths)[:-1].tolist())
    return x + sigma * rng.normal(size=x.shape), truth


def _scatter_oracle(x, i, j):
    """Within-segment scatter of shots [i, j) computed directly."""
    xn = x / np.linalg.norm(x, axis=1, keepdims=True)
    seg = xn[i:j]
    return float(((seg - seg.mean(axis=0)) ** 2).sum())


# ---------------------------------------------------------------------------
# scatter / DP
# ---------------------------------------------------------------------------

def test_scatter_matches_direct_computation(rng):
    x = rng.normal(size=(9, 5))
    sc = scatter_matrix(cosine_gram(x))
    for i in range(9):
        for j in range(i + 1, 10):
            assert sc[i, j] == pytest.approx(_scatter_oracle(x, i, j), abs=1e-12)
    assert (np.tril(sc) == 0).all()


@settings(max_examples=40)
@given(st.integers(2, 12), st.integers(0, 3), st.integers(0, 2**31))
def test_dp_equals_exhaustive(n, m, seed):
    m = min(m, n - 1)
    x = np.random.default_rng(seed).normal(size=(n, 4))
    sc = scatter_matrix(cosine_gram(x))
    cps, cost = best_split(sc, m)
    _, brute = exhaustive_split(sc, m)
    assert cost == pytest.approx(brute, abs=1e-12)
    assert segments_cost(sc, cps) == pytest.approx(cost, abs=1e-12)
    assert len(cps) == m and list(cps) == sorted(set(cps))


# ---------------------------------------------------------------------------
# kts_segment
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("lengths", [(5, 5, 5), (7, 12, 5), (5, 9, 6, 14, 8), (10, 5, 5, 7, 9, 6)])
def test_kts_recovers_exact_plateaus(lengths):
    x, truth = plateaus(lengths)
    assert kts_segment(x).change_points == truth


@pytest.mark.parametrize("seed", range(5))
def test_kts_recovers_noisy_plateaus_within_one(seed):
    rng = np.random.default_rng(100 + seed)
    lengths = rng.integers(5, 30, size=rng.integers(3, 7))
    x, truth = plateaus(lengths, sigma=0.05, seed=seed)
    got = kts_segment(x).change_points
    assert len(got) == len(truth)
    assert max(abs(a - b) for a, b in zip(got, truth)) <= 1


def test_kts_constant_features_single_segment():
    b = kts_segment(np.ones((50, 8)))
    assert b.starts == (0,) and b.lengths == (50,)


def test_kts_single_shot():
    b = kts_segment(np.ones((1, 3)))
    assert b.lengths == (1,)


def test_kts_empty_raises():
    with pytest.raises(ContractError):
        kts_segment(np.zeros((0, 4)))


def test_kts_large_video_respects_caps(rng):
    x, _ = plateaus(rng.integers(100, 400, size=18), dim=32, sigma=0.05)
    x = x[:4500]
    b = kts_segment(x)
    b.validate(4500, max_shots=200)
    assert max(b.lengths) <= 200
    # 4500 shots cannot fit 20 x 200 = 4000; the shot cap wins
    assert len(b.lengths) > 20


def test_kts_caps_within_capacity(rng):
    x, _ = plateaus([600, 900, 700, 800], dim=16, sigma=0.01)
    b = kts_segment(x)
    b.validate(3000, max_shots=200)
    assert len(b.lengths) <= 20


def test_kts_scale_invariant(rng):
    x, _ = plateaus([8, 11, 6, 9], sigma=0.2, seed=4)
    assert kts_segment(x) == kts_segment(x * 37.5)


def test_split_oversized_even():
    b = split_oversized(SegmentBoundaries((0, 450), (450, 30)), 200)
    assert b.lengths == (150, 150, 150, 30)
    b.validate(480, max_shots=200)


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------

def test_build_exact_fill_has_no_padding(rng):
    x = rng.normal(size=(12, 3))
    seg = build_segmented(x, SegmentBoundaries.from_change_points([4, 8], 12), T=4)
    assert seg.mask.all()
    assert seg.features.shape == (3, 4, 3)


def test_build_single_shot():
    seg = build_segmented(np.ones((1, 2)), SegmentBoundaries((0,), (1,)), T=5)
    assert seg.mask.sum() == 1 and seg.mask.shape == (1, 5)


def test_build_length_violation_raises(rng):
    with pytest.raises(ContractError):
        build_segmented(rng.normal(size=(10, 2)), SegmentBoundaries((0,), (10,)), T=8)


def test_build_non_partition_raises(rng):
    with pytest.raises(ContractError):
        build_segmented(rng.normal(size=(10, 2)), SegmentBoundaries((0, 6), (5, 5)), T=8)


@given(st.lists(st.integers(1, 7), min_size=1, max_size=6), st.integers(0, 2**31))
def test_flatten_build_round_trip(lengths, seed):
    n = sum(lengths)
    x = np.random.default_rng(seed).normal(size=(n, 3))
    b = SegmentBoundaries.from_change_points(np.cumsum(lengths)[:-1], n)
    seg = build_segmented(x, b, T=7)
    np.testing.assert_array_equal(flatten(seg), x)
    idx = seg.shot_index()
    np.testing.assert_array_equal(idx[seg.mask], np.arange(n))
    assert (seg.features[~seg.mask] == 0).all()


def test_boundaries_sidecar_round_trip(tmp_path):
    b = SegmentBoundaries.from_change_points([3, 10, 11], 20)
    path = tmp_path / "b.txt"
    write_boundaries(path, b)
    assert path.read_text() == "0\n3\n10\n11\n"
    assert read_boundaries(path, 20) == b


def test_boundaries_sidecar_rejects_bad_start(tmp_path):
    path = tmp_path / "b.txt"
    path.write_text("2\n5\n")
    with pytest.raises(ValueError):
        read_boundaries(path, 10)
