import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qfvs import _kernels as K
from qfvs.segmentation import cosine_gram, scatter_matrix

needs_numba = pytest.mark.skipif(K.col2im_numba is None, reason="numba not installed")


@needs_numba
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**31))
def test_col2im_paths_agree(b, c, k, stride, seed):
    lout = 4
    length = (lout - 1) * stride + k
    cols = np.random.default_rng(seed).normal(size=(b, c, lout, k))
    np.testing.assert_allclose(K.col2im_numpy(cols, stride, length), K.col2im_numba(cols, stride, length), rtol=1e-12)


@needs_numba
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31), st.booleans(), st.booleans())
def test_maxpool_paths_agree(k, n_out, seed, ties, nans):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 3, size=(2, 3, k * n_out)).astype(float) if ties else rng.normal(size=(2, 3, k * n_out))
    if nans:
        x[rng.random(x.shape) < 0.2] = np.nan
    out_a, pos_a = K.maxpool_forward_numpy(x, k, k)
    out_b, pos_b = K.maxpool_forward_numba(x, k, k)
    np.testing.assert_array_equal(out_a, out_b)
    np.testing.assert_array_equal(pos_a, pos_b)
    g = rng.normal(size=out_a.shape)
    np.testing.assert_array_equal(
        K.maxpool_backward_numpy(g, pos_a, x.shape[-1]), K.maxpool_backward_numba(g, pos_b, x.shape[-1])
    )


@needs_numba
@given(st.integers(1, 40), st.integers(0, 2**31))
def test_scatter_paths_agree_bitwise(n, seed):
    gram = cosine_gram(np.random.default_rng(seed).normal(size=(n, 5)))
    np.testing.assert_array_equal(K.scatter_numpy(gram), K.scatter_numba(gram))


@needs_numba
@given(st.integers(2, 40), st.integers(0, 6), st.integers(0, 2**31))
def test_segment_dp_paths_agree(n, max_cp, seed):
    max_cp = min(max_cp, n - 1)
    scatter = scatter_matrix(cosine_gram(np.random.default_rng(seed).normal(size=(n, 5))))
    cost_a, back_a = K.segment_dp_numpy(scatter, max_cp)
    cost_b, back_b = K.segment_dp_numba(scatter, max_cp)
    np.testing.assert_allclose(cost_a, cost_b, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(back_a, back_b)


@needs_numba
@given(st.integers(1, 9), st.integers(0, 2**31), st.booleans())
def test_hungarian_paths_agree(n, seed, integral):
    rng = np.random.default_rng(seed)
    cost = rng.integers(0, 4, size=(n, n)).astype(float) if integral else rng.random((n, n))
    np.testing.assert_array_equal(K.hungarian_numpy(cost), K.hungarian_numba(cost))


def test_hungarian_is_a_permutation(rng):
    assign = K.hungarian(rng.random((7, 7)))
    assert sorted(assign.tolist()) == list(range(7))


def test_hungarian_empty():
    assert K.hungarian(np.zeros((0, 0))).size == 0


def test_backend_reports_active_path():
    assert K.backend() in ("numba", "numpy")
    assert (K.backend() == "numba") == K.NUMBA_ENABLED


def test_env_flag_selects_numpy_path():
    code = "from qfvs import _kernels as K; print(K.backend())"
    env = dict(os.environ, QFVS_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_pipeline_output_identical_across_backends(tmp_path):
    """Forward scores and KTS boundaries do not depend on the kernel backend."""
    code = (
        "import numpy as np, sys\n"
        "from qfvs.dataset import generate_synthetic\n"
        "from qfvs.trainer import TrainConfig, build_model\n"
        "from qfvs.model import segment_video\n"
        "b = generate_synthetic(n_videos=2, shots_per_video=50, seed=1)\n"
        "cfg = TrainConfig.test_profile()\n"
        "v = b.videos[0]\n"
        "seg = segment_video(v, cfg.backbone.T)\n"
        "s = build_model(cfg)(seg, b.queries[v.video_id][0].h_q).numpy()\n"
        "np.save(sys.argv[1], s)\n"
        "print(seg.boundaries.starts)\n"
    )
    outs = []
    for flag in ("1", "0"):
        path = tmp_path / f"s{flag}.npy"
        env = dict(os.environ, QFVS_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", code, str(path)], env=env, capture_output=True, text=True, check=True)
        outs.append((res.stdout, np.load(path)))
    assert outs[0][0] == outs[1][0]
    np.testing.assert_allclose(outs[0][1], outs[1][1], rtol=1e-10, atol=1e-12)
