"""Hot inner loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``QFVS_NUMBA`` is not set to ``0``. Both paths implement identical
arithmetic; integer outputs (argmax positions, back-pointers, assignments)
agree exactly, float outputs agree to rounding.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit
except ImportError:  # pragma: no cover
    numba = None

_ENV_FLAG = os.environ.get("QFVS_NUMBA", "1").strip().lower()
NUMBA_ENABLED = numba is not None and _ENV_FLAG not in ("0", "false", "no", "off")


def backend():
    return "numba" if NUMBA_ENABLED else "numpy"


# ---------------------------------------------------------------------------
# col2im: scatter-add of sliding-window columns back onto a signal
# ---------------------------------------------------------------------------

def col2im_numpy(cols, stride, length):
    """cols[B, C, Lout, K] -> out[B, C, length], out[..., t*stride + k] += cols[..., t, k]."""
    B, C, Lout, K = cols.shape
    out = np.zeros((B, C, length), dtype=cols.dtype)
    span = stride * (Lout - 1) + 1
    for k in range(K):
        out[:, :, k:k + span:stride] += cols[:, :, :, k]
    return out


def _col2im_loop(cols, stride, length):
    B, C, Lout, K = cols.shape
    out = np.zeros((B, C, length), dtype=cols.dtype)
    for b in range(B):
        for c in range(C):
            for k in range(K):
                for t in range(Lout):
                    out[b, c, t * stride + k] += cols[b, c, t, k]
    return out


# ---------------------------------------------------------------------------
# max pooling over the last axis
# ---------------------------------------------------------------------------

def maxpool_forward_numpy(x, k, stride):
    windows = np.lib.stride_tricks.sliding_window_view(x, k, axis=-1)[..., ::stride, :]
    # np.argmax returns the first maximal index
    idx = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    pos = idx + (np.arange(idx.shape[-1]) * stride)
    return np.ascontiguousarray(out), pos.astype(np.int64)


def _maxpool_forward_loop(x, k, stride):
    B, C, L = x.shape
    Lout = (L - k) // stride + 1
    out = np.empty((B, C, Lout), dtype=x.dtype)
    pos = np.empty((B, C, Lout), dtype=np.int64)
    for b in range(B):
        for c in range(C):
            for t in range(Lout):
                start = t * stride
                best = start
                bv = x[b, c, start]
                # the first NaN wins, as with np.argmax
                if bv == bv:
                    for j in range(start + 1, start + k):
                        v = x[b, c, j]
                        if v != v:
                            bv = v
                            best = j
                            break
                        if v > bv:
                            bv = v
                            best = j
                out[b, c, t] = bv
                pos[b, c, t] = best
    return out, pos


def maxpool_backward_numpy(grad, pos, length):
    B, C, _ = grad.shape
    out = np.zeros((B, C, length), dtype=grad.dtype)
    bi, ci, _ = np.indices(grad.shape)
    np.add.at(out, (bi, ci, pos), grad)
    return out


def _maxpool_backward_loop(grad, pos, length):
    B, C, Lout = grad.shape
    out = np.zeros((B, C, length), dtype=grad.dtype)
    for b in range(B):
        for c in range(C):
            for t in range(Lout):
                out[b, c, pos[b, c, t]] += grad[b, c, t]
    return out


# ---------------------------------------------------------------------------
# segment scatter table from a Gram matrix
# ---------------------------------------------------------------------------

def scatter_numpy(gram):
    """scatter[i, j] = within-segment scatter of shots [i, j) in kernel space (0 for j <= i)."""
    n = gram.shape[0]
    diag = np.concatenate([[0.0], np.cumsum(np.diag(gram))])
    cum = np.zeros((n + 1, n + 1))
    np.cumsum(gram, axis=0, out=cum[1:, 1:])
    np.cumsum(cum[1:, 1:], axis=1, out=cum[1:, 1:])
    cd = np.diag(cum)
    # block[i, j] = sum of gram[i:j, i:j]
    block = cd[None, :] + cd[:, None]
    block -= cum
    block -= cum.T
    idx = np.arange(n + 1)
    width = (idx[None, :] - idx[:, None]).astype(np.float64)
    np.maximum(width, 1.0, out=width)
    block /= width
    out = diag[None, :] - diag[:, None]
    out -= block
    out[idx[:, None] >= idx[None, :]] = 0.0
    return out


def _scatter_loop(gram):
    # same summation order as scatter_numpy, without the N^2 temporaries
    n = gram.shape[0]
    diag = np.zeros(n + 1)
    for i in range(n):
        diag[i + 1] = diag[i] + gram[i, i]
    cum = np.zeros((n + 1, n + 1))
    for i in range(n):
        for j in range(n):
            cum[i + 1, j + 1] = cum[i, j + 1] + gram[i, j]
    for i in range(1, n + 1):
        for j in range(1, n):
            cum[i, j + 1] += cum[i, j]
    out = np.zeros((n + 1, n + 1))
    for i in range(n + 1):
        for j in range(i + 1, n + 1):
            block = cum[j, j] + cum[i, i]
            block -= cum[i, j]
            block -= cum[j, i]
            block /= j - i
            out[i, j] = (diag[j] - diag[i]) - block
    return out


# ---------------------------------------------------------------------------
# change-point dynamic program
# ---------------------------------------------------------------------------

def segment_dp_numpy(scatter, max_cp):
    """Minimum total scatter for 0..max_cp change points.

    scatter[i, j] is the cost of the segment [i, j). Returns ``cost`` of shape
    (max_cp + 1, N + 1) with cost[m, j] the best cost of splitting [0, j) into
    m + 1 segments, and ``back`` holding the start of the last segment.
    Ties resolve to the smallest start index.
    """
    n = scatter.shape[0] - 1
    cost = np.full((max_cp + 1, n + 1), np.inf)
    back = np.zeros((max_cp + 1, n + 1), dtype=np.int64)
    cost[0, 1:] = scatter[0, 1:]
    starts = np.arange(n + 1)[:, None]
    ends = np.arange(n + 1)[None, :]
    for m in range(1, max_cp + 1):
        cand = cost[m - 1][:, None] + scatter
        cand[(starts >= ends) | (starts < m)] = np.inf
        best = np.argmin(cand, axis=0)
        cost[m] = cand[best, np.arange(n + 1)]
        back[m] = best
    return cost, back


def _segment_dp_loop(scatter, max_cp):
    n = scatter.shape[0] - 1
    cost = np.full((max_cp + 1, n + 1), np.inf)
    back = np.zeros((max_cp + 1, n + 1), dtype=np.int64)
    for j in range(1, n + 1):
        cost[0, j] = scatter[0, j]
    for m in range(1, max_cp + 1):
        for j in range(m + 1, n + 1):
            best = np.inf
            arg = 0
            for i in range(m, j):
                v = cost[m - 1, i] + scatter[i, j]
                if v < best:
                    best = v
                    arg = i
            cost[m, j] = best
            back[m, j] = arg
    return cost, back


# ---------------------------------------------------------------------------
# Hungarian algorithm (minimisation, square matrix, shortest augmenting path)
# ---------------------------------------------------------------------------

def hungarian_numpy(cost):
    """Return ``assign`` with assign[row] = column minimising the total cost."""
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[col] = row matched to col (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assign = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        assign[p[j] - 1] = j - 1
    return assign


def _hungarian_loop(cost):
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assign = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        assign[p[j] - 1] = j - 1
    return assign


if numba is not None:
    col2im_numba = njit(cache=True)(_col2im_loop)
    maxpool_forward_numba = njit(cache=True)(_maxpool_forward_loop)
    maxpool_backward_numba = njit(cache=True)(_maxpool_backward_loop)
    scatter_numba = njit(cache=True)(_scatter_loop)
    segment_dp_numba = njit(cache=True)(_segment_dp_loop)
    hungarian_numba = njit(cache=True)(_hungarian_loop)
else:  # pragma: no cover
    col2im_numba = maxpool_forward_numba = maxpool_backward_numba = None
    scatter_numba = segment_dp_numba = hungarian_numba = None


def col2im(cols, stride, length):
    cols = np.ascontiguousarray(cols)
    if NUMBA_ENABLED:
        return col2im_numba(cols, int(stride), int(length))
    return col2im_numpy(cols, stride, length)


def maxpool_forward(x, k, stride):
    x = np.ascontiguousarray(x)
    if NUMBA_ENABLED:
        return maxpool_forward_numba(x, int(k), int(stride))
    return maxpool_forward_numpy(x, k, stride)


def maxpool_backward(grad, pos, length):
    grad = np.ascontiguousarray(grad)
    if NUMBA_ENABLED:
        return maxpool_backward_numba(grad, np.ascontiguousarray(pos), int(length))
    return maxpool_backward_numpy(grad, pos, length)


def scatter(gram):
    gram = np.ascontiguousarray(gram, dtype=np.float64)
    if NUMBA_ENABLED:
        return scatter_numba(gram)
    return scatter_numpy(gram)


def segment_dp(scatter, max_cp):
    scatter = np.ascontiguousarray(scatter, dtype=np.float64)
    if NUMBA_ENABLED:
        return segment_dp_numba(scatter, int(max_cp))
    return segment_dp_numpy(scatter, max_cp)


def hungarian(cost):
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    if NUMBA_ENABLED:
        return hungarian_numba(cost)
    return hungarian_numpy(cost)
