"""Define-by-run reverse-mode autodiff over numpy arrays.

Only the operations the summarization network needs are provided. Every op
returns a new :class:`Tensor`; when any input requires a gradient the result
records its parents and a closure that maps the output gradient to input
gradients. :meth:`Tensor.backward` walks the recorded graph in reverse
topological order and accumulates gradients additively.

Binary elementwise ops require equal shapes (a Python scalar or a size-1
tensor is the only implicit broadcast). ``matmul`` broadcasts batch
dimensions like ``numpy.matmul``.
"""

from __future__ import annotations

import numpy as np

from . import _kernels

DTYPE = np.float64

# Tolerances for gradient checks, defined once for the whole package.
GRAD_RTOL_OP = 1e-4
GRAD_RTOL_COMPOSITE = 1e-3
SOFTMAX_SUM_TOL = 1e-6

MASK_LOGIT = -1e9


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """An op was configured with parameters that cannot produce an output."""


class ContractError(RuntimeError):
    """A caller-side precondition was violated."""


class Rng:
    """Seeded random stream backed by numpy's PCG64 bit generator.

    ``Rng(seed, *stream)`` derives independent, reproducible sub-streams from
    the same seed through :class:`numpy.random.SeedSequence`.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int, *stream: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = tuple(int(s) for s in stream)
        entropy = [self.seed, *self.stream]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, *stream: int) -> "Rng":
        return Rng(self.seed, *self.stream, *stream)

    def random(self, shape=None):
        return self._gen.random(shape)

    def uniform(self, low, high, shape=None):
        return self._gen.uniform(low, high, shape)

    def normal(self, loc=0.0, scale=1.0, shape=None):
        return self._gen.normal(loc, scale, shape)

    def integers(self, low, high=None, shape=None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None, op=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


def backward(loss: Tensor):
    """Populate ``.grad`` on every tensor reachable from ``loss`` that requires one."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a single-element loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def _binary_operands(a, b, name):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")
    return a, b


def _reduce_to(grad, shape):
    if grad.shape == shape:
        return grad
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return grad.sum().reshape(shape)
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    a, b = _binary_operands(a, b, "add")
    out = a.data + b.data

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(out, (a, b), bw, "add")


def sub(a, b):
    a, b = _binary_operands(a, b, "sub")
    out = a.data - b.data

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _result(out, (a, b), bw, "sub")


def mul(a, b):
    a, b = _binary_operands(a, b, "mul")
    out = a.data * b.data

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result(out, (a, b), bw, "mul")


def expand(x, shape):
    """Broadcast ``x`` to ``shape`` explicitly; the gradient is summed back."""
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"expand: cannot broadcast {x.shape} to {tuple(shape)}") from None

    def bw(g):
        return (_reduce_to(g, x.shape),)

    return _result(out, (x,), bw, "expand")


def add_bias(x, b):
    """x[..., d] + b[d]."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match trailing dim of {x.shape}")
    out = x.data + b.data

    def bw(g):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    return _result(out, (x, b), bw, "add_bias")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

    return _result(out, (a, b), bw, "matmul")


def relu(x):
    x = as_tensor(x)
    keep = x.data > 0
    out = np.maximum(x.data, 0.0)  # propagates NaN

    def bw(g):
        return (g * keep,)

    return _result(out, (x,), bw, "relu")


def sigmoid(x):
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), bw, "sigmoid")


def log(x):
    x = as_tensor(x)
    out = np.log(x.data)

    def bw(g):
        return (g / x.data,)

    return _result(out, (x,), bw, "log")


def clamp(x, lo, hi):
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        return (g * inside,)

    return _result(out, (x,), bw, "clamp")


def _ordered_sum(a, axis, keepdims=False):
    """Sum along ``axis`` after sorting, so permuting the summands cannot change a bit."""
    return np.sort(a, axis=axis).sum(axis=axis, keepdims=keepdims)


def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``. Positions where ``mask`` is False get exactly zero weight.

    ``mask`` must broadcast against ``x``. A slice with no unmasked entry
    raises :class:`ContractError`.
    """
    x = as_tensor(x)
    logits = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ContractError("softmax: a slice has every position masked")
        logits = np.where(mask, logits, logits + MASK_LOGIT)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    out = e / _ordered_sum(e, axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (x,), bw, "softmax")


def weighted_sum(w, v):
    """out[..., q, :] = sum_k w[..., q, k] * v[..., k, :] (attention readout).

    Same value as ``matmul(w, v)`` but the reduction over k runs in sorted
    order, which makes the result bit-for-bit invariant to permuting the keys.
    """
    w, v = as_tensor(w), as_tensor(v)
    if w.ndim < 2 or v.ndim < 2 or w.shape[-1] != v.shape[-2]:
        raise DimensionError(f"weighted_sum: cannot combine {w.shape} with {v.shape}")
    terms = w.data[..., :, :, None] * v.data[..., None, :, :]
    out = _ordered_sum(terms, axis=-2)

    def bw(g):
        gw = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gv = np.matmul(np.swapaxes(w.data, -1, -2), g)
        return _reduce_to(gw, w.shape), _reduce_to(gv, v.shape)

    return _result(out, (w, v), bw, "weighted_sum")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError(
                f"concat: shapes {[tt.shape for tt in tensors]} disagree off axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, tensors, bw, "concat")


def sum(x, axis=None, keepdims=False):  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), bw, "reshape")


def transpose(x, axes):
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inverse = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inverse),)

    return _result(out, (x,), bw, "transpose")


def take(x, indices, axis=0):
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(x.data, indices, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (gx,)

    return _result(out, (x,), bw, "take")


def dropout(x, p, rng=None, training=True):
    """Inverted dropout: survivors are scaled by 1/(1-p) in training mode."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an Rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    out = x.data * keep

    def bw(g):
        return (g * keep,)

    return _result(out, (x,), bw, "dropout")


# ---------------------------------------------------------------------------
# temporal (1-D) convolution family, layout [batch, channels, time]
# ---------------------------------------------------------------------------

def conv1d(x, w, b=None, stride=1, pad=0):
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise DimensionError(f"conv1d: expected x[B,Cin,L] and w[Cout,Cin,K], got {x.shape}, {w.shape}")
    B, cin, L = x.shape
    cout, wcin, K = w.shape
    if wcin != cin:
        raise DimensionError(f"conv1d: input has {cin} channels, weight expects {wcin} ({x.shape} vs {w.shape})")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"conv1d: stride must be >= 1 and pad >= 0 (stride={stride}, pad={pad})")
    Lp = L + 2 * pad
    lout = (Lp - K) // stride + 1 if Lp >= K else 0
    if lout < 1:
        raise ConfigurationError(f"conv1d: kernel {K} longer than padded input {Lp}")
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise DimensionError(f"conv1d: bias shape {b.shape} != ({cout},)")
        parents.append(b)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
    cols = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
    out = np.tensordot(cols, w.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    if b is not None:
        out = out + b.data[None, :, None]

    def bw(g):
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2]))
        gcols = np.tensordot(g, w.data, axes=([1], [0])).transpose(0, 2, 1, 3)
        gx = _kernels.col2im(gcols, stride, Lp)[:, :, pad:pad + L]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return _result(np.ascontiguousarray(out), parents, bw, "conv1d")


def conv1d_transpose(x, w, stride=1):
    """Adjoint of :func:`conv1d` (no padding); w is laid out [Cin, Cout, K]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise DimensionError(
            f"conv1d_transpose: expected x[B,Cin,L] and w[Cin,Cout,K], got {x.shape}, {w.shape}"
        )
    if stride < 1:
        raise ConfigurationError(f"conv1d_transpose: stride must be >= 1, got {stride}")
    B, cin, L = x.shape
    wcin, cout, K = w.shape
    if wcin != cin:
        raise DimensionError(f"conv1d_transpose: input {x.shape} does not match weight {w.shape}")
    lout = (L - 1) * stride + K

    cols = np.tensordot(x.data, w.data, axes=([1], [0])).transpose(0, 2, 1, 3)
    out = _kernels.col2im(cols, stride, lout)

    def bw(g):
        gcols = np.lib.stride_tricks.sliding_window_view(g, K, axis=2)[:, :, ::stride, :]
        gx = np.tensordot(gcols, w.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
        gw = np.tensordot(x.data, gcols, axes=([0, 2], [0, 2]))
        return np.ascontiguousarray(gx), gw

    return _result(out, (x, w), bw, "conv1d_transpose")


def maxpool1d(x, k, stride=None):
    x = as_tensor(x)
    stride = k if stride is None else stride
    if x.ndim != 3:
        raise DimensionError(f"maxpool1d: expected [B,C,L], got {x.shape}")
    if k < 1 or stride < 1 or k > x.shape[2]:
        raise ConfigurationError(f"maxpool1d: window {k} / stride {stride} invalid for length {x.shape[2]}")
    out, pos = _kernels.maxpool_forward(x.data, k, stride)
    L = x.shape[2]

    def bw(g):
        return (_kernels.maxpool_backward(g, pos, L),)

    return _result(out, (x,), bw, "maxpool1d")


def batchnorm1d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalisation over batch and time for x[B, C, L].

    ``running_mean`` / ``running_var`` are numpy buffers updated in place in
    training mode (the running variance uses the unbiased estimate).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 3:
        raise DimensionError(f"batchnorm1d: expected [B,C,L], got {x.shape}")
    B, C, L = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batchnorm1d: affine params {gamma.shape}/{beta.shape} for {C} channels")
    g_ = gamma.data[None, :, None]
    if training:
        M = B * L
        if M < 2:
            raise ContractError(f"batchnorm1d: degenerate batch (B*L = {M}) in training mode")
        mu = x.data.mean(axis=(0, 2), keepdims=True)
        var = x.data.var(axis=(0, 2), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(C)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(C) * (M / (M - 1))

        def bw(g):
            dxhat = g * g_
            sum_d = dxhat.sum(axis=(0, 2), keepdims=True)
            sum_dx = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
            gx = inv / M * (M * dxhat - sum_d - xhat * sum_dx)
            return gx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))
    else:
        inv = 1.0 / np.sqrt(running_var + eps)[None, :, None]
        xhat = (x.data - running_mean[None, :, None]) * inv

        def bw(g):
            return g * g_ * inv, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    out = xhat * g_ + beta.data[None, :, None]
    return _result(out, (x, gamma, beta), bw, "batchnorm1d")


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def numerical_grad(fn, tensor, eps=1e-6, indices=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor.data``.

    ``indices`` restricts the check to a subset of flat positions; the returned
    array holds derivatives for exactly those positions.
    """
    flat = tensor.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices)
    out = np.empty(idx.size)
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn().item()
        flat[i] = orig - eps
        down = fn().item()
        flat[i] = orig
        out[n] = (up - down) / (2 * eps)
    return out


# Below this gradient norm the comparison is absolute: a structurally zero
# gradient (a conv bias feeding train-mode batchnorm) leaves only
# finite-difference roundoff, around 1e-9 at eps = 1e-6.
GRAD_NORM_FLOOR = 1e-5


def relative_error(a, b, floor=GRAD_NORM_FLOOR):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn, tensors, eps=1e-6, max_entries=None, rng=None):
    """Compare autodiff and central-difference gradients of scalar ``fn()``.

    Returns ``{name_or_index: relative_error}``. With ``max_entries`` only a
    random subset of each tensor's entries is perturbed.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = [None if t.grad is None else t.grad.copy() for t in tensors]
    errors = {}
    for n, t in enumerate(tensors):
        key = t.name or n
        idx = None
        if max_entries is not None and t.size > max_entries:
            picker = rng if rng is not None else Rng(0, n)
            idx = np.sort(picker.choice(t.size, size=max_entries, replace=False))
        numeric = numerical_grad(fn, t, eps=eps, indices=idx)
        a = np.zeros(t.size) if analytic[n] is None else analytic[n].reshape(-1)
        if idx is not None:
            a = a[idx]
        errors[key] = relative_error(a, numeric)
    return errors
