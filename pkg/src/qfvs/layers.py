"""Parameter containers on top of :mod:`qfvs.tensor`."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T


class Module:
    """Tracks parameters, buffers and sub-modules in attribute order."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, T.Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix=""):
        for key, value in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{key}", value
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Module):
                yield from value.named_buffers(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        own.update(self.named_buffers())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, target in own.items():
            arr = target.data if isinstance(target, T.Tensor) else target
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"{name}: checkpoint shape {src.shape} != model shape {arr.shape}")
            arr[...] = src


def kaiming_uniform(rng, shape, fan_in, name=None):
    bound = math.sqrt(6.0 / fan_in)
    return T.parameter(rng.uniform(-bound, bound, shape), name=name)


class Linear(Module):
    """y = x @ W + b with W laid out [in, out]."""

    def __init__(self, in_dim, out_dim, rng, bias=True):
        self.weight = kaiming_uniform(rng, (in_dim, out_dim), in_dim)
        self.bias = T.parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return T.add_bias(y, self.bias) if self.bias is not None else y


class Conv1d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, pad=0):
        self.weight = kaiming_uniform(rng, (cout, cin, k), cin * k)
        self.bias = T.parameter(np.zeros(cout))
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        return T.conv1d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose1d(Module):
    def __init__(self, cin, cout, k, stride, rng):
        # each output position sees ceil(k / stride) input positions
        self.weight = kaiming_uniform(rng, (cin, cout, k), cin * -(-k // stride))
        self.bias = T.parameter(np.zeros(cout))
        self.stride = stride

    def __call__(self, x):
        y = T.conv1d_transpose(x, self.weight, self.stride)
        # bias along the channel axis of [B, C, L]
        y = T.transpose(y, (0, 2, 1))
        y = T.add_bias(y, self.bias)
        return T.transpose(y, (0, 2, 1))


class BatchNorm1d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = T.parameter(np.ones(channels))
        self.beta = T.parameter(np.zeros(channels))
        self._buffers = {
            "running_mean": np.zeros(channels),
            "running_var": np.ones(channels),
        }
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, training):
        return T.batchnorm1d(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            training,
            self.momentum,
            self.eps,
        )
