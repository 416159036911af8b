"""Temporal conv encoder, attention stack and deconv decoder.

Input is a segmented video laid out [S, T, C]; the encoder treats segments
as the batch axis and runs 1-D convolutions over the shot axis.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionStack, FeatureMaps
from .layers import BatchNorm1d, Conv1d, ConvTranspose1d, Module


@dataclass
class BackboneConfig:
    input_dim: int = 2048
    channels: tuple = (64, 128, 256, 512, 512)
    width_factor: float = 1.0
    layers_per_block: tuple = (2, 2, 3, 3, 3)
    pool_strides: tuple = (2, 2, 5, 1, 1)
    fc_channels: int = 1024
    block8_out: int = 256
    head_dim: int = 256
    query_dim: int = 300
    deconv_strides: tuple = (5, 4)
    deconv_mid: int = 512
    out_channels: int = 1024
    dropout_p: float = 0.3
    T: int = 200

    def __post_init__(self):
        for name in ("channels", "layers_per_block", "pool_strides", "deconv_strides"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    @property
    def pool_factor(self):
        return int(np.prod(self.pool_strides))

    @property
    def R(self):
        return self.T // self.pool_factor

    @property
    def block_channels(self):
        return tuple(max(1, int(round(c * self.width_factor))) for c in self.channels)

    def validate(self):
        if len(self.channels) != 5 or len(self.layers_per_block) != 5 or len(self.pool_strides) != 5:
            raise T.ConfigurationError("blocks 1-5 need exactly five channel widths, layer counts and pool strides")
        if min(self.pool_strides) < 1 or min(self.deconv_strides) < 1:
            raise T.ConfigurationError("strides must be >= 1")
        if self.T % self.pool_factor:
            raise T.ConfigurationError(
                f"T={self.T} is not divisible by the pooling product {self.pool_factor}"
            )
        if self.R * int(np.prod(self.deconv_strides)) != self.T:
            raise T.ConfigurationError(
                f"deconv strides {self.deconv_strides} map R={self.R} to "
                f"{self.R * int(np.prod(self.deconv_strides))}, not T={self.T}"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise T.ConfigurationError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @classmethod
    def test_profile(cls, **overrides):
        """Small dimensions that still exercise every code path (R = 5)."""
        base = dict(
            input_dim=64, channels=(8, 16, 32, 64, 64), layers_per_block=(2, 2, 3, 3, 3),
            pool_strides=(2, 2, 2, 1, 1), fc_channels=64, block8_out=32, head_dim=32,
            deconv_strides=(4, 2), deconv_mid=32, out_channels=64, T=40,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise KeyError(f"unknown backbone config keys: {unknown}")
        return cls(**data)


def format_config(values: dict) -> str:
    """Render a flat ``key = value`` config; tuples become comma lists."""
    lines = []
    for key, value in values.items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Values stay strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def coerce_fields(cls, raw: dict) -> dict:
    """Convert string values to the types of ``cls``'s dataclass defaults."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, value in raw.items():
        if key not in fields:
            raise KeyError(f"unknown config key {key!r} for {cls.__name__}")
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        if not isinstance(value, str):
            out[key] = value
        elif isinstance(default, tuple):
            out[key] = tuple(int(v) for v in value.split(",") if v.strip())
        elif isinstance(default, bool):
            out[key] = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            out[key] = int(value)
        elif isinstance(default, float):
            out[key] = float(value)
        else:
            out[key] = value
    return out


@dataclass
class LearnedShotFeatures:
    c_l: T.Tensor  # [S, T, out_channels]
    mask: np.ndarray  # [S, T]
    maps: FeatureMaps = field(default=None, repr=False)


def reduce_mask(mask, factor):
    """A reduced slot is valid when any shot it pools over is valid."""
    S, length = mask.shape
    return np.asarray(mask, dtype=bool).reshape(S, length // factor, factor).any(axis=2)


class ConvBlock(Module):
    def __init__(self, cin, cout, n_layers, pool, rng):
        self.convs = [Conv1d(cin if i == 0 else cout, cout, 3, rng, pad=1) for i in range(n_layers)]
        self.norms = [BatchNorm1d(cout) for _ in range(n_layers)]
        self.pool = pool

    def __call__(self, x, training):
        for conv, norm in zip(self.convs, self.norms):
            x = T.relu(norm(conv(x), training))
        if self.pool > 1:
            x = T.maxpool1d(x, self.pool, self.pool)
        return x


class Encoder(Module):
    """Blocks 1-8: [S, C, T] -> [S, block8_out, R]."""

    def __init__(self, cfg: BackboneConfig, rng):
        widths = cfg.block_channels
        cin = cfg.input_dim
        self.blocks = []
        for width, n, pool in zip(widths, cfg.layers_per_block, cfg.pool_strides):
            self.blocks.append(ConvBlock(cin, width, n, pool, rng))
            cin = width
        self.conv6 = Conv1d(cin, cfg.fc_channels, 3, rng, pad=1)
        self.conv7 = Conv1d(cfg.fc_channels, cfg.fc_channels, 3, rng, pad=1)
        self.conv8 = Conv1d(cfg.fc_channels, cfg.block8_out, 1, rng)
        self.norm8 = BatchNorm1d(cfg.block8_out)
        self._dropout_p = cfg.dropout_p

    def __call__(self, x, training, rng=None):
        for block in self.blocks:
            x = block(x, training)
        x = T.dropout(T.relu(self.conv6(x)), self._dropout_p, rng, training)
        x = T.dropout(T.relu(self.conv7(x)), self._dropout_p, rng, training)
        return T.relu(self.norm8(self.conv8(x), training))


class Decoder(Module):
    """Two transposed convolutions (kernel = stride), each followed by ReLU."""

    def __init__(self, cfg: BackboneConfig, cin, rng):
        s1, s2 = cfg.deconv_strides
        self.deconv1 = ConvTranspose1d(cin, cfg.deconv_mid, s1, s1, rng)
        self.deconv2 = ConvTranspose1d(cfg.deconv_mid, cfg.out_channels, s2, s2, rng)

    def __call__(self, x):
        return T.relu(self.deconv2(T.relu(self.deconv1(x))))


class FeatureNet(Module):
    def __init__(self, cfg: BackboneConfig, rng):
        if len(cfg.deconv_strides) != 2:
            raise T.ConfigurationError("the decoder has exactly two transposed convolutions")
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng.child(1))
        self.attention = AttentionStack(cfg.block8_out, cfg.query_dim, cfg.head_dim, rng.child(2))
        self.decoder = Decoder(cfg, cfg.block8_out + 2 * cfg.head_dim, rng.child(3))

    def encode(self, features, mask, training=False, rng=None):
        """[S, T, C] -> c_v [S, R, block8_out]."""
        features = T.as_tensor(features)
        mask = np.asarray(mask, dtype=bool)
        S, length, C = features.shape
        if length != self.cfg.T or C != self.cfg.input_dim:
            raise T.ConfigurationError(
                f"segmented input {features.shape} does not match T={self.cfg.T}, C={self.cfg.input_dim}"
            )
        # padded slots are cut from the graph so they never receive gradient
        x = T.mul(features, np.broadcast_to(mask[:, :, None], features.shape).astype(float))
        x = T.transpose(x, (0, 2, 1))
        y = self.encoder(x, training, rng)
        return T.transpose(y, (0, 2, 1))

    def decode(self, c_c):
        """c_c [S, R, Cc] -> [S, T, out_channels]."""
        if c_c.shape[1] != self.cfg.R:
            raise T.ConfigurationError(f"decoder expects R={self.cfg.R}, got {c_c.shape[1]}")
        y = self.decoder(T.transpose(c_c, (0, 2, 1)))
        return T.transpose(y, (0, 2, 1))

    def __call__(self, features, mask, h_q, training=False, rng=None):
        mask = np.asarray(mask, dtype=bool)
        c_v = self.encode(features, mask, training, rng)
        maps = self.attention(c_v, h_q, reduce_mask(mask, self.cfg.pool_factor))
        c_l = self.decode(maps.c_c)
        return LearnedShotFeatures(c_l=c_l, mask=mask, maps=maps)
