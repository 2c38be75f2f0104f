"""Geometric/semantic encoders and the InfoNCE losses that regularize FPN fusion.

A minibatch yields, for every level ``i`` and image ``j``, four embeddings:
``g_c`` and ``s_c`` from the lateral feature C_i, ``g_p`` and ``s_p`` from the
fused feature P_i. Geometric pairs are (g_p[k,b], g_c[k,b]); semantic pairs
are (s_p[k,b], s_p[k+1,b]). Negatives for image ``b`` are every embedding of
the same kind from the other images, at all levels and both sources.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

REPR_DIM = 256


@dataclass
class ContrastiveConfig:
    tau: float = 0.07
    normalize: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")


@dataclass
class EncoderParams:
    """conv3×3 → conv3×3 → global average pool → linear → linear.

    ``adapters`` map each level's lateral channel count to the encoder input
    width; fused features already have that width and skip them.
    """

    conv1: Tensor
    conv1_b: Tensor
    conv2: Tensor
    conv2_b: Tensor
    fc1: Tensor
    fc1_b: Tensor
    fc2: Tensor
    fc2_b: Tensor
    adapters: list[Tensor] = field(default_factory=list)
    adapter_bias: list[Tensor] = field(default_factory=list)

    @property
    def in_channels(self) -> int:
        return self.conv1.shape[1]

    @classmethod
    def init(cls, in_channels: int, lateral_channels: list[int], rng: np.random.Generator,
             conv_channels: int = 16, hidden: int = 128, out_dim: int = REPR_DIM) -> "EncoderParams":
        def w(shape, fan_in, gain=2.0):
            return Tensor(rng.normal(0.0, np.sqrt(gain / fan_in), shape), requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n), requires_grad=True)

        return cls(
            conv1=w((conv_channels, in_channels, 3, 3), in_channels * 9), conv1_b=zeros(conv_channels),
            conv2=w((conv_channels, conv_channels, 3, 3), conv_channels * 9), conv2_b=zeros(conv_channels),
            fc1=w((conv_channels, hidden), conv_channels), fc1_b=zeros(hidden),
            fc2=w((hidden, out_dim), hidden, gain=1.0), fc2_b=zeros(out_dim),
            adapters=[w((in_channels, c, 1, 1), c, gain=1.0) for c in lateral_channels],
            adapter_bias=[zeros(in_channels) for _ in lateral_channels],
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.{k}": getattr(self, k)
               for k in ("conv1", "conv1_b", "conv2", "conv2_b", "fc1", "fc1_b", "fc2", "fc2_b")}
        for i, (a, b) in enumerate(zip(self.adapters, self.adapter_bias)):
            out[f"{prefix}.adapter{i}"] = a
            out[f"{prefix}.adapter{i}_b"] = b
        return out


def encode(feature, params: EncoderParams, normalize: bool = False) -> Tensor:
    """Embed a C×H×W (or N×C×H×W) feature map into a ``REPR_DIM`` vector (per sample)."""
    feature = T.as_tensor(feature)
    if feature.shape[-3] != params.in_channels:
        raise ShapeError(f"encoder expects {params.in_channels} channels, got feature {feature.shape}")
    h = T.silu(T.conv2d(feature, params.conv1, params.conv1_b, padding=1))
    h = T.silu(T.conv2d(h, params.conv2, params.conv2_b, padding=1))
    h = T.global_avg_pool(h)
    h = T.silu(h @ params.fc1 + params.fc1_b)
    out = h @ params.fc2 + params.fc2_b
    return T.l2_normalize(out) if normalize else out


def adapt_lateral(c: Tensor, level: int, params: EncoderParams) -> Tensor:
    return T.conv2d(c, params.adapters[level], params.adapter_bias[level])


@dataclass(frozen=True)
class Representation:
    vec: np.ndarray
    kind: Literal["geometric", "semantic"]
    source: Literal["c", "p"]
    level: int
    batch_index: int

    @property
    def key(self) -> tuple[str, str, int, int]:
        return (self.kind, self.source, self.level, self.batch_index)


@dataclass
class ReprBatch:
    """Embeddings shaped (L+1, B, d) for each of the four (kind, source) combinations."""

    g_c: Tensor
    g_p: Tensor
    s_c: Tensor
    s_p: Tensor

    def __post_init__(self):
        shapes = {t.shape for t in (self.g_c, self.g_p, self.s_c, self.s_p)}
        if len(shapes) != 1 or len(next(iter(shapes))) != 3:
            raise ShapeError(f"representation tensors must share one (L+1, B, d) shape, got {shapes}")

    @property
    def levels(self) -> int:
        return self.g_c.shape[0]

    @property
    def L(self) -> int:
        return self.levels - 1

    @property
    def B(self) -> int:
        return self.g_c.shape[1]

    @classmethod
    def from_arrays(cls, g_c, g_p, s_c, s_p, requires_grad: bool = False) -> "ReprBatch":
        return cls(*(Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad)
                     for a in (g_c, g_p, s_c, s_p)))

    def _reps(self, kind: str) -> list[Representation]:
        c, p = (self.g_c, self.g_p) if kind == "geometric" else (self.s_c, self.s_p)
        out = []
        for i in range(self.levels):
            for j in range(self.B):
                out.append(Representation(c.data[i, j], kind, "c", i, j))
                out.append(Representation(p.data[i, j], kind, "p", i, j))
        return out

    @property
    def G(self) -> list[Representation]:
        return self._reps("geometric")

    @property
    def S(self) -> list[Representation]:
        return self._reps("semantic")


def build_repr_batch(laterals: list[Tensor], pyramid: list[Tensor],
                     geo: EncoderParams, sem: EncoderParams) -> ReprBatch:
    """Encode every (C_i, P_i) pair of an N×C×H×W minibatch with both encoders."""
    if len(laterals) != len(pyramid):
        raise ShapeError(f"{len(laterals)} lateral levels vs {len(pyramid)} pyramid levels")
    parts: dict[str, list[Tensor]] = {"g_c": [], "g_p": [], "s_c": [], "s_p": []}
    n = pyramid[0].shape[0]
    for i, (c, p) in enumerate(zip(laterals, pyramid)):
        for name, params in (("g", geo), ("s", sem)):
            both = encode(T.concat([adapt_lateral(c, i, params), p], axis=0), params)
            parts[f"{name}_c"].append(both[:n])
            parts[f"{name}_p"].append(both[n:])
    return ReprBatch(*(T.stack(parts[k], axis=0) for k in ("g_c", "g_p", "s_c", "s_p")))


def _negatives(reps: list[Representation], B: int, b: int) -> list[Representation]:
    if not 0 <= b < B:
        raise IndexError(f"batch index {b} outside 0..{B - 1}")
    return [r for r in reps if r.batch_index != b]


def geometric_negatives(batch: ReprBatch, b: int) -> list[Representation]:
    return _negatives(batch.G, batch.B, b)


def semantic_negatives(batch: ReprBatch, b: int) -> list[Representation]:
    return _negatives(batch.S, batch.B, b)


def info_nce(query, positive, negatives, tau: float) -> Tensor:
    """−log(e^{q·p/τ} / (e^{q·p/τ} + Σ_n e^{q·n/τ})). Empty negatives give exactly 0."""
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    query, positive = T.as_tensor(query), T.as_tensor(positive)
    negatives = [T.as_tensor(n) for n in negatives]
    d = query.shape
    for v in [positive, *negatives]:
        if v.shape != d:
            raise ShapeError(f"info_nce vectors must share shape {d}, got {v.shape}")
    keys = T.stack([positive, *negatives], axis=0)
    logits = (keys @ query) * (1.0 / tau)
    return T.logsumexp(logits, axis=0) - logits[0]


def _contrast(queries: Tensor, pool: Tensor, pos_cols: np.ndarray, q_batch: np.ndarray,
              pool_batch: np.ndarray, cfg: ContrastiveConfig) -> Tensor:
    if cfg.normalize:
        queries, pool = T.l2_normalize(queries), T.l2_normalize(pool)
    logits = (queries @ pool.transpose(1, 0)) * (1.0 / cfg.tau)
    rows = np.arange(queries.shape[0])
    allowed = pool_batch[None, :] != q_batch[:, None]
    allowed[rows, pos_cols] = True
    terms = T.logsumexp(logits, axis=1, mask=~allowed) - logits[rows, pos_cols]
    return terms.mean()


def _pool(c: Tensor, p: Tensor) -> tuple[Tensor, np.ndarray]:
    levels, B, d = c.shape
    pool = T.concat([c.reshape(levels * B, d), p.reshape(levels * B, d)], axis=0)
    batch_of = np.tile(np.arange(B), 2 * levels)
    return pool, batch_of


def geometric_loss(batch: ReprBatch, cfg: ContrastiveConfig) -> Tensor:
    """Mean over (k=0..L, b) of info_nce(g_p[k,b], g_c[k,b], other images' G)."""
    levels, B, d = batch.g_c.shape
    pool, pool_batch = _pool(batch.g_c, batch.g_p)
    queries = batch.g_p.reshape(levels * B, d)
    q_batch = np.tile(np.arange(B), levels)
    pos_cols = np.arange(levels * B)  # g_c rows come first in the pool
    return _contrast(queries, pool, pos_cols, q_batch, pool_batch, cfg)


def semantic_loss(batch: ReprBatch, cfg: ContrastiveConfig) -> Tensor:
    """Mean over (k=0..L−1, b) of info_nce(s_p[k,b], s_p[k+1,b], other images' S)."""
    levels, B, d = batch.s_c.shape
    if levels < 2:
        raise ConfigError("semantic loss needs at least two pyramid levels (L >= 1)")
    pool, pool_batch = _pool(batch.s_c, batch.s_p)
    queries = batch.s_p[:-1].reshape((levels - 1) * B, d)
    q_batch = np.tile(np.arange(B), levels - 1)
    pos_cols = levels * B + B + np.arange((levels - 1) * B)  # s_p[k+1, b]
    return _contrast(queries, pool, pos_cols, q_batch, pool_batch, cfg)
