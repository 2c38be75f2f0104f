"""Masked transformer encoder over [t_cls, unfolded tokens…, t_box] and the task heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NumericError, ShapeError
from .tensor import Tensor

BOX_DELTA_STDS = np.array([0.1, 0.1, 0.2, 0.2])


def _param(x) -> Tensor:
    return Tensor(x, requires_grad=True)


@dataclass
class MTELayer:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, ffn_mult: int = 2) -> "MTELayer":
        hid = ffn_mult * dim

        def lin(i, o, gain=1.0):
            return _param(rng.normal(0.0, np.sqrt(gain / i), (i, o)))

        return cls(
            ln1_g=_param(np.ones(dim)), ln1_b=_param(np.zeros(dim)),
            wq=lin(dim, dim), bq=_param(np.zeros(dim)),
            wk=lin(dim, dim), bk=_param(np.zeros(dim)),
            wv=lin(dim, dim), bv=_param(np.zeros(dim)),
            wo=lin(dim, dim, 0.5), bo=_param(np.zeros(dim)),
            ln2_g=_param(np.ones(dim)), ln2_b=_param(np.zeros(dim)),
            w1=lin(dim, hid, 2.0), b1=_param(np.zeros(hid)),
            w2=lin(hid, dim, 0.5), b2=_param(np.zeros(dim)),
        )


@dataclass
class MTEParams:
    layers: list[MTELayer]
    heads: int
    lnf_g: Tensor
    lnf_b: Tensor

    @property
    def dim(self) -> int:
        return self.lnf_g.shape[0]

    @property
    def d_k(self) -> int:
        return self.dim // self.heads

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, layers: int = 2, heads: int = 4,
             ffn_mult: int = 2) -> "MTEParams":
        if dim % heads:
            raise ShapeError(f"model dim {dim} is not divisible by {heads} heads")
        return cls([MTELayer.init(dim, rng, ffn_mult) for _ in range(layers)], heads,
                   _param(np.ones(dim)), _param(np.zeros(dim)))

    def named(self, prefix: str = "mte") -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in vars(layer).items():
                out[f"{prefix}.{i}.{k}"] = v
        out[f"{prefix}.lnf_g"] = self.lnf_g
        out[f"{prefix}.lnf_b"] = self.lnf_b
        return out


@dataclass
class HeadParams:
    t_cls: Tensor  # (D,)
    t_box: Tensor  # (D,)
    cls_w: Tensor  # (D, classes + 1)
    cls_b: Tensor
    box_w: Tensor  # (D, 4)
    box_b: Tensor

    @classmethod
    def init(cls, dim: int, num_classes: int, rng: np.random.Generator) -> "HeadParams":
        return cls(
            t_cls=_param(rng.normal(0.0, 0.02, dim)), t_box=_param(rng.normal(0.0, 0.02, dim)),
            cls_w=_param(rng.normal(0.0, 0.01, (dim, num_classes + 1))), cls_b=_param(np.zeros(num_classes + 1)),
            box_w=_param(rng.normal(0.0, 0.001, (dim, 4))), box_b=_param(np.zeros(4)),
        )

    def named(self, prefix: str = "head") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


def assemble_local_sequence(unfolded, t_cls, t_box) -> Tensor:
    """Concatenate [t_cls, unfolded…, t_box] along the token axis.

    ``unfolded`` is (N_u, D) or (N, N_u, D); task tokens are broadcast over N.
    """
    unfolded, t_cls, t_box = T.as_tensor(unfolded), T.as_tensor(t_cls), T.as_tensor(t_box)
    if unfolded.ndim < 2 or unfolded.shape[-2] < 1:
        raise ShapeError(f"need at least one unfolded token, got {unfolded.shape}")
    d = unfolded.shape[-1]
    if t_cls.shape != (d,) or t_box.shape != (d,):
        raise ShapeError(f"task tokens {t_cls.shape}, {t_box.shape} do not match token width {d}")
    lead = unfolded.shape[:-2] + (1, d)
    return T.concat([T.broadcast_to(t_cls, lead), unfolded, T.broadcast_to(t_box, lead)], axis=-2)


def task_mask(n_unfolded: int) -> np.ndarray:
    """True where attention is blocked: only cls→box and box→cls."""
    n = n_unfolded + 2
    mask = np.zeros((n, n), dtype=bool)
    mask[0, n - 1] = mask[n - 1, 0] = True
    return mask


@dataclass
class MTEOutput:
    tokens: Tensor
    attention: list[np.ndarray]  # per layer, (..., heads, T, T)
    layer_inputs: list[np.ndarray] = field(default_factory=list)  # normalized input to each attention block


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = x.reshape(tuple(lead) + (n, heads, d // heads))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return x.transpose(axes).reshape(tuple(lead) + (n, h * dk))


def attention(h: Tensor, layer: MTELayer, heads: int, mask: np.ndarray) -> tuple[Tensor, Tensor]:
    q = _split_heads(h @ layer.wq + layer.bq, heads)
    k = _split_heads(h @ layer.wk + layer.bk, heads)
    v = _split_heads(h @ layer.wv + layer.bv, heads)
    dk = q.shape[-1]
    logits = (q @ T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) * (1.0 / np.sqrt(dk))
    weights = T.softmax(logits, axis=-1, mask=mask)
    return _merge_heads(weights @ v) @ layer.wo + layer.bo, weights


def mte_forward(seq, params: MTEParams, mask: np.ndarray | None = None) -> MTEOutput:
    """Pre-norm residual blocks: x += MSA(LN(x)); x += FFN(LN(x)); final LN."""
    x = T.as_tensor(seq)
    n = x.shape[-2]
    if mask is None:
        mask = task_mask(n - 2)
    if mask.shape != (n, n):
        raise ShapeError(f"mask {mask.shape} does not match sequence length {n}")
    if x.shape[-1] != params.dim:
        raise ShapeError(f"token width {x.shape[-1]} does not match encoder width {params.dim}")
    if not np.isfinite(x.data).all():
        raise NumericError("mte_forward received non-finite tokens")
    attn, inputs = [], []
    for layer in params.layers:
        h = T.layer_norm(x, layer.ln1_g, layer.ln1_b)
        inputs.append(h.data)
        a, w = attention(h, layer, params.heads, mask)
        attn.append(w.data)
        x = x + a
        h = T.layer_norm(x, layer.ln2_g, layer.ln2_b)
        x = x + T.silu(h @ layer.w1 + layer.b1) @ layer.w2 + layer.b2
    return MTEOutput(T.layer_norm(x, params.lnf_g, params.lnf_b), attn, inputs)


def attention_scores(weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-head class/box rows restricted to unfolded tokens, renormalized, then head-averaged.

    ``weights`` is (..., heads, T, T) final-layer attention; returns two (..., N_u) arrays.
    """
    w = np.asarray(weights)
    cls_row = w[..., 0, 1:-1]
    box_row = w[..., -1, 1:-1]
    cls_row = cls_row / cls_row.sum(axis=-1, keepdims=True)
    box_row = box_row / box_row.sum(axis=-1, keepdims=True)
    return cls_row.mean(axis=-2), box_row.mean(axis=-2)


@dataclass
class TaskGroups:
    """Sequence positions of each group: 0 is t'_cls, 1..N_u unfolded, N_u+1 is t'_box."""

    cls_positions: list[int]
    box_positions: list[int]
    assignment: np.ndarray  # per unfolded token: True → class group
    cls_tokens: np.ndarray | None = None
    box_tokens: np.ndarray | None = None

    @property
    def n_cls(self) -> int:
        return int(self.assignment.sum())

    @property
    def n_box(self) -> int:
        return int((~self.assignment).sum())


def task_token_select(alpha_cls, alpha_box, global_tokens=None) -> TaskGroups:
    """Greedy split of unfolded tokens by descending α_cls + α_box.

    A token joins the class group when it leans to the class token and the
    class group is not past half, or when the box group is already full;
    otherwise it joins the box group. Half means ⌊N_u/2⌋.
    """
    a_cls = np.asarray(alpha_cls, dtype=np.float64)
    a_box = np.asarray(alpha_box, dtype=np.float64)
    if a_cls.shape != a_box.shape or a_cls.ndim != 1:
        raise ShapeError(f"α vectors must be 1-D of equal length, got {a_cls.shape} and {a_box.shape}")
    n_u = a_cls.size
    half = n_u // 2
    order = np.argsort(-(a_cls + a_box), kind="stable")
    assignment = np.zeros(n_u, dtype=bool)
    cls_pos, box_pos = [0], [n_u + 1]
    n_cls = n_box = 0
    for i in order:
        if (a_cls[i] >= a_box[i] and n_cls <= half) or n_box >= half:
            assignment[i] = True
            cls_pos.append(int(i) + 1)
            n_cls += 1
        else:
            box_pos.append(int(i) + 1)
            n_box += 1
    groups = TaskGroups(cls_pos, box_pos, assignment)
    if global_tokens is not None:
        g = np.asarray(global_tokens.data if isinstance(global_tokens, Tensor) else global_tokens)
        if g.shape[0] != n_u + 2:
            raise ShapeError(f"global sequence has {g.shape[0]} tokens, expected {n_u + 2}")
        groups.cls_tokens = g[cls_pos]
        groups.box_tokens = g[box_pos]
    return groups


def pooling_weights(groups: TaskGroups, seq_len: int) -> np.ndarray:
    """(2, seq_len) mean-pooling rows for the class and box groups."""
    w = np.zeros((2, seq_len))
    w[0, groups.cls_positions] = 1.0 / len(groups.cls_positions)
    w[1, groups.box_positions] = 1.0 / len(groups.box_positions)
    return w


def ungrouped_weights(seq_len: int) -> np.ndarray:
    """Pooling when selection is disabled: each head averages its task token and every unfolded token."""
    w = np.zeros((2, seq_len))
    w[0, :-1] = 1.0 / (seq_len - 1)
    w[1, 1:] = 1.0 / (seq_len - 1)
    return w


def heads_forward(tokens, weights, params: HeadParams) -> tuple[Tensor, Tensor]:
    """Pool tokens with (…, 2, T) ``weights`` then apply one linear layer per head."""
    tokens = T.as_tensor(tokens)
    pooled = Tensor(weights) @ tokens  # (..., 2, D)
    cls_feat = pooled[..., 0, :]
    box_feat = pooled[..., 1, :]
    return cls_feat @ params.cls_w + params.cls_b, box_feat @ params.box_w + params.box_b


def encode_deltas(proposals, targets) -> np.ndarray:
    """(dx, dy, dw, dh) from proposal boxes to target boxes, divided by BOX_DELTA_STDS."""
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    gw, gh = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    d = np.stack([((g[:, 0] + g[:, 2]) - (p[:, 0] + p[:, 2])) / (2 * pw),
                  ((g[:, 1] + g[:, 3]) - (p[:, 1] + p[:, 3])) / (2 * ph),
                  np.log(gw / pw), np.log(gh / ph)], axis=1)
    return d / BOX_DELTA_STDS


def decode_deltas(proposals, deltas, max_ratio: float = 4.0) -> np.ndarray:
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4) * BOX_DELTA_STDS
    clip = np.log(max_ratio)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    cx = (p[:, 0] + p[:, 2]) / 2 + d[:, 0] * pw
    cy = (p[:, 1] + p[:, 3]) / 2 + d[:, 1] * ph
    w = pw * np.exp(np.clip(d[:, 2], -clip, clip))
    h = ph * np.exp(np.clip(d[:, 3], -clip, clip))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
