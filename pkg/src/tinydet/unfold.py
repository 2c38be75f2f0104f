"""RoI cropping, patch tokenization and raster/shuffle unfolding.

An S×S RoI is cut into a G×G grid of p×p patches. A K×K window slides over
the patch grid; the K² patch vectors under it are concatenated into one
unfolded token and linearly projected to the model width D. Raster order
concatenates them row-major; shuffle order additionally emits r−1 distinct
non-identity permutations per window, so each window contributes r tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class UnfoldConfig:
    roi_size: int = 8
    patch_size: int = 2
    patch_stride: int = 2
    window: int = 2
    window_stride: int = 1
    oversample: int = 4
    model_dim: int = 64
    seed: int = 0
    order: Literal["raster", "shuffle"] = "shuffle"
    pad_windows: bool = True
    raster_repeat: int = 1

    def violations(self) -> list[str]:
        errs = []
        for name in ("roi_size", "patch_size", "patch_stride", "window", "window_stride",
                     "oversample", "model_dim", "raster_repeat"):
            if getattr(self, name) < 1:
                errs.append(f"unfold.{name} must be >= 1, got {getattr(self, name)}")
        if errs:
            return errs
        if self.patch_size > self.roi_size or (self.roi_size - self.patch_size) % self.patch_stride:
            errs.append(f"unfold: (roi_size - patch_size) = {self.roi_size - self.patch_size} "
                        f"is not a multiple of patch_stride {self.patch_stride}")
            return errs
        if self.window > self.grid_size:
            errs.append(f"unfold.window {self.window} exceeds the {self.grid_size}×{self.grid_size} patch grid")
        if self.order not in ("raster", "shuffle"):
            errs.append(f"unfold.order must be 'raster' or 'shuffle', got {self.order!r}")
        elif self.order == "shuffle" and self.oversample - 1 > math.factorial(self.window ** 2) - 1:
            errs.append(f"unfold.oversample {self.oversample} needs {self.oversample - 1} distinct "
                        f"non-identity orders but only {math.factorial(self.window ** 2) - 1} exist")
        return errs

    def check(self) -> None:
        errs = self.violations()
        if errs:
            raise ConfigError("; ".join(errs))

    @property
    def grid_size(self) -> int:
        return (self.roi_size - self.patch_size) // self.patch_stride + 1

    @property
    def window_count(self) -> int:
        return len(window_positions(self))

    @property
    def num_tokens(self) -> int:
        per_window = self.oversample if self.order == "shuffle" else self.raster_repeat
        return per_window * self.window_count

    def token_in_dim(self, channels: int) -> int:
        return self.window ** 2 * channels * self.patch_size ** 2


@dataclass
class UnfoldProjection:
    weight: Tensor  # (K²·C·p², D)
    bias: Tensor  # (D,)

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "UnfoldProjection":
        return cls(Tensor(rng.normal(0.0, np.sqrt(1.0 / in_dim), (in_dim, out_dim)), requires_grad=True),
                   Tensor(np.zeros(out_dim), requires_grad=True))


@dataclass
class UnfoldedSequence:
    tokens: Tensor  # (n_tok, D) or (N, n_tok, D)
    provenance: list[tuple[int, tuple[int, ...]]]  # (window index, patch order within the window)
    patch_table: np.ndarray  # (n_tok, K²) patch indices; G² denotes the zero padding patch

    def __len__(self) -> int:
        return len(self.provenance)


def crop_and_resize(feature, batch_index, boxes, size: int, spatial_scale: float = 1.0) -> Tensor:
    """Bilinearly sample an size×size grid at bin centers of each box.

    ``feature`` is B×C×H×W, ``boxes`` are (x1, y1, x2, y2) in image pixels and
    ``spatial_scale`` maps image pixels to feature pixels. Returns N×C×size×size.
    """
    feature = T.as_tensor(feature)
    if feature.ndim != 4:
        raise ShapeError(f"crop_and_resize expects a B×C×H×W feature, got {feature.shape}")
    bidx = np.asarray(batch_index, dtype=np.intp)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) * spatial_scale
    B, C, H, W = feature.shape
    centers = (np.arange(size) + 0.5) / size

    def axis_coords(lo, hi, limit):
        c = lo[:, None] + centers[None, :] * (hi - lo)[:, None] - 0.5
        c = np.clip(c, 0.0, limit - 1)
        i0 = np.floor(c).astype(np.intp)
        i1 = np.minimum(i0 + 1, limit - 1)
        return i0, i1, c - i0

    y0, y1, wy = axis_coords(boxes[:, 1], boxes[:, 3], H)
    x0, x1, wx = axis_coords(boxes[:, 0], boxes[:, 2], W)
    feat = feature.data.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    base = (bidx * H)[:, None, None]
    corners = []
    for yi, xi, w in ((y0, x0, (1 - wy)[:, :, None] * (1 - wx)[:, None, :]),
                      (y0, x1, (1 - wy)[:, :, None] * wx[:, None, :]),
                      (y1, x0, wy[:, :, None] * (1 - wx)[:, None, :]),
                      (y1, x1, wy[:, :, None] * wx[:, None, :])):
        flat = ((base + yi[:, :, None]) * W + xi[:, None, :])
        corners.append((flat, w))
    out = sum(feat[flat] * w[..., None] for flat, w in corners)  # (N, S, S, C)

    def vjp(g):
        gt = g.transpose(0, 2, 3, 1)
        dflat = np.zeros((B * H * W, C))
        idx = np.concatenate([flat.ravel() for flat, _ in corners])
        vals = np.concatenate([(gt * w[..., None]).reshape(-1, C) for _, w in corners])
        np.add.at(dflat, idx, vals)
        return (dflat.reshape(B, H, W, C).transpose(0, 3, 1, 2),)

    return T.custom(out.transpose(0, 3, 1, 2), (feature,), vjp, "crop_and_resize")


def patch_index(channels: int, cfg: UnfoldConfig) -> np.ndarray:
    """Flat indices into a C×S×S block; row g is patch g (raster), channel-major within."""
    S, p, st, G = cfg.roi_size, cfg.patch_size, cfg.patch_stride, cfg.grid_size
    c, dy, dx = np.meshgrid(np.arange(channels), np.arange(p), np.arange(p), indexing="ij")
    within = (c * S * S + dy * S + dx).ravel()
    gy, gx = np.meshgrid(np.arange(G), np.arange(G), indexing="ij")
    offsets = (gy * st * S + gx * st).ravel()
    return offsets[:, None] + within[None, :]


def tokenize_roi(roi, cfg: UnfoldConfig) -> Tensor:
    """C×S×S → (G², C·p²) patch vectors; N×C×S×S → (N, G², C·p²)."""
    cfg.check()
    roi = T.as_tensor(roi)
    if roi.ndim not in (3, 4) or roi.shape[-1] != cfg.roi_size or roi.shape[-2] != cfg.roi_size:
        raise ShapeError(f"RoI must be C×{cfg.roi_size}×{cfg.roi_size} (optionally batched), got {roi.shape}")
    channels = roi.shape[-3]
    idx = patch_index(channels, cfg)
    flat = roi.reshape(roi.shape[:-3] + (channels * cfg.roi_size ** 2,))
    return T.take(flat, idx, axis=-1)


def window_positions(cfg: UnfoldConfig) -> list[tuple[int, int]]:
    G, K, ws = cfg.grid_size, cfg.window, cfg.window_stride
    last = G if cfg.pad_windows else G - K + 1
    return [(a, b) for a in range(0, last, ws) for b in range(0, last, ws)]


def window_table(cfg: UnfoldConfig) -> np.ndarray:
    """(windows, K²) raster-ordered patch indices; out-of-grid slots point at the zero patch G²."""
    G, K = cfg.grid_size, cfg.window
    rows = []
    for a, b in window_positions(cfg):
        rows.append([(a + u) * G + (b + v) if a + u < G and b + v < G else G * G
                     for u in range(K) for v in range(K)])
    return np.asarray(rows, dtype=np.intp)


def shuffle_orders(cfg: UnfoldConfig, windows: int) -> np.ndarray:
    """(windows, r, K²) orders: identity first, then r−1 distinct non-identity permutations."""
    n = cfg.window ** 2
    r = cfg.oversample
    if r - 1 > math.factorial(n) - 1:
        raise ConfigError(f"oversample {r} needs {r - 1} distinct non-identity orders of {n} patches; "
                          f"only {math.factorial(n) - 1} exist")
    rng = np.random.default_rng(cfg.seed)
    identity = tuple(range(n))
    out = np.empty((windows, r, n), dtype=np.intp)
    for w in range(windows):
        picked = [identity]
        seen = {identity}
        while len(picked) < r:
            perm = tuple(int(i) for i in rng.permutation(n))
            if perm not in seen:
                seen.add(perm)
                picked.append(perm)
        out[w] = picked
    return out


def _project(grid: Tensor, table: np.ndarray, proj: UnfoldProjection) -> Tensor:
    pad_shape = grid.shape[:-2] + (1, grid.shape[-1])
    padded = T.concat([grid, Tensor(np.zeros(pad_shape))], axis=-2)
    gathered = T.take(padded, table, axis=-2)  # (..., n_tok, K², Pd)
    cat = gathered.reshape(gathered.shape[:-2] + (gathered.shape[-2] * gathered.shape[-1],))
    if cat.shape[-1] != proj.weight.shape[0]:
        raise ShapeError(f"unfolded width {cat.shape[-1]} does not match projection {proj.weight.shape}")
    return cat @ proj.weight + proj.bias


def _check_grid(grid: Tensor, cfg: UnfoldConfig) -> None:
    cfg.check()
    if grid.shape[-2] != cfg.grid_size ** 2:
        raise ShapeError(f"token grid has {grid.shape[-2]} patches, expected {cfg.grid_size ** 2}")


def unfold_raster(grid, proj: UnfoldProjection, cfg: UnfoldConfig, repeat: int = 1) -> UnfoldedSequence:
    """One raster-order token per window; ``repeat`` > 1 duplicates each token in place."""
    grid = T.as_tensor(grid)
    _check_grid(grid, cfg)
    wt = window_table(cfg)
    table = np.repeat(wt, repeat, axis=0)
    identity = tuple(range(cfg.window ** 2))
    prov = [(w, identity) for w in range(len(wt)) for _ in range(repeat)]
    return UnfoldedSequence(_project(grid, table, proj), prov, table)


def unfold_shuffle(grid, proj: UnfoldProjection, cfg: UnfoldConfig) -> UnfoldedSequence:
    """r tokens per window, grouped contiguously: raster order then r−1 sampled permutations."""
    grid = T.as_tensor(grid)
    _check_grid(grid, cfg)
    wt = window_table(cfg)
    orders = shuffle_orders(cfg, len(wt))
    table = np.take_along_axis(wt[:, None, :], orders, axis=2).reshape(-1, wt.shape[1])
    prov = [(w, tuple(int(i) for i in orders[w, v])) for w in range(len(wt)) for v in range(cfg.oversample)]
    return UnfoldedSequence(_project(grid, table, proj), prov, table)


def unfold(grid, proj: UnfoldProjection, cfg: UnfoldConfig) -> UnfoldedSequence:
    if cfg.order == "raster":
        return unfold_raster(grid, proj, cfg, repeat=cfg.raster_repeat)
    return unfold_shuffle(grid, proj, cfg)
