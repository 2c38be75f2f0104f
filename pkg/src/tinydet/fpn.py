"""Top-down feature pyramid: P_L = Conv(C_L), P_i = Conv(C_i) + Up(P_{i+1})."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


@dataclass
class FpnParams:
    """One 1×1 lateral kernel (D_fpn × C_i × 1 × 1) per level, optional biases."""

    lateral: list[Tensor]
    bias: list[Tensor] | None = None

    @classmethod
    def init(cls, in_channels: list[int], out_channels: int, rng: np.random.Generator,
             with_bias: bool = True) -> "FpnParams":
        kernels = [Tensor(rng.normal(0.0, np.sqrt(1.0 / c), (out_channels, c, 1, 1)), requires_grad=True)
                   for c in in_channels]
        bias = ([Tensor(np.zeros(out_channels), requires_grad=True) for _ in in_channels]
                if with_bias else None)
        return cls(kernels, bias)

    def named(self) -> dict[str, Tensor]:
        out = {f"fpn.lateral{i}": k for i, k in enumerate(self.lateral)}
        if self.bias is not None:
            out.update({f"fpn.bias{i}": b for i, b in enumerate(self.bias)})
        return out


def _spatial(x: Tensor) -> tuple[int, int]:
    return x.shape[-2], x.shape[-1]


def validate_backbone(levels: list[Tensor]) -> None:
    if not levels:
        raise ShapeError("backbone features must contain at least one level")
    for i in range(len(levels) - 1):
        h, w = _spatial(levels[i])
        hu, wu = _spatial(levels[i + 1])
        if (h, w) != (2 * hu, 2 * wu):
            raise ShapeError(f"level {i} is {h}×{w} but level {i + 1} is {hu}×{wu}; expected exact halving")


def fuse_level(c: Tensor, upper: Tensor | None, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    lateral = T.conv2d(c, kernel, bias)
    if upper is None:
        return lateral
    up = T.upsample_nearest_2x(upper)
    if _spatial(up) != _spatial(lateral) or up.shape[:-2] != lateral.shape[:-2]:
        raise ShapeError(f"upsampled upper level {up.shape} does not match lateral {lateral.shape}")
    return lateral + up


def build_pyramid(backbone: list[Tensor], params: FpnParams) -> list[Tensor]:
    """Fuse from the coarsest level down; index 0 stays the finest."""
    validate_backbone(backbone)
    if len(params.lateral) != len(backbone):
        raise ShapeError(f"{len(params.lateral)} lateral kernels for {len(backbone)} backbone levels")
    biases = params.bias or [None] * len(backbone)
    out: list[Tensor | None] = [None] * len(backbone)
    upper = None
    for i in reversed(range(len(backbone))):
        upper = fuse_level(backbone[i], upper, params.lateral[i], biases[i])
        out[i] = upper
    return out  # type: ignore[return-value]
