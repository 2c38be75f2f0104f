"""Synthetic tiny-object scenes, a strided-conv toy backbone and a GT-jitter proposal sampler."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .metrics import iou_matrix
from .tensor import Tensor
from .trans_rcnn import encode_deltas

SHAPES = ("square", "disc", "cross")


@dataclass
class SceneConfig:
    image_size: int = 64
    objects_min: int = 2
    objects_max: int = 6
    side_min: int = 3
    side_max: int = 12
    class_count: int = 3
    noise_std: float = 0.05
    background: float = 0.1
    seed: int = 0

    def violations(self) -> list[str]:
        errs = []
        if self.image_size < 8:
            errs.append(f"scene.image_size must be >= 8, got {self.image_size}")
        if not 0 <= self.objects_min <= self.objects_max:
            errs.append(f"scene.objects range [{self.objects_min}, {self.objects_max}] is invalid")
        if not 1 <= self.side_min <= self.side_max:
            errs.append(f"scene.side range [{self.side_min}, {self.side_max}] is invalid")
        elif self.side_max > min(16, self.image_size):
            errs.append(f"scene.side_max {self.side_max} exceeds the tiny-object limit of 16 px")
        if self.class_count < 1:
            errs.append(f"scene.class_count must be >= 1, got {self.class_count}")
        if self.noise_std < 0:
            errs.append(f"scene.noise_std must be >= 0, got {self.noise_std}")
        if not 0 <= self.background <= 1:
            errs.append(f"scene.background must lie in [0, 1], got {self.background}")
        return errs


@dataclass
class Scene:
    index: int
    image: np.ndarray  # (1, H, W) in [0, 1]
    boxes: np.ndarray  # (n, 4) x1, y1, x2, y2
    classes: np.ndarray  # (n,)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


def class_intensity(c: int, class_count: int) -> float:
    return float(np.linspace(1.0, 0.5, class_count)[c]) if class_count > 1 else 1.0


def _render(canvas: np.ndarray, x: int, y: int, side: int, cls: int, class_count: int) -> None:
    yy, xx = np.mgrid[0:side, 0:side]
    shape = SHAPES[cls % len(SHAPES)]
    if shape == "square":
        m = np.ones((side, side), dtype=bool)
    elif shape == "disc":
        c = (side - 1) / 2
        m = (yy - c) ** 2 + (xx - c) ** 2 <= (side / 2) ** 2
    else:
        band = max(1, side // 3)
        lo = (side - band) // 2
        m = ((yy >= lo) & (yy < lo + band)) | ((xx >= lo) & (xx < lo + band))
    patch = canvas[y:y + side, x:x + side]
    patch[m] = class_intensity(cls, class_count)


def generate_scene(cfg: SceneConfig, index: int) -> Scene:
    errs = cfg.violations()
    if errs:
        raise ConfigError("; ".join(errs))
    rng = np.random.default_rng([cfg.seed, index])
    n = cfg.image_size
    img = np.full((n, n), cfg.background)
    count = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    boxes, classes = [], []
    for _ in range(count):
        u = rng.random()
        side = min(cfg.side_max, cfg.side_min + int((cfg.side_max - cfg.side_min + 1) * u * u))
        cls = int(rng.integers(cfg.class_count))
        for _try in range(50):
            x, y = int(rng.integers(0, n - side + 1)), int(rng.integers(0, n - side + 1))
            if all(x + side + 1 <= bx1 or bx2 + 1 <= x or y + side + 1 <= by1 or by2 + 1 <= y
                   for bx1, by1, bx2, by2 in boxes):
                boxes.append((x, y, x + side, y + side))
                classes.append(cls)
                _render(img, x, y, side, cls, cfg.class_count)
                break
    img = np.clip(img + rng.normal(0.0, cfg.noise_std, img.shape), 0.0, 1.0)
    return Scene(index, img[None], np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                 np.asarray(classes, dtype=np.int64))


def generate_dataset(cfg: SceneConfig, count: int, start: int = 0) -> list[Scene]:
    return [generate_scene(cfg, i) for i in range(start, start + count)]


# toy backbone

@dataclass
class BackboneParams:
    kernels: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def init(cls, channels: Sequence[int], rng: np.random.Generator, in_channels: int = 1) -> "BackboneParams":
        kernels, biases = [], []
        prev = in_channels
        for c in channels:
            kernels.append(Tensor(rng.normal(0.0, np.sqrt(2.0 / (prev * 9)), (c, prev, 3, 3)), requires_grad=True))
            biases.append(Tensor(np.zeros(c), requires_grad=True))
            prev = c
        return cls(kernels, biases)

    @property
    def channels(self) -> list[int]:
        return [k.shape[0] for k in self.kernels]

    def named(self) -> dict[str, Tensor]:
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"backbone.conv{i}"] = k
            out[f"backbone.bias{i}"] = b
        return out


def toy_backbone(image, params: BackboneParams) -> list[Tensor]:
    """Level 0 keeps full resolution; each further level is a stride-2 conv. SiLU after each."""
    x = T.as_tensor(image)
    levels = len(params.kernels)
    h, w = x.shape[-2:]
    div = 2 ** (levels - 1)
    if h % div or w % div:
        raise ShapeError(f"image {h}×{w} is not divisible by 2^{levels - 1}")
    out = []
    for i, (k, b) in enumerate(zip(params.kernels, params.biases)):
        x = T.silu(T.conv2d(x, k, b, stride=1 if i == 0 else 2, padding=1))
        out.append(x)
    return out


# proposals

@dataclass
class ProposalConfig:
    jitter: float = 1.0
    negatives_per_image: int = 12
    positive_iou: float = 0.5
    negative_iou: float = 0.3
    negative_side_min: int = 3
    negative_side_max: int = 16
    max_tries: int = 20

    def violations(self) -> list[str]:
        errs = []
        if self.jitter < 0:
            errs.append(f"proposals.jitter must be >= 0, got {self.jitter}")
        if self.negatives_per_image < 0:
            errs.append(f"proposals.negatives_per_image must be >= 0, got {self.negatives_per_image}")
        for name in ("positive_iou", "negative_iou"):
            v = getattr(self, name)
            if not 0 < v < 1:
                errs.append(f"proposals.{name} must lie in (0, 1), got {v}")
        if not 1 <= self.negative_side_min <= self.negative_side_max:
            errs.append("proposals negative side range is invalid")
        if self.max_tries < 1:
            errs.append(f"proposals.max_tries must be >= 1, got {self.max_tries}")
        return errs


@dataclass
class ProposalSet:
    boxes: np.ndarray  # (n, 4)
    labels: np.ndarray  # (n,); background == class_count
    deltas: np.ndarray  # (n, 4); zero rows for background
    foreground: np.ndarray  # (n,) bool
    matched: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))  # GT index or -1

    def __len__(self) -> int:
        return len(self.labels)


def sample_proposals(scene: Scene, cfg: ProposalConfig, seed, class_count: int) -> ProposalSet:
    """One jittered positive per GT plus uniformly placed background boxes."""
    rng = np.random.default_rng(seed)
    H, W = scene.size
    boxes, labels, matched = [], [], []
    for gi, (gt, cls) in enumerate(zip(scene.boxes, scene.classes)):
        chosen = gt
        if cfg.jitter > 0:
            for _ in range(cfg.max_tries):
                cand = gt + rng.normal(0.0, cfg.jitter, 4)
                cand = np.array([max(0.0, cand[0]), max(0.0, cand[1]), min(W, cand[2]), min(H, cand[3])])
                if cand[2] - cand[0] < 1 or cand[3] - cand[1] < 1:
                    continue
                if iou_matrix(cand[None], gt[None])[0, 0] >= cfg.positive_iou:
                    chosen = cand
                    break
        boxes.append(np.asarray(chosen, dtype=np.float64))
        labels.append(int(cls))
        matched.append(gi)
    for _ in range(cfg.negatives_per_image):
        for _try in range(cfg.max_tries * 5):
            side = rng.uniform(cfg.negative_side_min, cfg.negative_side_max, 2)
            x, y = rng.uniform(0, W - side[0]), rng.uniform(0, H - side[1])
            cand = np.array([x, y, x + side[0], y + side[1]])
            if len(scene.boxes) == 0 or iou_matrix(cand[None], scene.boxes).max() < cfg.negative_iou:
                boxes.append(cand)
                labels.append(class_count)
                matched.append(-1)
                break
    boxes_a = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    labels_a = np.asarray(labels, dtype=np.int64)
    matched_a = np.asarray(matched, dtype=np.int64)
    fg = labels_a < class_count
    deltas = np.zeros((len(labels_a), 4))
    if fg.any():
        deltas[fg] = encode_deltas(boxes_a[fg], scene.boxes[matched_a[fg]])
    return ProposalSet(boxes_a, labels_a, deltas, fg, matched_a)


# portable float grids

GRID_MAGIC = b"FGRD"
DTYPE_TAGS = {1: "<f8", 2: "<f4"}


def write_float_grid(path, grid: np.ndarray) -> None:
    """16-byte header (magic, H, W, dtype tag as little-endian u32) then row-major little-endian data."""
    g = np.asarray(grid)
    if g.ndim == 3 and g.shape[0] == 1:
        g = g[0]
    if g.ndim != 2:
        raise ShapeError(f"float grids are 2-D, got {g.shape}")
    tag = 2 if g.dtype == np.float32 else 1
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", GRID_MAGIC, g.shape[0], g.shape[1], tag))
        fh.write(np.ascontiguousarray(g, dtype=DTYPE_TAGS[tag]).tobytes())


def read_float_grid(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, h, w, tag = struct.unpack("<4sIII", raw[:16])
    if magic != GRID_MAGIC or tag not in DTYPE_TAGS:
        raise ValueError(f"{path} is not a float grid")
    data = np.frombuffer(raw, dtype=DTYPE_TAGS[tag], offset=16)
    if data.size != h * w:
        raise ValueError(f"{path}: header says {h}×{w} but holds {data.size} values")
    return data.reshape(h, w).astype(np.float64)


def save_scene(directory, scene: Scene) -> None:
    d = Path(directory)
    write_float_grid(d / f"scene_{scene.index:05d}.grid", scene.image[0])
    record = {"index": scene.index, "height": scene.size[0], "width": scene.size[1],
              "gt": [{"box": [float(v) for v in b], "class": int(c)} for b, c in zip(scene.boxes, scene.classes)]}
    (d / f"scene_{scene.index:05d}.json").write_text(json.dumps(record, sort_keys=True) + "\n")


def load_scene(directory, index: int) -> Scene:
    d = Path(directory)
    img = read_float_grid(d / f"scene_{index:05d}.grid")
    record = json.loads((d / f"scene_{index:05d}.json").read_text())
    boxes = np.asarray([g["box"] for g in record["gt"]], dtype=np.float64).reshape(-1, 4)
    classes = np.asarray([g["class"] for g in record["gt"]], dtype=np.int64)
    return Scene(record["index"], img[None], boxes, classes)


def load_dataset(directory) -> list[Scene]:
    d = Path(directory)
    indices = sorted(int(p.stem.split("_")[1]) for p in d.glob("scene_*.json"))
    return [load_scene(d, i) for i in indices]
