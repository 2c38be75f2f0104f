"""IoU, COCO-style average precision with tiny-object size buckets, and feature-map PSNR."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError

# (lo, hi] on sqrt(box area), in pixels
SIZE_BUCKETS: dict[str, tuple[float, float]] = {
    "vt": (2.0, 8.0),
    "t": (8.0, 16.0),
    "s": (16.0, 32.0),
    "m": (32.0, 64.0),
}
IOU_SWEEP = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
PSNR_INF = math.inf
# dynamic-range convention the PSNR numbers are computed under
PSNR_CONVENTION = "max=1;target=gaussian(sigma=4,max-combine);response=level0 channel-max,min-max"


def iou(a, b) -> float:
    return float(iou_matrix(np.asarray(a, dtype=np.float64)[None], np.asarray(b, dtype=np.float64)[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def box_scale(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.sqrt(np.clip((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]), 0, None))


@dataclass
class ImageDetections:
    image_id: int
    gt_boxes: np.ndarray
    gt_classes: np.ndarray
    det_boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    det_classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    det_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)
        self.gt_classes = np.asarray(self.gt_classes, dtype=np.int64).reshape(-1)
        self.det_boxes = np.asarray(self.det_boxes, dtype=np.float64).reshape(-1, 4)
        self.det_classes = np.asarray(self.det_classes, dtype=np.int64).reshape(-1)
        self.det_scores = np.asarray(self.det_scores, dtype=np.float64).reshape(-1)
        if len(self.det_scores) and (self.det_scores.min() < 0 or self.det_scores.max() > 1):
            raise ValueError("detection confidences must lie in [0, 1]")


def _in_bucket(scale: np.ndarray, bucket: tuple[float, float] | None) -> np.ndarray:
    if bucket is None:
        return np.ones(scale.shape, dtype=bool)
    lo, hi = bucket
    return (scale > lo) & (scale <= hi)


def _match_image(gt_boxes, gt_ignore, det_boxes, det_scores, threshold):
    """Greedy COCO matching; returns per-det (matched, ignored) in descending-score order."""
    order = np.argsort(-det_scores, kind="mergesort")
    det_boxes = det_boxes[order]
    g_order = np.argsort(gt_ignore, kind="mergesort")
    ious = iou_matrix(det_boxes, gt_boxes) if len(gt_boxes) else np.zeros((len(det_boxes), 0))
    gt_taken = np.zeros(len(gt_boxes), dtype=bool)
    matched = np.zeros(len(det_boxes), dtype=bool)
    ignored = np.zeros(len(det_boxes), dtype=bool)
    for d in range(len(det_boxes)):
        best = min(threshold, 1 - 1e-10)
        m = -1
        for g in g_order:
            if gt_taken[g]:
                continue
            if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                break
            if ious[d, g] < best:
                continue
            best = ious[d, g]
            m = g
        if m >= 0:
            gt_taken[m] = True
            matched[d] = True
            ignored[d] = gt_ignore[m]
    return order, matched, ignored


def _class_ap(images: Sequence[ImageDetections], cls: int, threshold: float,
              bucket: tuple[float, float] | None) -> float | None:
    scores, tps, ignores = [], [], []
    n_pos = 0
    for im in images:
        gsel = im.gt_classes == cls
        dsel = im.det_classes == cls
        gboxes = im.gt_boxes[gsel]
        gignore = ~_in_bucket(box_scale(gboxes), bucket)
        n_pos += int((~gignore).sum())
        dboxes, dscores = im.det_boxes[dsel], im.det_scores[dsel]
        if not len(dboxes):
            continue
        order, matched, ignored = _match_image(gboxes, gignore, dboxes, dscores, threshold)
        out_of_range = ~_in_bucket(box_scale(dboxes[order]), bucket)
        ignored = ignored | (~matched & out_of_range)
        scores.append(dscores[order])
        tps.append(matched)
        ignores.append(ignored)
    if n_pos == 0:
        return None
    if not scores:
        return 0.0
    s = np.concatenate(scores)
    order = np.argsort(-s, kind="mergesort")
    tp = np.concatenate(tps)[order]
    ig = np.concatenate(ignores)[order]
    tp_c = np.cumsum(tp & ~ig)
    fp_c = np.cumsum(~tp & ~ig)
    recall = tp_c / n_pos
    precision = tp_c / np.maximum(tp_c + fp_c, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def average_precision(images: Sequence[ImageDetections], iou_threshold: float = 0.5,
                      bucket: str | tuple[float, float] | None = None,
                      classes: Iterable[int] | None = None) -> float:
    """101-point interpolated AP averaged over classes with at least one in-bucket GT.

    Returns NaN when no class has a ground truth in the bucket.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError(f"IoU threshold must lie in (0, 1), got {iou_threshold}")
    rng = SIZE_BUCKETS[bucket] if isinstance(bucket, str) else bucket
    if classes is None:
        classes = sorted({int(c) for im in images for c in im.gt_classes})
    aps = [ap for c in classes if (ap := _class_ap(images, c, iou_threshold, rng)) is not None]
    return float(np.mean(aps)) if aps else math.nan


def coco_ap(images: Sequence[ImageDetections], bucket=None, classes=None) -> float:
    vals = [average_precision(images, float(t), bucket, classes) for t in IOU_SWEEP]
    return math.nan if any(math.isnan(v) for v in vals) else float(np.mean(vals))


def evaluate_detections(images: Sequence[ImageDetections], classes=None) -> dict[str, float]:
    out = {"AP": coco_ap(images, None, classes),
           "AP50": average_precision(images, 0.5, None, classes),
           "AP75": average_precision(images, 0.75, None, classes)}
    for name in SIZE_BUCKETS:
        out[f"AP_{name}"] = coco_ap(images, name, classes)
    return out


# feature-map PSNR

def build_target_feature(boxes, height: int, width: int, sigma: float = 4.0) -> np.ndarray:
    """1×H×W map: an unnormalized Gaussian (peak 1) at each GT center pixel, combined by max."""
    target = np.zeros((height, width))
    yy, xx = np.mgrid[0:height, 0:width]
    for x1, y1, x2, y2 in np.asarray(boxes, dtype=np.float64).reshape(-1, 4):
        cx = int(np.clip(np.floor((x1 + x2) / 2), 0, width - 1))
        cy = int(np.clip(np.floor((y1 + y2) / 2), 0, height - 1))
        g = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
        np.maximum(target, g, out=target)
    return target[None]


def response_from_feature(feature: np.ndarray) -> np.ndarray:
    """Channel-wise max of a C×H×W map, min-max normalized to [0, 1]; constant maps give zeros."""
    f = np.asarray(feature, dtype=np.float64)
    if f.ndim != 3:
        raise ShapeError(f"expected a C×H×W feature, got {f.shape}")
    r = f.max(axis=0)
    lo, hi = r.min(), r.max()
    if hi - lo <= 0:
        return np.zeros((1,) + r.shape)
    return ((r - lo) / (hi - lo))[None]


def build_response_feature(pyramid) -> np.ndarray:
    """Response of the finest fused level of a single image's pyramid."""
    if not len(pyramid):
        raise ShapeError("pyramid has no levels")
    p0 = pyramid[0]
    p0 = np.asarray(getattr(p0, "data", p0))
    return response_from_feature(p0)


def psnr(target: np.ndarray, response: np.ndarray) -> float:
    """10·log10(1/MSE) for maps in [0, 1]; identical maps return ``PSNR_INF``."""
    t, r = np.asarray(target, dtype=np.float64), np.asarray(response, dtype=np.float64)
    if t.shape != r.shape:
        raise ShapeError(f"PSNR operands differ in shape: {t.shape} vs {r.shape}")
    mse = float(np.mean((t - r) ** 2))
    return PSNR_INF if mse == 0 else 10.0 * math.log10(1.0 / mse)


def psnr_ave(values: Iterable[float]) -> float:
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        raise ValueError("PSNR average is undefined: no finite entries")
    return float(np.mean(finite))


# interchange

def write_detections_jsonl(path, images: Sequence[ImageDetections]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for im in images:
            rec = {
                "image_id": int(im.image_id),
                "gt": [{"box": [float(v) for v in b], "class": int(c)} for b, c in zip(im.gt_boxes, im.gt_classes)],
                "det": [{"box": [float(v) for v in b], "class": int(c), "score": float(s)}
                        for b, c, s in zip(im.det_boxes, im.det_classes, im.det_scores)],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_detections_jsonl(path) -> list[ImageDetections]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out.append(ImageDetections(
            rec["image_id"],
            [g["box"] for g in rec["gt"]], [g["class"] for g in rec["gt"]],
            [d["box"] for d in rec["det"]], [d["class"] for d in rec["det"]], [d["score"] for d in rec["det"]],
        ))
    return out


def write_metric_csv(path, summary: dict[str, float]) -> None:
    """Rows (metric, bucket, value); bucket is 'all' for unbucketed metrics."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "bucket", "value"])
        for key, value in summary.items():
            metric, _, bucket = key.partition("_")
            w.writerow([metric, bucket or "all", repr(float(value))])
