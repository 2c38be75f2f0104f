"""Detection losses, momentum SGD, the per-batch training loop and checkpoint IO."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .contrastive import ContrastiveConfig
from .errors import ConfigError, NumericError, ShapeError
from .metrics import build_response_feature, build_target_feature, evaluate_detections, psnr, psnr_ave
from .model import Detector
from .synth import ProposalConfig, ProposalSet, Scene, sample_proposals
from .tensor import Tensor

COMPONENTS = ("ce", "sl1", "geo", "sem")


@dataclass
class LossConfig:
    lam: float = 0.1
    tau: float = 0.07
    class_count: int = 3
    normalize: bool = True

    def violations(self) -> list[str]:
        errs = []
        if not self.lam >= 0:
            errs.append(f"loss.lambda must be >= 0, got {self.lam}")
        if not self.tau > 0:
            errs.append(f"loss.tau must be > 0, got {self.tau}")
        if self.class_count < 1:
            errs.append(f"loss.class_count must be >= 1, got {self.class_count}")
        return errs

    @property
    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.tau, self.normalize)


@dataclass
class OptimizerState:
    lr: float = 0.01
    weight_decay: float = 1e-4
    momentum: float = 0.9
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def violations(self) -> list[str]:
        errs = []
        if not self.lr > 0:
            errs.append(f"optimizer.lr must be > 0, got {self.lr}")
        if not self.weight_decay >= 0:
            errs.append(f"optimizer.weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.momentum < 1:
            errs.append(f"optimizer.momentum must lie in [0, 1), got {self.momentum}")
        return errs


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 2
    seed: int = 0

    def violations(self) -> list[str]:
        errs = []
        if self.epochs < 0:
            errs.append(f"train.epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            errs.append(f"train.batch_size must be >= 1, got {self.batch_size}")
        return errs


# losses

def cross_entropy(logits, labels) -> Tensor:
    """−log softmax(logits)[label]; a batch of rows is averaged."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    single = logits.ndim == 1
    if single:
        logits = logits.reshape((1, -1))
        labels = labels.reshape(1)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape} labels for {n} logit rows")
    if len(labels) and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes: {labels}")
    if n == 0:
        return Tensor(0.0)
    picked = T.getitem(logits, (np.arange(n), labels))
    losses = T.logsumexp(logits, axis=-1) - picked
    return losses.reshape(()) if single else T.mean(losses)


def smooth_l1(pred, target) -> Tensor:
    """0.5·d² below |d| = 1 and |d| − 0.5 above, summed over the last axis."""
    pred = T.as_tensor(pred)
    d = pred.data - np.asarray(target, dtype=np.float64)
    a = np.abs(d)
    quad = a < 1
    out = np.where(quad, 0.5 * d * d, a - 0.5).sum(axis=-1)
    grad = np.where(quad, d, np.sign(d))
    return T.custom(out, (pred,), lambda g: (np.expand_dims(g, -1) * grad,), "smooth_l1")


def total_loss(ce, sl1, geo, sem, cfg: LossConfig):
    return ce + sl1 + cfg.lam * (geo + sem)


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """In place: g += wd·w; buf = m·buf + g; w −= lr·buf."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.data.shape}")
        g = g + state.weight_decay * p.data
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p.data)
        elif buf.shape != p.data.shape:
            raise ShapeError(f"momentum buffer for {name} has shape {buf.shape}, parameter has {p.data.shape}")
        buf = state.momentum * buf + g
        state.buffers[name] = buf
        p.data = p.data - state.lr * buf


# training loop

def _component(name: str, fn):
    """Run one stage and re-raise numeric failures with the stage's name attached."""
    try:
        out = fn()
    except NumericError as exc:
        raise NumericError(f"non-finite value in {name}: {exc}") from exc
    if isinstance(out, Tensor) and not np.isfinite(out.data).all():
        raise NumericError(f"non-finite value in {name}")
    return out


def batch_losses(model: Detector, scenes: Sequence[Scene], proposals: Sequence[ProposalSet],
                 loss_cfg: LossConfig, weights: np.ndarray | None = None) -> dict[str, Tensor]:
    """Loss components for one minibatch. With λ = 0 the contrastive branch is never built."""
    images = np.stack([s.image for s in scenes])
    laterals, pyramid = _component("backbone", lambda: model.features(images))
    out = {}
    if loss_cfg.lam > 0 and len(scenes) > 1:
        geo, sem = _component("contrastive", lambda: model.contrastive_losses(
            laterals, pyramid, loss_cfg.contrastive))
        out["geo"] = _component("geo", lambda: geo)
        out["sem"] = _component("sem", lambda: sem)
    else:
        out["geo"] = out["sem"] = Tensor(0.0)
    bidx = np.concatenate([np.full(len(p), i) for i, p in enumerate(proposals)]).astype(np.intp)
    boxes = np.concatenate([p.boxes for p in proposals]).reshape(-1, 4)
    labels = np.concatenate([p.labels for p in proposals])
    deltas = np.concatenate([p.deltas for p in proposals]).reshape(-1, 4)
    fg = np.concatenate([p.foreground for p in proposals])
    head = _component("head", lambda: model.head_forward(pyramid[0], bidx, boxes, weights))
    out["ce"] = _component("ce", lambda: cross_entropy(head.logits, labels))
    if fg.any():
        out["sl1"] = _component("sl1", lambda: T.mean(smooth_l1(head.deltas[np.flatnonzero(fg)], deltas[fg])))
    else:
        out["sl1"] = Tensor(0.0)
    return out


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train_epoch(model: Detector, dataset: Sequence[Scene], prop_cfg: ProposalConfig, loss_cfg: LossConfig,
                state: OptimizerState, seed: int, epoch: int, batch_size: int = 2) -> list[dict]:
    """One pass over ``dataset``; returns one record per batch."""
    if not dataset:
        raise ConfigError("training set is empty")
    params = model.parameters(include_encoders=loss_cfg.lam > 0)
    records = []
    for b, idx in enumerate(batch_order(len(dataset), batch_size, seed, epoch)):
        scenes = [dataset[i] for i in idx]
        props = [sample_proposals(s, prop_cfg, [seed, epoch, s.index], loss_cfg.class_count) for s in scenes]
        parts = batch_losses(model, scenes, props, loss_cfg)
        loss = _component("total", lambda: total_loss(parts["ce"], parts["sl1"], parts["geo"], parts["sem"],
                                                      loss_cfg))
        for p in params.values():
            p.zero_grad()
        loss.backward()
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {k}")
        sgd_step(params, grads, state)
        rec = {"epoch": epoch, "batch": b}
        rec.update({k: float(parts[k].data) for k in COMPONENTS})
        rec["total"] = float(loss.data)
        records.append(rec)
    return records


def train(model: Detector, dataset: Sequence[Scene], prop_cfg: ProposalConfig, loss_cfg: LossConfig,
          state: OptimizerState, train_cfg: TrainConfig, on_record=None) -> list[dict]:
    records = []
    for epoch in range(train_cfg.epochs):
        for rec in train_epoch(model, dataset, prop_cfg, loss_cfg, state, train_cfg.seed, epoch,
                               train_cfg.batch_size):
            records.append(rec)
            if on_record is not None:
                on_record(rec)
    return records


# evaluation

EVAL_SEED = 9001


def evaluate(model: Detector, dataset: Sequence[Scene], prop_cfg: ProposalConfig, class_count: int,
             seed: int = EVAL_SEED, chunk: int = 16) -> tuple[dict[str, float], list]:
    """COCO-style AP over proposals drawn with a fixed eval seed, plus PSNR_ave of the finest level."""
    dets, psnrs = [], []
    for start in range(0, len(dataset), chunk):
        scenes = list(dataset[start:start + chunk])
        props = [sample_proposals(s, prop_cfg, [seed, s.index], class_count) for s in scenes]
        d, p0 = model.detect(scenes, props)
        dets.extend(d)
        for s, f in zip(scenes, p0):
            target = build_target_feature(s.boxes, *s.size)
            psnrs.append(psnr(target, build_response_feature([f])))
    summary = evaluate_detections(dets, classes=range(class_count))
    summary["PSNR_ave"] = psnr_ave(psnrs)
    return summary, dets


# checkpoints

CKPT_MAGIC = b"TDCK"
CKPT_VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor], config: dict) -> None:
    """magic, u32 version, u32-length JSON config, u32 count, then per tensor:
    u32-length UTF-8 name, u32 ndim, u32 dims, little-endian float64 data. Names sorted."""
    buf = io.BytesIO()
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, n = struct.unpack_from("<4sII", raw, 0)
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    config = json.loads(raw[pos:pos + n])
    pos += n
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<I", raw, pos)
        shape = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
        pos += 4 + 4 * ndim
        size = int(np.prod(shape)) * 8
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
        pos += size
    return config, tensors


def load_into(model: Detector, tensors: dict[str, np.ndarray]) -> None:
    params = model.parameters()
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {', '.join(missing)}")
    for name, p in params.items():
        if tensors[name].shape != p.data.shape:
            raise ShapeError(f"checkpoint {name} has shape {tensors[name].shape}, model expects {p.data.shape}")
        p.data = tensors[name].astype(np.float64)


def records_to_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def config_dict(obj) -> dict:
    return asdict(obj)
