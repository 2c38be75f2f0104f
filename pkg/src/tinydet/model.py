"""The full detector: toy backbone → FPN → (training-only contrastive branch) → RoI token head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .contrastive import ContrastiveConfig, EncoderParams, REPR_DIM, build_repr_batch, geometric_loss, semantic_loss
from .errors import ConfigError
from .fpn import FpnParams, build_pyramid
from .metrics import ImageDetections
from .synth import BackboneParams, ProposalSet, Scene, toy_backbone
from .tensor import Tensor
from .trans_rcnn import (HeadParams, MTEParams, assemble_local_sequence, attention_scores, decode_deltas,
                         heads_forward, mte_forward, pooling_weights, task_mask, task_token_select,
                         ungrouped_weights)
from .unfold import UnfoldConfig, UnfoldProjection, crop_and_resize, tokenize_roi, unfold


@dataclass
class ModelConfig:
    backbone_channels: tuple[int, ...] = (16, 32, 48, 64)
    fpn_dim: int = 16
    encoder_conv: int = 8
    encoder_hidden: int = 64
    repr_dim: int = REPR_DIM
    unfold: UnfoldConfig = field(default_factory=UnfoldConfig)
    mte_layers: int = 2
    heads: int = 4
    ffn_mult: int = 2
    num_classes: int = 3
    use_mte: bool = True
    use_tts: bool = True

    def violations(self) -> list[str]:
        errs = []
        if len(self.backbone_channels) < 1 or any(c < 1 for c in self.backbone_channels):
            errs.append(f"model.backbone_channels must be positive, got {self.backbone_channels}")
        for name in ("fpn_dim", "encoder_conv", "encoder_hidden", "repr_dim", "heads", "ffn_mult", "num_classes"):
            if getattr(self, name) < 1:
                errs.append(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.mte_layers < 0:
            errs.append(f"model.mte_layers must be >= 0, got {self.mte_layers}")
        if self.heads >= 1 and self.unfold.model_dim % self.heads:
            errs.append(f"unfold.model_dim {self.unfold.model_dim} is not divisible by model.heads {self.heads}")
        if self.use_tts and not self.use_mte:
            errs.append("model.use_tts requires model.use_mte (selection reads encoder attention)")
        errs.extend(self.unfold.violations())
        return errs


@dataclass
class HeadOutput:
    logits: Tensor
    deltas: Tensor
    weights: np.ndarray  # pooling rows actually used, (N, 2, T)


class Detector:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        errs = cfg.violations()
        if errs:
            raise ConfigError("; ".join(errs))
        self.cfg = cfg
        rng = np.random.default_rng([seed, 7])
        ch = list(cfg.backbone_channels)
        self.backbone = BackboneParams.init(ch, rng)
        self.fpn = FpnParams.init(ch, cfg.fpn_dim, rng)
        self.geo = EncoderParams.init(cfg.fpn_dim, ch, rng, cfg.encoder_conv, cfg.encoder_hidden, cfg.repr_dim)
        self.sem = EncoderParams.init(cfg.fpn_dim, ch, rng, cfg.encoder_conv, cfg.encoder_hidden, cfg.repr_dim)
        u = cfg.unfold
        self.proj = UnfoldProjection.init(u.token_in_dim(cfg.fpn_dim), u.model_dim, rng)
        self.mte = MTEParams.init(u.model_dim, rng, cfg.mte_layers, cfg.heads, cfg.ffn_mult)
        self.head = HeadParams.init(u.model_dim, cfg.num_classes, rng)

    def parameters(self, include_encoders: bool = True) -> dict[str, Tensor]:
        out = {}
        out.update(self.backbone.named())
        out.update(self.fpn.named())
        if include_encoders:
            out.update(self.geo.named("geo"))
            out.update(self.sem.named("sem"))
        out["unfold.proj_w"] = self.proj.weight
        out["unfold.proj_b"] = self.proj.bias
        out.update(self.mte.named())
        out.update(self.head.named())
        return out

    def features(self, images) -> tuple[list[Tensor], list[Tensor]]:
        laterals = toy_backbone(images, self.backbone)
        return laterals, build_pyramid(laterals, self.fpn)

    def contrastive_losses(self, laterals, pyramid, ccfg: ContrastiveConfig) -> tuple[Tensor, Tensor]:
        batch = build_repr_batch(laterals, pyramid, self.geo, self.sem)
        return geometric_loss(batch, ccfg), semantic_loss(batch, ccfg)

    def head_forward(self, p0: Tensor, batch_index, boxes, weights: np.ndarray | None = None) -> HeadOutput:
        u = self.cfg.unfold
        rois = crop_and_resize(p0, batch_index, boxes, u.roi_size)
        seq = unfold(tokenize_roi(rois, u), self.proj, u)
        local = assemble_local_sequence(seq.tokens, self.head.t_cls, self.head.t_box)
        n_tok = local.shape[-2]
        tokens = local
        if self.cfg.use_mte:
            out = mte_forward(local, self.mte, task_mask(n_tok - 2))
            tokens = out.tokens
            if weights is None and self.cfg.use_tts:
                a_cls, a_box = attention_scores(out.attention[-1])
                weights = np.stack([pooling_weights(task_token_select(c, b), n_tok)
                                    for c, b in zip(a_cls, a_box)])
        if weights is None:
            weights = np.broadcast_to(ungrouped_weights(n_tok), (local.shape[0], 2, n_tok)).copy()
        logits, deltas = heads_forward(tokens, weights, self.head)
        return HeadOutput(logits, deltas, weights)

    def detect(self, scenes: list[Scene], proposals: list[ProposalSet]) -> tuple[list[ImageDetections], list[np.ndarray]]:
        """Score every proposal; returns detections and each image's finest fused feature map."""
        with T.no_grad():
            images = np.stack([s.image for s in scenes])
            _, pyramid = self.features(images)
            bidx = np.concatenate([np.full(len(p), i) for i, p in enumerate(proposals)]).astype(np.intp)
            boxes = np.concatenate([p.boxes for p in proposals]).reshape(-1, 4)
            dets = []
            if len(boxes):
                out = self.head_forward(pyramid[0], bidx, boxes)
                logits = out.logits.data
                prob = np.exp(logits - logits.max(axis=1, keepdims=True))
                prob /= prob.sum(axis=1, keepdims=True)
                fg = prob[:, :-1]
                cls = fg.argmax(axis=1)
                score = fg[np.arange(len(cls)), cls]
                pred = decode_deltas(boxes, out.deltas.data)
            for i, s in enumerate(scenes):
                sel = bidx == i if len(boxes) else np.zeros(0, dtype=bool)
                dets.append(ImageDetections(
                    s.index, s.boxes, s.classes,
                    pred[sel] if len(boxes) else np.zeros((0, 4)),
                    cls[sel] if len(boxes) else np.zeros(0, dtype=np.int64),
                    np.clip(score[sel], 0.0, 1.0) if len(boxes) else np.zeros(0)))
        return dets, [pyramid[0].data[i] for i in range(len(scenes))]
