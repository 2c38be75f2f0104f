"""One nested run configuration, loaded from JSON and validated exhaustively."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .model import ModelConfig
from .synth import ProposalConfig, SceneConfig
from .training import LossConfig, OptimizerState, TrainConfig


@dataclass
class DataConfig:
    train_scenes: int = 200
    eval_scenes: int = 100
    eval_seed: int = 9001

    def violations(self) -> list[str]:
        errs = []
        if self.train_scenes < 1:
            errs.append(f"data.train_scenes must be >= 1, got {self.train_scenes}")
        if self.eval_scenes < 1:
            errs.append(f"data.eval_scenes must be >= 1, got {self.eval_scenes}")
        return errs


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    weight_decay: float = 1e-4
    momentum: float = 0.9

    def state(self) -> OptimizerState:
        return OptimizerState(self.lr, self.weight_decay, self.momentum)

    def violations(self) -> list[str]:
        return self.state().violations()


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def violations(self) -> list[str]:
        errs = []
        for part in (self.scene, self.proposals, self.model, self.loss, self.optimizer, self.train, self.data):
            errs.extend(part.violations())
        if self.loss.class_count != self.scene.class_count:
            errs.append(f"loss.class_count {self.loss.class_count} != scene.class_count {self.scene.class_count}")
        if self.model.num_classes != self.scene.class_count:
            errs.append(f"model.num_classes {self.model.num_classes} != scene.class_count {self.scene.class_count}")
        levels = len(self.model.backbone_channels)
        if self.scene.image_size % (2 ** (levels - 1)):
            errs.append(f"scene.image_size {self.scene.image_size} is not divisible by 2^{levels - 1}")
        if self.loss.lam > 0 and levels < 2:
            errs.append("loss.lambda > 0 needs at least two pyramid levels for the semantic loss")
        return errs

    def check(self) -> "RunConfig":
        errs = self.violations()
        if errs:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errs))
        return self

    def to_dict(self) -> dict:
        return to_dict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        out = copy.deepcopy(self)
        out.train.seed = seed
        return out


# JSON field name differs from the Python attribute where the latter is a keyword
_ALIASES = {"lambda": "lam"}
_REVERSE = {v: k for k, v in _ALIASES.items()}


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in dataclasses.fields(obj):
            if f.name == "buffers":
                continue
            out[_REVERSE.get(f.name, f.name)] = to_dict(getattr(obj, f.name))
        return out
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def _build(cls, data: Any, path: str, errs: list[str]):
    if not isinstance(data, dict):
        errs.append(f"{path or 'config'} must be an object, got {type(data).__name__}")
        return cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = _ALIASES.get(key, key)
        where = f"{path}.{key}" if path else key
        if name not in fields or name == "buffers":
            errs.append(f"{where} is not a known field")
            continue
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}", errs)
        elif isinstance(default, tuple):
            if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                errs.append(f"{where} must be a list of integers")
            else:
                kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                errs.append(f"{where} must be true or false")
            else:
                kwargs[name] = value
        elif isinstance(default, int):
            if not isinstance(value, int) or isinstance(value, bool):
                errs.append(f"{where} must be an integer")
            else:
                kwargs[name] = value
        elif isinstance(default, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                errs.append(f"{where} must be a number")
            else:
                kwargs[name] = float(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                errs.append(f"{where} must be a string")
            else:
                kwargs[name] = value
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict, validate: bool = True) -> RunConfig:
    """Parse and validate; all type and range problems are reported together."""
    errs: list[str] = []
    cfg = _build(RunConfig, data, "", errs)
    # mistyped fields fell back to defaults above, so range checks still see a complete config
    errs.extend(cfg.violations())
    if errs and validate:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errs))
    return cfg


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return from_dict(data)


def override(cfg: RunConfig, changes: dict) -> RunConfig:
    """Copy with dotted-path overrides, e.g. {"model.unfold.order": "raster"}."""
    out = copy.deepcopy(cfg)
    for dotted, value in changes.items():
        parts = [_ALIASES.get(p, p) for p in dotted.split(".")]
        target = out
        for p in parts[:-1]:
            target = getattr(target, p)
        if not hasattr(target, parts[-1]):
            raise ConfigError(f"unknown configuration field {dotted}")
        setattr(target, parts[-1], value)
    return out
