"""Config-driven dataset, training and evaluation runs shared by the CLI and ablations."""
from __future__ import annotations

from dataclasses import dataclass

from .config import RunConfig
from .model import Detector
from .synth import Scene, generate_dataset
from .training import evaluate, train


@dataclass
class RunResult:
    model: Detector
    records: list[dict]
    summary: dict[str, float]


def datasets(cfg: RunConfig) -> tuple[list[Scene], list[Scene]]:
    """Train scenes take indices [0, n_train); eval scenes follow them."""
    train_set = generate_dataset(cfg.scene, cfg.data.train_scenes)
    eval_set = generate_dataset(cfg.scene, cfg.data.eval_scenes, start=cfg.data.train_scenes)
    return train_set, eval_set


def build_model(cfg: RunConfig) -> Detector:
    return Detector(cfg.model, seed=cfg.train.seed)


def train_model(cfg: RunConfig, train_set, on_record=None) -> tuple[Detector, list[dict]]:
    cfg.check()
    model = build_model(cfg)
    records = train(model, train_set, cfg.proposals, cfg.loss, cfg.optimizer.state(), cfg.train, on_record)
    return model, records


def evaluate_model(model: Detector, cfg: RunConfig, eval_set) -> dict[str, float]:
    summary, _ = evaluate(model, eval_set, cfg.proposals, cfg.scene.class_count, cfg.data.eval_seed)
    return summary


def run(cfg: RunConfig, train_set=None, eval_set=None) -> RunResult:
    if train_set is None or eval_set is None:
        tr, ev = datasets(cfg)
        train_set = tr if train_set is None else train_set
        eval_set = ev if eval_set is None else eval_set
    model, records = train_model(cfg, train_set)
    return RunResult(model, records, evaluate_model(model, cfg, eval_set))
