"""Command-line entry point: generate | train | eval | psnr | ablate | gradcheck.

Exit codes: 0 ok, 1 gradient check failed, 2 invalid configuration, 3 numeric failure, 4 IO error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import gradcheck
from .ablation import STUDIES, run_study, study_csv
from .config import RunConfig, from_dict, load_config
from .errors import ConfigError, NumericError
from .metrics import (PSNR_CONVENTION, build_response_feature, build_target_feature, psnr, psnr_ave,
                      write_detections_jsonl, write_metric_csv)
from .model import Detector
from .pipeline import datasets, train_model
from .synth import load_dataset, sample_proposals, save_scene, write_float_grid
from .training import evaluate, load_checkpoint, load_into, save_checkpoint

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg.check()


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _jsonable(obj):
    # strict JSON has no NaN: empty size buckets are written as null
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    return obj


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def _sidecar(out: Path, command: str, started: float, **extra) -> None:
    # everything non-deterministic lives here, never in primary outputs
    meta = {"command": command, "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
            "seconds": round(time.time() - started, 3)}
    meta.update(extra)
    _write_json(out / f"{command}.meta.json", meta)


def _split(cfg: RunConfig, dataset_dir):
    """Scenes from a generated directory, split by index at data.train_scenes."""
    if dataset_dir is None:
        return datasets(cfg)
    scenes = load_dataset(dataset_dir)
    if not scenes:
        raise FileNotFoundError(f"no scenes found in {dataset_dir}")
    train_set = [s for s in scenes if s.index < cfg.data.train_scenes]
    eval_set = [s for s in scenes if s.index >= cfg.data.train_scenes] or train_set
    return train_set, eval_set


def _restore(path) -> tuple[RunConfig, Detector]:
    raw_cfg, tensors = load_checkpoint(path)
    cfg = from_dict(raw_cfg)
    model = Detector(cfg.model, seed=cfg.train.seed)
    load_into(model, tensors)
    return cfg, model


def cmd_generate(args) -> int:
    started = time.time()
    cfg = _config(args)
    out = _out(args)
    train_set, eval_set = datasets(cfg)
    for s in train_set + eval_set:
        save_scene(out, s)
    manifest = {"config": cfg.to_dict(), "config_hash": cfg.hash(), "scenes": len(train_set) + len(eval_set),
                "train_indices": [0, len(train_set)],
                "eval_indices": [len(train_set), len(train_set) + len(eval_set)]}
    _write_json(out / "manifest.json", manifest)
    _sidecar(out, "generate", started)
    print(f"wrote {manifest['scenes']} scenes to {out} (config {manifest['config_hash'][:12]})")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    cfg = _config(args)
    out = _out(args)
    train_set, eval_set = _split(cfg, args.dataset)
    with open(out / "metrics.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        def emit(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

        model, records = train_model(cfg, train_set, emit)
    save_checkpoint(out / "checkpoint.bin", model.parameters(), cfg.to_dict())
    summary, _ = evaluate(model, eval_set, cfg.proposals, cfg.scene.class_count, cfg.data.eval_seed)
    _write_json(out / "summary.json", summary)
    _sidecar(out, "train", started, batches=len(records))
    print(json.dumps(_jsonable(summary), sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    cfg, model = _restore(args.checkpoint)
    out = _out(args)
    _, eval_set = _split(cfg, args.dataset)
    summary, dets = evaluate(model, eval_set, cfg.proposals, cfg.scene.class_count, cfg.data.eval_seed)
    write_detections_jsonl(out / "detections.jsonl", dets)
    write_metric_csv(out / "metrics.csv", summary)
    _write_json(out / "summary.json", summary)
    _sidecar(out, "eval", started)
    print(json.dumps(_jsonable(summary), sort_keys=True))
    return EXIT_OK


def cmd_psnr(args) -> int:
    started = time.time()
    cfg, model = _restore(args.checkpoint)
    out = _out(args)
    _, eval_set = _split(cfg, args.dataset)
    rows = []
    dump = out / "maps" if args.dump else None
    if dump:
        dump.mkdir(exist_ok=True)
    for start in range(0, len(eval_set), 16):
        scenes = eval_set[start:start + 16]
        props = [sample_proposals(s, cfg.proposals, [cfg.data.eval_seed, s.index], cfg.scene.class_count)
                 for s in scenes]
        _, p0 = model.detect(scenes, props)
        for s, f in zip(scenes, p0):
            target = build_target_feature(s.boxes, *s.size)
            response = build_response_feature([f])
            rows.append((s.index, psnr(target, response)))
            if dump:
                write_float_grid(dump / f"target_{s.index:05d}.grid", target[0])
                write_float_grid(dump / f"response_{s.index:05d}.grid", response[0])
    with open(out / "psnr.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "psnr_db"])
        for idx, v in rows:
            w.writerow([idx, repr(float(v))])
        w.writerow(["PSNR_ave", repr(psnr_ave(v for _, v in rows))])
    _sidecar(out, "psnr", started, convention=PSNR_CONVENTION)
    print(f"PSNR_ave {psnr_ave(v for _, v in rows):.4f} dB over {len(rows)} images [{PSNR_CONVENTION}]")
    return EXIT_OK


def cmd_ablate(args) -> int:
    started = time.time()
    cfg = _config(args)
    out = _out(args)
    base = cfg.train.seed
    rows = run_study(cfg, args.study, range(base, base + args.seeds), args.workers)
    _write_text(out / f"ablation_{args.study}.csv", study_csv(rows))
    _sidecar(out, "ablate", started, study=args.study)
    print(study_csv(rows), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    started = time.time()
    report = gradcheck.run_gradcheck(seeds=args.seeds)
    report.pop("seconds")
    text = gradcheck.report_json(report)
    if args.out:
        out = _out(args)
        _write_text(out / "gradcheck.json", text)
        _sidecar(out, "gradcheck", started)
    print(text, end="")
    return EXIT_OK if report["passed"] else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tinydet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, out_required=True, configurable=True):
        sp = sub.add_parser(name, help=help_text)
        if configurable:
            sp.add_argument("--config", help="JSON run configuration (defaults when omitted)")
            sp.add_argument("--seed", type=int, help="override the training seed (the dataset stays fixed)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.set_defaults(func=fn)
        return sp

    add("generate", cmd_generate, "write a synthetic dataset and manifest")
    sp = add("train", cmd_train, "train and write checkpoint, metrics and summary")
    sp.add_argument("--dataset", help="dataset directory from 'generate' (regenerated when omitted)")
    for name, fn, text in (("eval", cmd_eval, "evaluate a checkpoint"),
                           ("psnr", cmd_psnr, "per-image feature PSNR of a checkpoint")):
        sp = add(name, fn, text, configurable=False)  # the checkpoint carries its config
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--dataset")
        if name == "psnr":
            sp.add_argument("--dump", action="store_true", help="also write target/response float grids")
    sp = add("ablate", cmd_ablate, "run an ablation grid")
    sp.add_argument("--study", required=True, choices=sorted(STUDIES))
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--workers", type=int, default=1)
    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient suite", out_required=False,
             configurable=False)
    sp.add_argument("--seeds", type=int, default=100)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
