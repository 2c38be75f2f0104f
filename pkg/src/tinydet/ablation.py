"""Ablation grids: unfolding order, contrastive weight, token count and cumulative components."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, override
from .errors import ConfigError
from .pipeline import datasets, run

METRICS = ("AP", "AP50", "AP75", "AP_vt", "AP_t", "AP_s", "AP_m", "PSNR_ave")
MIN_SEEDS = 5


@dataclass(frozen=True)
class Cell:
    key: str
    changes: tuple[tuple[str, object], ...]


def _order_cells() -> list[Cell]:
    cells = []
    for order in ("raster", "shuffle"):
        for mult in (1, 4):
            field = "model.unfold.raster_repeat" if order == "raster" else "model.unfold.oversample"
            other = "model.unfold.oversample" if order == "raster" else "model.unfold.raster_repeat"
            cells.append(Cell(f"order={order},tokens={mult}x",
                              (("model.unfold.order", order), (field, mult), (other, 1))))
    return cells


def _lambda_cells(values=(0.0, 0.1, 0.5, 1.0)) -> list[Cell]:
    return [Cell(f"lambda={v:g}", (("loss.lambda", float(v)),)) for v in values]


def _token_cells(values=(1, 2, 4, 8)) -> list[Cell]:
    return [Cell(f"r={r}", (("model.unfold.order", "shuffle"), ("model.unfold.oversample", r))) for r in values]


def _component_cells(base_lambda: float = 0.1) -> list[Cell]:
    # cumulative: each row adds one component to the previous one
    steps = [
        ("0_baseline", 0.0, False, False),
        ("1_dnfpn", base_lambda, False, False),
        ("2_dnfpn+mte", base_lambda, True, False),
        ("3_dnfpn+mte+tts", base_lambda, True, True),
    ]
    return [Cell(f"components={name}", (("loss.lambda", lam), ("model.use_mte", mte), ("model.use_tts", tts)))
            for name, lam, mte, tts in steps]


STUDIES = {
    "order": _order_cells,
    "lambda": _lambda_cells,
    "tokens": _token_cells,
    "components": _component_cells,
}


def study_cells(study: str) -> list[Cell]:
    if study not in STUDIES:
        raise ConfigError(f"unknown study {study!r}; choose one of {', '.join(sorted(STUDIES))}")
    return STUDIES[study]()


def cell_config(base: RunConfig, cell: Cell, seed: int) -> RunConfig:
    cfg = override(base, dict(cell.changes))
    cfg.train.seed = seed
    return cfg.check()


def _run_one(args) -> tuple[str, int, dict[str, float]]:
    base, cell, seed = args
    cfg = cell_config(base, cell, seed)
    return cell.key, seed, run(cfg, *datasets(cfg)).summary


def run_cells(base: RunConfig, cells: list[Cell], seeds, workers: int = 1) -> dict[str, dict[int, dict]]:
    """Every (cell, seed) run; results keyed by cell then seed regardless of completion order."""
    seeds = list(seeds)
    for cell in cells:
        cell_config(base, cell, seeds[0] if seeds else 0)  # fail fast on an invalid grid
    tasks = [(base, cell, s) for cell in cells for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]
    out: dict[str, dict[int, dict]] = {c.key: {} for c in cells}
    for key, seed, summary in results:
        out[key][seed] = summary
    return out


def aggregate(per_seed: dict[int, dict]) -> dict[str, float]:
    row = {"seeds": len(per_seed)}
    for m in METRICS:
        vals = np.array([per_seed[s][m] for s in sorted(per_seed)], dtype=np.float64)
        if vals.size == 0 or np.isnan(vals).all():
            row[f"{m}_mean"] = row[f"{m}_std"] = math.nan
            continue
        vals = vals[~np.isnan(vals)]
        row[f"{m}_mean"] = float(vals.mean())
        row[f"{m}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return row


def run_study(base: RunConfig, study: str, seeds=range(MIN_SEEDS), workers: int = 1) -> list[dict]:
    seeds = list(seeds)
    if len(seeds) < MIN_SEEDS:
        raise ConfigError(f"ablations need at least {MIN_SEEDS} seeds per cell, got {len(seeds)}")
    results = run_cells(base, study_cells(study), seeds, workers)
    rows = [dict(cell=key, **aggregate(results[key])) for key in sorted(results)]
    return rows


def study_csv(rows: list[dict]) -> str:
    header = ["cell", "seeds"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in sorted(rows, key=lambda r: r["cell"]):
        w.writerow([row["cell"], row["seeds"]] + [repr(float(row[h])) for h in header[2:]])
    return buf.getvalue()
