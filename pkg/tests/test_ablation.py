import math

import pytest

from tinydet.ablation import aggregate, cell_config, run_cells, run_study, study_cells, study_csv
from tinydet.config import load_config
from tinydet.errors import ConfigError

import small_config


@pytest.fixture
def base(tmp_path):
    return load_config(small_config.write(tmp_path / "c.json"))


def test_order_grid(base):
    cells = {c.key: c for c in study_cells("order")}
    assert set(cells) == {"order=raster,tokens=1x", "order=raster,tokens=4x",
                          "order=shuffle,tokens=1x", "order=shuffle,tokens=4x"}
    counts = {k: cell_config(base, c, 0).model.unfold.num_tokens for k, c in cells.items()}
    assert counts == {"order=raster,tokens=1x": 16, "order=raster,tokens=4x": 64,
                      "order=shuffle,tokens=1x": 16, "order=shuffle,tokens=4x": 64}


def test_lambda_grid(base):
    lams = sorted(cell_config(base, c, 0).loss.lam for c in study_cells("lambda"))
    assert lams == [0.0, 0.1, 0.5, 1.0]


def test_token_grid(base):
    rs = sorted(cell_config(base, c, 0).model.unfold.oversample for c in study_cells("tokens"))
    assert rs == [1, 2, 4, 8]


def test_components_cumulative(base):
    rows = [cell_config(base, c, 0) for c in study_cells("components")]
    flags = [(r.loss.lam > 0, r.model.use_mte, r.model.use_tts) for r in rows]
    assert flags == [(False, False, False), (True, False, False), (True, True, False), (True, True, True)]


def test_unknown_study():
    with pytest.raises(ConfigError):
        study_cells("nope")


def test_aggregate_sample_std():
    row = aggregate({0: {m: 1.0 for m in ("AP", "AP50", "AP75", "AP_vt", "AP_t", "AP_s", "AP_m", "PSNR_ave")},
                     1: {m: 3.0 for m in ("AP", "AP50", "AP75", "AP_vt", "AP_t", "AP_s", "AP_m", "PSNR_ave")}})
    assert row["AP_mean"] == 2.0 and abs(row["AP_std"] - math.sqrt(2)) < 1e-15


def test_aggregate_all_nan_bucket():
    per = {s: {m: (math.nan if m == "AP_m" else 0.5)
               for m in ("AP", "AP50", "AP75", "AP_vt", "AP_t", "AP_s", "AP_m", "PSNR_ave")} for s in range(2)}
    row = aggregate(per)
    assert math.isnan(row["AP_m_mean"]) and row["AP_mean"] == 0.5


def test_parallel_matches_serial(base):
    cells = study_cells("lambda")[:2]
    serial = run_cells(base, cells, range(2), workers=1)
    parallel = run_cells(base, cells, range(2), workers=2)
    assert serial == parallel or all(
        math.isnan(serial[c][s][m]) and math.isnan(parallel[c][s][m]) or serial[c][s][m] == parallel[c][s][m]
        for c in serial for s in serial[c] for m in serial[c][s])


def test_study_rows_sorted_and_csv(base):
    rows = run_study(base, "tokens", range(5))
    assert [r["cell"] for r in rows] == sorted(r["cell"] for r in rows)
    text = study_csv(list(reversed(rows)))
    lines = text.splitlines()
    assert lines[0].startswith("cell,seeds,AP_mean,AP_std")
    assert [ln.split(",")[0] for ln in lines[1:]] == [r["cell"] for r in rows]


def test_minimum_seeds(base):
    with pytest.raises(ConfigError):
        run_study(base, "order", range(4))
