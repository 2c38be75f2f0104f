import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tinydet.errors import ConfigError, ShapeError
from tinydet.tensor import Tensor
from tinydet.unfold import (UnfoldConfig, UnfoldProjection, crop_and_resize, shuffle_orders, tokenize_roi, unfold,
                            unfold_raster, unfold_shuffle, window_table)


def _setup(rng, channels=3, **kw):
    cfg = UnfoldConfig(**kw)
    roi = rng.normal(size=(channels, cfg.roi_size, cfg.roi_size))
    grid = tokenize_roi(roi, cfg)
    proj = UnfoldProjection.init(cfg.token_in_dim(channels), cfg.model_dim, rng)
    proj.bias = Tensor(rng.normal(size=cfg.model_dim))
    return cfg, roi, grid, proj


def _padded(grid):
    g = grid.data
    return np.concatenate([g, np.zeros((1, g.shape[1]))], axis=0)


# tokenization

def test_default_geometry_sixteen_patches(rng):
    cfg, _, grid, _ = _setup(rng)
    assert cfg.grid_size == 4 and grid.shape == (16, 3 * 4)


def test_constant_roi_identical_patches():
    grid = tokenize_roi(np.full((2, 8, 8), 0.25), UnfoldConfig()).data
    assert (grid == 0.25).all()


def test_first_patch_is_top_left_crop(rng):
    cfg, roi, grid, _ = _setup(rng)
    np.testing.assert_array_equal(grid.data[0], roi[:, :2, :2].reshape(-1))
    # patch (1, 2) in raster order is index 6 and starts at row 2, column 4
    np.testing.assert_array_equal(grid.data[6], roi[:, 2:4, 4:6].reshape(-1))


def test_overlapping_patches(rng):
    cfg = UnfoldConfig(patch_stride=1, window=2)
    roi = rng.normal(size=(1, 8, 8))
    grid = tokenize_roi(roi, cfg).data
    assert cfg.grid_size == 7 and grid.shape == (49, 4)
    np.testing.assert_array_equal(grid[1], roi[0, 0:2, 1:3].reshape(-1))


def test_indivisible_geometry_rejected():
    with pytest.raises(ConfigError):
        tokenize_roi(np.zeros((1, 8, 8)), UnfoldConfig(patch_size=3, patch_stride=2))


def test_roi_shape_checked():
    with pytest.raises(ShapeError):
        tokenize_roi(np.zeros((1, 6, 6)), UnfoldConfig())


# raster

def test_raster_sixteen_tokens(rng):
    cfg, _, grid, proj = _setup(rng, order="raster")
    seq = unfold_raster(grid, proj, cfg)
    assert len(seq) == 16 and seq.tokens.shape == (16, cfg.model_dim)


def test_raster_first_window_concatenation(rng):
    cfg, _, grid, proj = _setup(rng)
    seq = unfold_raster(grid, proj, cfg)
    g = grid.data
    cat = np.concatenate([g[0], g[1], g[4], g[5]])
    np.testing.assert_allclose(seq.tokens.data[0], cat @ proj.weight.data + proj.bias.data, rtol=1e-13)


def test_raster_edge_window_zero_padded(rng):
    cfg, _, grid, proj = _setup(rng)
    seq = unfold_raster(grid, proj, cfg)
    g = grid.data
    z = np.zeros_like(g[0])
    # window at (0, 3): right column falls off the grid
    cat = np.concatenate([g[3], z, g[7], z])
    np.testing.assert_allclose(seq.tokens.data[3], cat @ proj.weight.data + proj.bias.data, rtol=1e-13)


def test_window_one_projects_patches(rng):
    cfg, _, grid, proj = _setup(rng, window=1, order="raster")
    seq = unfold_raster(grid, proj, cfg)
    np.testing.assert_allclose(seq.tokens.data, grid.data @ proj.weight.data + proj.bias.data, rtol=1e-13)


def test_valid_only_windows(rng):
    cfg, _, grid, proj = _setup(rng, pad_windows=False)
    assert len(unfold_raster(grid, proj, cfg)) == 9


def test_raster_repeat_duplicates(rng):
    cfg, _, grid, proj = _setup(rng, order="raster", raster_repeat=4)
    seq = unfold(grid, proj, cfg)
    assert len(seq) == 64 == cfg.num_tokens
    np.testing.assert_array_equal(seq.tokens.data[0], seq.tokens.data[3])


def test_window_larger_than_grid():
    with pytest.raises(ConfigError):
        UnfoldConfig(window=5).check()


# shuffle

def test_shuffle_sixty_four_tokens(rng):
    cfg, _, grid, proj = _setup(rng)
    seq = unfold_shuffle(grid, proj, cfg)
    assert len(seq) == 64 == cfg.num_tokens


def test_shuffle_r1_is_raster(rng):
    cfg, _, grid, proj = _setup(rng, oversample=1)
    a, b = unfold_shuffle(grid, proj, cfg), unfold_raster(grid, proj, cfg)
    assert a.tokens.data.tobytes() == b.tokens.data.tobytes()
    assert a.provenance == b.provenance


def test_permutations_distinct_and_non_identity():
    cfg = UnfoldConfig(oversample=24)
    assert math.factorial(cfg.window ** 2) == 24
    orders = shuffle_orders(cfg, 16)
    ident = tuple(range(4))
    for w in range(16):
        perms = [tuple(p) for p in orders[w]]
        assert perms[0] == ident
        assert ident not in perms[1:]
        assert len(set(perms)) == 24


def test_too_many_permutations():
    with pytest.raises(ConfigError):
        UnfoldConfig(oversample=25).check()
    with pytest.raises(ConfigError):
        shuffle_orders(UnfoldConfig(oversample=25, order="raster"), 1)


def test_shuffle_groups_variants_per_window(rng):
    cfg, _, grid, proj = _setup(rng)
    seq = unfold_shuffle(grid, proj, cfg)
    assert [w for w, _ in seq.provenance] == [w for w in range(16) for _ in range(4)]


def test_shuffle_projection_shared(rng):
    cfg, _, grid, proj = _setup(rng)
    seq = unfold_shuffle(grid, proj, cfg)
    padded = _padded(grid)
    cat = padded[seq.patch_table].reshape(len(seq), -1)
    np.testing.assert_allclose(seq.tokens.data, cat @ proj.weight.data + proj.bias.data, rtol=1e-12, atol=1e-13)


def test_shuffle_deterministic(rng):
    cfg, _, grid, proj = _setup(rng, seed=5)
    a, b = unfold_shuffle(grid, proj, cfg), unfold_shuffle(grid, proj, cfg)
    assert a.tokens.data.tobytes() == b.tokens.data.tobytes() and a.provenance == b.provenance


def multiset_preserved(cfg, grid, seq) -> bool:
    padded = _padded(grid)
    raster = window_table(cfg)
    for t, (w, _) in enumerate(seq.provenance):
        got = np.sort(padded[seq.patch_table[t]], axis=0)
        want = np.sort(padded[raster[w]], axis=0)
        if not np.array_equal(got, want):
            return False
    return True


@given(st.integers(0, 2 ** 31), st.integers(1, 8))
def test_multiset_preservation(seed, r):
    rng = np.random.default_rng(seed)
    cfg, _, grid, proj = _setup(rng, channels=2, oversample=r, seed=seed)
    seq = unfold_shuffle(grid, proj, cfg)
    assert len(seq) == r * 16
    assert multiset_preserved(cfg, grid, seq)


def test_batched_grid_matches_single(rng):
    cfg = UnfoldConfig()
    rois = rng.normal(size=(3, 2, 8, 8))
    proj = UnfoldProjection.init(cfg.token_in_dim(2), cfg.model_dim, rng)
    both = unfold(tokenize_roi(rois, cfg), proj, cfg).tokens.data
    for i in range(3):
        np.testing.assert_allclose(both[i], unfold(tokenize_roi(rois[i], cfg), proj, cfg).tokens.data, rtol=1e-13)


# cropping

def test_crop_full_box_is_identity(rng):
    feat = rng.normal(size=(2, 3, 8, 8))
    out = crop_and_resize(feat, [1], [[0, 0, 8, 8]], 8).data
    np.testing.assert_allclose(out[0], feat[1], rtol=1e-13)


def test_crop_constant_feature():
    out = crop_and_resize(np.full((1, 2, 8, 8), 3.0), [0, 0], [[1, 1, 3, 4], [0.5, 2, 7, 7.5]], 4).data
    np.testing.assert_allclose(out, 3.0)


def test_crop_bilinear_midpoint():
    feat = np.arange(16.0).reshape(1, 1, 4, 4)
    # a 2-pixel box sampled once lands between four pixels
    out = crop_and_resize(feat, [0], [[1, 1, 3, 3]], 1).data
    np.testing.assert_allclose(out[0, 0, 0, 0], feat[0, 0, 1:3, 1:3].mean())


def test_crop_spatial_scale(rng):
    feat = rng.normal(size=(1, 1, 4, 4))
    a = crop_and_resize(feat, [0], [[0, 0, 8, 8]], 4, spatial_scale=0.5).data
    np.testing.assert_allclose(a[0], feat[0])
