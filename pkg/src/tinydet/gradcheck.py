"""Finite-difference checks of every differentiable op and both contrastive losses."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .contrastive import (ContrastiveConfig, EncoderParams, build_repr_batch, geometric_loss, info_nce,
                          semantic_loss)
from .fpn import FpnParams, build_pyramid
from .tensor import Tensor
from .training import cross_entropy, smooth_l1
from .trans_rcnn import HeadParams, MTEParams, heads_forward, mte_forward, pooling_weights, task_mask, task_token_select
from .unfold import UnfoldConfig, UnfoldProjection, crop_and_resize, tokenize_roi, unfold

H_DEFAULT = 1e-3
TOL_DEFAULT = 1e-4


@dataclass
class GradCase:
    """``build(rng)`` returns (fn, inputs, probe): fn maps Tensors to a Tensor.

    ``probe`` caps how many entries per input are finite-differenced (None = all).
    """
    build: Callable
    probe: int | None = None


def _u(rng, shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, shape)


def _away_from(rng, shape, gap=0.05):
    # magnitudes in [gap, 1]: keeps h-perturbations off kinks at 0
    return rng.choice([-1.0, 1.0], shape) * rng.uniform(gap, 1.0, shape)


def _unary(op, lo=-1.0, hi=1.0, shape=(3, 4)):
    return GradCase(lambda rng: (op, [_u(rng, shape, lo, hi)], None))


def _conv_case(stride, padding, bias):
    def build(rng):
        x = _u(rng, (2, 3, 5, 5))
        k = _u(rng, (2, 3, 3, 3))
        ins = [x, k] + ([_u(rng, 2)] if bias else [])
        return (lambda x, k, *b: T.conv2d(x, k, b[0] if b else None, stride, padding)), ins, None
    return GradCase(build)


def _softmax_case(masked):
    def build(rng):
        mask = rng.random((3, 5)) < 0.3 if masked else None
        if mask is not None:
            mask[:, 0] = False
        return (lambda a: T.softmax(3.0 * a, -1, mask)), [_u(rng, (3, 5))], None
    return GradCase(build)


def _logsumexp_case(masked):
    def build(rng):
        mask = rng.random((3, 5)) < 0.3 if masked else None
        if mask is not None:
            mask[:, 0] = False
        return (lambda a: T.logsumexp(3.0 * a, -1, mask)), [_u(rng, (3, 5))], None
    return GradCase(build)


def _getitem_case(rng):
    rows = rng.integers(0, 4, 6)
    cols = rng.integers(0, 3, 6)
    return (lambda a: T.getitem(a, (rows, cols))), [_u(rng, (4, 3))], None


def _take_case(rng):
    idx = rng.integers(0, 5, (2, 3))
    return (lambda a: T.take(a, idx, axis=1)), [_u(rng, (2, 5, 3))], None


def _crop_case(rng):
    boxes = []
    for _ in range(3):
        x1, y1 = rng.uniform(0, 6, 2)
        w, h = rng.uniform(1.5, 5, 2)
        boxes.append([x1, y1, min(x1 + w, 9.5), min(y1 + h, 9.5)])
    bidx = rng.integers(0, 2, 3)
    return (lambda f: crop_and_resize(f, bidx, boxes, 4)), [_u(rng, (2, 2, 10, 10))], None


def _unfold_case(order):
    def build(rng):
        cfg = UnfoldConfig(roi_size=4, patch_size=2, patch_stride=2, window=2, oversample=3, model_dim=5,
                           order=order, seed=int(rng.integers(1 << 30)))
        proj_in = cfg.token_in_dim(2)
        return ((lambda roi, w, b: unfold(tokenize_roi(roi, cfg), UnfoldProjection(w, b), cfg).tokens),
                [_u(rng, (2, 2, 4, 4)), _u(rng, (proj_in, 5)), _u(rng, 5)], 40)
    return GradCase(build)


def _mte_case(rng):
    params = MTEParams.init(8, rng, layers=2, heads=2)
    for layer in params.layers:
        for v in vars(layer).values():
            v.data = v.data + rng.normal(0, 0.05, v.shape)
    mask = task_mask(4)

    def fn(seq):
        return mte_forward(seq, params, mask).tokens

    # inputs with O(1) per-token spread keep layer_norm's curvature small relative to h
    return fn, [_u(rng, (2, 6, 8), -3.0, 3.0)], None


def _mte_param_case(rng):
    params = MTEParams.init(8, rng, layers=1, heads=2)
    seq = _u(rng, (2, 6, 8), -3.0, 3.0)
    layer = params.layers[0]
    names = ["wq", "wk", "wv", "wo", "w1", "w2", "ln1_g", "ln2_b"]

    def fn(*ws):
        for n, w in zip(names, ws):
            setattr(layer, n, w)
        return mte_forward(seq, params, task_mask(4)).tokens

    return fn, [getattr(layer, n).data + rng.normal(0, 0.05, getattr(layer, n).shape) for n in names], 12


def _heads_case(rng):
    dim, classes = 6, 3
    params = HeadParams.init(dim, classes, rng)
    a_cls, a_box = rng.random((2, 2, 4))
    weights = np.stack([pooling_weights(task_token_select(c, b), 6) for c, b in zip(a_cls, a_box)])

    def fn(tokens, cw, bw):
        params.cls_w, params.box_w = cw, bw
        logits, deltas = heads_forward(tokens, weights, params)
        return T.concat([logits, deltas], axis=-1)

    return fn, [_u(rng, (2, 6, dim)), _u(rng, (dim, classes + 1)), _u(rng, (dim, 4))], None


def _fpn_case(rng):
    ch = [2, 3, 4]
    params = FpnParams.init(ch, 3, rng)
    shapes = [(1, 2, 8, 8), (1, 3, 4, 4), (1, 4, 2, 2)]

    def fn(c0, c1, c2, k0):
        params.lateral[0] = k0
        return T.concat([p.reshape((-1,)) for p in build_pyramid([c0, c1, c2], params)], axis=0)

    return fn, [_u(rng, s) for s in shapes] + [params.lateral[0].data], 30


def _encoder_batch(rng, levels, B):
    ch = [3, 4, 5, 6][:levels]
    geo = EncoderParams.init(3, ch, rng, conv_channels=3, hidden=6)
    sem = EncoderParams.init(3, ch, rng, conv_channels=3, hidden=6)
    # raw representations well away from zero norm: l2_normalize curvature grows like 1/|v|^2
    for enc in (geo, sem):
        enc.fc2.data = enc.fc2.data * 8.0
        enc.fc2_b.data = rng.normal(0.0, 0.5, enc.fc2_b.shape)
    fpn = FpnParams.init(ch, 3, rng)
    size = 2 ** levels
    laterals = [_u(rng, (B, c, size >> i, size >> i)) for i, c in enumerate(ch)]
    return geo, sem, fpn, laterals


def _contrastive_case(which: str):
    def build(rng):
        geo, sem, fpn, laterals = _encoder_batch(rng, 2, 3)
        cfg = ContrastiveConfig()
        loss = geometric_loss if which == "geo" else semantic_loss

        def fn(c0, c1, g_conv1, s_fc2, adapter0):
            geo.conv1, sem.fc2, geo.adapters[0] = g_conv1, s_fc2, adapter0
            cs = [c0, c1]
            return loss(build_repr_batch(cs, build_pyramid(cs, fpn), geo, sem), cfg)

        ins = laterals + [geo.conv1.data, sem.fc2.data, geo.adapters[0].data]
        return fn, ins, 12
    return GradCase(build)


def _info_nce_case(rng):
    d = 8

    def fn(q, p, n):
        return info_nce(q, p, [n[i] for i in range(n.shape[0])], 0.07)

    return fn, [_u(rng, d) * 0.3, _u(rng, d) * 0.3, _u(rng, (5, d)) * 0.3], None


def _smooth_l1_case(rng):
    d = rng.choice([-1.0, 1.0], (3, 4)) * np.where(rng.random((3, 4)) < 0.5, rng.uniform(0.0, 0.9, (3, 4)),
                                                   rng.uniform(1.1, 3.0, (3, 4)))
    target = _u(rng, (3, 4))
    return (lambda p: smooth_l1(p, target)), [target + d], None


def _cross_entropy_case(rng):
    labels = rng.integers(0, 5, 4)
    return (lambda z: cross_entropy(z, labels)), [_u(rng, (4, 5), -2, 2)], None


def _binary(op, lo=-1.0, hi=1.0, b_shape=(3, 4)):
    return GradCase(lambda rng: (op, [_u(rng, (3, 4), lo, hi), _u(rng, b_shape, lo, hi)], None))


OPS: dict[str, GradCase] = {
    "add": _binary(T.add, b_shape=(4,)),
    "sub": _binary(T.sub, b_shape=(3, 1)),
    "mul": _binary(T.mul, b_shape=(4,)),
    "div": _binary(T.div, 0.5, 2.0, b_shape=(3, 1)),
    "power": GradCase(lambda rng: ((lambda a, e=float(rng.uniform(1.5, 3.0)): T.power(a, e)),
                                   [_u(rng, (3, 4), 0.5, 2.0)], None)),
    "exp": _unary(T.exp),
    "log": _unary(T.log, 0.5, 2.0),
    "sigmoid": _unary(T.sigmoid, -3, 3),
    "relu": GradCase(lambda rng: (T.relu, [_away_from(rng, (3, 4))], None)),
    "silu": _unary(T.silu, -3, 3),
    "sum": GradCase(lambda rng: ((lambda a: T.tsum(a, axis=1)), [_u(rng, (3, 4))], None)),
    "mean": GradCase(lambda rng: ((lambda a: T.mean(a, axis=(0, 2), keepdims=True)), [_u(rng, (2, 3, 4))], None)),
    "reshape": GradCase(lambda rng: ((lambda a: T.reshape(a, (4, 3))), [_u(rng, (3, 4))], None)),
    "transpose": GradCase(lambda rng: ((lambda a: T.transpose(a, (2, 0, 1))), [_u(rng, (2, 3, 4))], None)),
    "broadcast_to": GradCase(lambda rng: ((lambda a: T.broadcast_to(a, (2, 3, 4))), [_u(rng, (3, 1))], None)),
    "getitem": GradCase(_getitem_case),
    "take": GradCase(_take_case),
    "concat": GradCase(lambda rng: ((lambda a, b: T.concat([a, b], axis=1)),
                                    [_u(rng, (2, 3)), _u(rng, (2, 2))], None)),
    "stack": GradCase(lambda rng: ((lambda a, b: T.stack([a, b], axis=1)), [_u(rng, (2, 3)), _u(rng, (2, 3))], None)),
    "matmul": _binary(T.matmul, b_shape=(4, 2)),
    "matmul_batched": GradCase(lambda rng: (T.matmul, [_u(rng, (2, 3, 4)), _u(rng, (4, 5))], None)),
    "matmul_vector": GradCase(lambda rng: (T.matmul, [_u(rng, (3, 4)), _u(rng, 4)], None)),
    "softmax": _softmax_case(False),
    "softmax_masked": _softmax_case(True),
    "logsumexp": _logsumexp_case(False),
    "logsumexp_masked": _logsumexp_case(True),
    "layer_norm": GradCase(lambda rng: (T.layer_norm, [_u(rng, (3, 5)), _u(rng, 5, 0.5, 1.5), _u(rng, 5)], None)),
    "l2_normalize": GradCase(lambda rng: (T.l2_normalize, [_u(rng, (3, 5), 0.2, 1.0) * rng.choice([-1, 1], (3, 5))],
                                          None)),
    "conv2d": _conv_case(1, 0, True),
    "conv2d_padded": _conv_case(1, 1, True),
    "conv2d_strided": _conv_case(2, 1, False),
    "upsample_nearest_2x": GradCase(lambda rng: (T.upsample_nearest_2x, [_u(rng, (2, 3, 3))], None)),
    "global_avg_pool": GradCase(lambda rng: (T.global_avg_pool, [_u(rng, (2, 3, 4, 4))], None)),
    "crop_and_resize": GradCase(_crop_case, 60),
    "unfold_raster": _unfold_case("raster"),
    "unfold_shuffle": _unfold_case("shuffle"),
    "fpn_pyramid": GradCase(_fpn_case),
    "mte_forward": GradCase(_mte_case, 40),
    "mte_parameters": GradCase(_mte_param_case),
    "task_heads": GradCase(_heads_case),
    "smooth_l1": GradCase(_smooth_l1_case),
    "cross_entropy": GradCase(_cross_entropy_case),
    "info_nce": GradCase(_info_nce_case),
    "geometric_loss": _contrastive_case("geo"),
    "semantic_loss": _contrastive_case("sem"),
}


def check_case(case: GradCase, seed: int, h: float = H_DEFAULT) -> float:
    """Max relative error over all inputs of one randomly drawn instance."""
    rng = np.random.default_rng([seed, 1])
    fn, inputs, probe = case.build(rng)
    probe = probe if probe is not None else case.probe
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    with T.no_grad():
        out_shape = np.shape(fn(*[Tensor(x) for x in inputs]).data)
    cot = rng.normal(0.0, 1.0, out_shape)

    def scalar(*xs):
        with T.no_grad():
            return float((fn(*[Tensor(x) for x in xs]).data * cot).sum())

    analytic = T.vjp(fn, *inputs).gradient_fn(cot)
    worst = 0.0
    for i, x in enumerate(inputs):
        def f(xi, i=i):
            args = list(inputs)
            args[i] = xi
            return scalar(*args)

        if probe is not None and x.size > probe:
            idx = rng.choice(x.size, probe, replace=False)
            num = T.finite_diff_grad(f, x, h, indices=idx)
            ana = analytic[i].reshape(-1)[idx]
        else:
            num = T.finite_diff_grad(f, x, h)
            ana = analytic[i]
        worst = max(worst, T.relative_error(ana, num))
    return worst


def run_gradcheck(seeds: int | Sequence[int] = 100, ops: Sequence[str] | None = None, h: float = H_DEFAULT,
                  tol: float = TOL_DEFAULT, registry: Mapping[str, GradCase] | None = None) -> dict:
    registry = OPS if registry is None else registry
    names = list(registry) if ops is None else list(ops)
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    t0 = time.perf_counter()
    report = {"h": h, "tolerance": tol, "seeds": len(seed_list), "ops": {}}
    for name in names:
        errs = []
        failure = None
        for s in seed_list:
            try:
                errs.append(check_case(registry[name], s, h))
            except Exception as exc:  # a crashing op is a failed op, reported by name
                failure = f"{type(exc).__name__}: {exc}"
                break
        worst = max(errs) if errs else None
        entry = {"max_rel_error": worst, "passed": failure is None and worst < tol,
                 "worst_seed": seed_list[int(np.argmax(errs))] if errs else None}
        if failure:
            entry["error"] = failure
        report["ops"][name] = entry
    report["failed"] = [n for n, e in report["ops"].items() if not e["passed"]]
    report["passed"] = not report["failed"]
    report["seconds"] = time.perf_counter() - t0
    return report


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"
