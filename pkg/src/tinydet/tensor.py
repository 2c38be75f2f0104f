"""Dense float64 tensors with reverse-mode gradients.

Every operation is a plain function of its inputs that returns a new
``Tensor``; when any input requires a gradient the result records a
vector-Jacobian closure so ``Tensor.backward`` can walk the graph.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, OracleError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward() without a cotangent needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"cotangent shape {grad.shape} does not match output {self.shape}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Wrap a forward result with its vector-Jacobian product.

    ``vjp(g)`` must return one cotangent (or None) per parent.
    """
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                  "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return custom(out, (a, b), vjp, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return custom(a.data ** exponent, (a,),
                  lambda g: (g * exponent * a.data ** (exponent - 1),), "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NumericError in custom()
        out = np.exp(a.data)
    return custom(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return custom(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return custom(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return custom(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def silu(a) -> Tensor:
    """x * sigmoid(x); smooth, so finite-difference checks never straddle a kink."""
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return custom(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),), "silu")


# reductions and shape manipulation

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return custom(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.size / max(out.size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return custom(out, (a,), vjp, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return custom(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return custom(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return custom(np.broadcast_to(a.data, shape).copy(), (a,),
                  lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def getitem(a, key) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return custom(a.data[key], (a,), vjp, "getitem")


def take(a, idx, axis: int = 0) -> Tensor:
    """Gather along ``axis`` by an integer index array (repeats allowed)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    axis = axis % a.ndim
    flat = idx.ravel()
    unique = np.unique(flat).size == flat.size

    def vjp(g):
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        gm = gm.reshape((flat.size,) + gm.shape[idx.ndim:])
        dm = np.zeros((a.shape[axis],) + gm.shape[1:])
        if unique:
            dm[flat] = gm
        else:
            np.add.at(dm, flat, gm)
        return (np.moveaxis(dm, 0, axis),)

    return custom(np.take(a.data, idx, axis=axis), (a,), vjp, "take")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return custom(np.concatenate([t.data for t in ts], axis=axis), ts, vjp, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return custom(np.stack([t.data for t in ts], axis=axis), ts, vjp, "stack")


# linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul needs at least 1-D operands, got {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim > 1 else b.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    a2 = a.data[None, :] if a.ndim == 1 else a.data
    b2 = b.data[:, None] if b.ndim == 1 else b.data
    out2 = np.matmul(a2, b2)
    out = out2
    if a.ndim == 1:
        out = out[..., 0, :]
    if b.ndim == 1:
        out = out[..., 0]

    def vjp(g):
        g2 = g
        if b.ndim == 1:
            g2 = g2[..., None]
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        ga = _unbroadcast(ga, a2.shape).reshape(a.shape)
        gb = _unbroadcast(gb, b2.shape).reshape(b.shape)
        return ga, gb

    return custom(out, (a, b), vjp, "matmul")


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Softmax with max-subtraction; ``mask`` True entries get exactly zero weight."""
    a = as_tensor(a)
    z = a.data if mask is None else np.where(mask, -np.inf, a.data)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return custom(y, (a,), vjp, "softmax")


def logsumexp(a, axis: int = -1, mask=None) -> Tensor:
    """log(sum(exp(a))) along ``axis`` over the entries where ``mask`` is False."""
    a = as_tensor(a)
    z = a.data if mask is None else np.where(mask, -np.inf, a.data)
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    w = e / s

    def vjp(g):
        return (np.expand_dims(g, axis) * w,)

    return custom(out, (a,), vjp, "logsumexp")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return custom(xhat * gamma.data + beta.data, (x, gamma, beta), vjp, "layer_norm")


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale to unit L2 norm along ``axis``; vectors with norm <= eps map to zero."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    ok = n > eps
    safe = np.where(ok, n, 1.0)
    y = np.where(ok, x.data / safe, 0.0)

    def vjp(g):
        return (np.where(ok, (g - y * (g * y).sum(axis=axis, keepdims=True)) / safe, 0.0),)

    return custom(y, (x,), vjp, "l2_normalize")


# spatial ops

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x`` is C×H×W or N×C×H×W; ``kernel`` is C'×C×k×k."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects x C×H×W or N×C×H×W and a 4-D kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = xd.shape
    co, ci, k, k2 = kernel.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv2d kernel {kernel.shape} incompatible with input {x.shape}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d output would be {ho}×{wo} for input {h}×{w}, k={k}, "
                          f"stride={stride}, padding={padding}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * k * k)
    wmat = kernel.data.reshape(co, c * k * k)
    out = np.matmul(cols, wmat.T).transpose(0, 2, 1).reshape(n, co, ho, wo)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None]
        parents.append(bias)

    def vjp(g):
        g4 = g[None] if squeeze else g
        go = g4.reshape(n, co, ho * wo)
        dw = np.matmul(go, cols).sum(axis=0).reshape(kernel.shape) if kernel.requires_grad else None
        dx = None
        if x.requires_grad:
            # (n, c, k, k, ho, wo) so every tap is a contiguous plane
            dcols = np.matmul(wmat.T, go).reshape(n, c, k, k, ho, wo)
            dxp = np.zeros_like(xp)
            he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + he:stride, j:j + we:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            if squeeze:
                dx = dx[0]
        grads = [dx, dw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return custom(out[0] if squeeze else out, parents, vjp, "conv2d")


def upsample_nearest_2x(x) -> Tensor:
    """Replicate every pixel of the trailing H×W plane into a 2×2 block."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"upsample needs a (..., H, W) input, got {x.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)
    h, w = x.shape[-2:]

    def vjp(g):
        return (g.reshape(g.shape[:-2] + (h, 2, w, 2)).sum(axis=(-3, -1)),)

    return custom(out, (x,), vjp, "upsample_nearest_2x")


def global_avg_pool(x) -> Tensor:
    """Mean over the trailing two spatial axes."""
    return mean(x, axis=(-2, -1))


# gradient oracles

def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-3,
                     indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``.

    With ``indices`` (flat positions) only those entries are estimated and
    a 1-D array in the same order is returned.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    est = []
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite function value while perturbing entry {i}")
        est.append((fp - fm) / (2.0 * h))
    est = np.asarray(est)
    return est.reshape(x.shape) if indices is None else est


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """max|a − n| scaled by the larger of the two gradients' max magnitude."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


@dataclass
class DiffResult:
    value: Tensor
    gradient_fn: Callable[[np.ndarray], tuple[np.ndarray, ...]]


def vjp(fn: Callable[..., Tensor], *inputs) -> DiffResult:
    """Evaluate ``fn`` and return its value with a pullback over ``inputs``."""
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    value = fn(*leaves)

    def gradient_fn(cotangent) -> tuple[np.ndarray, ...]:
        for leaf in leaves:
            leaf.grad = None
        if value.requires_grad:
            value.backward(np.asarray(cotangent, dtype=np.float64))
        return tuple(np.zeros_like(l.data) if l.grad is None else l.grad for l in leaves)

    return DiffResult(value, gradient_fn)
