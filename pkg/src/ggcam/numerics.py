"""Small reverse-mode autodiff core over float64 numpy arrays.

Only the operations needed by the toy backbone, the classification heads and
the losses are provided. Shapes are explicit: apart from the bias-add in
``conv2d``/``linear``/``add_bias`` and scalar scaling, operands must match.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "NumericalError",
    "Tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "add_const",
    "sub_const",
    "mul_const",
    "sum_all",
    "mean_all",
    "square",
    "log",
    "reciprocal",
    "relu",
    "sigmoid",
    "softplus",
    "softmax",
    "log_softmax",
    "conv2d",
    "maxpool2",
    "global_avg_pool",
    "linear",
    "add_bias",
    "channel_mix",
    "pick",
    "reshape",
    "no_grad",
]


class NumericalError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


_state = threading.local()


@contextmanager
def no_grad() -> Iterator[None]:
    """Within the block, op outputs record no graph (per thread)."""
    prev = getattr(_state, "enabled", True)
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A value in the computation graph.

    Leaves created by the user carry ``requires_grad``; op outputs record their
    parents and a closure mapping the upstream gradient to parent gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self._op})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, parents: Iterable[Tensor], fn: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite value produced by {op}")
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out.requires_grad = getattr(_state, "enabled", True) and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``x`` by the single-element tensor ``s``."""
    if s.size != 1:
        raise ValueError("scale: factor must hold exactly one element")
    sv = s.data.reshape(-1)[0]
    xd = x.data

    def fn(g):
        return g * sv, np.array(np.sum(g * xd)).reshape(s.shape)

    return _result("scale", xd * sv, (x, s), fn)


def add_const(x: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    return _result("add_const", x.data + c, (x,), lambda g: (g,))


def sub_const(x: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim and c.shape != x.shape:
        raise ValueError(f"sub_const: shape mismatch {x.shape} vs {c.shape}")
    return _result("sub_const", x.data - c, (x,), lambda g: (g,))


def mul_const(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("mul_const", x.data * c, (x,), lambda g: (g * c,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    if n == 0:
        raise ValueError("mean of an empty tensor")
    return _result("mean", np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise NumericalError("log of a non-positive value")
    return _result("log", np.log(xd), (x,), lambda g: (g / xd,))


def reciprocal(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", over="ignore"):
        out = 1.0 / xd
    return _result("reciprocal", out, (x,), lambda g: (-g * out * out,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0.0, xd)
    return _result("softplus", out, (x,), lambda g: (g * _sigmoid(xd),))


def softplus_inverse(y: float) -> float:
    """Return ``r`` with ``softplus(r) == y`` for ``y > 0``, safe for tiny ``y``."""
    if not y > 0:
        raise ValueError("softplus_inverse needs a positive value")
    if y > 30.0:
        return y + float(np.log(-np.expm1(-y)))
    return float(np.log(np.expm1(y)))


def _logsumexp_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    p = np.exp(x.data - _logsumexp_rows(x.data))

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result("softmax", p, (x,), fn)


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis, via log-sum-exp."""
    out = x.data - _logsumexp_rows(x.data)
    p = np.exp(out)
    return _result("log_softmax", out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


# ---------------------------------------------------------------- layers


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # N, C, Ho, Wo, k, k
    n, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (Cin×H×W or N×Cin×H×W) with ``kernel`` (Cout×Cin×k×k)."""
    if kernel.data.ndim != 4:
        raise ValueError("conv2d: kernel must be Cout×Cin×k×k")
    cout, cin, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ValueError("conv2d: kernel must be square with odd size")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: need stride >= 1 and pad >= 0")
    if bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or xd.shape[1] != cin:
        raise ValueError(f"conv2d: input shape {x.shape} incompatible with kernel {kernel.shape}")
    n, _, h, w = xd.shape
    span_h, span_w = h + 2 * pad - k, w + 2 * pad - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ValueError(f"conv2d: non-integer output extent for input {h}×{w}, k={k}, stride={stride}, pad={pad}")
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, k, stride)
    wmat = kernel.data.reshape(cout, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def fn(g):
        g4 = g[None] if single else g
        gm = g4.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(kernel.shape)
        gb = gm.sum(axis=0)
        if not x.requires_grad:
            return None, gw, gb
        gcols = np.ascontiguousarray((gm @ wmat).reshape(n, ho, wo, cin, k, k).transpose(4, 5, 0, 3, 1, 2))
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[i, j]
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return (gx[0] if single else gx), gw, gb

    return _result("conv2d", out[0] if single else out, (x, kernel, bias), fn)


def maxpool2(x: Tensor) -> Tensor:
    """2×2 max pooling with stride 2 over the last two axes; ties go to the first row-major element."""
    xd = x.data
    h, w = xd.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError("maxpool2: spatial extent smaller than the window")
    h2, w2 = h // 2, w // 2
    lead = xd.shape[:-2]
    blocks = xd[..., : 2 * h2, : 2 * w2].reshape(*lead, h2, 2, w2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h2, w2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def fn(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = np.moveaxis(gb.reshape(*lead, h2, w2, 2, 2), -2, -3).reshape(*lead, 2 * h2, 2 * w2)
        gx = np.zeros(xd.shape)
        gx[..., : 2 * h2, : 2 * w2] = gb
        return (gx,)

    return _result("maxpool2", out, (x,), fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean over the last two axes: (..., H, W) -> (...)."""
    h, w = x.shape[-2:]
    if h * w == 0:
        raise ValueError("global_avg_pool: empty spatial extent")
    shape = x.shape

    def fn(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), shape).copy(),)

    return _result("global_avg_pool", x.data.mean(axis=(-2, -1)), (x,), fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (G,) or (N, G) and weight (C, G)."""
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: incompatible shapes x{x.shape}, W{weight.shape}, b{bias.shape}")
    xd, wd = x.data, weight.data

    def fn(g):
        g2 = g.reshape(-1, wd.shape[0])
        x2 = xd.reshape(-1, wd.shape[1])
        return (g @ wd), g2.T @ x2, g2.sum(axis=0)

    return _result("linear", xd @ wd.T + bias.data, (x, weight, bias), fn)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-C bias along the last axis of ``x``."""
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ValueError(f"add_bias: incompatible shapes {x.shape} and {bias.shape}")
    c = bias.shape[0]
    return _result("add_bias", x.data + bias.data, (x, bias), lambda g: (g, g.reshape(-1, c).sum(axis=0)))


def channel_mix(a: Tensor, weight: Tensor) -> Tensor:
    """1×1 convolution without bias: out[..., c, i, j] = sum_k weight[c, k] * a[..., k, i, j]."""
    if weight.data.ndim != 2 or a.data.ndim < 3 or a.shape[-3] != weight.shape[1]:
        raise ValueError(f"channel_mix: incompatible shapes A{a.shape}, W{weight.shape}")
    ad, wd = a.data, weight.data
    out = np.einsum("ck,...kij->...cij", wd, ad, optimize=True)

    def fn(g):
        ga = np.einsum("ck,...cij->...kij", wd, g, optimize=True)
        gw = np.einsum("...cij,...kij->ck", g, ad, optimize=True)
        return ga, gw

    return _result("channel_mix", out, (a, weight), fn)


def pick(x: Tensor, labels: Sequence[int]) -> Tensor:
    """Select index ``labels[n]`` along axis 1 for every row n of a batched tensor.

    Turns N×C×... into N×...; the gradient is zero for every unselected slice.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, c = x.shape[:2]
    if labels.shape != (n,):
        raise ValueError("pick: need exactly one index per row")
    if np.any(labels < 0) or np.any(labels >= c):
        raise IndexError("pick: index out of range")
    rows = np.arange(n)
    shape = x.shape

    def fn(g):
        gx = np.zeros(shape)
        gx[rows, labels] = g
        return (gx,)

    return _result("pick", x.data[rows, labels].copy(), (x,), fn)


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, wrt: Sequence[Tensor] | None = None) -> list[np.ndarray]:
    """Back-propagate from a scalar ``root``.

    Every leaf reached gets its ``.grad`` overwritten. Returns gradients for
    ``wrt`` in order (zeros for tensors not on any path to ``root``).
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(_topo_order(root)):
        g = grads.get(id(node))
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
    if wrt is None:
        return []
    return [grads[id(t)] if id(t) in grads else np.zeros(t.shape) for t in wrt]
