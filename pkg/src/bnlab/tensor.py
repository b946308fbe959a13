"""Dense tensors with reverse-mode automatic differentiation.

Only the operators the convolutional networks in this package need are
provided: ``conv2d``, ``relu``, ``linear``, ``avgpool_global``,
``maxpool2d``, ``add``, ``softmax_cross_entropy`` and a handful of small
helpers (``mul``, ``tsum``) used by tests and losses.

Every differentiable op records a :class:`Node` on its output when any of
its inputs requires gradients. ``backward`` linearises the recorded graph
into a :class:`Tape` (topological order) and visits each node once.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class UsageError(RuntimeError):
    """Raised when the autodiff machinery is used incorrectly."""


class Tensor:
    """Row-major dense array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype, copy=True, order="C")
        if arr.dtype not in SUPPORTED_DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if arr.dtype not in SUPPORTED_DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.require(arr, requirements="C")  # keeps 0-d scalars 0-d
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        self.grad = None if not self.requires_grad else np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


@dataclass
class Node:
    """One executed differentiable op: its inputs and a vector-Jacobian product."""

    op: str
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of the ops reachable from a root, inputs before consumers."""

    order: list[Tensor]

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for inp in t._node.inputs:
                    if id(inp) not in seen and (inp._node is not None or inp.requires_grad):
                        stack.append((inp, False))
        return cls([t for t in order if t._node is not None])


_state = threading.local()


@contextlib.contextmanager
def no_grad():
    """Disable op recording inside the block (evaluation passes)."""
    prev = getattr(_state, "disabled", False)
    _state.disabled = True
    try:
        yield
    finally:
        _state.disabled = prev


def _needs_grad(*ts: Tensor) -> bool:
    if getattr(_state, "disabled", False):
        return False
    return any(t.requires_grad or t._node is not None for t in ts)


def _record(out: np.ndarray, op: str, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    t = Tensor._wrap(out)
    if _needs_grad(*inputs):
        t._node = Node(op, inputs, vjp)
    return t


def _wants(t: Tensor) -> bool:
    return t.requires_grad or t._node is not None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires gradients and feeds ``loss``.

    Gradients accumulate: calling twice without zeroing doubles them.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise UsageError("tensor was not produced by a recorded operation")
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        in_grads = node.vjp(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not _wants(inp):
                continue
            if inp._node is None:
                inp._accumulate(ig)
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + ig
            else:
                grads[id(inp)] = ig


def _check_dtype(*ts: Tensor) -> None:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise TypeError(f"dtype mismatch: {dt} vs {t.dtype}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    _check_dtype(a, b)
    return _record(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    _check_dtype(a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def tsum(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.dtype
    return _record(np.array(a.data.sum(), dtype=dt), "sum", (a,), lambda g: (np.full(shape, g, dtype=dt),))


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype, copy=False)
    return _record(out, "relu", (x,), lambda g: (g * pos,))


# ---------------------------------------------------------------- dense layers

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """out[b, k] = sum_f x[b, f] * weight[k, f] + bias[k]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError(f"linear: bad ranks {x.shape}, {weight.shape}, {bias.shape}")
    if x.shape[1] != weight.shape[1] or bias.shape[0] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape} / bias {bias.shape}")
    _check_dtype(x, weight, bias)
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def vjp(g):
        gx = g @ wd if _wants(x) else None
        gw = g.T @ xd if _wants(weight) else None
        gb = g.sum(axis=0) if _wants(bias) else None
        return gx, gw, gb

    return _record(out, "linear", (x, weight, bias), vjp)


def avgpool_global(x: Tensor) -> Tensor:
    """Mean over spatial positions: [B, C, H, W] -> [B, C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool_global expects rank 4, got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))
    scale = 1.0 / (H * W)

    def vjp(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], (B, C, H, W)).astype(x.dtype),)

    return _record(out, "avgpool_global", (x,), vjp)


# ---------------------------------------------------------------- convolution

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Gather [B, C, kh, kw, Ho, Wo] patches from a padded input."""
    B, C = xp.shape[:2]
    cols = np.empty((B, C, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation, [B, Cin, H, W] * [Cout, Cin, kH, kW].

    ``bias`` (per output channel) is only used by the VGG family; every
    residual-network convolution is bias-free.
    """
    if bias is not None:
        return channel_bias(conv2d(x, kernel, stride, padding), bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: expected rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    B, cin, H, W = x.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {kcin} (kernel {kernel.shape})")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    ho, wo = conv_output_size(H, kh, stride, padding), conv_output_size(W, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    _check_dtype(x, kernel)
    xp = _pad(x.data, padding)
    kd = kernel.data
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :ho, :wo][:, :, None, None]
    else:
        cols = _windows(xp, kh, kw, stride, ho, wo)
    out = np.tensordot(kd, cols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)

    def vjp(g):
        gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5])) if _wants(kernel) else None
        gx = None
        if _wants(x):
            gcols = np.tensordot(kd, g, axes=([0], [1]))  # [Cin, kh, kw, B, Ho, Wo]
            gxp = np.zeros((cin, B) + xp.shape[2:], dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            if padding:
                gxp = gxp[:, :, padding:padding + H, padding:padding + W]
            gx = np.ascontiguousarray(gxp)
        return gx, gk

    return _record(np.ascontiguousarray(out), "conv2d", (x, kernel), vjp)


def channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 4 or bias.shape != (x.shape[1],):
        raise ShapeError(f"channel_bias: bias {bias.shape} does not match input {x.shape}")
    _check_dtype(x, bias)
    out = x.data + bias.data[None, :, None, None]
    return _record(out, "channel_bias", (x, bias), lambda g: (g, g.sum(axis=(0, 2, 3))))


def maxpool2d(x: Tensor, window: int, stride: int = 2, padding: int = 0) -> Tensor:
    """Per-window maximum; the gradient goes to the first maximal element."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects rank 4, got {x.shape}")
    B, C, H, W = x.shape
    ho, wo = conv_output_size(H, window, stride, padding), conv_output_size(W, window, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: window {window} larger than padded input {H}x{W}")
    xp = _pad(x.data, padding, value=-np.inf)
    cols = _windows(xp, window, window, stride, ho, wo)
    flat = cols.transpose(0, 1, 4, 5, 2, 3).reshape(B, C, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        di, dj = np.divmod(arg, window)
        rows = np.arange(ho)[None, None, :, None] * stride + di
        colsi = np.arange(wo)[None, None, None, :] * stride + dj
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        bi = np.arange(B)[:, None, None, None]
        ci = np.arange(C)[None, :, None, None]
        np.add.at(gxp, (bi, ci, rows, colsi), g)
        if padding:
            gxp = gxp[:, :, padding:padding + H, padding:padding + W]
        return (np.ascontiguousarray(gxp),)

    return _record(np.ascontiguousarray(out), "maxpool2d", (x,), vjp)


# ---------------------------------------------------------------- loss

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [B, K] logits, got {logits.shape}")
    B, K = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != B:
        raise ShapeError(f"{y.shape[0]} labels for a batch of {B}")
    if y.size and (y.min() < 0 or y.max() >= K):
        raise ValueError(f"labels must lie in [0, {K}), got range [{y.min()}, {y.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    loss = -logp[np.arange(B), y].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(B), y] -= 1.0
        return (p * (g / B),)

    return _record(np.array(loss, dtype=logits.dtype), "softmax_cross_entropy", (logits,), vjp)
