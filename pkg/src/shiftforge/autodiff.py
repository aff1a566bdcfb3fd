"""Minimal reverse-mode autodiff over dense float32 numpy arrays.

Only the operations needed by the reference models are provided; there is
no general broadcasting engine. Every op records a closure that maps the
upstream gradient to gradients for its inputs, and :func:`backward` walks the
recorded graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import _kernels

DTYPE = np.float32


@contextlib.contextmanager
def compute_dtype(dtype):
    """Temporarily run every op in ``dtype`` (e.g. float64 for finite-difference checks).

    Tensors created inside the context use ``dtype``; training code never enters it.
    """
    global DTYPE
    prev = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = prev


class GraphError(RuntimeError):
    """Raised for misuse of the compute graph (double backward, non-scalar loss)."""


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class _Node:
    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """An n-d float32 array with an optional gradient slot."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.retain_grad = False
        self.name = name
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all route through the explicit op functions below
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # max() propagates NaN and surfaces +inf; min() surfaces -inf
    if arr.size and not (np.isfinite(arr.max()) and np.isfinite(arr.min())):
        raise FloatingPointError(f"non-finite values produced by {op}")


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=DTYPE)
    _check_finite(data, op)
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(op, tuple(inputs), backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if t._node.consumed:
                raise GraphError("graph already consumed by a previous backward; run a new forward")
            for parent in t._node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        node = t._node
        if node is None:
            if g is not None:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if t.retain_grad and g is not None:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if g is not None:
            in_grads = node.backward_fn(g)
            for parent, pg in zip(node.inputs, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=DTYPE)
                if pg.shape != parent.shape:
                    raise ShapeError(f"{node.op}: gradient shape {pg.shape} != input shape {parent.shape}")
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        node.consumed = True
        node.backward_fn = None


# ---------------------------------------------------------------- elementwise


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + DTYPE(c), (a,), lambda g: (g,), "add_scalar")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, DTYPE(0))
    return _make(out, (x,), lambda g: (np.where(out > 0, g, DTYPE(0)),), "relu")


def exp2(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as inf and is rejected by _make
        out = np.exp2(x.data)
    return _make(out, (x,), lambda g: (g * out * DTYPE(np.log(2.0)),), "exp2")


def straight_through(x: Tensor, value: np.ndarray, grad_mask: np.ndarray) -> Tensor:
    """Forward returns ``value``; backward passes the upstream gradient where ``grad_mask``."""
    value = np.asarray(value, dtype=DTYPE)
    if value.shape != x.shape:
        raise ShapeError(f"straight_through: value shape {value.shape} != {x.shape}")
    mask = np.asarray(grad_mask, dtype=DTYPE)
    return _make(value, (x,), lambda g: (g * mask,), "straight_through")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make(np.sum(x.data, dtype=DTYPE), (x,), lambda g: (np.full(shape, g, dtype=DTYPE),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(np.mean(x.data, dtype=DTYPE), (x,), lambda g: (np.full(shape, g / n, dtype=DTYPE),), "mean")


def sum_squares(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.sum(xd * xd, dtype=DTYPE), (x,), lambda g: (2.0 * g * xd,), "sum_squares")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the batch axis."""
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature bias along axis 1 of a [N, C] or [N, C, H, W] tensor."""
    if b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match features of {x.shape}")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    axes = (0,) + tuple(range(2, x.data.ndim))
    return _make(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded input {size + 2 * padding}")
    if span % stride:
        raise ValueError(f"conv output size not integral: ({size}+2*{padding}-{k})/{stride}")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x [N,C,H,W] with w [F,C,kh,kw]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: input channels {c} != weight channels {cw}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    cols = _kernels.im2col(np.ascontiguousarray(x.data), kh, kw, stride, padding, ho, wo)
    wmat = w.data.reshape(f, -1)
    out = _kernels.rows_to_nchw(cols @ wmat.T, n, ho, wo)

    def bw(g):
        g2 = _kernels.nchw_to_rows(np.ascontiguousarray(g))
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _kernels.col2im(g2 @ wmat, n, c, h, wd, kh, kw, stride, padding, ho, wo)
        return gx, gw

    return _make(out, (x, w), bw, "conv2d")


# ---------------------------------------------------------------- normalization & pooling


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization of [N,C,H,W] (or [N,C]); running stats are updated in place."""
    if x.data.ndim not in (2, 4):
        raise ShapeError("batchnorm2d expects [N,C,H,W] or [N,C]")
    axes = (0, 2, 3) if x.data.ndim == 4 else (0,)
    view = (1, -1, 1, 1) if x.data.ndim == 4 else (1, -1)
    xd = x.data
    m = xd.size // xd.shape[1]
    if training:
        if xd.shape[0] < 2:
            raise ValueError("batchnorm2d in training mode needs batch >= 2")
        mu = xd.mean(axis=axes, dtype=DTYPE)
        var = xd.var(axis=axes, dtype=DTYPE)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * m / max(m - 1, 1)
    else:
        mu, var = running_mean.astype(DTYPE), running_var.astype(DTYPE)
    inv_std = (1.0 / np.sqrt(var + DTYPE(eps))).astype(DTYPE)
    xhat = (xd - mu.reshape(view)) * inv_std.reshape(view)
    out = xhat * gamma.data.reshape(view) + beta.data.reshape(view)

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(view)
        if training:
            gx = (
                inv_std.reshape(view)
                / m
                * (m * gxhat - gxhat.sum(axis=axes, keepdims=True) - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
            )
        else:
            gx = gxhat * inv_std.reshape(view)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "batchnorm2d")


def _pool_view(xd: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = xd.shape
    if h % k or w % k:
        raise ShapeError(f"pool size {k} does not divide spatial dims {h}x{w}")
    return xd.reshape(n, c, h // k, k, w // k, k)


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k×k max pooling; ties route the gradient to the first maximum."""
    n, c, h, w = x.shape
    if k == 2:
        return _maxpool2x2(x)
    v = _pool_view(x.data, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    idx = v.argmax(axis=-1)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gv = np.zeros(v.shape, dtype=DTYPE)
        np.put_along_axis(gv, idx[..., None], g[..., None], axis=-1)
        gv = gv.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (gv.reshape(n, c, h, w),)

    return _make(out, (x,), bw, "maxpool2d")


def _maxpool2x2(x: Tensor) -> Tensor:
    _pool_view(x.data, 2)
    h, w = x.shape[2:]
    out, arg = _kernels.maxpool2x2(np.ascontiguousarray(x.data))
    return _make(out, (x,), lambda g: (_kernels.maxpool2x2_backward(np.ascontiguousarray(g), arg, h, w),), "maxpool2d")


def avgpool2d(x: Tensor, k: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = _pool_view(x.data, k).mean(axis=(3, 5), dtype=DTYPE)

    def bw(g):
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / DTYPE(k * k)
        return (up,)

    return _make(out, (x,), bw, "avgpool2d")


def global_avgpool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=DTYPE)
    return _make(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / DTYPE(h * w), x.shape).copy(),), "gap")


def channel_pad(x: Tensor, before: int, after: int) -> Tensor:
    """Zero-pad the channel axis of [N,C,H,W]."""
    c = x.shape[1]
    out = np.pad(x.data, ((0, 0), (before, after), (0, 0), (0, 0)))
    return _make(out, (x,), lambda g: (g[:, before : before + c],), "channel_pad")


# ---------------------------------------------------------------- loss


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    labels = labels.astype(np.int64)
    n = logits.shape[0]
    lsm = log_softmax(logits.data.astype(np.float64))
    loss = -lsm[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(lsm)
        p[np.arange(n), labels] -= 1.0
        return ((p * (float(g) / n)).astype(DTYPE),)

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), bw, "cross_entropy")
