"""Immutable float64 tensors and the small differentiable operator set the
recurrent models need.

Gradients are computed in reverse mode from an explicit tape. Every operator
records one :class:`TapeNode` holding the activations its adjoint needs, and
:meth:`Tape.backward` walks those nodes in strict reverse order.

Convolution here is cross-correlation (no kernel flip) with zero "same"
padding. Leading batch axes are allowed on every operator: a frame is
``C x M x N`` and a batch of frames is ``B x C x M x N``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PROB_EPS = 1e-7

_state = threading.local()


class Tensor:
    """A read-only n-dimensional array of finite float64 values."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        _check_finite(arr)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal constructor for freshly computed arrays (no copy).
        arr = np.asarray(arr, dtype=np.float64)
        _check_finite(arr)
        arr.flags.writeable = False
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = False
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError("non-finite value produced in tensor operation")


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class TapeNode:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: tuple
    adjoint: Callable[..., tuple]


@dataclass
class Tape:
    """Records operations performed inside a ``with`` block.

    Only operations that touch a tracked tensor (a parameter or an earlier
    output on this tape) are recorded.
    """

    nodes: list[TapeNode] = field(default_factory=list)
    _produced: set[int] = field(default_factory=set)
    _done: bool = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._produced

    def record(self, op, inputs, output, saved, adjoint) -> None:
        if self._done:
            raise RuntimeError("tape already consumed by backward()")
        self.nodes.append(TapeNode(op, inputs, output, saved, adjoint))
        self._produced.add(id(output))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(.) to every tracked tensor.

        Returns a map from ``id(tensor)`` to gradient arrays. Use
        :meth:`gradient` for a parameter-ordered view.
        """
        if self._done:
            raise RuntimeError("backward() called twice on one tape")
        if loss.size != 1:
            raise ValueError("loss must be a scalar tensor")
        self._done = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            gout = grads.pop(id(node.output), None)
            if gout is None:
                continue
            in_grads = node.adjoint(gout, *node.saved)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not self.tracks(t):
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
            node.saved = ()
        return grads

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients for ``params`` in order; unused parameters get zeros."""
        grads = self.backward(loss)
        return [
            np.array(grads[id(p)], dtype=np.float64) if id(p) in grads else np.zeros(p.shape)
            for p in params
        ]


class no_tape:
    """Context in which nothing is recorded, even inside an enclosing tape."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def _active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, saved: tuple, adjoint) -> Tensor:
    result = Tensor._wrap(out)
    tape = _active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(op, inputs, result, saved, adjoint)
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_compatible(a: Tensor, b: Tensor, op: str) -> None:
    # Broadcasting is allowed only when one operand already has the result shape.
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None
    if out != a.shape and out != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Element-wise operators
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_compatible(a, b, "add")
    sa, sb = a.shape, b.shape

    def adjoint(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit("add", (a, b), a.data + b.data, (), adjoint)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_compatible(a, b, "sub")
    sa, sb = a.shape, b.shape

    def adjoint(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _emit("sub", (a, b), a.data - b.data, (), adjoint)


def hadamard(a, b) -> Tensor:
    """Element-wise product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_compatible(a, b, "hadamard")

    def adjoint(g, x, y):
        return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

    return _emit("hadamard", (a, b), a.data * b.data, (a.data, b.data), adjoint)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * c, (), lambda g: (g * c,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # Split by sign so exp never overflows.
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def adjoint(g, y):
        return (g * y * (1.0 - y),)

    return _emit("sigmoid", (x,), out, (out,), adjoint)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def adjoint(g, y):
        return (g * (1.0 - y * y),)

    return _emit("tanh", (x,), out, (out,), adjoint)


def total(x) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    x = as_tensor(x)
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum()), (), lambda g: (np.broadcast_to(g, shape).copy(),))


# ---------------------------------------------------------------------------
# Structural operators
# ---------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def adjoint(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _emit("concat", tensors, out, (), adjoint)


def take(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    """Slice ``[start:stop]`` along ``axis``."""
    x = as_tensor(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def adjoint(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit("take", (x,), x.data[index].copy(), (), adjoint)


def split(x: Tensor, parts: int, axis: int) -> list[Tensor]:
    n = x.shape[axis]
    if n % parts:
        raise ValueError(f"cannot split extent {n} into {parts} parts")
    step = n // parts
    return [take(x, i * step, (i + 1) * step, axis) for i in range(parts)]


def copy(x: Tensor) -> Tensor:
    """A fresh value equal to ``x``; gradients pass straight through."""
    x = as_tensor(x)
    return _emit("copy", (x,), x.data.copy(), (), lambda g: (g,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    out = x.data.reshape(tuple(shape)).copy()
    return _emit("reshape", (x,), out, (), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# Linear maps
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """``x @ weight.T`` for ``x`` of shape (..., in) and ``weight`` (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} vs weight {weight.shape}")

    def adjoint(g, xd, wd):
        gx = g @ wd
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        return gx, gw

    return _emit("linear", (x, weight), x.data @ weight.data.T, (x.data, weight.data), adjoint)


def _im2col(xp: np.ndarray, k: int, m: int, n: int) -> np.ndarray:
    # xp: (B, C, m+k-1, n+k-1) -> (B*m*n, C*k*k), columns ordered (c, u, v).
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, C, m, n, k, k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * m * n, c * k * k)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-size 2-D cross-correlation with zero padding.

    ``x`` is ``C_in x M x N`` or ``B x C_in x M x N``; ``kernel`` is
    ``C_out x C_in x k x k`` with odd ``k``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"conv2d: kernel must be C_out x C_in x k x k, got {kernel.shape}")
    c_out, c_in, k, _ = kernel.shape
    if k % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {k}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or xd.shape[1] != c_in:
        raise ValueError(f"conv2d: input {x.shape} does not match kernel {kernel.shape}")
    b, _, m, n = xd.shape
    p = (k - 1) // 2
    w2 = kernel.data.reshape(c_out, c_in * k * k)
    if k == 1:
        cols = xd.transpose(0, 2, 3, 1).reshape(b * m * n, c_in)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = _im2col(xp, k, m, n)
    out = (cols @ w2.T).reshape(b, m, n, c_out).transpose(0, 3, 1, 2)
    inputs: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ValueError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
        out = out + bias.data[None, :, None, None]
        inputs = inputs + (bias,)
    out = np.ascontiguousarray(out[0] if unbatched else out)

    def adjoint(g, cols, w2):
        g4 = g[None] if unbatched else g
        gflat = g4.transpose(0, 2, 3, 1).reshape(b * m * n, c_out)
        gk = (gflat.T @ cols).reshape(c_out, c_in, k, k)
        gcols = gflat @ w2
        if k == 1:
            gx = gcols.reshape(b, m, n, c_in).transpose(0, 3, 1, 2)
        else:
            gc = gcols.reshape(b, m, n, c_in, k, k)
            gxp = np.zeros((b, c_in, m + 2 * p, n + 2 * p))
            for u in range(k):
                for v in range(k):
                    gxp[:, :, u:u + m, v:v + n] += gc[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + m, p:p + n]
        gx = np.ascontiguousarray(gx[0] if unbatched else gx)
        grads = (gx, gk)
        if bias is not None:
            grads = grads + (g4.sum(axis=(0, 2, 3)),)
        return grads

    return _emit("conv2d", inputs, out, (cols, w2), adjoint)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def bce_loss(pred: Tensor, target, eps: float = PROB_EPS) -> Tensor:
    """Summed binary cross-entropy ``-sum(T log P + (1-T) log(1-P))``.

    Predictions are clamped to ``[eps, 1-eps]``; the clamp passes gradients
    straight through.
    """
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ValueError(f"bce_loss: shape mismatch {pred.shape} vs {t.shape}")
    p = np.clip(pred.data, eps, 1.0 - eps)
    value = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum()

    def adjoint(g, p, t):
        return (g * (p - t) / (p * (1.0 - p)),)

    return _emit("bce_loss", (pred,), np.asarray(value), (p, t), adjoint)
