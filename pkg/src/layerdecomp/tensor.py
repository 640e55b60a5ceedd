"""Dense tensors with tape-based reverse-mode differentiation.

Arrays are numpy; every differentiable op appends a node to the active
thread's tape. ``backward`` walks the tape in reverse, accumulates
gradients into leaf tensors and clears the tape.

Precision is a process-wide option: 64-bit by default (gradient checks),
32-bit for training (``set_default_dtype(np.float32)``).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ParameterError, ShapeError

_DTYPE = np.float64
_DEBUG = False
_local = threading.local()


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ParameterError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_debug(flag: bool) -> None:
    """Enable finiteness checks on every op output."""
    global _DEBUG
    _DEBUG = bool(flag)


@dataclass
class Node:
    inputs: tuple
    output: "Tensor"
    backward: Callable


@dataclass
class Tape:
    nodes: list = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def use_tape(tape: Tape):
    prev = getattr(_local, "tape", None)
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = prev


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_leaf", "_retain", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._leaf = True
        self._retain = False
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() on tensor of shape {self.shape}")

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
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


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result and record it on the tape when any input needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._retain = False
    out.name = None
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {getattr(backward, '__qualname__', 'op')}")
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        current_tape().record(Node(tuple(inputs), out, backward))
    else:
        out.requires_grad = False
        out._leaf = True
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    tape = current_tape() if tape is None else tape
    seed = np.ones_like(loss.data)
    if loss._leaf:
        _accumulate_leaf(loss, seed)
        tape.clear()
        return
    grads = {id(loss): seed}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        if node.output._retain:
            node.output.grad = g if node.output.grad is None else node.output.grad + g
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._leaf:
                _accumulate_leaf(inp, gi)
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    tape.clear()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _make(a.data**p, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def bw(g):
        return (g * sig * (1.0 + a.data * (1.0 - sig)),)

    return _make(out, (a,), bw)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, (a,), bw)


# reductions and shape ops


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def take_rows(table, ids) -> Tensor:
    """Gather rows ``table[ids]`` (embedding lookup); ids may be any int array."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _make(out, (table,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


# linear algebra and normalization


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def rms_norm(x, gain, eps: float) -> Tensor:
    """``x / sqrt(mean(x**2, -1) + eps) * gain`` over the last axis."""
    if eps < 0:
        raise ParameterError(f"rms_norm eps must be >= 0, got {eps}")
    x, gain = as_tensor(x), as_tensor(gain)
    d = x.shape[-1]
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True) + eps
    if eps == 0:
        # 0/0 for an all-zero row; treat it as zero output
        ms = np.where(ms == 0, 1.0, ms)
    inv = 1.0 / np.sqrt(ms)
    normed = x.data * inv
    out = normed * gain.data

    def bw(g):
        gx = gn = None
        if gain.requires_grad:
            gn = _unbroadcast(g * normed, gain.shape)
        if x.requires_grad:
            gy = g * gain.data
            gx = inv * (gy - normed * np.mean(gy * normed, axis=-1, keepdims=True))
        return gx, gn

    if np.ndim(gain.data) and gain.shape[-1] not in (1, d):
        raise ShapeError(f"gain shape {gain.shape} does not broadcast over last axis {d}")
    return _make(out, (x, gain), bw)


def mse(pred, target) -> Tensor:
    diff = sub(pred, target)
    return mean(mul(diff, diff))
