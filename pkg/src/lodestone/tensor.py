"""Dense arrays with reverse-mode differentiation on a recorded tape.

A :class:`Tensor` wraps a numpy array (float32 or float64) plus an optional
gradient buffer. While a :class:`ComputeGraph` is active (``with graph:``),
every primitive applied to a tensor that requires gradients is recorded on
the tape; :func:`forward_backward` then replays the tape in reverse and
accumulates gradients into the ``requires_grad`` leaves.

Every primitive fails fast, naming itself, if it produces a non-finite
value -- in the forward pass and in the backward pass alike.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "NumericsError",
    "Tensor",
    "ComputeGraph",
    "forward_backward",
    "current_graph",
    "matmul",
    "add",
    "mul",
    "neg",
    "relu",
    "gelu",
    "softmax",
    "layer_norm",
    "gather_rows",
    "concat",
    "transpose",
    "reduce_sum",
    "reduce_mean",
    "power",
    "exp",
    "log",
    "sin",
    "cos",
]

DTYPES = {"float32": np.float32, "float64": np.float64}

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NumericsError(RuntimeError):
    """Non-finite value or structural misuse inside the numerics layer."""


class Tensor:
    """A dense real-valued array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar (delegates to the recorded primitives) --------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


def as_tensor(value, dtype=None) -> Tensor:
    """Wrap a scalar/array as a constant Tensor (no gradient)."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class _Node:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        # backward: grad_out -> tuple of grads aligned with inputs (None ok)
        self.backward = backward


class ComputeGraph:
    """Ordered record of primitive applications; valid topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "ComputeGraph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _GRAPH_STACK.pop()
        assert popped is self

    def _record(self, node: _Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def is_leaf(self, t: Tensor) -> bool:
        return id(t) not in self._produced

    def __len__(self) -> int:
        return len(self.nodes)


_GRAPH_STACK: list[ComputeGraph] = []


def current_graph() -> ComputeGraph | None:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def _check_finite(arr: np.ndarray, op_name: str, phase: str = "forward") -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite value produced by '{op_name}' during {phase}")


def _apply(name: str, out_data: np.ndarray, inputs: tuple, backward) -> Tensor:
    """Finish a primitive: finiteness check, then record on any active tape."""
    _check_finite(out_data, name)
    graph = current_graph()
    track = graph is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    out = Tensor(out_data, requires_grad=track)
    if track:
        graph._record(_Node(name, inputs, out, backward))
    return out


def forward_backward(graph: ComputeGraph, loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    The tape is replayed once, in reverse execution order. Gradients of
    intermediate (non-leaf) tensors are discarded. Accumulates into any
    pre-existing leaf ``grad`` buffers, so repeated calls sum gradients.
    """
    if not isinstance(loss, Tensor):
        raise NumericsError("loss must be a Tensor")
    if loss.size != 1:
        raise NumericsError(f"loss must be scalar, got shape {loss.shape}")
    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g_out = acc.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.backward(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            _check_finite(g, node.name, phase="backward")
            key = id(t)
            if key in acc:
                acc[key] = acc[key] + g
            else:
                acc[key] = g
    # Deliver to leaves; seen requires_grad leaves with no incoming gradient
    # get explicit zeros so callers can rely on `.grad` being populated.
    leaves: dict[int, Tensor] = {}
    for node in graph.nodes:
        for t in node.inputs:
            if isinstance(t, Tensor) and t.requires_grad and graph.is_leaf(t):
                leaves[id(t)] = t
    for key, t in leaves.items():
        g = acc.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        if t.grad is None:
            t.grad = np.array(g, copy=True)
        else:
            t.grad = t.grad + g


# ---------------------------------------------------------------------------
# Broadcasting helpers
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise NumericsError("matmul operands must have rank >= 2")
    if a.ndim != b.ndim or (a.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise NumericsError(
            f"matmul batch dims must match exactly, got {a.shape} @ {b.shape}"
        )
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return ga, gb

    return _apply("matmul", out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply("add", out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _apply("mul", out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (-g,)

    return _apply("neg", -a.data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)

    def backward(g):
        return (g * (a.data > 0),)

    return _apply("relu", out, (a,), backward)


def gelu(a) -> Tensor:
    """Exact (erf-form) Gaussian error linear unit."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (cdf + a.data * pdf),)

    return _apply("gelu", out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _apply("softmax", out, (a,), backward)


def layer_norm(a, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = as_tensor(a)
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_std * (g - gm - xhat * gx),)

    return _apply("layer_norm", xhat, (a,), backward)


def gather_rows(a, indices) -> Tensor:
    """Row lookup along axis 0 (token-embedding lookup and row selection)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise NumericsError("gather_rows indices must be one-dimensional")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise NumericsError(
            f"gather_rows index out of range [0, {a.shape[0]}): "
            f"min={idx.min() if idx.size else 0}, max={idx.max() if idx.size else 0}"
        )
    out = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _apply("gather_rows", out, (a,), backward)


def slice_(a, key) -> Tensor:
    """Basic (non-fancy) indexing; each selected element appears once."""
    a = as_tensor(a)
    out = a.data[key]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return (ga,)

    return _apply("slice", np.ascontiguousarray(out), (a,), backward)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(p) for p in parts]
    if not ts:
        raise NumericsError("concat of an empty sequence")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _apply("concat", out, tuple(ts), backward)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _apply("transpose", out, (a,), backward)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _apply("reduce_sum", np.asarray(out), (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, a.shape) / count).astype(a.dtype, copy=False),)

    return _apply("reduce_mean", np.asarray(out), (a,), backward)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        out = a.data**p

    def backward(g):
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            return (g * p * a.data ** (p - 1.0),)

    return _apply("power", out, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _apply("exp", out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)

    def backward(g):
        with np.errstate(divide="ignore", over="ignore"):
            return (g / a.data,)

    return _apply("log", out, (a,), backward)


def sin(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * np.cos(a.data),)

    return _apply("sin", np.sin(a.data), (a,), backward)


def cos(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * -np.sin(a.data),)

    return _apply("cos", np.cos(a.data), (a,), backward)
