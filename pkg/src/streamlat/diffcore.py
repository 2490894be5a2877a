"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Provides exactly the primitives the attention math needs: matrix product,
trailing-dimension broadcast elementwise ops, stabilized softmax/sigmoid,
reductions, indexing/stacking, and a central-finite-difference gradient
checker. The computation graph is rebuilt on every forward pass (dynamic
tape); a backward pass from a scalar loss replays the tape in reverse
topological order exactly once per node.

Everything is double precision. The ``clamp_min`` primitive exists to bound
denominators in downstream attention recursions; its gradient flows only
through the unclamped branch.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DiffArray",
    "ComputationTape",
    "DimensionError",
    "ProbeError",
    "array",
    "parameter",
    "constant",
    "op_node",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "sigmoid",
    "exp",
    "log",
    "relu",
    "power",
    "clamp_min",
    "softmax",
    "log_softmax",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "take_rows",
    "cumsum",
    "grad_check",
]

# Forward sigmoid never returns exactly 0: floored at the smallest normal
# double so later divisions stay finite.
SIGMOID_FLOOR = float(np.finfo(np.float64).tiny)


class DimensionError(ValueError):
    """Shapes do not line up for the requested operation."""


class ProbeError(RuntimeError):
    """A finite-difference probe produced a non-finite function value."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph construction (pure inference)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _as_values(data) -> np.ndarray:
    out = np.ascontiguousarray(data, dtype=np.float64)
    return out


class DiffArray:
    """A float64 array plus the bookkeeping needed for reverse-mode gradients.

    ``values`` and ``grad`` always share a shape; ``grad`` is ``None`` until a
    backward pass touches this node. Leaf arrays created with
    ``requires_grad=True`` accumulate gradients across backward passes until
    ``zero_grad`` is called, so batches can sum utterance gradients in a fixed
    order.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = _as_values(values)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[DiffArray, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def T(self) -> "DiffArray":
        return transpose(self)

    def item(self) -> float:
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def backward(self) -> None:
        """Run reverse-mode accumulation from this scalar node."""
        if self.size != 1:
            raise ValueError(f"backward requires a scalar root, got shape {self.shape}")
        self.accumulate_grad(np.ones_like(self.values))
        ComputationTape(self).replay_backward()

    # Operator sugar; scalars go through `scale`/constant shift.
    def __add__(self, other):
        if isinstance(other, DiffArray):
            return add(self, other)
        return add(self, constant(np.float64(other)))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, DiffArray):
            return sub(self, other)
        return sub(self, constant(np.float64(other)))

    def __rsub__(self, other):
        return sub(constant(np.float64(other)), self)

    def __mul__(self, other):
        if isinstance(other, DiffArray):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, DiffArray):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self):
        return f"DiffArray(shape={self.shape}, requires_grad={self.requires_grad})"


class ComputationTape:
    """Topologically ordered record of the ops that produced a root node.

    Creation order of the graph already respects dependencies, but the tape is
    derived from the root by an iterative depth-first walk so that only
    reachable nodes are replayed. Reverse replay visits each node exactly once.
    """

    def __init__(self, root: DiffArray):
        order: list[DiffArray] = []
        visited: set[int] = set()
        stack: list[tuple[DiffArray, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.nodes = order  # parents always precede children

    def replay_backward(self) -> None:
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def array(values, requires_grad: bool = False) -> DiffArray:
    return DiffArray(values, requires_grad=requires_grad)


def parameter(values) -> DiffArray:
    return DiffArray(values, requires_grad=True)


def constant(values) -> DiffArray:
    return DiffArray(values, requires_grad=False)


def op_node(values: np.ndarray, parents: Sequence[DiffArray],
            backward: Callable[[np.ndarray], None]) -> DiffArray:
    """Build a graph node; collapses to a plain array under ``no_grad``.

    ``backward`` receives the node's output gradient and must accumulate into
    the parents via ``accumulate_grad``. This is the extension point used by
    higher-level modules to register fused ops with hand-derived gradients.
    """
    if grad_enabled() and any(p.requires_grad for p in parents):
        out = DiffArray(values, requires_grad=True)
        out._parents = tuple(parents)
        out._backward = backward
        return out
    return DiffArray(values)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_values(a: DiffArray, b: DiffArray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


def add(a: DiffArray, b: DiffArray) -> DiffArray:
    _broadcast_values(a, b, "add")
    out = a.values + b.values

    def backward(g):
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(_unbroadcast(g, b.shape))

    return op_node(out, (a, b), backward)


def sub(a: DiffArray, b: DiffArray) -> DiffArray:
    _broadcast_values(a, b, "sub")
    out = a.values - b.values

    def backward(g):
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(_unbroadcast(-g, b.shape))

    return op_node(out, (a, b), backward)


def mul(a: DiffArray, b: DiffArray) -> DiffArray:
    _broadcast_values(a, b, "mul")
    out = a.values * b.values

    def backward(g):
        a.accumulate_grad(_unbroadcast(g * b.values, a.shape))
        b.accumulate_grad(_unbroadcast(g * a.values, b.shape))

    return op_node(out, (a, b), backward)


def div(a: DiffArray, b: DiffArray) -> DiffArray:
    _broadcast_values(a, b, "div")
    out = a.values / b.values

    def backward(g):
        a.accumulate_grad(_unbroadcast(g / b.values, a.shape))
        b.accumulate_grad(_unbroadcast(-g * a.values / (b.values * b.values), b.shape))

    return op_node(out, (a, b), backward)


def scale(a: DiffArray, c: float) -> DiffArray:
    c = float(c)
    out = a.values * c

    def backward(g):
        a.accumulate_grad(g * c)

    return op_node(out, (a,), backward)


def neg(a: DiffArray) -> DiffArray:
    return scale(a, -1.0)


def sigmoid(a: DiffArray) -> DiffArray:
    """Overflow-safe logistic; output floored at the smallest normal double."""
    x = a.values
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    np.maximum(out, SIGMOID_FLOOR, out=out)

    def backward(g):
        a.accumulate_grad(g * out * (1.0 - out))

    return op_node(out, (a,), backward)


def exp(a: DiffArray) -> DiffArray:
    out = np.exp(a.values)

    def backward(g):
        a.accumulate_grad(g * out)

    return op_node(out, (a,), backward)


def log(a: DiffArray) -> DiffArray:
    out = np.log(a.values)

    def backward(g):
        a.accumulate_grad(g / a.values)

    return op_node(out, (a,), backward)


def relu(a: DiffArray) -> DiffArray:
    out = np.maximum(a.values, 0.0)

    def backward(g):
        a.accumulate_grad(g * (a.values > 0.0))

    return op_node(out, (a,), backward)


def power(a: DiffArray, p: float) -> DiffArray:
    p = float(p)
    out = a.values ** p

    def backward(g):
        a.accumulate_grad(g * p * a.values ** (p - 1.0))

    return op_node(out, (a,), backward)


def clamp_min(a: DiffArray, floor: float) -> DiffArray:
    """max(x, floor); gradient passes through the unclamped branch only."""
    floor = float(floor)
    out = np.maximum(a.values, floor)

    def backward(g):
        a.accumulate_grad(g * (a.values > floor))

    return op_node(out, (a,), backward)


def softmax(a: DiffArray, axis: int = -1) -> DiffArray:
    """Max-subtraction stabilized softmax along one axis."""
    x = a.values
    if x.shape[axis] == 0:
        raise DimensionError("softmax: empty axis")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        a.accumulate_grad(out * (g - inner))

    return op_node(out, (a,), backward)


def log_softmax(a: DiffArray, axis: int = -1) -> DiffArray:
    x = a.values
    if x.shape[axis] == 0:
        raise DimensionError("log_softmax: empty axis")
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def backward(g):
        a.accumulate_grad(g - soft * g.sum(axis=axis, keepdims=True))

    return op_node(out, (a,), backward)


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
        )
    out = a.values @ b.values

    def backward(g):
        a.accumulate_grad(g @ b.values.T)
        b.accumulate_grad(a.values.T @ g)

    return op_node(out, (a, b), backward)


def transpose(a: DiffArray) -> DiffArray:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    out = np.ascontiguousarray(a.values.T)

    def backward(g):
        a.accumulate_grad(g.T)

    return op_node(out, (a,), backward)


def reshape(a: DiffArray, shape: tuple[int, ...]) -> DiffArray:
    out = a.values.reshape(shape)

    def backward(g):
        a.accumulate_grad(g.reshape(a.shape))

    return op_node(out, (a,), backward)


def getitem(a: DiffArray, key) -> DiffArray:
    """Basic (int/slice) indexing; gradient scatters back into place."""
    out = np.ascontiguousarray(a.values[key])

    def backward(g):
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.values)
        buf[key] += g
        a.accumulate_grad(buf)

    return op_node(out, (a,), backward)


def concat(parts: Iterable[DiffArray], axis: int = 0) -> DiffArray:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat: no arrays given")
    out = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, n in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            p.accumulate_grad(g[tuple(idx)])
            offset += n

    return op_node(out, tuple(parts), backward)


def take_rows(a: DiffArray, indices) -> DiffArray:
    """Row gather (embedding lookup); repeated rows sum their gradients."""
    idx = np.asarray(indices, dtype=np.intp)
    out = a.values[idx]

    def backward(g):
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.values)
        np.add.at(buf, idx, g)
        a.accumulate_grad(buf)

    return op_node(out, (a,), backward)


def cumsum(a: DiffArray, axis: int) -> DiffArray:
    out = np.cumsum(a.values, axis=axis)

    def backward(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        a.accumulate_grad(rev)

    return op_node(out, (a,), backward)


def sum_(a: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.shape).copy())

    return op_node(out, (a,), backward)


def mean(a: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def grad_check(f: Callable[[], DiffArray], wrt: Sequence[DiffArray],
               step: float = 1e-5) -> float:
    """Max relative error of analytic vs central-difference gradients.

    ``f`` is re-evaluated with each coordinate of each ``wrt`` leaf nudged by
    ``±step``; it must be deterministic (fix any noise source before calling).
    Relative error per coordinate is |analytic - central| / max(|analytic|,
    |central|, 1e-8).
    """
    for p in wrt:
        p.zero_grad()
    out = f()
    if out.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.values)
                for p in wrt]

    def probe() -> float:
        with no_grad():
            val = f().item()
        if not np.isfinite(val):
            raise ProbeError("non-finite function value at finite-difference probe")
        return val

    worst = 0.0
    for p, g in zip(wrt, analytic):
        flat = p.values.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = probe()
            flat[i] = orig - step
            f_minus = probe()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            err = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
