"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors are rank-0..3 arrays of 64-bit floats. The graph is built
define-by-run: every primitive that sees a gradient-requiring input records
its parents and a backward closure on the output tensor. Calling
:func:`grad` (or ``ComputationGraph.backward``) replays the graph once in
reverse topological order and accumulates gradients into ``Tensor.grad``.

A graph and its tensors belong to one thread between construction and
backward; parameter *values* may be shared read-only across threads.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 3


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradError(RuntimeError):
    """Raised when a gradient request is malformed (e.g. non-scalar loss)."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that suspends graph recording on this thread."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """Dense float64 array participating in a differentiation graph.

    ``data`` is a row-major numpy array of rank <= 3. ``grad`` is populated
    lazily by the backward pass and always matches ``data``'s shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}: shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Copy of the underlying data."""
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64), requires_grad, name)


def _result(data, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result, recording the graph edge only when needed."""
    # numpy collapses many 0-d results to immutable scalars; keep ndarray.
    if not isinstance(data, np.ndarray):
        data = np.asarray(data, dtype=np.float64)
    if data.ndim > MAX_RANK:
        raise ShapeError(f"result rank {data.ndim} exceeds maximum {MAX_RANK}")
    requires = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = requires
    out.name = None
    if requires:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _reduce_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise binary ops ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to_shape(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to_shape(g, b.shape))

    return _result(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to_shape(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to_shape(-g, b.shape))

    return _result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to_shape(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to_shape(g * a.data, b.shape))

    return _result(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div shape mismatch: {a.shape} vs {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to_shape(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to_shape(-g * a.data / (b.data * b.data), b.shape))

    return _result(data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _result(-a.data, (a,), backward)


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _result(data, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects rank 2, got shape {a.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.T)

    return _result(a.data.T.copy(), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.shape))

    return _result(data.copy(), (a,), backward)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0 (rows)."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of empty tensor list")
    data = np.concatenate([t.data for t in tensors], axis=0)
    sizes = [t.shape[0] for t in tensors]

    def backward(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                _accumulate(t, g[offset:offset + n])
            offset += n

    return _result(data, tensors, backward)


def gather_rows(a, indices) -> Tensor:
    """Select rows (axis 0) by index; the mask/select primitive.

    Gradient scatter-adds back into the source, so repeated indices
    accumulate.
    """
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows expects a flat index list, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows index out of range for axis of extent {a.shape[0]}")
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            _accumulate(a, acc)

    return _result(data.copy(), (a,), backward)


# -- reductions ------------------------------------------------------------


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                _accumulate(a, np.broadcast_to(g, a.shape).copy())
            else:
                ge = g if keepdims else np.expand_dims(g, axis)
                _accumulate(a, np.broadcast_to(ge, a.shape).copy())

    return _result(np.asarray(data), (a,), backward)


def tmean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.shape[axis]

    def backward(g):
        if a.requires_grad:
            if axis is None:
                _accumulate(a, np.broadcast_to(g / count, a.shape).copy())
            else:
                ge = g if keepdims else np.expand_dims(g, axis)
                _accumulate(a, np.broadcast_to(ge / count, a.shape).copy())

    return _result(np.asarray(data), (a,), backward)


# -- nonlinearities --------------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * data)

    return _result(data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return _result(np.log(a.data), (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * 0.5 / data)

    return _result(data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data > 0.0))

    return _result(data, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * (1.0 - data * data))

    return _result(data, (a,), backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # Branch on sign so neither exp overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = _sigmoid_np(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * data * (1.0 - data))

    return _result(data, (a,), backward)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * _sigmoid_np(a.data))

    return _result(data, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through inside the range."""
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * ((a.data >= lo) & (a.data <= hi)))

    return _result(data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax; each slice along ``axis`` sums to 1."""
    a = as_tensor(a)
    if a.ndim == 0:
        raise ShapeError("softmax of a scalar is undefined")
    ax = axis if axis >= 0 else a.ndim + axis
    if ax < 0 or ax >= a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * data).sum(axis=ax, keepdims=True)
            _accumulate(a, data * (g - inner))

    return _result(data, (a,), backward)


LAYER_NORM_EPS = 1e-5


def layer_norm(a, gain, bias) -> Tensor:
    """Normalize over the last axis, then scale by gain and shift by bias.

    Rows with zero variance collapse to the bias vector (epsilon-guarded).
    """
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    dim = a.shape[-1] if a.ndim else 0
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise ShapeError(
            f"layer_norm gain/bias shapes {gain.shape}/{bias.shape} do not match last extent {dim}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        if a.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(a, inv * (dxhat - m1 - xhat * m2))
        lead = tuple(range(a.ndim - 1))
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=lead))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=lead))

    return _result(data, (a, gain, bias), backward)


# -- graph & backward -------------------------------------------------------


class ComputationGraph:
    """Topologically ordered record of the primitives reaching a root tensor.

    Built by depth-first traversal of the define-by-run parent links; every
    node appears after all of its inputs, and ``backward`` visits each node
    exactly once in reverse order.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationGraph":
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
        return cls(order)

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        root.grad = np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(root: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar root."""
    if root.data.size != 1:
        raise GradError(f"backward root must be scalar, got shape {root.shape}")
    ComputationGraph.from_root(root).backward(root)


def grad(loss: Tensor, params: dict[str, Tensor] | Iterable[Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss for each parameter.

    Parameters not reached by the graph get a zero gradient. Keys are the
    tensors' ``name`` attributes (falling back to ``param<i>``).
    """
    if isinstance(params, dict):
        items = list(params.items())
    else:
        items = [(p.name or f"param{i}", p) for i, p in enumerate(params)]
    if loss.data.size != 1:
        raise GradError(f"grad requires a scalar loss, got shape {loss.shape}")
    for _, p in items:
        p.grad = None
    backward(loss)
    return {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in items
    }
