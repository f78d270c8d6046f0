"""Minimal reverse-mode autodiff over numpy float64 arrays.

A Tensor wraps an ndarray; every differentiable op records a node on the
active Tape (if one is open and any input requires grad). Backward walks
the tape once in reverse, accumulating gradients additively so parameters
shared between passes (e.g. base weights used in both update and generate
mode) receive the sum of both contributions.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "parameter",
    "matmul",
    "concat",
    "softmax",
    "log_softmax",
    "sigmoid",
    "logsigmoid",
    "tanh",
    "exp",
    "log",
    "power",
    "transpose",
    "reshape",
    "tsum",
    "tmean",
    "embedding",
    "take_rows",
    "backward",
]


class Tape:
    """Ordered record of differentiable ops. Single-writer, consumed by backward."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.closed = False

    def record(self, t: "Tensor"):
        if self.closed:
            raise RuntimeError("tape already consumed by backward()")
        self.nodes.append(t)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


_TAPES: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach grad.shape from shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    # make ndarray <op> Tensor defer to the reflected Tensor methods
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return _binary(self, other, np.add, lambda g, a, b: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, np.subtract, lambda g, a, b: (g, -g))

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        return _binary(self, other, np.multiply, lambda g, a, b: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(
            self, other, np.divide, lambda g, a, b: (g / b, -g * a / (b * b))
        )

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_as_tensor(other), self)

    def __getitem__(self, idx):
        out = _make(self.data[idx], (self,))
        if out._parents:

            def bwd(g, idx=idx, shape=self.data.shape):
                full = np.zeros(shape)
                np.add.at(full, idx, g)
                return (full,)

            out._backward = bwd
            _record(out)
        return out


def tensor(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    """Build an op result; parents kept only when recording is active."""
    out = Tensor(data)
    if _active_tape() is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
    return out


def _record(out: Tensor):
    if out._parents:
        _active_tape().record(out)


def _binary(a, b, fwd, grads) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(fwd(a.data, b.data), (a, b))
    if out._parents:

        def bwd(g):
            ga, gb = grads(g, a.data, b.data)
            return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

        out._backward = bwd
        _record(out)
    return out


def _unary(a, fwd, grad) -> Tensor:
    a = _as_tensor(a)
    y = fwd(a.data)
    out = _make(y, (a,))
    if out._parents:
        out._backward = lambda g: (grad(g, a.data, y),)
        _record(out)
    return out


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional leading batch dims (must match exactly)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions differ: {a.data.shape} vs {b.data.shape}"
        )
    out = _make(np.matmul(a.data, b.data), (a, b))
    if out._parents:

        def bwd(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

        out._backward = bwd
        _record(out)
    return out


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    inv = tuple(np.argsort(axes))
    out = _make(np.transpose(a.data, axes), (a,))
    if out._parents:
        out._backward = lambda g: (np.transpose(g, inv),)
        _record(out)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out = _make(a.data.reshape(shape), (a,))
    if out._parents:
        out._backward = lambda g: (g.reshape(a.data.shape),)
        _record(out)
    return out


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    if out._parents:
        sizes = [p.data.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]
        out._backward = lambda g: tuple(np.split(g, splits, axis=axis))
        _record(out)
    return out


# -- reductions --------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if out._parents:

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.data.shape).copy(),)

        out._backward = bwd
        _record(out)
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- pointwise ---------------------------------------------------------------


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda g, x, y: g * y)


def log(a) -> Tensor:
    return _unary(a, np.log, lambda g, x, y: g / x)


def tanh(a) -> Tensor:
    return _unary(a, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def sigmoid(a) -> Tensor:
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary(a, fwd, lambda g, x, y: g * y * (1.0 - y))


def logsigmoid(a) -> Tensor:
    """log(sigmoid(x)) computed stably as min(x,0) - log1p(exp(-|x|))."""

    def fwd(x):
        return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

    def grad(g, x, y):
        # d/dx log sigmoid(x) = 1 - sigmoid(x) = sigmoid(-x)
        return g * np.exp(fwd(-x))

    return _unary(a, fwd, grad)


def power(a, p: float) -> Tensor:
    return _unary(a, lambda x: x**p, lambda g, x, y: g * p * x ** (p - 1.0))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted stable softmax along axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, (a,))
    if out._parents:

        def bwd(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            return (y * (g - dot),)

        out._backward = bwd
        _record(out)
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = _make(y, (a,))
    if out._parents:

        def bwd(g):
            return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

        out._backward = bwd
        _record(out)
    return out


# -- indexing ----------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: table[ids]. Backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    out = _make(table.data[ids], (table,))
    if out._parents:

        def bwd(g):
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            return (full,)

        out._backward = bwd
        _record(out)
    return out


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """a[i, idx[i]] for a 2-D tensor; used for picking target-token log-probs."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    out = _make(a.data[rows, idx], (a,))
    if out._parents:

        def bwd(g):
            full = np.zeros_like(a.data)
            full[rows, idx] = g
            return (full,)

        out._backward = bwd
        _record(out)
    return out


# -- backward ----------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep over the tape from a scalar loss.

    Returns a map id(tensor) -> gradient for every leaf tensor with
    requires_grad; the same arrays are left on tensor.grad. The tape is
    consumed and cannot be reused.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if tape.closed:
        raise RuntimeError("tape already consumed")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if not parent._parents:
                leaves[key] = parent

    tape.closed = True
    tape.nodes.clear()
    result = {}
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        result[key] = leaf.grad
    return result
