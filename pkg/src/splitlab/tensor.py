"""Dense float64 arrays with tape-based reverse-mode differentiation.

Values are plain ``numpy.ndarray`` objects (row-major, float64). A
:class:`Tensor` wraps one value and records how it was produced so that
:meth:`Tensor.backward` can accumulate gradients for every leaf.

Row-vector convention throughout: a linear map is ``x @ W``.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "ContractError",
    "Tensor",
    "as_tensor",
    "matmul",
    "softmax_rows",
    "finite_diff_grad",
    "glorot_init",
    "make_rng",
    "broken_adjoint",
]


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator backed by Philox, a counter-based bit generator.

    Philox streams are bit-identical across platforms for a given seed.
    Extra integers select independent sub-streams of the same seed.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def glorot_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ContractError(f"glorot_init needs positive shape, got ({rows}, {cols})")
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes, broadcasting leading axes.

    Single-row or single-column operands are padded to two so that every
    product goes through the same BLAS kernel. Row ``i`` of the result then
    depends only on row ``i`` of ``a`` bit-for-bit, whatever the row count.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    one_row = a.shape[-2] == 1
    one_col = b.shape[-1] == 1
    if one_row:
        a = np.concatenate([a, a], axis=-2)
    if one_col:
        b = np.concatenate([b, b], axis=-1)
    out = np.matmul(a, b)
    if one_row:
        out = out[..., :1, :]
    if one_col:
        out = out[..., :1]
    return np.ascontiguousarray(out)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with per-row max subtraction."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - np.max(m, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def finite_diff_grad(f: Callable[[np.ndarray], float], at: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one entry at a time."""
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    x = np.array(at, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        g[k] = (fp - fm) / (2.0 * h)
    return grad


_FLIP_RELU_ADJOINT = False


@contextlib.contextmanager
def broken_adjoint():
    """Flip the sign of the ReLU adjoint while active (gradient-check control)."""
    global _FLIP_RELU_ADJOINT
    prev = _FLIP_RELU_ADJOINT
    _FLIP_RELU_ADJOINT = True
    try:
        yield
    finally:
        _FLIP_RELU_ADJOINT = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


_ids = itertools.count()


class Tensor:
    """A value on the tape.

    ``grad`` is allocated lazily on the first backward pass that reaches
    the tensor and has the value's shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "name")
    # make ndarray <op> Tensor defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in _parents)
        self.node_id = next(_ids)
        # each parent is (tensor, fn mapping output grad -> contribution)
        self._parents = tuple(_parents) if self.requires_grad else ()
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for parent, _ in node._parents:
                if parent.requires_grad and parent.node_id not in seen:
                    stack.append((parent, False))
        grads = {self.node_id: np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, fn in node._parents:
                if not parent.requires_grad:
                    continue
                contrib = fn(g)
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + contrib
                else:
                    grads[parent.node_id] = contrib

    # arithmetic -----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        out = self.data + other.data
        return Tensor(out, _parents=(
            (self, lambda g, s=self.shape: _unbroadcast(g, s)),
            (other, lambda g, s=other.shape: _unbroadcast(g, s)),
        ))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        out = self.data - other.data
        return Tensor(out, _parents=(
            (self, lambda g, s=self.shape: _unbroadcast(g, s)),
            (other, lambda g, s=other.shape: -_unbroadcast(g, s)),
        ))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor(a * b, _parents=(
            (self, lambda g: _unbroadcast(g * b, a.shape)),
            (other, lambda g: _unbroadcast(g * a, b.shape)),
        ))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor(a / b, _parents=(
            (self, lambda g: _unbroadcast(g / b, a.shape)),
            (other, lambda g: _unbroadcast(-g * a / (b * b), b.shape)),
        ))

    def __neg__(self) -> "Tensor":
        return Tensor(-self.data, _parents=((self, lambda g: -g),))

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        out = matmul(a, b)

        def grad_a(g):
            return _unbroadcast(matmul(g, np.swapaxes(b, -1, -2)), a.shape)

        def grad_b(g):
            return _unbroadcast(matmul(np.swapaxes(a, -1, -2), g), b.shape)

        return Tensor(out, _parents=((self, grad_a), (other, grad_b)))

    def __pow__(self, p: float) -> "Tensor":
        a = self.data
        return Tensor(a**p, _parents=((self, lambda g: g * p * a ** (p - 1)),))

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape

        def grad(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return full

        return Tensor(self.data[idx], _parents=((self, grad),))

    # shape ----------------------------------------------------------------

    def transpose(self) -> "Tensor":
        return Tensor(np.swapaxes(self.data, -1, -2), _parents=((self, lambda g: np.swapaxes(g, -1, -2)),))

    def reshape(self, *shape) -> "Tensor":
        orig = self.shape
        return Tensor(self.data.reshape(*shape), _parents=((self, lambda g: g.reshape(orig)),))

    # reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def grad(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=((self, grad),))

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # elementwise nonlinearities -------------------------------------------

    def relu(self) -> "Tensor":
        a = self.data
        mask = a > 0

        def grad(g):
            out = g * mask
            return -out if _FLIP_RELU_ADJOINT else out

        return Tensor(np.where(mask, a, 0.0), _parents=((self, grad),))

    def exp(self) -> "Tensor":
        e = np.exp(self.data)
        return Tensor(e, _parents=((self, lambda g: g * e),))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor(np.log(a), _parents=((self, lambda g: g / a),))

    def sqrt(self) -> "Tensor":
        r = np.sqrt(self.data)
        return Tensor(r, _parents=((self, lambda g: g * 0.5 / r),))

    def tanh(self) -> "Tensor":
        t = np.tanh(self.data)
        return Tensor(t, _parents=((self, lambda g: g * (1.0 - t * t)),))

    def softmax(self) -> "Tensor":
        s = softmax_rows(self.data)

        def grad(g):
            return s * (g - np.sum(g * s, axis=-1, keepdims=True))

        return Tensor(s, _parents=((self, grad),))

    def log_softmax(self) -> "Tensor":
        a = self.data
        shifted = a - np.max(a, axis=-1, keepdims=True)
        lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
        out = shifted - lse
        s = np.exp(out)

        def grad(g):
            return g - s * np.sum(g, axis=-1, keepdims=True)

        return Tensor(out, _parents=((self, grad),))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=axis)

    def slicer(lo, hi):
        def grad(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]
        return grad

    return Tensor(out, _parents=tuple(
        (p, slicer(bounds[k], bounds[k + 1])) for k, p in enumerate(parts)
    ))


def embed(table: Tensor, tokens: np.ndarray) -> Tensor:
    """Gather rows of ``table`` at integer ``tokens`` (any shape)."""
    tokens = np.asarray(tokens)
    rows = table.shape[0]

    def grad(g):
        full = np.zeros_like(table.data)
        np.add.at(full, tokens.reshape(-1), g.reshape(-1, table.shape[1]))
        return full

    if tokens.size and (tokens.min() < 0 or tokens.max() >= rows):
        raise ContractError(f"token id out of range [0, {rows})")
    return Tensor(table.data[tokens], _parents=((table, grad),))


def parameters_grads(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
