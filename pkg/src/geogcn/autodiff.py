"""Reverse-mode automatic differentiation over dense float64 arrays.

A DiffArray wraps a numpy array plus the recipe for propagating gradients
to its parents. Graphs are built eagerly by the op functions below and
torn down by backward(), which runs a topological sweep from a scalar
output. Gradients accumulate additively into leaf nodes only, so calling
backward() twice doubles leaf gradients, matching the usual gradient
accumulation idiom.

Every op returns a fresh DiffArray; nothing here mutates its inputs.
Broadcasting follows numpy semantics, with gradients summed back to the
parent's shape.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

from .errors import InvalidArgumentError


class DiffArray:
    """A float64 ndarray with an optional gradient and a backward recipe.

    Attributes:
        values: the wrapped ndarray (always float64).
        grad: accumulated gradient, same shape as values, or None. Only
            leaf nodes (requires_grad=True, no parents) receive gradients.
        requires_grad: whether gradients should flow to or through this
            node. Derived nodes inherit it from their parents.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    # Keep numpy from absorbing us element-wise in mixed expressions like
    # ndarray * DiffArray; with this set, numpy defers to our __rmul__ etc.
    __array_ufunc__ = None

    def __init__(self, values, requires_grad=False, _parents=(), _backward=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"DiffArray(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's grad.

        self must hold a single scalar. Intermediate nodes never retain
        gradients, so repeated calls add leaf gradients without double
        counting interior state.
        """
        if self.values.size != 1:
            raise InvalidArgumentError(
                f"backward() needs a scalar output, got shape {self.values.shape}")
        if not self.requires_grad:
            return
        order = _toposort(self)
        flowing = {id(self): np.ones_like(self.values)}
        for node in order:
            grad = flowing.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None:
                # Leaf: this is where gradients persist.
                if node.grad is None:
                    node.grad = np.zeros_like(node.values)
                node.grad += grad
                continue
            for parent, pgrad in zip(node._parents, node._backward(grad)):
                if pgrad is None or not parent.requires_grad:
                    continue
                held = flowing.get(id(parent))
                flowing[id(parent)] = pgrad if held is None else held + pgrad

    # Operator sugar; all semantics live in the module-level functions.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


def as_diff(x) -> DiffArray:
    """Wrap x in a constant DiffArray; DiffArrays pass through unchanged."""
    if isinstance(x, DiffArray):
        return x
    return DiffArray(x)


def _toposort(root: DiffArray) -> list[DiffArray]:
    """Reverse-topological order (root first), restricted to grad-requiring nodes."""
    ordered: list[DiffArray] = []
    seen: set[int] = set()
    stack: list[tuple[DiffArray, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            ordered.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    ordered.reverse()
    return ordered


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over the axes numpy broadcasting expanded, back to shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeezed = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeezed:
        grad = grad.sum(axis=squeezed, keepdims=True)
    return grad.reshape(shape)


def _make(values, parents, backward) -> DiffArray:
    out = DiffArray(values, _parents=parents, _backward=backward)
    if not out.requires_grad:
        # Constant result: drop the graph so memory is freed eagerly.
        out._parents = ()
        out._backward = None
    return out


def add(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    out_values = a.values + b.values

    def backward(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)

    return _make(out_values, (a, b), backward)


def sub(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    out_values = a.values - b.values

    def backward(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(-g, b.values.shape)

    return _make(out_values, (a, b), backward)


def mul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    out_values = a.values * b.values

    def backward(g):
        return (_unbroadcast(g * b.values, a.values.shape),
                _unbroadcast(g * a.values, b.values.shape))

    return _make(out_values, (a, b), backward)


def div(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    out_values = a.values / b.values

    def backward(g):
        return (_unbroadcast(g / b.values, a.values.shape),
                _unbroadcast(-g * a.values / (b.values * b.values), b.values.shape))

    return _make(out_values, (a, b), backward)


def power(a, exponent: float) -> DiffArray:
    """Elementwise a**exponent for a scalar exponent."""
    a = as_diff(a)
    exponent = float(exponent)
    out_values = a.values ** exponent

    def backward(g):
        return (g * exponent * a.values ** (exponent - 1.0),)

    return _make(out_values, (a,), backward)


def exp(a) -> DiffArray:
    a = as_diff(a)
    out_values = np.exp(a.values)

    def backward(g):
        return (g * out_values,)

    return _make(out_values, (a,), backward)


def sqrt(a) -> DiffArray:
    a = as_diff(a)
    out_values = np.sqrt(a.values)

    def backward(g):
        return (g * 0.5 / out_values,)

    return _make(out_values, (a,), backward)


def matmul(a, b) -> DiffArray:
    """2-D matrix product. Higher-rank inputs must be reshaped first."""
    a, b = as_diff(a), as_diff(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise InvalidArgumentError(
            f"matmul expects 2-D operands, got {a.values.shape} @ {b.values.shape}")
    out_values = a.values @ b.values

    def backward(g):
        return g @ b.values.T, a.values.T @ g

    return _make(out_values, (a, b), backward)


def sum_along(a, axis: int | None = None, keepdims: bool = False) -> DiffArray:
    a = as_diff(a)
    out_values = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.values.shape).copy(),)
        expanded = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(expanded, a.values.shape).copy(),)

    return _make(out_values, (a,), backward)


def mean_all(a) -> DiffArray:
    a = as_diff(a)
    return mul(sum_along(a), 1.0 / a.values.size)


def minimum(a, b) -> DiffArray:
    """Elementwise minimum; on ties the gradient routes to the first input."""
    a, b = as_diff(a), as_diff(b)
    take_a = a.values <= b.values
    out_values = np.where(take_a, a.values, b.values)

    def backward(g):
        return (_unbroadcast(np.where(take_a, g, 0.0), a.values.shape),
                _unbroadcast(np.where(take_a, 0.0, g), b.values.shape))

    return _make(out_values, (a, b), backward)


def leaky_relu(a, negative_slope: float = 0.1) -> DiffArray:
    a = as_diff(a)
    scale = np.where(a.values >= 0.0, 1.0, negative_slope)
    out_values = a.values * scale

    def backward(g):
        return (g * scale,)

    return _make(out_values, (a,), backward)


def reshape(a, shape) -> DiffArray:
    a = as_diff(a)
    out_values = a.values.reshape(shape)

    def backward(g):
        return (g.reshape(a.values.shape),)

    return _make(out_values, (a,), backward)


def concat(parts, axis: int = -1) -> DiffArray:
    parts = [as_diff(p) for p in parts]
    if not parts:
        raise InvalidArgumentError("concat needs at least one input")
    out_values = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.values.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out_values, tuple(parts), backward)


def slice_rows(a, start: int, stop: int) -> DiffArray:
    """Contiguous row slice a[start:stop] along the first axis."""
    a = as_diff(a)
    out_values = a.values[start:stop]

    def backward(g):
        full = np.zeros_like(a.values)
        full[start:stop] = g
        return (full,)

    return _make(out_values, (a,), backward)


class ScatterPlan:
    """Precomputed transpose of a fixed gather, for fast repeated backward.

    Gathering rows with an index array is cheap forward but its backward
    is a scatter-add, which numpy only offers as the slow np.add.at. For
    index arrays reused across many backward passes (static graphs), a
    sparse matrix applied once per pass is far faster.
    """

    def __init__(self, n_rows: int, indices: np.ndarray):
        indices = np.asarray(indices)
        flat = indices.reshape(-1)
        if flat.size and (flat.min() < 0 or flat.max() >= n_rows):
            raise InvalidArgumentError("scatter indices out of range")
        self.n_rows = int(n_rows)
        self.indices_shape = indices.shape
        self._matrix = sparse.csr_matrix(
            (np.ones(flat.size), (flat, np.arange(flat.size))),
            shape=(self.n_rows, flat.size))

    def scatter(self, grad: np.ndarray) -> np.ndarray:
        lead = int(np.prod(self.indices_shape, dtype=np.int64))
        tail = grad.shape[len(self.indices_shape):]
        flat = grad.reshape(lead, -1)
        out = self._matrix @ flat
        return np.asarray(out).reshape((self.n_rows,) + tail)


def gather_rows(a, indices, plan: ScatterPlan | None = None) -> DiffArray:
    """a[indices] along the first axis; indices may have any shape.

    Pass a ScatterPlan built from the same indices when the gather sits
    inside a loop; backward then costs one sparse matmul instead of an
    np.add.at scatter.
    """
    a = as_diff(a)
    indices = np.asarray(indices)
    if plan is not None and (plan.n_rows != a.values.shape[0]
                             or plan.indices_shape != indices.shape):
        raise InvalidArgumentError("scatter plan does not match this gather")
    out_values = a.values[indices]

    def backward(g):
        if plan is not None:
            return (plan.scatter(g),)
        full = np.zeros_like(a.values)
        np.add.at(full, indices.reshape(-1),
                  g.reshape((-1,) + a.values.shape[1:]))
        return (full,)

    return _make(out_values, (a,), backward)


def max_over_axis(a, axis: int) -> DiffArray:
    """Max-reduce one axis; the gradient routes to the first argmax on ties."""
    a = as_diff(a)
    out_values = a.values.max(axis=axis)
    argmax = np.expand_dims(a.values.argmax(axis=axis), axis)

    def backward(g):
        full = np.zeros_like(a.values)
        np.put_along_axis(full, argmax, np.expand_dims(g, axis), axis)
        return (full,)

    return _make(out_values, (a,), backward)


def normalize_rows(a, eps: float = 1e-12) -> DiffArray:
    """Unit-normalize along the last axis; rows shorter than eps divide by eps.

    The eps floor keeps both the value and the gradient finite for
    near-zero rows instead of emitting NaN.
    """
    a = as_diff(a)
    norms = np.linalg.norm(a.values, axis=-1, keepdims=True)
    safe = np.maximum(norms, eps)
    out_values = a.values / safe

    def backward(g):
        inner = (g * out_values).sum(axis=-1, keepdims=True)
        return ((g - inner * out_values) / safe,)

    return _make(out_values, (a,), backward)


def cross_rows(a, b) -> DiffArray:
    """3-vector cross product along the last axis."""
    a, b = as_diff(a), as_diff(b)
    if a.values.shape[-1] != 3 or b.values.shape[-1] != 3:
        raise InvalidArgumentError("cross_rows needs 3-vectors on the last axis")
    out_values = np.cross(a.values, b.values)

    def backward(g):
        return (_unbroadcast(np.cross(b.values, g), a.values.shape),
                _unbroadcast(np.cross(g, a.values), b.values.shape))

    return _make(out_values, (a, b), backward)


def detach(a) -> DiffArray:
    """A constant view of a's values; gradients do not flow past it."""
    a = as_diff(a)
    return DiffArray(a.values)
