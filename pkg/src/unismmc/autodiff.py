"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The graph is a dynamic tape: every operation returns a new ``Tensor`` that
remembers its parent tensors and a closure routing the output gradient back
to them. ``backward`` materializes the topological order once, seeds the
scalar loss with gradient 1 and visits each interior node exactly once.

Conventions that keep the engine auditable:

- everything is float64; scalars are 0-d tensors;
- no broadcasting except adding a trailing bias vector to a matrix;
- leaf tensors (no parents) may take part in many graphs — gradients
  accumulate into ``grad`` until the caller resets it — while interior
  tensors belong to the single graph that produced them and are consumed
  by one backward pass (a second backward raises ``GraphStateError``);
- an operation whose inputs all have ``requires_grad=False`` returns a
  constant with no parents, so detached subgraphs cost nothing and
  contribute exactly zero gradient.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import DegenerateInputError, GraphStateError, ShapeError

__all__ = [
    "NORM_FLOOR",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "cosine_similarity",
    "detach",
    "exp",
    "log",
    "log_softmax",
    "matmul",
    "mul",
    "relu",
    "row",
    "scale",
    "sum",
]

# Below this norm a representation carries no usable direction; treated as a bug.
NORM_FLOOR = 1e-12

_node_counter = itertools.count()


class Tensor:
    """A float64 array plus its position in the computation graph."""

    __slots__ = ("values", "requires_grad", "grad", "node_id", "_parents", "_grad_fn", "_consumed")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = next(_node_counter)
        self._parents = ()
        self._grad_fn = None
        self._consumed = False

    @property
    def shape(self):
        return self.values.shape

    def item(self):
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, node_id={self.node_id})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add(self, Tensor(-np.asarray(other, dtype=np.float64)))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values, parents, grad_fn):
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.values.T)
        if b.requires_grad:
            b._accumulate(a.values.T @ g)

    return _result(a.values @ b.values, (a, b), grad_fn)


def add(a, b):
    """Elementwise addition; the only broadcast allowed is a trailing bias vector."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        bias = False
    elif a.values.ndim == 2 and b.values.ndim == 1 and b.shape[0] == a.shape[1]:
        bias = True
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}")

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0) if bias else g)

    return _result(a.values + b.values, (a, b), grad_fn)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} * {b.shape}")

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(g * b.values)
        if b.requires_grad:
            b._accumulate(g * a.values)

    return _result(a.values * b.values, (a, b), grad_fn)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def grad_fn(g):
        a._accumulate(g * c)

    return _result(a.values * c, (a,), grad_fn)


def relu(a):
    a = as_tensor(a)
    mask = a.values > 0

    def grad_fn(g):
        a._accumulate(g * mask)

    return _result(np.where(mask, a.values, 0.0), (a,), grad_fn)


def sum(a, axis=None):
    a = as_tensor(a)
    if axis is not None and not -a.values.ndim <= axis < a.values.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for shape {a.shape}")

    def grad_fn(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _result(a.values.sum(axis=axis), (a,), grad_fn)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    first = tensors[0]
    if not 0 <= axis < first.values.ndim:
        raise ShapeError(f"concat: axis {axis} out of range for shape {first.shape}")
    for t in tensors[1:]:
        ok = t.values.ndim == first.values.ndim and all(
            t.shape[d] == first.shape[d] for d in range(first.values.ndim) if d != axis
        )
        if not ok:
            raise ShapeError(f"concat: incompatible shapes {first.shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                t._accumulate(g[tuple(index)])

    return _result(np.concatenate([t.values for t in tensors], axis=axis), tensors, grad_fn)


def log_softmax(a):
    """Row-wise log softmax of an n x K matrix, stabilized by max subtraction."""
    a = as_tensor(a)
    if a.values.ndim != 2 or a.shape[1] < 2:
        raise ShapeError(f"log_softmax: need an n x K matrix with K >= 2, got {a.shape}")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    out_values = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def grad_fn(g):
        a._accumulate(g - np.exp(out_values) * g.sum(axis=1, keepdims=True))

    return _result(out_values, (a,), grad_fn)


def exp(a):
    a = as_tensor(a)
    out_values = np.exp(a.values)

    def grad_fn(g):
        a._accumulate(g * out_values)

    return _result(out_values, (a,), grad_fn)


def log(a):
    a = as_tensor(a)
    if np.any(a.values <= 0):
        raise ValueError("log: all values must be positive")

    def grad_fn(g):
        a._accumulate(g / a.values)

    return _result(np.log(a.values), (a,), grad_fn)


def row(a, i):
    """Select row i of a matrix as a 1-d tensor; backward scatters into that row."""
    a = as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeError(f"row: need a matrix, got shape {a.shape}")
    if not 0 <= i < a.shape[0]:
        raise ShapeError(f"row: index {i} out of range for shape {a.shape}")

    def grad_fn(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.values)
        a.grad[i] += g

    return _result(a.values[i].copy(), (a,), grad_fn)


def cosine_similarity(a, b, index=None):
    """Cosine of the angle between two vectors, as a 0-d tensor.

    `index` is a caller-supplied sample label used in the degenerate-input
    message when a norm falls below NORM_FLOOR.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 1 or b.values.ndim != 1 or a.shape != b.shape or a.shape[0] < 1:
        raise ShapeError(f"cosine_similarity: need equal-length vectors, got {a.shape} and {b.shape}")
    norm_a = float(np.linalg.norm(a.values))
    norm_b = float(np.linalg.norm(b.values))
    if norm_a < NORM_FLOOR or norm_b < NORM_FLOOR:
        where = "" if index is None else f" (sample index {index})"
        raise DegenerateInputError(f"cosine_similarity: representation with near-zero norm{where}")
    denom = norm_a * norm_b
    cos_value = float(a.values @ b.values) / denom

    def grad_fn(g):
        g = float(g)
        if a.requires_grad:
            a._accumulate(g * (b.values / denom - cos_value * a.values / (norm_a * norm_a)))
        if b.requires_grad:
            b._accumulate(g * (a.values / denom - cos_value * b.values / (norm_b * norm_b)))

    return _result(np.float64(cos_value), (a, b), grad_fn)


def detach(a):
    """Copy of `a` that is a constant: backward propagates nothing through it."""
    a = as_tensor(a)
    return Tensor(a.values.copy())


def backward(loss):
    """Reverse-mode sweep from a scalar loss; fills `grad` on every
    requires_grad tensor reachable from it. Each graph supports one sweep;
    leaves keep accumulating across graphs until the caller resets them."""
    loss = as_tensor(loss)
    if loss.shape != ():
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")

    # Iterative postorder DFS; nodes are marked when expanded (not when pushed)
    # so a parent shared by several consumers is ordered before all of them.
    ordered = []
    seen = set()
    stack = [(loss, False)]
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

    for node in ordered:
        if node._parents and node._consumed:
            raise GraphStateError(
                "backward: this graph was already differentiated; rebuild it before calling again"
            )

    loss._accumulate(np.ones((), dtype=np.float64))
    for node in reversed(ordered):
        if node._grad_fn is not None:
            node._grad_fn(node.grad)
        if node._parents:
            node._consumed = True
