"""Minimal reverse-mode autodiff over dense 2-D float matrices.

Just enough machinery to differentiate an unrolled soft-clustering loop and
a small MLP: every value is a 2-D numpy array (float32 or float64), every
operation records a backward closure, and ``backward`` runs one reverse
topological sweep from a scalar loss.

Graphs are per-forward-pass and thread-confined: dropping the node
references after ``backward`` frees the tape. Distinct graphs may be built
concurrently; there is no shared mutable state.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

F32 = np.float32
F64 = np.float64

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def as_matrix(data, dtype=F64, checked: bool = True) -> np.ndarray:
    """Coerce ``data`` to a 2-D float array, validating in checked mode.

    Scalars become 1x1, flat sequences become a single row. Checked mode
    rejects NaN/Inf entries; unchecked trusts the caller (hot paths).
    """
    a = np.asarray(data, dtype=dtype)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got {a.ndim}")
    if checked and not np.all(np.isfinite(a)):
        raise NumericError("matrix contains NaN or Inf")
    return a


class Node:
    """One tape entry: a value plus the rule to push gradients to parents.

    ``_backward(g)`` returns one gradient array (or None) per parent.
    Gradients accumulate across consumers, so a node used twice receives
    the sum of both contributions.
    """

    __slots__ = ("value", "parents", "_backward", "grad", "requires_grad", "_backward_ran")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Node", ...] = (),
        backward: Callable | None = None,
        requires_grad: bool = False,
    ):
        self.value = value
        self.parents = parents
        self._backward = backward
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._backward_ran = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, dtype={self.value.dtype}, requires_grad={self.requires_grad})"

    # Light operator sugar; the free functions are the primary API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(data, dtype, checked: bool) -> np.ndarray:
    if dtype is None:
        dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in _DTYPES else F64
    return as_matrix(data, dtype=dtype, checked=checked)


def leaf(data, dtype=None, checked: bool = True) -> Node:
    """Differentiable input node (gradients will be accumulated here)."""
    return Node(_coerce(data, dtype, checked), requires_grad=True)


def constant(data, dtype=None, checked: bool = True) -> Node:
    """Non-differentiable node; backward never descends into it."""
    return Node(_coerce(data, dtype, checked), requires_grad=False)


def _check_same_shape(a: Node, b: Node, op: str):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "add")
    return Node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "sub")
    return Node(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "mul")
    return Node(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def div(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "div")
    out = a.value / b.value
    return Node(out, (a, b), lambda g: (g / b.value, -g * out / b.value))


def square(a: Node) -> Node:
    return Node(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,))


def sqrt(a: Node) -> Node:
    out = np.sqrt(a.value)
    # Floor the saved output so the rule stays finite at exact zeros, where
    # the true derivative of the composed squared distance is zero anyway.
    safe = np.maximum(out, np.finfo(out.dtype).tiny ** 0.5)
    return Node(out, (a,), lambda g: (0.5 * g / safe,))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return Node(out, (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    return Node(np.log(a.value), (a,), lambda g: (g / a.value,))


def relu(a: Node) -> Node:
    # np.maximum (not where) so NaN propagates instead of masking to zero
    mask = a.value > 0
    return Node(np.maximum(a.value, 0.0), (a,), lambda g: (g * mask,))


def scalar_mul(a: Node, s: float) -> Node:
    s = a.value.dtype.type(s)
    return Node(a.value * s, (a,), lambda g: (g * s,))


def matmul(a: Node, b: Node) -> Node:
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: inner dims differ {a.value.shape} vs {b.value.shape}")
    return Node(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(a: Node) -> Node:
    return Node(a.value.T.copy(), (a,), lambda g: (g.T,))


def sum_rows(a: Node) -> Node:
    """Per-row sum: (m, n) -> (m, 1)."""
    return Node(a.value.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, a.value.shape).copy(),))


def sum_cols(a: Node) -> Node:
    """Per-column sum: (m, n) -> (1, n)."""
    return Node(a.value.sum(axis=0, keepdims=True), (a,), lambda g: (np.broadcast_to(g, a.value.shape).copy(),))


def broadcast_row(a: Node, m: int) -> Node:
    """Tile a (1, n) row down to (m, n)."""
    if a.value.shape[0] != 1:
        raise ShapeError(f"broadcast_row: expected a single row, got {a.value.shape}")
    return Node(np.broadcast_to(a.value, (m, a.value.shape[1])).copy(), (a,), lambda g: (g.sum(axis=0, keepdims=True),))


def broadcast_col(a: Node, n: int) -> Node:
    """Tile an (m, 1) column out to (m, n)."""
    if a.value.shape[1] != 1:
        raise ShapeError(f"broadcast_col: expected a single column, got {a.value.shape}")
    return Node(np.broadcast_to(a.value, (a.value.shape[0], n)).copy(), (a,), lambda g: (g.sum(axis=1, keepdims=True),))


def reshape(a: Node, rows: int, cols: int) -> Node:
    if rows * cols != a.value.size:
        raise ShapeError(f"reshape: cannot view {a.value.shape} as ({rows}, {cols})")
    shape = a.value.shape
    return Node(a.value.reshape(rows, cols).copy(), (a,), lambda g: (g.reshape(shape),))


def pad_rows(a: Node, count: int) -> Node:
    """Append ``count`` zero rows."""
    if count < 0:
        raise ParameterError("pad_rows: count must be >= 0")
    if count == 0:
        return a
    m, n = a.value.shape
    out = np.zeros((m + count, n), dtype=a.value.dtype)
    out[:m] = a.value
    return Node(out, (a,), lambda g: (g[:m].copy(),))


def crop_rows(a: Node, rows: int) -> Node:
    """Keep the first ``rows`` rows, dropping the rest."""
    m, n = a.value.shape
    if not 0 < rows <= m:
        raise ShapeError(f"crop_rows: cannot keep {rows} of {m} rows")
    if rows == m:
        return a

    def backward(g):
        full = np.zeros((m, n), dtype=g.dtype)
        full[:rows] = g
        return (full,)

    return Node(a.value[:rows].copy(), (a,), backward)


def row_softmax(x: Node, temperature: float) -> Node:
    """Row-wise softmax of x / temperature, max-subtracted for stability.

    Backward uses the softmax Jacobian: dx = y * (g - sum(g*y)) / tau.
    """
    if temperature <= 0:
        raise ParameterError(f"row_softmax: temperature must be > 0, got {temperature}")
    v = x.value
    shifted = (v - v.max(axis=1, keepdims=True)) / v.dtype.type(temperature)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - inner) / v.dtype.type(temperature),)

    return Node(y, (x,), backward)


def sum_all(a: Node) -> Node:
    """Sum every entry to a 1x1 node (composition of the axis sums)."""
    return sum_cols(sum_rows(a))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> dict[Node, np.ndarray]:
    """Propagate d(loss)/d(node) to every reachable differentiable node.

    Returns a map from node to accumulated gradient and mirrors each
    gradient onto ``node.grad``. Calling twice on the same loss raises:
    the graph is a one-shot tape.
    """
    if loss.value.shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {loss.value.shape}")
    if loss._backward_ran:
        raise RuntimeError("backward already ran for this loss node")
    loss._backward_ran = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1), dtype=loss.value.dtype)}
    result: dict[Node, np.ndarray] = {}

    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        result[node] = g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return result


def zero_grads(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.grad = None
