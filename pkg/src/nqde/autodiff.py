"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Operations record a node on the active :class:`Tape` whenever one of their
inputs requires a gradient. :func:`backward` sweeps the tape in reverse and
accumulates gradients into leaf tensors.

Example::

    w = Tensor(np.eye(2), requires_grad=True)
    with Tape():
        loss = sum_all(matmul(w, w))
        backward(loss)
    w.grad
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "current_tape",
    "record",
    "matmul",
    "affine",
    "relu",
    "concat",
    "reshape",
    "add",
    "scale",
    "lincomb",
    "bmv",
    "square",
    "sum_all",
    "sum_axis",
    "log_softmax_nll",
    "backward",
]


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


_local = threading.local()


def current_tape() -> Optional["Tape"]:
    return getattr(_local, "tape", None)


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Leaves are tensors created directly by the user. Results of recorded
    operations carry ``node_id``, the index of the producing node on the
    tape that was active when they were computed.
    """

    __slots__ = ("data", "requires_grad", "node_id", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, node_id: Optional[int] = None):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.node_id = node_id
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, c):
        if isinstance(c, Tensor):
            raise TypeError("elementwise tensor products are not supported; use scale()")
        return scale(self, float(c))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    kind: str
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    shape: tuple[int, ...]
    scope: Optional[int] = None


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so inputs always precede the
    nodes that consume them. ``scope`` groups consecutive nodes (one group per
    vector-field evaluation in the solvers) so the reverse sweep can report how
    many groups it replayed.
    """

    nodes: list[_Node] = field(default_factory=list)
    next_id: int = 0
    _scope: Optional[int] = None
    _next_scope: int = 0
    replayed_scopes: int = 0
    _previous: list = field(default_factory=list, repr=False)

    def __enter__(self) -> "Tape":
        self._previous.append(current_tape())
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._previous.pop()

    def append(self, node: _Node) -> int:
        node.scope = self._scope
        self.nodes.append(node)
        self.next_id += 1
        return self.next_id - 1

    @contextlib.contextmanager
    def scope(self) -> Iterator[int]:
        """Tag every node recorded inside the block with a fresh scope id."""
        outer = self._scope
        self._scope = self._next_scope
        self._next_scope += 1
        try:
            yield self._scope
        finally:
            self._scope = outer

    def __len__(self) -> int:
        return len(self.nodes)


def record(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    """Wrap ``out`` as a tensor and, if needed, put a node on the active tape.

    ``vjp`` maps the upstream gradient to one gradient per input (``None`` for
    inputs that do not need one).
    """
    tape = current_tape()
    needs = any(t.requires_grad for t in inputs)
    if tape is None or not needs:
        return Tensor(out)
    node_id = tape.append(_Node(kind, tuple(inputs), vjp, out.shape))
    return Tensor(out, requires_grad=True, node_id=node_id)


# ---------------------------------------------------------------- operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return (
            g @ B.T if a.requires_grad else None,
            A.T @ g if b.requires_grad else None,
        )

    return record("matmul", (a, b), A @ B, vjp)


def affine(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``W x + b`` for a vector ``x``, or row-wise for a batch ``x`` of shape (batch, n)."""
    x, W = _as_tensor(x), _as_tensor(W)
    X, M = x.data, W.data
    if M.ndim != 2 or X.ndim not in (1, 2) or X.shape[-1] != M.shape[1]:
        raise ShapeError(f"affine: weight {W.shape} cannot act on input {x.shape}")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (M.shape[0],):
            raise ShapeError(f"affine: bias {b.shape} does not match weight {W.shape}")
    out = X @ M.T
    if b is not None:
        out = out + b.data
    inputs = (x, W) if b is None else (x, W, b)

    def vjp(g):
        gx = g @ M if x.requires_grad else None
        if W.requires_grad:
            gW = np.outer(g, X) if X.ndim == 1 else g.T @ X
        else:
            gW = None
        grads = [gx, gW]
        if b is not None:
            grads.append((g if g.ndim == 1 else g.sum(axis=0)) if b.requires_grad else None)
        return grads

    return record("affine", inputs, out, vjp)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0.0
    return record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    ndim = xs[0].data.ndim
    ax = axis % ndim
    for x in xs[1:]:
        if x.data.ndim != ndim or any(
            x.shape[d] != xs[0].shape[d] for d in range(ndim) if d != ax
        ):
            raise ShapeError(f"concat: ragged shapes {[t.shape for t in xs]} along axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return [
            np.take(g, np.arange(lo, hi), axis=ax) if x.requires_grad else None
            for x, lo, hi in zip(xs, bounds[:-1], bounds[1:])
        ]

    return record("concat", xs, np.concatenate([x.data for x in xs], axis=ax), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    return record("scale", (x,), c * x.data, lambda g: (c * g,))


def lincomb(base: Tensor, terms: Sequence[tuple[float, Tensor]]) -> Tensor:
    """``base + sum(c_i * t_i)`` as a single tape node.

    Used for Runge-Kutta stage combinations.
    """
    base = _as_tensor(base)
    coeffs = [float(c) for c, _ in terms]
    ts = [_as_tensor(t) for _, t in terms]
    out = base.data.copy()
    for c, t in zip(coeffs, ts):
        if t.shape != base.shape:
            raise ShapeError(f"lincomb: term {t.shape} does not match base {base.shape}")
        if c != 0.0:
            out += c * t.data

    def vjp(g):
        return [g] + [c * g if t.requires_grad else None for c, t in zip(coeffs, ts)]

    return record("lincomb", [base, *ts], out, vjp)


def bmv(M: Tensor, v: Tensor) -> Tensor:
    """Batched matrix-vector product: (batch, m, n) x (batch, n) -> (batch, m)."""
    M, v = _as_tensor(M), _as_tensor(v)
    A, x = M.data, v.data
    if A.ndim != 3 or x.ndim != 2 or A.shape[0] != x.shape[0] or A.shape[2] != x.shape[1]:
        raise ShapeError(f"bmv: cannot apply {M.shape} to {v.shape}")
    out = np.einsum("bij,bj->bi", A, x)

    def vjp(g):
        return (
            g[:, :, None] * x[:, None, :] if M.requires_grad else None,
            np.einsum("bij,bi->bj", A, g) if v.requires_grad else None,
        )

    return record("bmv", (M, v), out, vjp)


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    X = x.data
    return record("square", (x,), X * X, lambda g: (2.0 * X * g,))


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return record("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.full(shape, float(g)),))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    ax = axis % len(shape)
    return record(
        "sum_axis",
        (x,),
        x.data.sum(axis=ax),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),),
    )


def log_softmax_nll(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    logits = _as_tensor(logits)
    Z = logits.data
    if Z.ndim != 2 or Z.shape[1] < 2:
        raise ShapeError(f"log_softmax_nll expects (batch, m>=2) logits, got {logits.shape}")
    y = np.asarray(targets, dtype=np.int64).reshape(-1)
    if y.shape[0] != Z.shape[0]:
        raise ShapeError("log_softmax_nll: one target per row required")
    if np.any(y < 0) or np.any(y >= Z.shape[1]):
        raise ValueError(f"targets must lie in [0, {Z.shape[1]})")
    shifted = Z - Z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - log_norm
    n = Z.shape[0]
    out = np.asarray(-logp[np.arange(n), y].mean())

    def vjp(g):
        grad = np.exp(logp)
        grad[np.arange(n), y] -= 1.0
        return (float(g) * grad / n,)

    return record("nll", (logits,), out, vjp)


# ------------------------------------------------------------------- reverse


def backward(loss: Tensor, tape: Optional[Tape] = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns ``{leaf: grad}``.

    Every node recorded up to ``loss`` is replayed, including ones the loss
    does not depend on (they receive a zero upstream gradient). Gradients are
    added to ``leaf.grad``, so repeated calls accumulate.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else current_tape()
    leaves: dict[int, Tensor] = {}
    if loss.node_id is None:
        if loss.requires_grad:
            loss.grad = (0.0 if loss.grad is None else loss.grad) + np.ones(loss.shape)
            leaves[id(loss)] = loss
        return {t: t.grad for t in leaves.values()}
    if tape is None or loss.node_id >= len(tape.nodes):
        raise RuntimeError("loss was not recorded on the given tape")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    scopes = set()
    for nid in range(loss.node_id, -1, -1):
        node = tape.nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            g = np.zeros(node.shape)
        if node.scope is not None:
            scopes.add(node.scope)
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.node_id is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
                leaves[id(t)] = t
            elif t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + gi
            else:
                grads[t.node_id] = gi
    tape.replayed_scopes = len(scopes)
    return {t: t.grad for t in leaves.values()}
