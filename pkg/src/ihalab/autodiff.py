"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every operation returns a :class:`Var` that remembers its operands and a
closure mapping the output adjoint to operand adjoints.  :func:`backward`
orders the graph topologically once and visits each node exactly once, so a
value that feeds several consumers accumulates all of their contributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import kernels
from .errors import DegenerateRowError, NonFiniteError, ShapeError


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name", "requires_grad")

    def __init__(self, value, name: str | None = None, requires_grad: bool = False,
                 parents: tuple = (), backward_fn: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(name={self.name!r}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def param(value, name: str) -> Var:
    return Var(np.array(value, dtype=np.float64), name=name, requires_grad=True)


def const(value) -> Var:
    return Var(value)


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(value, parents, backward_fn) -> Var:
    return Var(value, parents=parents, backward_fn=backward_fn)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Var) -> Var:
    return _node(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)))


def relu(a: Var) -> Var:
    on = a.value > 0
    return _node(np.where(on, a.value, 0.0), (a,), lambda g: (g * on,))


def sigmoid(a: Var) -> Var:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Var, axes) -> Var:
    inv = np.argsort(axes)
    return _node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def take_rows(table: Var, idx: np.ndarray) -> Var:
    """Embedding lookup ``table[idx]``; repeated indices accumulate."""
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        out = np.zeros_like(table.value)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _node(table.value[idx], (table,), bwd)


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------


def matmul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bwd(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.value @ b.value, (a, b), bwd)


def einsum(subscripts: str, a, b) -> Var:
    """Two-operand einsum with explicit output; no repeated index within an operand."""
    a, b = _lift(a), _lift(b)
    lhs, out = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    if len(set(sa)) != len(sa) or len(set(sb)) != len(sb):
        raise ShapeError(f"einsum {subscripts!r}: repeated index within an operand")

    def bwd(g):
        return (np.einsum(f"{out},{sb}->{sa}", g, b.value, optimize=True),
                np.einsum(f"{sa},{out}->{sb}", a.value, g, optimize=True))

    return _node(np.einsum(subscripts, a.value, b.value, optimize=True), (a, b), bwd)


# ---------------------------------------------------------------------------
# reductions and attention normalisers
# ---------------------------------------------------------------------------


def total(a: Var) -> Var:
    shape = a.shape
    return _node(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def softmax(a: Var, mask=None) -> Var:
    """Masked softmax along the last axis (masked probabilities are exactly 0)."""
    shape = a.shape
    n = shape[-1]
    m = np.ones(shape, dtype=bool) if mask is None else np.broadcast_to(mask, shape)
    y, bad = kernels.softmax_rows_2d(a.value.reshape(-1, n), m.reshape(-1, n))
    if bad >= 0:
        raise DegenerateRowError(f"softmax: row {bad} is fully masked")
    y = y.reshape(shape)

    def bwd(g):
        return (kernels.softmax_backward_2d(y.reshape(-1, n), g.reshape(-1, n)).reshape(shape),)

    return _node(y, (a,), bwd)


def masked_bce_with_logits(logits: Var, targets, weights) -> Var:
    """Mean binary cross-entropy over entries with nonzero weight."""
    z = logits.value
    t = np.asarray(targets, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    denom = w.sum()
    if denom == 0:
        return _node(np.asarray(0.0), (logits,), lambda g: (np.zeros_like(z),))
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = float((per * w).sum() / denom)
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    return _node(np.asarray(loss), (logits,), lambda g: (g * w * (p - t) / denom,))


def masked_mse(pred: Var, targets, weights) -> Var:
    z = pred.value
    t = np.asarray(targets, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    denom = w.sum()
    if denom == 0:
        return _node(np.asarray(0.0), (pred,), lambda g: (np.zeros_like(z),))
    diff = z - t
    return _node(np.asarray(float((w * diff * diff).sum() / denom)), (pred,),
                 lambda g: (g * 2.0 * w * diff / denom,))


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def _topo_order(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Var) -> dict[str, np.ndarray]:
    """Propagate d(loss) back through the tape.

    Returns a map from parameter name (or ``id`` for unnamed leaves) to its
    gradient; leaves also get ``.grad`` set.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    grads: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = node.grad
        if g is None:
            g = node.grad = np.zeros_like(node.value)
        if node.backward_fn is None:
            grads[node.name if node.name is not None else str(id(node))] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg
    return grads


# ---------------------------------------------------------------------------
# finite-difference checks
# ---------------------------------------------------------------------------


@dataclass
class GradcheckReport:
    status: str  # "passed" | "failed" | "skipped"
    eps: float
    tol: float
    errors: dict[str, float] = field(default_factory=dict)
    reason: str = ""

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.status == "passed"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error scaled by the larger of the two gradients' max norms."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale < 1e-12:
        return diff
    return float(diff / scale)


def gradcheck(fn: Callable[[Mapping[str, Var]], Var], params: Mapping[str, np.ndarray],
              eps: float = 1e-5, tol: float = 1e-4, *, score_mode: str = "softmax") -> GradcheckReport:
    """Compare tape gradients of ``fn`` with central differences.

    ``fn`` maps a dict of parameter ``Var`` objects to a scalar ``Var``; the
    data it consumes is captured by the closure.
    """
    if not 1e-8 < eps < 1e-2:
        raise ValueError(f"eps must lie in (1e-8, 1e-2), got {eps}")
    if score_mode == "hard":
        return GradcheckReport("skipped", eps, tol, reason="non-differentiable mode (hard attention)")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    vars_ = {k: param(v, k) for k, v in base.items()}
    loss = fn(vars_)
    if not np.isfinite(loss.value).all():
        raise NonFiniteError("gradcheck: loss is not finite")
    backward(loss)

    def eval_at(name, flat_idx, delta):
        vals = {k: v for k, v in base.items()}
        bumped = base[name].copy()
        bumped.reshape(-1)[flat_idx] += delta
        vals[name] = bumped
        out = float(fn({k: Var(v) for k, v in vals.items()}).value)
        if not np.isfinite(out):
            raise NonFiniteError(f"gradcheck: non-finite loss perturbing {name}[{flat_idx}]")
        return out

    errors = {}
    for name, v in vars_.items():
        analytic = v.grad if v.grad is not None else np.zeros_like(v.value)
        numeric = np.empty(v.value.size)
        for i in range(v.value.size):
            numeric[i] = (eval_at(name, i, eps) - eval_at(name, i, -eps)) / (2 * eps)
        errors[name] = relative_error(analytic.reshape(-1), numeric)
    status = "passed" if max(errors.values(), default=0.0) <= tol else "failed"
    return GradcheckReport(status, eps, tol, errors)
