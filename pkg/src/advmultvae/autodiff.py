"""Small reverse-mode autodiff engine over dense float64 numpy arrays.

Every differentiable operation returns a :class:`Node`. Nodes get a
monotonically increasing id at construction, so the ids of a node's inputs
always precede its own and a reverse sweep in id order is a valid
topological order.

    >>> x = leaf([[1.0, 2.0]])
    >>> loss = sum_all(mul(x, x))
    >>> backward(loss)
    >>> x.grad
    array([[2., 4.]])
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

_ids = itertools.count()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Operand lies outside the domain of a primitive."""


class ContractError(ValueError):
    """An API precondition was violated."""


@dataclass(frozen=True)
class GrlConfig:
    lam: float = 1.0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"gradient reversal scaling must be >= 0, got {self.lam}")


class Node:
    __slots__ = ("id", "op", "value", "grad", "parents", "requires_grad", "_backward", "meta")

    def __init__(self, value, op="leaf", parents=(), requires_grad=False, backward_fn=None, meta=None):
        self.id = next(_ids)
        self.op = op
        self.value = np.asarray(value, dtype=np.float64)
        self.parents: tuple[Node, ...] = tuple(parents)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self._backward: Optional[Callable[[np.ndarray], None]] = backward_fn
        self.meta = meta or {}

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Node(op={self.op!r}, id={self.id}, shape={self.shape})"


def leaf(value, requires_grad=True) -> Node:
    """A parameter or input node."""
    return Node(value, requires_grad=requires_grad)


def constant(value) -> Node:
    return Node(value, op="const", requires_grad=False)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(op, value, parents, backward_fn, meta=None) -> Node:
    needs = any(p.requires_grad for p in parents)
    return Node(value, op=op, parents=parents, requires_grad=needs,
                backward_fn=backward_fn if needs else None, meta=meta)


def _accum(node: Node, g):
    if node.requires_grad:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Node, b: Node):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a.grad += g @ b.value.T
        if b.requires_grad:
            b.grad += a.value.T @ g

    return _make("matmul", a.value @ b.value, (a, b), bw)


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast(a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make("add", a.value + b.value, (a, b), bw)


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast(a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, -_unbroadcast(g, b.shape))

    return _make("sub", a.value - b.value, (a, b), bw)


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast(a, b)

    def bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.value, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.value, b.shape)

    return _make("mul", a.value * b.value, (a, b), bw)


def scale(a, c: float) -> Node:
    a = _as_node(a)
    c = float(c)
    return _make("scale", a.value * c, (a,), lambda g: _accum(a, g * c))


def tanh(a) -> Node:
    a = _as_node(a)
    out = np.tanh(a.value)
    return _make("tanh", out, (a,), lambda g: _accum(a, g * (1.0 - out * out)))


def exp(a) -> Node:
    a = _as_node(a)
    out = np.exp(a.value)
    return _make("exp", out, (a,), lambda g: _accum(a, g * out))


def log(a) -> Node:
    a = _as_node(a)
    if np.any(~(a.value > 0)):
        raise DomainError("log requires strictly positive input")
    return _make("log", np.log(a.value), (a,), lambda g: _accum(a, g / a.value))


def relu(a) -> Node:
    a = _as_node(a)
    mask = a.value > 0
    return _make("relu", np.where(mask, a.value, 0.0), (a,), lambda g: _accum(a, g * mask))


def dropout(a, p: float, training: bool, rng: Optional[np.random.Generator] = None,
            mask: Optional[np.ndarray] = None) -> Node:
    """Inverted dropout; identity when not training or ``p == 0``.

    ``mask`` (a boolean keep-mask) may be supplied to replay a fixed pattern.
    """
    a = _as_node(a)
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if mask is None:
        if rng is None:
            raise ContractError("dropout at training time needs an rng or a mask")
        mask = rng.random(a.shape) >= p
    factor = np.where(mask, 1.0 / (1.0 - p), 0.0)
    return _make("dropout", a.value * factor, (a,), lambda g: _accum(a, g * factor),
                 meta={"keep": 1.0 - p, "mask": mask})


def l2_normalize_rows(a) -> Node:
    """Scale each row to unit L2 norm. All-zero rows stay zero."""
    a = _as_node(a)
    if a.value.ndim != 2:
        raise DimensionError("l2_normalize_rows expects a matrix")
    if not np.all(np.isfinite(a.value)):
        raise DomainError("l2_normalize_rows requires finite input")
    norm = np.sqrt(np.sum(a.value * a.value, axis=1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    out = a.value / safe

    def bw(g):
        dot = np.sum(out * g, axis=1, keepdims=True)
        _accum(a, np.where(norm > 0, (g - out * dot) / safe, 0.0))

    return _make("l2_normalize_rows", out, (a,), bw)


def softmax_rows(a) -> Node:
    a = _as_node(a)
    if a.value.ndim != 2:
        raise DimensionError("softmax_rows expects a matrix")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        _accum(a, out * (g - np.sum(g * out, axis=1, keepdims=True)))

    return _make("softmax_rows", out, (a,), bw)


def log_softmax_rows(a) -> Node:
    a = _as_node(a)
    if a.value.ndim != 2:
        raise DimensionError("log_softmax_rows expects a matrix")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        _accum(a, g - probs * g.sum(axis=1, keepdims=True))

    return _make("log_softmax_rows", out, (a,), bw)


def sum_all(a) -> Node:
    a = _as_node(a)
    return _make("sum", np.sum(a.value), (a,), lambda g: _accum(a, np.broadcast_to(g, a.shape)))


def mean_all(a) -> Node:
    a = _as_node(a)
    n = a.value.size
    return _make("mean", np.mean(a.value), (a,),
                 lambda g: _accum(a, np.broadcast_to(g / n, a.shape)))


def columns(a, start: int, stop: int) -> Node:
    """Column slice ``a[:, start:stop]``."""
    a = _as_node(a)

    def bw(g):
        if a.requires_grad:
            a.grad[:, start:stop] += g

    return _make("columns", a.value[:, start:stop], (a,), bw)


def grl(x, cfg: GrlConfig) -> Node:
    """Gradient reversal: identity forward, ``-lam * upstream`` backward."""
    x = _as_node(x)
    factor = -float(cfg.lam)
    return _make("grl", x.value.copy(), (x,), lambda g: _accum(x, g * factor),
                 meta={"lam": cfg.lam})


def gaussian_sample(mu, log_var, rng: Optional[np.random.Generator] = None,
                    eps: Optional[np.ndarray] = None) -> Node:
    """Reparameterized draw ``mu + exp(0.5 * log_var) * eps``.

    ``eps`` is treated as a constant; pass it explicitly to replay a draw
    (a zero ``eps`` gives ``z == mu``).
    """
    mu, log_var = _as_node(mu), _as_node(log_var)
    if mu.shape != log_var.shape:
        raise DimensionError(f"mu {mu.shape} and log_var {log_var.shape} differ")
    if eps is None:
        if rng is None:
            raise ContractError("gaussian_sample needs an rng or explicit eps")
        eps = rng.standard_normal(mu.shape)
    eps = np.asarray(eps, dtype=np.float64)
    std = np.exp(0.5 * log_var.value)
    noise = std * eps

    def bw(g):
        _accum(mu, g)
        _accum(log_var, g * 0.5 * noise)

    return _make("gaussian_sample", mu.value + noise, (mu, log_var), bw, meta={"eps": eps})


# ---------------------------------------------------------------------------


def _reachable(root: Node) -> list[Node]:
    seen = {}
    stack = [root]
    while stack:
        n = stack.pop()
        if n.id in seen or not n.requires_grad:
            continue
        seen[n.id] = n
        stack.extend(n.parents)
    return sorted(seen.values(), key=lambda n: n.id, reverse=True)


def backward(loss: Node) -> None:
    """Accumulate ``d loss / d node`` into ``.grad`` of every reachable node.

    Leaf gradients accumulate across calls; intermediate buffers are reset.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _reachable(loss)
    for n in order:
        if n._backward is not None:
            n.grad = np.zeros_like(n.value)
    loss.grad = loss.grad + 1.0
    for n in order:
        if n._backward is not None:
            n._backward(n.grad)

