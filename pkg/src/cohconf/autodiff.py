"""Minimal reverse-mode differentiation over numpy arrays.

Every node lives in an append-only arena on a :class:`Tape`; parents always
precede children, so a single reverse sweep over the arena is a valid
topological order for backpropagation. Node values may be scalars (0-d
arrays) or arrays; elementwise ops broadcast like numpy and their vector-
Jacobian products sum over broadcast axes.

Conventions:

* ``maximum``/``minimum`` and the ``amax``/``amin`` reductions route the
  whole gradient to a single winner. Ties go to the left argument
  (elementwise) or to the first index (reductions).
* ``clip`` has zero gradient outside ``[lo, hi]``.
* Every forward value must be finite, otherwise :class:`NonFiniteValue`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteGradient, NonFiniteValue

LOG_EPS = 1e-12

ArrayLike = "Node | np.ndarray | float"


class Node:
    __slots__ = ("tape", "index", "value", "parents", "op")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, tape: "Tape", value, parents=(), op: str = "const"):
        value = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(value)):
            raise NonFiniteValue(f"non-finite value produced by op {op!r}")
        self.tape = tape
        self.value = value
        self.parents = tuple(parents)  # (node, vjp) pairs
        self.op = op
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)


class Tape:
    """Append-only arena of nodes."""

    def __init__(self):
        self.nodes: list[Node] = []

    def var(self, value) -> Node:
        """A differentiable leaf (parameter)."""
        return Node(self, value, (), "leaf")

    def const(self, value) -> Node:
        return Node(self, value, (), "const")

    def __len__(self):
        return len(self.nodes)


def _val(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=float)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a Node")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(value, op, *pairs) -> Node:
    """Create a node; ``pairs`` are (operand, vjp) with constants filtered out."""
    parents = [(p, f) for p, f in pairs if isinstance(p, Node)]
    tape = _tape_of(*[p for p, _ in pairs])
    return Node(tape, value, parents, op)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    va, vb = _val(a), _val(b)
    return _make(va + vb, "add",
                 (a, lambda g: _unbroadcast(g, va.shape)),
                 (b, lambda g: _unbroadcast(g, vb.shape)))


def sub(a, b) -> Node:
    va, vb = _val(a), _val(b)
    return _make(va - vb, "add",
                 (a, lambda g: _unbroadcast(g, va.shape)),
                 (b, lambda g: _unbroadcast(-g, vb.shape)))


def mul(a, b) -> Node:
    va, vb = _val(a), _val(b)
    return _make(va * vb, "mul",
                 (a, lambda g: _unbroadcast(g * vb, va.shape)),
                 (b, lambda g: _unbroadcast(g * va, vb.shape)))


def div(a, b) -> Node:
    va, vb = _val(a), _val(b)
    out = va / vb
    return _make(out, "div",
                 (a, lambda g: _unbroadcast(g / vb, va.shape)),
                 (b, lambda g: _unbroadcast(-g * out / vb, vb.shape)))


def neg(a) -> Node:
    return _make(-_val(a), "neg", (a, lambda g: -g))


def power(a, exponent: float) -> Node:
    va = _val(a)
    exponent = float(exponent)
    return _make(va ** exponent, "pow", (a, lambda g: g * exponent * va ** (exponent - 1.0)))


def exp(a) -> Node:
    out = np.exp(_val(a))
    return _make(out, "exp", (a, lambda g: g * out))


def log(a) -> Node:
    va = _val(a)
    return _make(np.log(va), "log", (a, lambda g: g / va))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Node:
    out = _sigmoid(np.atleast_1d(_val(a))).reshape(_val(a).shape)
    return _make(out, "sigmoid", (a, lambda g: g * out * (1.0 - out)))


def log_sigmoid(a) -> Node:
    """``log(sigmoid(x))`` without underflow for very negative ``x``."""
    va = _val(a)
    out = -np.logaddexp(0.0, -va)
    s = _sigmoid(np.atleast_1d(-va)).reshape(va.shape)  # 1 - sigmoid(x)
    return _make(out, "sigmoid", (a, lambda g: g * s))


def maximum(a, b) -> Node:
    va, vb = np.broadcast_arrays(_val(a), _val(b))
    left = va >= vb
    return _make(np.where(left, va, vb), "max",
                 (a, lambda g: _unbroadcast(g * left, _val(a).shape)),
                 (b, lambda g: _unbroadcast(g * ~left, _val(b).shape)))


def minimum(a, b) -> Node:
    va, vb = np.broadcast_arrays(_val(a), _val(b))
    left = va <= vb
    return _make(np.where(left, va, vb), "min",
                 (a, lambda g: _unbroadcast(g * left, _val(a).shape)),
                 (b, lambda g: _unbroadcast(g * ~left, _val(b).shape)))


def clip(a, lo: float, hi: float) -> Node:
    va = _val(a)
    inside = (va >= lo) & (va <= hi)
    return _make(np.clip(va, lo, hi), "clip", (a, lambda g: g * inside))


def where(cond, a, b) -> Node:
    """Select elementwise by a constant boolean mask."""
    cond = np.asarray(cond, dtype=bool)
    va, vb = _val(a), _val(b)
    return _make(np.where(cond, va, vb), "where",
                 (a, lambda g: _unbroadcast(np.where(cond, g, 0.0), va.shape)),
                 (b, lambda g: _unbroadcast(np.where(cond, 0.0, g), vb.shape)))


# ----------------------------------------------------------------- structural


def reshape(a, shape) -> Node:
    va = _val(a)
    return _make(va.reshape(shape), "reshape", (a, lambda g: g.reshape(va.shape)))


def getitem(a, idx) -> Node:
    va = _val(a)

    def vjp(g):
        out = np.zeros_like(va)
        np.add.at(out, idx, g)
        return out

    return _make(va[idx], "index", (a, vjp))


def matmul(a, b) -> Node:
    """``a @ b`` for ``a`` of rank >= 2 and ``b`` either a vector or rank >= 2."""
    va, vb = _val(a), _val(b)
    out = va @ vb
    if vb.ndim == 1:
        def vjp_a(g):
            return _unbroadcast(g[..., None] * vb, va.shape)

        def vjp_b(g):
            return np.tensordot(g, va, axes=(tuple(range(g.ndim)), tuple(range(va.ndim - 1))))
    else:
        def vjp_a(g):
            return _unbroadcast(g @ np.swapaxes(vb, -1, -2), va.shape)

        def vjp_b(g):
            return _unbroadcast(np.swapaxes(va, -1, -2) @ g, vb.shape)
    return _make(out, "matmul", (a, vjp_a), (b, vjp_b))


# ----------------------------------------------------------------- reductions


def reduce_sum(a, axis=None, keepdims=False) -> Node:
    va = _val(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, va.shape).copy()

    return _make(va.sum(axis=axis, keepdims=keepdims), "add", (a, vjp))


def _extreme(a, axis, mask, largest: bool, op: str) -> Node:
    va = _val(a)
    fill = -np.inf if largest else np.inf
    masked = va if mask is None else np.where(mask, va, fill)
    idx = (np.argmax if largest else np.argmin)(masked, axis=axis)  # first index on ties
    idx = np.expand_dims(idx, axis)
    out = np.take_along_axis(va, idx, axis=axis).squeeze(axis)

    def vjp(g):
        grad = np.zeros_like(va)
        np.put_along_axis(grad, idx, np.expand_dims(g, axis), axis=axis)
        return grad

    return _make(out, op, (a, vjp))


def amax(a, axis: int = -1, mask=None) -> Node:
    return _extreme(a, axis, mask, True, "max")


def amin(a, axis: int = -1, mask=None) -> Node:
    return _extreme(a, axis, mask, False, "min")


def softmax(a, axis: int = -1, mask=None) -> Node:
    """Softmax along ``axis``; masked-out entries get weight exactly zero."""
    va = _val(a)
    z = va if mask is None else np.where(mask, va, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _make(out, "softmax", (a, vjp))


# ------------------------------------------------------------------- backward


def backward(tape: Tape, root: Node) -> dict[Node, np.ndarray]:
    """Return d(root)/d(leaf) for every leaf created with :meth:`Tape.var`.

    ``root`` must hold a single element. Gradients accumulate additively
    over fan-out in one reverse sweep of the arena.
    """
    if root.tape is not tape:
        raise ValueError("root does not belong to this tape")
    if root.value.size != 1:
        raise ValueError("backward needs a scalar root")
    grads: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
    leaves: dict[Node, np.ndarray] = {}
    for node in reversed(tape.nodes[: root.index + 1]):
        g = grads.pop(node.index, None)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient at op {node.op!r}")
        if node.op == "leaf":
            leaves[node] = g
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + contrib
            else:
                grads[parent.index] = contrib
    for node in tape.nodes:
        if node.op == "leaf" and node not in leaves:
            leaves[node] = np.zeros_like(node.value)
    return leaves


def value_and_grad(f: Callable[[Tape, Node], Node], params) -> tuple[float, np.ndarray]:
    tape = Tape()
    theta = tape.var(np.asarray(params, dtype=float))
    root = f(tape, theta)
    grads = backward(tape, root)
    return root.item(), grads[theta]


def check_gradient(f: Callable[[Tape, Node], Node], params: Sequence[float], h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f(tape, theta)`` must build a scalar node from the parameter node
    ``theta``. Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as
    the denominator.
    """
    params = np.asarray(params, dtype=float)
    _, analytic = value_and_grad(f, params)

    def scalar(p):
        tape = Tape()
        return f(tape, tape.var(p)).item()

    flat = params.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        fu, fd = scalar(up.reshape(params.shape)), scalar(dn.reshape(params.shape))
        if not (np.isfinite(fu) and np.isfinite(fd)):
            raise NonFiniteValue("function not finite in the finite-difference neighbourhood")
        numeric[i] = (fu - fd) / (2.0 * h)
    analytic = analytic.ravel()
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
