"""Reverse-mode automatic differentiation over dense float64 arrays.

Every :class:`Node` carries its forward value, computed eagerly when the node
is built, plus a vector-Jacobian closure used by :func:`backward`.  Non
differentiable forward maps (floor, step functions) enter the graph through
:func:`attach_surrogate`, which pairs the exact forward map with a smooth
replacement derivative (the straight-through trick).

Kinks follow the usual subgradient convention: ReLU and the positive part
have derivative 0 at an input of exactly 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Node",
    "ShapeError",
    "SurrogateRule",
    "SurrogateOnPathError",
    "FLOOR_STE",
    "STEP_STE",
    "ROUND_STE",
    "leaf",
    "constant",
    "build",
    "backward",
    "attach_surrogate",
    "grad_check",
    "round_half_down",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op-kind."""


class SurrogateOnPathError(ValueError):
    """A finite-difference check was requested through a surrogate node."""


def _as_array(value, allow_nonfinite: bool = False) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if not allow_nonfinite and not np.all(np.isfinite(arr)):
        raise ValueError("tensor values must be finite")
    return arr


class Node:
    __slots__ = ("value", "parents", "op", "vjp", "needs_grad", "surrogate", "name")
    # make ndarray <op> Node dispatch to the reflected Node methods
    __array_ufunc__ = None

    def __init__(self, value, parents=(), op="leaf", vjp=None, needs_grad=False,
                 surrogate=None, name=None):
        self.value = value
        self.parents = tuple(parents)
        self.op = op
        self.vjp = vjp
        self.needs_grad = needs_grad
        self.surrogate = surrogate
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return build("add", [self, _lift(other)])

    def __radd__(self, other):
        return build("add", [_lift(other), self])

    def __sub__(self, other):
        return build("subtract", [self, _lift(other)])

    def __rsub__(self, other):
        return build("subtract", [_lift(other), self])

    def __mul__(self, other):
        return build("multiply", [self, _lift(other)])

    def __rmul__(self, other):
        return build("multiply", [_lift(other), self])

    def __truediv__(self, other):
        return build("divide", [self, _lift(other)])

    def __neg__(self):
        return build("negate", [self])

    def __matmul__(self, other):
        other = _lift(other)
        kind = "matvec" if other.value.ndim == 1 else "matmul"
        return build(kind, [self, other])

    def __getitem__(self, index):
        return build("slice", [self], index=index)


def leaf(value, name: str | None = None, allow_nonfinite: bool = False) -> Node:
    """A differentiable input."""
    return Node(_as_array(value, allow_nonfinite), needs_grad=True, name=name)


def constant(value) -> Node:
    """A fixed input; no gradient is tracked into it."""
    return Node(_as_array(value), needs_grad=False)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


# ---------------------------------------------------------------------------
# op table


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Node, b: Node, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def _op_add(a, b):
    _broadcast_shape(a, b, "add")
    out = a.value + b.value
    return out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _op_subtract(a, b):
    _broadcast_shape(a, b, "subtract")
    out = a.value - b.value
    return out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _op_multiply(a, b):
    _broadcast_shape(a, b, "multiply")
    av, bv = a.value, b.value
    return av * bv, lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape))


def _op_divide(a, b):
    _broadcast_shape(a, b, "divide")
    av, bv = a.value, b.value
    out = av / bv
    return out, lambda g: (_unbroadcast(g / bv, a.shape),
                           _unbroadcast(-g * out / bv, b.shape))


def _op_negate(a):
    return -a.value, lambda g: (-g,)


def _op_matvec(m, v):
    if m.value.ndim != 2 or v.value.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: incompatible shapes {m.shape} and {v.shape}")
    mv, vv = m.value, v.value
    return mv @ vv, lambda g: (np.outer(g, vv), mv.T @ g)


def _op_matmul(a, b):
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return av @ bv, lambda g: (g @ bv.T, av.T @ g)


def _op_transpose(a):
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return a.value.T, lambda g: (g.T,)


def _op_relu(a):
    mask = a.value > 0.0
    return np.where(mask, a.value, 0.0), lambda g: (g * mask,)


def _op_sigmoid(a):
    out = _sigmoid(a.value)
    return out, lambda g: (g * out * (1.0 - out),)


def _op_sin(a):
    av = a.value
    return np.sin(av), lambda g: (g * np.cos(av),)


def _op_exp(a):
    out = np.exp(a.value)
    return out, lambda g: (g * out,)


def _op_log(a):
    av = a.value
    return np.log(av), lambda g: (g / av,)


def _op_sqrt(a):
    out = np.sqrt(a.value)
    return out, lambda g: (g * 0.5 / out,)


def _op_square(a):
    av = a.value
    return av * av, lambda g: (2.0 * g * av,)


def _reduce_grad(g, shape, axis, scale=1.0):
    if axis is None:
        return np.full(shape, float(g) * scale)
    return np.broadcast_to(np.expand_dims(g, axis) * scale, shape).copy()


def _op_sum(a, axis=None):
    shape = a.shape
    return np.sum(a.value, axis=axis), lambda g: (_reduce_grad(g, shape, axis),)


def _op_mean(a, axis=None):
    shape = a.shape
    count = a.value.size if axis is None else shape[axis]
    return np.mean(a.value, axis=axis), lambda g: (_reduce_grad(g, shape, axis, 1.0 / count),)


def _op_pos_l1(a, axis=None):
    mask = a.value > 0.0
    shape = a.shape
    out = np.sum(np.where(mask, a.value, 0.0), axis=axis)
    return out, lambda g: (_reduce_grad(g, shape, axis) * mask,)


def _op_concat(*parts, axis=-1):
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        shapes = " and ".join(str(p.shape) for p in parts)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis))


def _op_slice(a, index):
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        if _has_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return a.value[index], vjp


def _has_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


_OPS: dict[str, Callable] = {
    "add": _op_add,
    "subtract": _op_subtract,
    "multiply": _op_multiply,
    "divide": _op_divide,
    "negate": _op_negate,
    "matvec": _op_matvec,
    "matmul": _op_matmul,
    "transpose": _op_transpose,
    "relu": _op_relu,
    "sigmoid": _op_sigmoid,
    "sin": _op_sin,
    "exp": _op_exp,
    "log": _op_log,
    "sqrt": _op_sqrt,
    "square": _op_square,
    "sum": _op_sum,
    "mean": _op_mean,
    "pos_l1": _op_pos_l1,
    "concat": _op_concat,
    "slice": _op_slice,
}

OP_KINDS = tuple(_OPS)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def build(kind: str, parents: Sequence[Node], **attrs) -> Node:
    """Create a node of ``kind`` over ``parents`` and evaluate it eagerly."""
    try:
        op = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op-kind {kind!r}") from None
    parents = [_lift(p) for p in parents]
    value, vjp = op(*parents, **attrs)
    value = np.asarray(value, dtype=np.float64)
    needs = any(p.needs_grad for p in parents)
    return Node(value, parents, kind, vjp if needs else None, needs)


# convenience wrappers --------------------------------------------------------

def relu(x): return build("relu", [x])
def sigmoid(x): return build("sigmoid", [x])
def sin(x): return build("sin", [x])
def exp(x): return build("exp", [x])
def log(x): return build("log", [x])
def sqrt(x): return build("sqrt", [x])
def square(x): return build("square", [x])
def sum(x, axis=None): return build("sum", [x], axis=axis)  # noqa: A001
def mean(x, axis=None): return build("mean", [x], axis=axis)
def pos_l1(x, axis=None): return build("pos_l1", [x], axis=axis)
def concat(parts, axis=-1): return build("concat", list(parts), axis=axis)
def transpose(x): return build("transpose", [x])


# ---------------------------------------------------------------------------
# surrogates


@dataclass(frozen=True)
class SurrogateRule:
    """Exact forward map paired with an elementwise replacement derivative.

    ``backward(x)`` returns d(forward)/dx as an array shaped like ``x``.
    """

    forward: Callable[[np.ndarray], np.ndarray]
    backward: Callable[[np.ndarray], np.ndarray]
    name: str = "surrogate"


def round_half_down(x: np.ndarray) -> np.ndarray:
    """Nearest integer, ties toward the floor (``floor(x) + [frac(x) > 0.5]``)."""
    fl = np.floor(x)
    return fl + ((x - fl) > 0.5)


FLOOR_STE = SurrogateRule(np.floor, np.ones_like, "floor")
STEP_STE = SurrogateRule(lambda v: (v > 0.5).astype(np.float64), np.ones_like, "step")
ROUND_STE = SurrogateRule(round_half_down, np.ones_like, "round")


def attach_surrogate(x: Node, rule: SurrogateRule) -> Node:
    """Apply ``rule.forward`` to ``x``; gradients flow through ``rule.backward``."""
    x = _lift(x)
    xv = x.value
    out = np.asarray(rule.forward(xv), dtype=np.float64)
    if out.shape != xv.shape:
        raise ShapeError(f"surrogate {rule.name}: forward shape {out.shape} != input {xv.shape}")
    if not x.needs_grad:
        return Node(out, (x,), "surrogate", None, False, rule)

    def vjp(g):
        d = np.asarray(rule.backward(xv), dtype=np.float64)
        if d.shape != xv.shape:
            raise ShapeError(f"surrogate {rule.name}: backward shape {d.shape} != input {xv.shape}")
        return (g * d,)

    return Node(out, (x,), "surrogate", vjp, True, rule)


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Node) -> list[Node]:
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
            if p.needs_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Gradients of the scalar ``root`` with respect to every leaf reached."""
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    result: dict[Node, np.ndarray] = {}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:
            if node.op == "leaf" and node.needs_grad:
                result[node] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.needs_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return result


def iter_nodes(root: Node) -> Iterable[Node]:
    seen: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        yield node
        stack.extend(node.parents)


def grad_check(fn: Callable[[Node], Node], x, h: float = 1e-6) -> float:
    """Max over components of ``|ad - fd| / (|fd| + 1e-12)`` against central differences.

    ``fn`` maps a leaf to a scalar node.  Surrogate nodes on the path are
    rejected: their backward deliberately disagrees with the forward map.
    """
    x = np.array(x, dtype=np.float64)
    x_leaf = leaf(x)
    root = fn(x_leaf)
    if any(n.op == "surrogate" and n.needs_grad for n in iter_nodes(root)):
        raise SurrogateOnPathError("graph contains a surrogate rule on the checked path")
    ad = backward(root).get(x_leaf, np.zeros_like(x))
    fd = np.zeros_like(x)
    flat = x.reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn(constant(x)).value)
        flat[i] = orig - h
        down = float(fn(constant(x)).value)
        flat[i] = orig
        fd_flat[i] = (up - down) / (2.0 * h)
    return float(np.max(np.abs(ad - fd) / (np.abs(fd) + 1e-12))) if x.size else 0.0
