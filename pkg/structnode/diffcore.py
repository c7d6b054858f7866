"""Reverse-mode automatic differentiation on a recorded tape.

Every elementary operation on a :class:`Node` records the operands together
with a vector-Jacobian product. Values are numpy arrays in double precision, a
scalar node being the 0-d case. Vector-Jacobian products are themselves written
with Node operations, so a gradient can be recorded on the tape again
(``grad(..., create_graph=True)``) and differentiated a second time.

The recording switch is thread-local: a tape never crosses threads.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable
from typing import Dict
from typing import Iterator
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np

from .errors import UsageError


ArrayLike = Union["Node", np.ndarray, float, int]
Vjp = Callable[["Node"], "Node"]
Gradients = Dict["Node", np.ndarray]

_local = threading.local()


def is_taping() -> bool:
    return getattr(_local, "taping", True)


@contextmanager
def no_tape() -> Iterator[None]:
    previous = is_taping()
    _local.taping = False
    try:
        yield
    finally:
        _local.taping = previous


@contextmanager
def tape() -> Iterator[None]:
    previous = is_taping()
    _local.taping = True
    try:
        yield
    finally:
        _local.taping = previous


def _parameter_adjoints() -> Dict[int, Tuple["Node", np.ndarray]]:
    if not hasattr(_local, "adjoints"):
        _local.adjoints = {}
    return _local.adjoints


class Node:
    # numpy must defer to the reflected Node operators
    __array_ufunc__ = None
    __slots__ = ("value", "parents", "requires_grad", "name", "_adjoint")

    shared = False

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        name: Optional[str] = None,
        parents: Tuple[Tuple["Node", Vjp], ...] = (),
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.parents = parents
        self._adjoint: Optional[np.ndarray] = None

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Node{label}(shape={self.shape}, grad={self.requires_grad})"

    @property
    def adjoint(self) -> np.ndarray:
        if self._adjoint is None:
            return np.zeros_like(self.value)
        return self._adjoint

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Node":
        return transpose(self)

    def detach(self) -> "Node":
        return Node(self.value)

    def item(self) -> float:
        return float(self.value)

    def sum(self, axis=None, keepdims=False) -> "Node":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> "Node":
        return mean(self, axis=axis)

    def reshape(self, *shape) -> "Node":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __getitem__(self, index) -> "Node":
        return getitem(self, index)

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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Parameter(Node):
    """A named trainable leaf, shared across threads

    Its adjoint lives with the thread that ran the latest backward pass.
    """

    __slots__ = ()
    shared = True

    def __init__(self, value, name: str):
        super().__init__(value, requires_grad=True, name=name)

    @property
    def adjoint(self) -> np.ndarray:
        entry = _parameter_adjoints().get(id(self))
        if entry is None or entry[0] is not self:
            return np.zeros_like(self.value)
        return entry[1]

    def assign(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.value.shape:
            raise UsageError(f"shape mismatch assigning {self.name}: {value.shape} != {self.shape}")
        self.value = value.copy()


def as_node(x: ArrayLike) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value, *links: Tuple[Node, Vjp]) -> Node:
    if not is_taping():
        return Node(value)
    recorded = tuple((p, fn) for p, fn in links if p.requires_grad)
    if not recorded:
        return Node(value)
    return Node(value, requires_grad=True, parents=recorded)


def _unbroadcast(g: Node, shape: Tuple[int, ...]) -> Node:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    return g


# elementary operations


def add(a: ArrayLike, b: ArrayLike) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value + b.value,
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value - b.value,
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(neg(g), b.shape)),
    )


def neg(a: ArrayLike) -> Node:
    a = as_node(a)
    return _make(-a.value, (a, lambda g: neg(g)))


def mul(a: ArrayLike, b: ArrayLike) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value * b.value,
        (a, lambda g: _unbroadcast(mul(g, b), a.shape)),
        (b, lambda g: _unbroadcast(mul(g, a), b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value / b.value,
        (a, lambda g: _unbroadcast(div(g, b), a.shape)),
        (b, lambda g: _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)),
    )


def power(a: ArrayLike, exponent: float) -> Node:
    a = as_node(a)
    c = float(exponent)
    return _make(a.value**c, (a, lambda g: mul(g, mul(c, power(a, c - 1.0)))))


def exp(a: ArrayLike) -> Node:
    a = as_node(a)
    return _make(np.exp(a.value), (a, lambda g: mul(g, exp(a))))


def log(a: ArrayLike) -> Node:
    a = as_node(a)
    return _make(np.log(a.value), (a, lambda g: div(g, a)))


def tanh(a: ArrayLike) -> Node:
    a = as_node(a)

    def vjp(g: Node) -> Node:
        t = tanh(a)
        return mul(g, sub(1.0, mul(t, t)))

    return _make(np.tanh(a.value), (a, vjp))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(a: ArrayLike) -> Node:
    a = as_node(a)

    def vjp(g: Node) -> Node:
        s = sigmoid(a)
        return mul(g, mul(s, sub(1.0, s)))

    return _make(_sigmoid(a.value), (a, vjp))


def silu(a: ArrayLike) -> Node:
    """x * sigmoid(x)"""
    a = as_node(a)

    def vjp(g: Node) -> Node:
        s = sigmoid(a)
        return mul(g, mul(s, add(1.0, mul(a, sub(1.0, s)))))

    return _make(a.value * _sigmoid(a.value), (a, vjp))


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)

    def vjp(g: Node) -> Node:
        if axis is not None and not keepdims:
            g = reshape(g, np.sum(a.value, axis=axis, keepdims=True).shape)
        return broadcast_to(g, a.shape)

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a, vjp))


def mean(a: ArrayLike, axis=None) -> Node:
    a = as_node(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(sum_(a, axis=axis), float(count))


def broadcast_to(a: ArrayLike, shape: Tuple[int, ...]) -> Node:
    a = as_node(a)
    return _make(np.broadcast_to(a.value, shape).copy(), (a, lambda g: _unbroadcast(g, a.shape)))


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Node:
    a = as_node(a)
    return _make(np.reshape(a.value, shape), (a, lambda g: reshape(g, a.shape)))


def transpose(a: ArrayLike) -> Node:
    a = as_node(a)
    return _make(np.transpose(a.value), (a, lambda g: transpose(g)))


def getitem(a: ArrayLike, index) -> Node:
    a = as_node(a)
    return _make(a.value[index], (a, lambda g: scatter(g, index, a.shape)))


def scatter(g: ArrayLike, index, shape: Tuple[int, ...]) -> Node:
    """Adjoint of indexing: zeros of ``shape`` with ``g`` added at ``index``"""
    g = as_node(g)
    out = np.zeros(shape)
    np.add.at(out, index, g.value)
    return _make(out, (g, lambda h: getitem(h, index)))


def concat(nodes: Sequence[ArrayLike], axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    value = np.concatenate([n.value for n in nodes], axis=axis)
    ax = axis % value.ndim
    links = []
    offset = 0
    for n in nodes:
        width = n.shape[ax]
        index = (slice(None),) * ax + (slice(offset, offset + width),)
        links.append((n, (lambda idx: lambda g: getitem(g, idx))(index)))
        offset += width
    return _make(value, *links)


def stack(nodes: Sequence[ArrayLike], axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    value = np.stack([n.value for n in nodes], axis=axis)
    ax = axis % value.ndim
    links = []
    for i, n in enumerate(nodes):
        index = (slice(None),) * ax + (i,)
        links.append((n, (lambda idx: lambda g: getitem(g, idx))(index)))
    return _make(value, *links)


def _matmul2(a: Node, b: Node) -> Node:
    return _make(
        a.value @ b.value,
        (a, lambda g: _matmul2(g, transpose(b))),
        (b, lambda g: _matmul2(transpose(a), g)),
    )


def matmul(a: ArrayLike, b: ArrayLike) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim > 2 and b.ndim == 2:
        flat = _matmul2(reshape(a, (-1, a.shape[-1])), b)
        return reshape(flat, a.shape[:-1] + b.shape[1:])
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise UsageError(f"matmul supports batched @ 2-D, 1-D and 2-D operands, got {a.shape} @ {b.shape}")
    a2 = reshape(a, (1, a.shape[0])) if a.ndim == 1 else a
    b2 = reshape(b, (b.shape[0], 1)) if b.ndim == 1 else b
    out = _matmul2(a2, b2)
    shape = a.shape[:-1] + b.shape[1:]
    return out if out.shape == shape else reshape(out, shape)


# reverse pass


def _topological(root: Node, stop: frozenset = frozenset()) -> List[Node]:
    order: List[Node] = []
    seen = set()
    pending: List[Tuple[Node, bool]] = [(root, False)]

    while pending:
        node, expanded = pending.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        pending.append((node, True))
        if id(node) in stop:
            continue
        for parent, _ in node.parents:
            if id(parent) not in seen:
                pending.append((parent, False))

    return order


def _accumulate(root: Node, seed: Node, stop: frozenset) -> Dict[int, Node]:
    adjoints: Dict[int, Node] = {id(root): seed}
    for node in reversed(_topological(root, stop)):
        g = adjoints.get(id(node))
        if g is None or id(node) in stop:
            continue
        for parent, vjp in node.parents:
            contribution = vjp(g)
            previous = adjoints.get(id(parent))
            adjoints[id(parent)] = contribution if previous is None else add(previous, contribution)
    return adjoints


def backward(root: Node) -> Gradients:
    """Accumulate adjoints from a scalar root; return the gradient of every trainable leaf"""
    if root.value.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")

    with no_tape():
        order = _topological(root)
        adjoints = _accumulate(root, Node(np.ones_like(root.value)), frozenset())

    gradients: Gradients = {}
    shared = _parameter_adjoints()
    shared.clear()
    for node in order:
        g = adjoints.get(id(node))
        if g is None:
            continue
        if node.shared:
            shared[id(node)] = (node, g.value)
        else:
            node._adjoint = g.value
        if node.requires_grad and not node.parents:
            gradients[node] = g.value
    return gradients


def grad(root: Node, wrt: Sequence[Node], create_graph: bool = False) -> List[Node]:
    """Gradient of a scalar root with respect to arbitrary tape nodes

    With ``create_graph`` the result is recorded so it can be differentiated again.
    """
    if root.value.size != 1:
        raise UsageError(f"grad needs a scalar root, got shape {root.shape}")

    stop = frozenset(id(w) for w in wrt)
    seed = Node(np.ones_like(root.value))
    if create_graph:
        with tape():
            adjoints = _accumulate(root, seed, stop)
    else:
        with no_tape():
            adjoints = _accumulate(root, seed, stop)

    return [adjoints.get(id(w), Node(np.zeros_like(w.value))) for w in wrt]


def jacobian(fn: Callable[[Node], ArrayLike], x: np.ndarray) -> np.ndarray:
    """Jacobian of a vector function at ``x``, one reverse pass per output row"""
    leaf = Node(np.asarray(x, dtype=np.float64), requires_grad=True)
    with tape():
        out = fn(leaf)
        if not isinstance(out, Node):
            raise UsageError("function output is not recorded on the tape")
        if not out.requires_grad:
            return np.zeros((out.value.size, leaf.value.size))
        flat = reshape(out, (-1,))
        entries = [flat[i] for i in range(flat.value.size)]

    rows = []
    for entry in entries:
        (row,) = grad(entry, [leaf])
        rows.append(row.value.reshape(-1))
    return np.stack(rows)
