"""Dense float64 tensors and a reverse-mode tape.

A :class:`Tensor` is an immutable wrapper around a C-contiguous ``float64``
ndarray. Tensors created through a :class:`Tape` are recorded as nodes in
topological order; :func:`backprop` walks the tape backwards and accumulates
gradients for every leaf that requires them.

Operations that receive no taped input run eagerly and return untaped
tensors, so forward-only evaluation (prediction, gradient-free attacks) pays
no recording cost.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

Array = np.ndarray


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class TapeError(RuntimeError):
    """The tape is inconsistent with the requested replay or backprop."""


def _f64(x: Any) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a if a.flags.c_contiguous else a.copy()


class Tensor:
    """Immutable float64 array, optionally recorded on a tape."""

    __slots__ = ("data", "tape", "index", "requires_grad")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the Tensor side

    def __init__(self, data: Any, tape: "Tape | None" = None, index: int = -1,
                 requires_grad: bool = False):
        self.data = _f64(data)
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        where = f", tape@{self.index}" if self.tape is not None else ""
        return f"Tensor(shape={list(self.shape)}{where})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # arithmetic sugar; all of it goes through the recorded ops below
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

    def __pow__(self, p):
        return power(self, p)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    params: dict
    value: Array
    requires_grad: bool
    saved: Any = None


@dataclass
class Tape:
    """Append-only record of a forward computation.

    ``nodes[i].inputs`` only ever reference indices ``< i``.
    """

    nodes: list[Node] = field(default_factory=list)
    _params: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: Node) -> Tensor:
        self.nodes.append(node)
        return Tensor(node.value, self, len(self.nodes) - 1, node.requires_grad)

    def leaf(self, value: Any, requires_grad: bool = True) -> Tensor:
        value = _f64(value)
        return self._append(Node("leaf", (), {}, value, requires_grad))

    def constant(self, value: Any) -> Tensor:
        return self.leaf(value, requires_grad=False)

    def param(self, p, requires_grad: bool = True) -> Tensor:
        """Leaf for a parameter object, created once per tape.

        Every use of the same parameter within one tape resolves to the same
        node, so gradients from all uses accumulate into one buffer.
        """
        # store indices, not Tensors, so the tape holds no reference to itself
        idx = self._params.get(id(p))
        if idx is None:
            t = self.leaf(p.value, requires_grad=requires_grad)
            self._params[id(p)] = t.index
            return t
        node = self.nodes[idx]
        return Tensor(node.value, self, idx, node.requires_grad)

    def param_index(self, p) -> int | None:
        """Leaf index of a parameter recorded on this tape, if any."""
        return self._params.get(id(p))

    def attach(self, t: Tensor) -> Tensor:
        if t.tape is self:
            return t
        if t.tape is not None:
            raise TapeError("tensor belongs to a different tape")
        return self.constant(t.data)

    def replay(self, leaf_values: dict[int, Array] | None = None) -> list[Array]:
        """Recompute every node from its leaves; returns the node values."""
        leaf_values = leaf_values or {}
        values: list[Array] = []
        for i, node in enumerate(self.nodes):
            if node.op == "leaf":
                values.append(np.asarray(leaf_values.get(i, node.value), dtype=np.float64))
                continue
            op = OPS[node.op]
            out, _ = op.forward(*(values[j] for j in node.inputs), **node.params)
            values.append(out)
        return values

    def check_replay(self) -> None:
        """Raise :class:`TapeError` unless replay is bit-identical."""
        for i, (node, v) in enumerate(zip(self.nodes, self.replay())):
            if node.value.shape != v.shape or not np.array_equal(node.value, v, equal_nan=True):
                raise TapeError(f"replay mismatch at node {i} ({node.op})")


# ---------------------------------------------------------------------------
# op registry


OPS: dict[str, "Op"] = {}


class Op:
    """A differentiable primitive.

    ``forward`` maps input arrays to ``(output, saved)``; ``backward`` maps
    the upstream gradient to one gradient per input (``None`` where the
    input does not require one).
    """

    name = ""

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.name:
            OPS[cls.name] = cls()

    def forward(self, *xs: Array, **params) -> tuple[Array, Any]:
        raise NotImplementedError

    def backward(self, g: Array, saved: Any, xs: Sequence[Array], out: Array,
                 needs: Sequence[bool], **params) -> Sequence[Array | None]:
        raise NotImplementedError


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(name: str, *inputs: Any, **params) -> Tensor:
    op = OPS[name]
    ts = [as_tensor(x) for x in inputs]
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError("operands recorded on different tapes")
            tape = t.tape
    out, saved = op.forward(*(t.data for t in ts), **params)
    if tape is None:
        return Tensor(out)
    ts = [tape.attach(t) for t in ts]
    req = any(t.requires_grad for t in ts)
    node = Node(name, tuple(t.index for t in ts), params, out, req, saved if req else None)
    return tape._append(node)


def backprop(tape: Tape, output: Tensor, seed: Any = None) -> dict[int, Array]:
    """Reverse-mode sweep from ``output``.

    Returns a map from leaf node index to its accumulated gradient, for every
    leaf that requires one and is reachable from ``output``.
    """
    if output.tape is not tape:
        raise TapeError("output was not recorded on this tape")
    if seed is None:
        seed = np.ones_like(output.data)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise ShapeError(f"seed shape {seed.shape} != output shape {output.shape}")
    grads: dict[int, Array] = {output.index: seed}
    leaves: dict[int, Array] = {}
    for i in range(output.index, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = tape.nodes[i]
        if g.shape != node.value.shape:
            raise TapeError(f"gradient shape {g.shape} != node {i} value shape {node.value.shape}")
        if node.op == "leaf":
            if node.requires_grad:
                leaves[i] = g
            continue
        if not node.requires_grad:
            continue
        ins = [tape.nodes[j] for j in node.inputs]
        needs = [n.requires_grad for n in ins]
        gin = OPS[node.op].backward(g, node.saved, [n.value for n in ins], node.value,
                                    needs, **node.params)
        for j, gj, need in zip(node.inputs, gin, needs):
            if gj is None or not need:
                continue
            if j in grads:
                grads[j] = grads[j] + gj
            else:
                grads[j] = gj
    return leaves


def grad(output: Tensor, *wrt: Tensor, seed: Any = None) -> list[Array]:
    """Gradients of ``output`` with respect to the given leaves."""
    gmap = backprop(output.tape, output, seed)
    return [gmap.get(t.index, np.zeros_like(t.data)) for t in wrt]


def fd_gradient(f: Callable[[Array], float], x: Any, h: float = 1e-5) -> Array:
    """Central finite-difference gradient of a scalar function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class _Add(Op):
    name = "add"

    def forward(self, a, b):
        return a + b, None

    def backward(self, g, saved, xs, out, needs):
        return _unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)


class _Sub(Op):
    name = "sub"

    def forward(self, a, b):
        return a - b, None

    def backward(self, g, saved, xs, out, needs):
        return _unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)


class _Mul(Op):
    name = "mul"

    def forward(self, a, b):
        return a * b, None

    def backward(self, g, saved, xs, out, needs):
        a, b = xs
        return (_unbroadcast(g * b, a.shape) if needs[0] else None,
                _unbroadcast(g * a, b.shape) if needs[1] else None)


class _Div(Op):
    name = "div"

    def forward(self, a, b):
        return a / b, None

    def backward(self, g, saved, xs, out, needs):
        a, b = xs
        return (_unbroadcast(g / b, a.shape) if needs[0] else None,
                _unbroadcast(-g * out / b, b.shape) if needs[1] else None)


class _Neg(Op):
    name = "neg"

    def forward(self, a):
        return -a, None

    def backward(self, g, saved, xs, out, needs):
        return (-g,)


class _Exp(Op):
    name = "exp"

    def forward(self, a):
        return np.exp(a), None

    def backward(self, g, saved, xs, out, needs):
        return (g * out,)


class _Log(Op):
    name = "log"

    def forward(self, a):
        return np.log(a), None

    def backward(self, g, saved, xs, out, needs):
        return (g / xs[0],)


class _Sqrt(Op):
    name = "sqrt"

    def forward(self, a):
        return np.sqrt(a), None

    def backward(self, g, saved, xs, out, needs):
        return (g * 0.5 / out,)


class _Pow(Op):
    name = "pow"

    def forward(self, a, p):
        return np.power(a, p), None

    def backward(self, g, saved, xs, out, needs, p):
        return (g * p * np.power(xs[0], p - 1),)


class _Abs(Op):
    name = "abs"

    def forward(self, a):
        return np.abs(a), None

    def backward(self, g, saved, xs, out, needs):
        return (g * np.sign(xs[0]),)


class _Maximum(Op):
    name = "maximum"

    def forward(self, a, b):
        return np.maximum(a, b), None

    def backward(self, g, saved, xs, out, needs):
        a, b = xs
        pick_a = a >= b
        return (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                _unbroadcast(np.where(pick_a, 0.0, g), b.shape))


class _Minimum(Op):
    name = "minimum"

    def forward(self, a, b):
        return np.minimum(a, b), None

    def backward(self, g, saved, xs, out, needs):
        a, b = xs
        pick_a = a <= b
        return (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                _unbroadcast(np.where(pick_a, 0.0, g), b.shape))


class _Where(Op):
    name = "where"

    def forward(self, a, b, mask):
        return np.where(mask, a, b), None

    def backward(self, g, saved, xs, out, needs, mask):
        return (_unbroadcast(np.where(mask, g, 0.0), xs[0].shape),
                _unbroadcast(np.where(mask, 0.0, g), xs[1].shape))


class _Sum(Op):
    name = "sum"

    def forward(self, a, axis=None, keepdims=False):
        return np.asarray(a.sum(axis=axis, keepdims=keepdims)), None

    def backward(self, g, saved, xs, out, needs, axis=None, keepdims=False):
        shape = xs[0].shape
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
        return (np.broadcast_to(g, shape).copy(),)


class _Reshape(Op):
    name = "reshape"

    def forward(self, a, shape):
        return a.reshape(shape), None

    def backward(self, g, saved, xs, out, needs, shape):
        return (g.reshape(xs[0].shape),)


class _GetItem(Op):
    name = "getitem"

    def forward(self, a, key):
        return np.ascontiguousarray(a[key]), None

    def backward(self, g, saved, xs, out, needs, key):
        ga = np.zeros_like(xs[0])
        ga[key] = g
        return (ga,)


class _Take(Op):
    name = "take"

    def forward(self, a, indices, axis):
        return np.take(a, indices, axis=axis), None

    def backward(self, g, saved, xs, out, needs, indices, axis):
        ga = np.zeros_like(xs[0])
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (ga,)


class _Concat(Op):
    name = "concat"

    def forward(self, *xs, axis=0):
        return np.concatenate(xs, axis=axis), None

    def backward(self, g, saved, xs, out, needs, axis=0):
        cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return [np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis)]


def add(a, b) -> Tensor:
    return apply("add", a, b)


def sub(a, b) -> Tensor:
    return apply("sub", a, b)


def mul(a, b) -> Tensor:
    return apply("mul", a, b)


def div(a, b) -> Tensor:
    return apply("div", a, b)


def neg(a) -> Tensor:
    return apply("neg", a)


def exp(a) -> Tensor:
    return apply("exp", a)


def log(a) -> Tensor:
    return apply("log", a)


def sqrt(a) -> Tensor:
    return apply("sqrt", a)


def power(a, p: float) -> Tensor:
    return apply("pow", a, p=float(p))


def absolute(a) -> Tensor:
    return apply("abs", a)


def maximum(a, b) -> Tensor:
    return apply("maximum", a, b)


def minimum(a, b) -> Tensor:
    return apply("minimum", a, b)


def where(mask: Array, a, b) -> Tensor:
    """Select ``a`` where ``mask`` else ``b``; the mask is a constant."""
    return apply("where", a, b, mask=np.asarray(mask, dtype=bool))


def sum_(a, axis=None, keepdims=False) -> Tensor:
    return apply("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    return apply("reshape", a, shape=tuple(shape))


def getitem(a, key) -> Tensor:
    return apply("getitem", a, key=key)


def take(a, indices, axis: int = 0) -> Tensor:
    return apply("take", a, indices=np.asarray(indices, dtype=np.intp), axis=axis)


def concat(xs: Sequence[Any], axis: int = 0) -> Tensor:
    return apply("concat", *xs, axis=axis)


def vdot(a, b) -> Tensor:
    return sum_(mul(a, b))
