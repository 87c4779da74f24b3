"""Array-level reverse-mode automatic differentiation.

A :class:`Tape` records every primitive applied to a :class:`Var`; each
record keeps the forward function, its constant arguments and the output
value, which is enough both to replay the computation and to run the
reverse sweep. Primitives accept plain ``numpy`` arrays too, in which case
nothing is recorded and the plain numpy result is returned, so model
coefficient functions are written once and work on either.

Supported primitives: affine map, tanh, elementwise ``+ - * /``, square,
log, arctan, sum/mean reductions and squared norm, plus the structural
reshape, basic slicing and concatenation needed to move data around.
Broadcasting follows numpy; gradients are summed back to operand shapes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import UsageError


class Var:
    """A taped array. ``value`` is the forward result, ``index`` its tape slot."""

    __slots__ = ("value", "tape", "index")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, index={self.index})"

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

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("op", "args", "fwd", "vjps", "value")

    def __init__(self, op, args, fwd, vjps, value):
        self.op = op
        self.args = args
        self.fwd = fwd
        self.vjps = vjps
        self.value = value


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in evaluation order, so the reverse sweep simply
    walks the list backwards; gradient contributions are accumulated in
    that fixed order, which keeps results bit-reproducible.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._watched: dict[int, tuple[object, list[Var]]] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value) -> Var:
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(_Node("leaf", (), None, (), value))
        return Var(value, self, len(self.nodes) - 1)

    def watch(self, owner: object, arrays: Sequence[np.ndarray]) -> list[Var]:
        """Leaves for ``arrays`` belonging to ``owner``; created once per tape."""
        key = id(owner)
        if key not in self._watched:
            self._watched[key] = (owner, [self.leaf(a) for a in arrays])
        return self._watched[key][1]

    def leaves_of(self, owner: object) -> list[Var] | None:
        entry = self._watched.get(id(owner))
        return None if entry is None else entry[1]

    @property
    def watched(self) -> list[tuple[object, list[Var]]]:
        return list(self._watched.values())

    def _record(self, op, args, fwd, vjps, value) -> Var:
        self.nodes.append(_Node(op, args, fwd, vjps, value))
        return Var(value, self, len(self.nodes) - 1)

    def gradients(self, loss: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """d(loss)/d(v) for every ``v`` in ``wrt`` (zeros where unreachable)."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise UsageError("loss was not produced by this tape")
        if loss.value.size != 1:
            raise UsageError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.value)
        for idx in range(loss.index, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            node = self.nodes[idx]
            if not node.args:
                continue
            vals = tuple(a.value if isinstance(a, Var) else a for a in node.args)
            for pos, arg in enumerate(node.args):
                if not isinstance(arg, Var):
                    continue
                pg = _unbroadcast(node.vjps[pos](g, node.value, *vals), arg.value.shape)
                prev = grads[arg.index]
                grads[arg.index] = pg if prev is None else prev + pg
        out = []
        for v in wrt:
            g = grads[v.index]
            out.append(np.zeros_like(v.value) if g is None else np.array(g, dtype=np.float64))
        return out

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves; returns the node values in order."""
        vals: list[np.ndarray] = []
        for node in self.nodes:
            if node.fwd is None:
                vals.append(node.value)
            else:
                args = [vals[a.index] if isinstance(a, Var) else a for a in node.args]
                vals.append(node.fwd(*args))
        return vals


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _apply(op: str, fwd: Callable, vjps: Sequence[Callable], *args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise UsageError("operands belong to different tapes")
    vals = tuple(a.value if isinstance(a, Var) else a for a in args)
    out = fwd(*vals)
    if tape is None:
        return out
    return tape._record(op, args, fwd, vjps, np.asarray(out, dtype=np.float64))


def value(x):
    """Strip the tape: the plain array behind ``x``."""
    return x.value if isinstance(x, Var) else x


# elementwise arithmetic ------------------------------------------------------

def add(a, b):
    return _apply("add", np.add, (lambda g, o, a, b: g, lambda g, o, a, b: g), a, b)


def sub(a, b):
    return _apply("sub", np.subtract, (lambda g, o, a, b: g, lambda g, o, a, b: -g), a, b)


def mul(a, b):
    return _apply("mul", np.multiply, (lambda g, o, a, b: g * b, lambda g, o, a, b: g * a), a, b)


def div(a, b):
    return _apply(
        "div",
        np.divide,
        (lambda g, o, a, b: g / b, lambda g, o, a, b: -g * a / (b * b)),
        a,
        b,
    )


def neg(a):
    return _apply("neg", np.negative, (lambda g, o, a: -g,), a)


def square(a):
    return _apply("square", np.square, (lambda g, o, a: 2.0 * a * g,), a)


def tanh(a):
    return _apply("tanh", np.tanh, (lambda g, o, a: g * (1.0 - o * o),), a)


def log(a):
    return _apply("log", np.log, (lambda g, o, a: g / a,), a)


def arctan(a):
    return _apply("arctan", np.arctan, (lambda g, o, a: g / (1.0 + a * a),), a)


# reductions --------------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    def fwd(a):
        return np.sum(a, axis=axis, keepdims=keepdims)

    return _apply("sum", fwd, (lambda g, o, a: _expand(g, np.shape(a), axis, keepdims),), a)


def mean(a, axis=None, keepdims=False):
    def fwd(a):
        return np.mean(a, axis=axis, keepdims=keepdims)

    def vjp(g, o, a):
        n = np.size(a) // max(np.size(o), 1)
        return _expand(g, np.shape(a), axis, keepdims) / n

    return _apply("mean", fwd, (vjp,), a)


def sqnorm(a, axis=None, keepdims=False):
    """Sum of squares along ``axis``."""

    def fwd(a):
        return np.sum(a * a, axis=axis, keepdims=keepdims)

    return _apply(
        "sqnorm", fwd, (lambda g, o, a: 2.0 * a * _expand(g, np.shape(a), axis, keepdims),), a
    )


# dense layer -------------------------------------------------------------------

def _affine(x, w, b):
    return x @ w.T + b


def affine(x, w, b):
    """``x @ w.T + b`` for a single input vector or a batch of row vectors."""
    return _apply(
        "affine",
        _affine,
        (
            lambda g, o, x, w, b: g @ w,
            lambda g, o, x, w, b: np.atleast_2d(g).T @ np.atleast_2d(x),
            lambda g, o, x, w, b: g,
        ),
        x,
        w,
        b,
    )


# structural ------------------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    return _apply(
        "reshape",
        lambda a: np.reshape(a, shape),
        (lambda g, o, a: np.reshape(g, np.shape(a)),),
        a,
    )


def getitem(a, key):
    """Basic (non-repeating) indexing; gradient scatters back into zeros."""

    def vjp(g, o, a):
        out = np.zeros(np.shape(a))
        out[key] = g
        return out

    return _apply("getitem", lambda a: a[key], (vjp,), a)


def concat(parts: Sequence, axis: int = -1):
    sizes = [np.shape(value(p))[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def fwd(*ps):
        return np.concatenate(ps, axis=axis)

    def make_vjp(lo, hi):
        def vjp(g, o, *ps):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return vjp

    vjps = [make_vjp(bounds[j], bounds[j + 1]) for j in range(len(parts))]
    return _apply("concat", fwd, vjps, *parts)
