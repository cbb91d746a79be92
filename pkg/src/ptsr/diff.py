"""Tape-based reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to tensors that descend from
one of its parameter leaves. Operations on tensors without a tape (plain
constants) are evaluated eagerly and nothing is recorded, which is how the
model runs in inference mode.

    tape = Tape()
    x = tape.leaf(np.array(3.0), "x")
    y = x * x
    backward(tape, y)["x"]   # -> 6.0
"""

from __future__ import annotations

import numpy as np

from ptsr import specfn
from ptsr.errors import DomainError, GraphError, VerificationError


class Tape:
    """Ordered record of primitive applications plus named parameter leaves."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}

    def leaf(self, value, name: str) -> "Tensor":
        if name in self.params:
            raise GraphError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), name=name)
        self._record(t)
        self.params[name] = t
        return t

    def _record(self, t: "Tensor") -> None:
        t.tape = self
        t.index = len(self.nodes)
        self.nodes.append(t)

    def __len__(self):
        return len(self.nodes)


class Tensor:
    __slots__ = ("value", "tape", "index", "parents", "adjoint", "op", "name")
    __array_ufunc__ = None

    def __init__(self, value, op="const", parents=(), adjoint=None, name=None):
        self.value = value
        self.tape = None
        self.index = -1
        self.parents = parents
        self.adjoint = adjoint
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        where = f"node {self.index}" if self.tape is not None else "untracked"
        return f"Tensor({self.op}, shape={self.shape}, {where})"

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

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _node(value, op, parents, adjoint) -> Tensor:
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise GraphError(f"{op}: operands belong to different tapes")
            tape = p.tape
    if tape is None:
        return Tensor(value, op)
    t = Tensor(value, op, parents, adjoint)
    tape._record(t)
    return t


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise GraphError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value
    return _node(av * bv, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise DomainError("div: division by zero")
    out = av / bv

    def adjoint(g):
        gb = -g * out / bv
        return _unbroadcast(g / bv, av.shape), _unbroadcast(gb, bv.shape)

    return _node(out, "div", (a, b), adjoint)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.value, "neg", (a,), lambda g: (-g,))


def maximum(a, floor: float) -> Tensor:
    """Elementwise max against a constant floor; gradient passes where x > floor."""
    a = as_tensor(a)
    av = a.value
    return _node(np.maximum(av, floor), "maximum", (a,), lambda g: (g * (av > floor),))


# -- elementwise unary --------------------------------------------------------

def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    if np.any(av <= 0):
        raise DomainError("log of a non-positive value")
    return _node(np.log(av), "log", (a,), lambda g: (g / av,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.value)
    return _node(out, "sqrt", (a,), lambda g: (0.5 * g / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _node(np.asarray(specfn.softplus(av)), "softplus", (a,), lambda g: (g * specfn.sigmoid(av),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(specfn.sigmoid(a.value))
    return _node(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _node(np.asarray(specfn.log_sigmoid(av)), "log_sigmoid", (a,),
                 lambda g: (g * specfn.sigmoid(-av),))


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _node(np.asarray(specfn.lgamma(av)), "lgamma", (a,),
                 lambda g: (g * specfn.digamma(av),))


def digamma(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _node(np.asarray(specfn.digamma(av)), "digamma", (a,),
                 lambda g: (g * specfn.trigamma(av),))


# -- reductions and structure -------------------------------------------------

def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.sum(a.value, axis=axis, keepdims=keepdims), "sum", (a,), adjoint)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return sum(a, axis=axis) * (1.0 / count)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise GraphError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, "concat", tuple(tensors),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise GraphError(f"reshape: {exc}") from None
    return _node(out, "reshape", (a,), lambda g: (g.reshape(old),))


def swapaxes(a, axis1, axis2) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.value, axis1, axis2), "swapaxes", (a,),
                 lambda g: (np.swapaxes(g, axis1, axis2),))


def _scatter_add(shape, axis, idx, g):
    """Sum ``g`` back into ``shape`` at ``idx`` along ``axis`` in a fixed order."""
    pre = int(np.prod(shape[:axis], dtype=np.int64))
    post = int(np.prod(shape[axis + 1:], dtype=np.int64))
    flat = idx.reshape(-1) % shape[axis] if shape[axis] else idx.reshape(-1)
    g3 = np.asarray(g, dtype=np.float64).reshape(pre, flat.size, post)
    K = shape[axis]
    if flat.size <= 64:
        out = np.zeros((pre, K, post))
        for k, j in enumerate(flat):
            out[:, j] += g3[:, k]
        return out.reshape(shape)
    # one bincount over flattened (pre, row, post) slots; accumulates in input order
    slots = ((np.arange(pre)[:, None, None] * K + flat[None, :, None]) * post
             + np.arange(post)[None, None, :])
    return np.bincount(slots.ravel(), weights=g3.ravel(), minlength=pre * K * post).reshape(shape)


def take(a, indices, axis=0) -> Tensor:
    """Gather along ``axis`` with an integer index array (embedding lookup, windows)."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    shape = a.shape
    axis = axis % a.ndim
    try:
        out = np.take(a.value, idx, axis=axis)
    except IndexError as exc:
        raise GraphError(f"take: {exc}") from None

    def adjoint(g):
        return (_scatter_add(shape, axis, idx, g),)

    return _node(out, "take", (a,), adjoint)


def matmul(a, b) -> Tensor:
    """numpy ``matmul`` semantics, including batch broadcasting and 1-d operands."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    try:
        out = np.matmul(av, bv)
    except ValueError as exc:
        raise GraphError(f"matmul: {exc}") from None

    def adjoint(g):
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        g2 = g
        if bv.ndim == 1:
            g2 = g2[..., None]
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        return (_unbroadcast(ga, a2.shape).reshape(av.shape),
                _unbroadcast(gb, b2.shape).reshape(bv.shape))

    return _node(out, "matmul", (a, b), adjoint)


def softmax(a, axis=-1, mask=None) -> Tensor:
    """Softmax along ``axis``; see :func:`ptsr.specfn.softmax` for the mask contract."""
    a = as_tensor(a)
    out = specfn.softmax(a.value, axis=axis, mask=mask)

    def adjoint(g):
        return (out * (g - np.sum(out * g, axis=axis, keepdims=True)),)

    return _node(out, "softmax", (a,), adjoint)


# -- backward pass ------------------------------------------------------------

def backward(tape: Tape, seed: Tensor) -> dict[str, np.ndarray]:
    """Gradient of the scalar ``seed`` with respect to every parameter leaf.

    The tape is left untouched, so it can be reused with another seed.
    """
    if not isinstance(seed, Tensor) or seed.tape is not tape or tape.nodes[seed.index] is not seed:
        raise GraphError("backward seed is not a node on this tape")
    if seed.value.size != 1:
        raise GraphError(f"backward seed must be scalar, got shape {seed.shape}")

    grads = {seed.index: np.ones_like(seed.value)}
    result = {name: np.zeros_like(leaf.value) for name, leaf in tape.params.items()}
    for node in reversed(tape.nodes[: seed.index + 1]):
        g = grads.pop(node.index, None)
        if g is None:
            continue
        if node.adjoint is None:
            if node.name in result:
                result[node.name] = np.asarray(g, dtype=np.float64).reshape(node.shape)
            continue
        for parent, pg in zip(node.parents, node.adjoint(g)):
            if parent.tape is None or pg is None:
                continue
            prev = grads.get(parent.index)
            grads[parent.index] = pg if prev is None else prev + pg
    return result


def finite_difference_check(loss_fn, params: dict, step: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``loss_fn`` maps a dict of tensors (same keys as ``params``) to a scalar
    tensor. Per coordinate the error is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not step > 0:
        raise DomainError(f"finite-difference step must be positive, got {step}")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape()
    leaves = {k: tape.leaf(v, k) for k, v in params.items()}
    grads = backward(tape, loss_fn(leaves))

    def evaluate(values):
        return float(loss_fn({k: constant(v) for k, v in values.items()}).value)

    base = evaluate(params)
    if evaluate(params) != base:
        raise VerificationError("loss function is not deterministic")

    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        analytic = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = evaluate(params)
            flat[i] = orig - step
            down = evaluate(params)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst
