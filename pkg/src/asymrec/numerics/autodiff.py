"""Tensor-level reverse-mode differentiation.

A :class:`Tape` records every operation whose inputs depend on a tracked
parameter. Operations on untracked values (constants, or inference with no
tape) are evaluated eagerly and never recorded, so the same model code serves
training and inference.

    tape = Tape()
    w = tape.param(np.ones((3, 2)), "w")
    loss = (w @ x).sum()
    grads = backward(tape, loss)    # {"w": array of shape (3, 2)}
"""

import math

import numpy as np

from ..errors import UsageError


class Tape:
    def __init__(self):
        self.nodes = []
        self.params = {}

    def param(self, value, name: str) -> "Var":
        if name in self.params:
            raise UsageError(f"parameter {name!r} already tracked on this tape")
        v = Var(np.array(value, dtype=np.float64), tape=self, name=name)
        self.params[name] = v
        return v


class Var:
    __slots__ = ("value", "tape", "parents", "vjp", "name")
    __array_priority__ = 1000

    def __init__(self, value, tape=None, parents=(), vjp=None, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"<Var{tag} shape={self.value.shape}>"

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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def lift(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64))


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _record(value, parents, vjp) -> Var:
    tape = None
    for p in parents:
        if p.tape is not None:
            tape = p.tape
            break
    if tape is None:
        return Var(value)
    out = Var(value, tape=tape, parents=parents, vjp=vjp)
    tape.nodes.append(out)
    return out


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(tape: Tape, loss: Var) -> dict:
    """Gradient of scalar ``loss`` with respect to every parameter on ``tape``."""
    if not isinstance(loss, Var) or loss.value.size != 1:
        raise UsageError("backward needs a scalar loss node")
    if loss.tape is not tape:
        raise UsageError("loss was not recorded on this tape")
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent.tape is None or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {}
    for name, p in tape.params.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.value) if g is None else np.broadcast_to(g, p.value.shape).copy()
    return out


# elementwise arithmetic


def add(a, b):
    a, b = lift(a), lift(b)
    sa, sb = a.value.shape, b.value.shape
    return _record(a.value + b.value, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b):
    a, b = lift(a), lift(b)
    sa, sb = a.value.shape, b.value.shape
    return _record(a.value - b.value, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b):
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    return _record(
        av * bv,
        (a, b),
        lambda g: (unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)),
    )


def div(a, b):
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    out = av / bv
    return _record(
        out,
        (a, b),
        lambda g: (unbroadcast(g / bv, av.shape), unbroadcast(-g * out / bv, bv.shape)),
    )


def power(a, p: float):
    a = lift(a)
    av = a.value
    return _record(av**p, (a,), lambda g: (g * p * av ** (p - 1),))


def exp(a):
    a = lift(a)
    out = np.exp(a.value)
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    a = lift(a)
    av = a.value
    return _record(np.log(av), (a,), lambda g: (g / av,))


def tanh(a):
    a = lift(a)
    out = np.tanh(a.value)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sqrt(a):
    a = lift(a)
    out = np.sqrt(a.value)
    # zero subgradient at the kink keeps orthonormal fixed points finite
    return _record(out, (a,), lambda g: (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),))


def abs_(a):
    a = lift(a)
    av = a.value
    return _record(np.abs(av), (a,), lambda g: (g * np.sign(av),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Tanh-form GELU."""
    a = lift(a)
    x = a.value
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record(out, (a,), vjp)


# reductions and shape


def sum_(a, axis=None, keepdims=False):
    a = lift(a)
    shape = a.value.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = lift(a)
    n = a.value.size if axis is None else np.prod([a.value.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / float(n))


def reshape(a, shape):
    a = lift(a)
    old = a.value.shape
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.value.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a):
    a = lift(a)
    axes = list(range(a.value.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a, idx):
    a = lift(a)
    shape = a.value.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.value[idx], (a,), vjp)


def concat(items, axis=-1):
    items = [lift(x) for x in items]
    sizes = [x.value.shape[axis] for x in items]
    cuts = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([x.value for x in items], axis=axis),
        tuple(items),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def _row_stable_matmul(av, bv):
    # BLAS routes single-row products through a different kernel whose rounding
    # differs from the multi-row one; padding to two rows keeps row i of a
    # product bit-identical however many rows follow it (exact causality).
    if av.shape[-2] != 1:
        return av @ bv
    padded = np.concatenate([av, np.zeros_like(av)], axis=-2)
    return (padded @ bv)[..., :1, :]


def matmul(a, b):
    """Batched matrix product (numpy broadcasting rules, both operands >= 2-d)."""
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise UsageError("matmul operands must be at least 2-d")

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return unbroadcast(ga, av.shape), unbroadcast(gb, bv.shape)

    return _record(_row_stable_matmul(av, bv), (a, b), vjp)


# normalisation


def log_softmax(a, axis=-1):
    a = lift(a)
    x = a.value
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _record(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softmax(a, axis=-1):
    a = lift(a)
    x = a.value
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _record(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def layer_norm(x, scale, offset, eps=1e-5):
    x, scale, offset = lift(x), lift(scale), lift(offset)
    xv, sv = x.value, scale.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    def vjp(g):
        gx_hat = g * sv
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, unbroadcast(g * xhat, sv.shape), unbroadcast(g, offset.value.shape)

    return _record(xhat * sv + offset.value, (x, scale, offset), vjp)


def frobenius(a):
    return sqrt(sum_(a * a))
