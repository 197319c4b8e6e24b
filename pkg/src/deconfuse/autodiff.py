"""Minimal reverse-mode differentiation on an explicit tape.

Only the primitives the training objective needs are provided.  Records are
appended in execution order, so the reversed list is already a valid
topological order for the backward sweep.

Kink-bearing primitives (relu, selu, maxpool) store their branch pattern on
the tape; :meth:`Tape.signature` exposes it so finite-difference checks can
detect when a perturbation crosses a nondifferentiable point.

    >>> tape = Tape()
    >>> x = tape.var(np.array([[1.0, 2.0]]))
    >>> y = frobenius_sq(x)
    >>> tape.gradients(y)[x].tolist()
    [[2.0, 4.0]]
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor_ops as ops
from .errors import NumericOverflowError, ShapeError


class Var:
    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape, self.index, self.value = tape, index, value

    @property
    def shape(self):
        return self.value.shape

    def __hash__(self):
        return hash((id(self.tape), self.index))

    def __eq__(self, other):
        return isinstance(other, Var) and other.tape is self.tape and other.index == self.index

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self.tape.const(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"


class _Record:
    __slots__ = ("name", "inputs", "backward", "branch")

    def __init__(self, name, inputs, backward, branch):
        self.name, self.inputs, self.backward, self.branch = name, inputs, backward, branch


class Tape:
    def __init__(self):
        self.values: list[np.ndarray] = []
        self.records: list[_Record | None] = []

    def var(self, value) -> Var:
        """Leaf variable (differentiable input)."""
        v = np.array(value, dtype=np.float64)
        self.values.append(v)
        self.records.append(None)
        return Var(self, len(self.values) - 1, v)

    const = var

    def record(self, name: str, value, inputs: tuple, backward: Callable, branch: bytes | None = None) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericOverflowError(name)
        self.values.append(value)
        self.records.append(_Record(name, inputs, backward, branch))
        return Var(self, len(self.values) - 1, value)

    def signature(self) -> tuple:
        return tuple(r.branch for r in self.records if r is not None and r.branch is not None)

    def gradients(self, root: Var) -> dict[Var, np.ndarray]:
        """Adjoints of scalar ``root`` with respect to every node that feeds it."""
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if root.value.size != 1:
            raise ShapeError("gradients are only defined for scalar outputs")
        adj: list[np.ndarray | None] = [None] * len(self.values)
        adj[root.index] = np.ones_like(root.value)
        for i in range(root.index, -1, -1):
            g = adj[i]
            rec = self.records[i]
            if g is None or rec is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NumericOverflowError(rec.name, "non-finite adjoint")
                j = inp.index
                adj[j] = gi if adj[j] is None else adj[j] + gi
        out = {}
        for i, g in enumerate(adj):
            if g is not None and self.records[i] is None:
                out[Var(self, i, self.values[i])] = g
        return out


def _tape(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.const(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Var:
    t = _tape(a, b)
    a, b = _lift(t, a), _lift(t, b)
    sa, sb = a.shape, b.shape
    return t.record("add", a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    t = _tape(a, b)
    a, b = _lift(t, a), _lift(t, b)
    sa, sb = a.shape, b.shape
    return t.record("sub", a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def scale(x: Var, c: float) -> Var:
    c = float(c)
    return x.tape.record("scale", c * x.value, (x,), lambda g: (c * g,))


def add_n(terms) -> Var:
    terms = list(terms)
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def reshape(x: Var, shape) -> Var:
    src = x.shape
    return x.tape.record("reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(src),))


def flatten(x: Var) -> Var:
    """(K, M, D) -> (K, M*D), channel-major."""
    return reshape(x, (x.shape[0], -1))


def matmul(a, b) -> Var:
    t = _tape(a, b)
    a, b = _lift(t, a), _lift(t, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    av, bv = a.value, b.value
    return t.record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def frobenius_sq(x: Var) -> Var:
    xv = x.value
    return x.tape.record("frobenius_sq", np.sum(xv * xv), (x,), lambda g: (2.0 * g * xv,))


def logdet(x: Var, floor: float = ops.SV_FLOOR) -> Var:
    """Floored log-det of a matrix or of a filter bank (filters as columns)."""
    mat = x.value.reshape(x.shape[0], -1) if x.value.ndim == 3 else x.value
    s = ops.singular_values(mat)
    val = np.sum(np.log(np.maximum(s, floor)))
    # singular values below the floor form a kink, like a relu branch
    below = s < floor

    def back(g):
        _, grad = ops.logdet_value_and_gradient(mat, floor)
        return (g * grad.reshape(x.shape),)

    return x.tape.record("logdet_rect", np.asarray(val), (x,), back, np.packbits(below).tobytes())


def conv1d(x: Var, w: Var, stride: int = 1, padding: int = 0) -> Var:
    t = _tape(x, w)
    x, w = _lift(t, x), _lift(t, w)
    xv, wv = x.value, w.value
    out = ops.conv1d_raw(xv, wv, stride, padding)
    return t.record("conv1d", out, (x, w), lambda g: ops.conv1d_backward(g, xv, wv, stride, padding))


def maxpool1d(x: Var, kernel: int, stride: int) -> Var:
    out, arg = ops.maxpool1d_with_argmax(x.value, kernel, stride)
    length = x.shape[2]
    return x.tape.record(
        "maxpool1d", out, (x,), lambda g: (ops.maxpool1d_backward(g, arg, length, stride),), branch=arg.tobytes()
    )


def selu(x: Var) -> Var:
    xv = x.value
    mask = xv > 0
    return x.tape.record(
        "selu", ops.selu(xv), (x,), lambda g: (g * ops.selu_derivative(xv),), branch=np.packbits(mask).tobytes()
    )


def relu(x: Var) -> Var:
    mask = x.value > 0
    # subgradient 0 at the kink
    return x.tape.record(
        "relu", np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), branch=np.packbits(mask).tobytes()
    )


def identity(x: Var) -> Var:
    return x


ACTIVATIONS = {"selu": selu, "relu": relu, "identity": identity}


def value_and_grad(fn: Callable, params: dict[str, np.ndarray]):
    """Evaluate ``fn(vars) -> Var | (Var, aux)`` and return (value, grads, aux, tape)."""
    tape = Tape()
    leaves = {k: tape.var(v) for k, v in params.items()}
    out = fn(leaves)
    root, aux = (out if isinstance(out, tuple) else (out, None))
    adj = tape.gradients(root)
    grads = {k: adj.get(v, np.zeros_like(v.value)) for k, v in leaves.items()}
    return float(root.value), grads, aux, tape


def evaluate(fn: Callable, params: dict[str, np.ndarray]) -> tuple[float, Tape]:
    """Forward pass only; returns the value and the tape (for its branch signature)."""
    tape = Tape()
    out = fn({k: tape.var(v) for k, v in params.items()})
    root = out[0] if isinstance(out, tuple) else out
    return float(root.value), tape
