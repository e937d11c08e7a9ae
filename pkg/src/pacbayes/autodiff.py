"""Reverse-mode automatic differentiation on dense float64 arrays.

A small tape-based engine with just enough primitives for MLP forward passes
and for gradients of the PAC-Bayes objective with respect to weights and
log-variances. Tensors are immutable once created; ops never mutate their
inputs. Every op checks its output for non-finite values and raises
NumericError instead of letting NaNs propagate into a training step.
"""
from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(ArithmeticError):
    """An op produced non-finite values (overflow, log of a nonpositive)."""


class Tensor:
    """Dense float64 array, optionally recorded on a tape."""

    __slots__ = ("data", "tape", "nid")

    def __init__(self, data, tape=None, nid=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.nid = nid

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = "leaf" if self.nid is not None and self.tape is not None else "const"
        return f"Tensor({self.data!r}, {tag})"


class Tape:
    """Ordered record of primitive ops; creation order is topological order."""

    def __init__(self):
        self.nodes = []  # (out_nid, ((in_nid, vjp), ...))
        self.leaves = {}  # leaf nid -> shape
        self._count = 0

    def _next_id(self) -> int:
        nid = self._count
        self._count += 1
        return nid

    def leaf(self, data) -> Tensor:
        arr = np.array(data, dtype=np.float64)  # own copy, caller keeps theirs
        arr.flags.writeable = False
        t = Tensor(arr, self, self._next_id())
        if not np.all(np.isfinite(t.data)):
            raise NumericError("leaf holds non-finite values")
        self.leaves[t.nid] = t.data.shape
        return t


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands recorded on different tapes")
    return tape


def _record(name, out_data, pairs):
    """Finish an op: finiteness check, then tape registration if needed."""
    out_data = np.asarray(out_data, dtype=np.float64)
    out_data.flags.writeable = False  # op outputs are fresh arrays or views of frozen ones
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"{name} produced non-finite values")
    tape = _tape_of(*(t for t, _ in pairs))
    if tape is None:
        return Tensor(out_data)
    nid = tape._next_id()
    recorded = tuple((t.nid, fn) for t, fn in pairs if t.nid is not None)
    tape.nodes.append((nid, recorded))
    return Tensor(out_data, tape, nid)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the operand's shape."""
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    with np.errstate(all="ignore"):
        out = ad @ bd
    return _record("matmul", out, [(a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)])


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    with np.errstate(all="ignore"):
        out = a.data + b.data
    return _record("add", out, [(a, lambda g: _unbroadcast(g, sa)),
                                (b, lambda g: _unbroadcast(g, sb))])


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    with np.errstate(all="ignore"):
        out = a.data - b.data
    return _record("sub", out, [(a, lambda g: _unbroadcast(g, sa)),
                                (b, lambda g: _unbroadcast(-g, sb))])


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    with np.errstate(all="ignore"):
        out = ad * bd
    return _record("mul", out, [(a, lambda g: _unbroadcast(g * bd, ad.shape)),
                                (b, lambda g: _unbroadcast(g * ad, bd.shape))])


def neg(a) -> Tensor:
    a = _wrap(a)
    return _record("neg", -a.data, [(a, lambda g: -g)])


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(all="ignore"):
        out = np.exp(a.data)
    return _record("exp", out, [(a, lambda g: g * out)])


def log(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    with np.errstate(all="ignore"):
        out = np.log(ad)
    return _record("log", out, [(a, lambda g: g / ad)])


def relu(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    out = np.maximum(ad, 0.0)
    return _record("relu", out, [(a, lambda g: g * (ad > 0.0))])


def square(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    with np.errstate(all="ignore"):
        out = ad * ad
    return _record("square", out, [(a, lambda g: 2.0 * ad * g)])


def absval(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return _record("abs", np.abs(ad), [(a, lambda g: g * np.sign(ad))])


def sum_(a) -> Tensor:
    a = _wrap(a)
    shape = a.shape
    with np.errstate(all="ignore"):
        out = a.data.sum()
    return _record("sum", out, [(a, lambda g: np.broadcast_to(g, shape))])


def mean_(a) -> Tensor:
    a = _wrap(a)
    shape, n = a.shape, a.size
    if n == 0:
        raise DimensionError("mean of an empty tensor")
    with np.errstate(all="ignore"):
        out = a.data.mean()
    return _record("mean", out, [(a, lambda g: np.broadcast_to(g / n, shape))])


def mul_const(a, c) -> Tensor:
    a = _wrap(a)
    c = np.asarray(c, dtype=np.float64)
    sa = a.shape
    with np.errstate(all="ignore"):
        out = a.data * c
    return _record("mul_const", out, [(a, lambda g: _unbroadcast(g * c, sa))])


def add_const(a, c) -> Tensor:
    a = _wrap(a)
    c = np.asarray(c, dtype=np.float64)
    sa = a.shape
    with np.errstate(all="ignore"):
        out = a.data + c
    return _record("add_const", out, [(a, lambda g: _unbroadcast(g, sa))])


def logsumexp(a, axis=None) -> Tensor:
    """Stable log(sum(exp(x))), over everything or one axis."""
    a = _wrap(a)
    ad = a.data
    with np.errstate(all="ignore"):
        if axis is None:
            hi = ad.max()
            out = hi + np.log(np.exp(ad - hi).sum())
            soft = np.exp(ad - out)
            pairs = [(a, lambda g: g * soft)]
        else:
            hi = ad.max(axis=axis, keepdims=True)
            out_k = hi + np.log(np.exp(ad - hi).sum(axis=axis, keepdims=True))
            soft = np.exp(ad - out_k)
            out = np.squeeze(out_k, axis=axis)
            pairs = [(a, lambda g: np.expand_dims(g, axis) * soft)]
    return _record("logsumexp", out, pairs)


def log_softmax(a) -> Tensor:
    """Row-wise log softmax over the last axis."""
    a = _wrap(a)
    ad = a.data
    with np.errstate(all="ignore"):
        hi = ad.max(axis=-1, keepdims=True)
        lse = hi + np.log(np.exp(ad - hi).sum(axis=-1, keepdims=True))
        out = ad - lse

    def grad(g):
        return g - np.exp(out) * g.sum(axis=-1, keepdims=True)

    return _record("log_softmax", out, [(a, grad)])


def segment(a, start, stop) -> Tensor:
    """Contiguous slice of a flat vector, with scatter-back gradient."""
    a = _wrap(a)
    if a.data.ndim != 1:
        raise DimensionError("segment expects a flat vector")
    if not (0 <= start <= stop <= a.size):
        raise DimensionError(f"segment [{start}:{stop}] out of range for {a.size}")
    d = a.size
    out = a.data[start:stop].copy()

    def grad(g):
        z = np.zeros(d)
        z[start:stop] = g
        return z

    return _record("segment", out, [(a, grad)])


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    sa = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {sa} to {shape}") from exc
    return _record("reshape", out, [(a, lambda g: np.asarray(g).reshape(sa))])


def backward(tape: Tape, output: Tensor) -> dict:
    """Gradients of a scalar output with respect to every leaf.

    Returns {leaf nid: Tensor}; leaves the output does not depend on get
    zero gradients of the right shape.
    """
    if output.tape is not tape or output.nid is None:
        raise ValueError("output is not recorded on this tape")
    if output.shape != ():
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    grads = {output.nid: np.ones(())}
    for nid, pairs in reversed(tape.nodes):
        g = grads.pop(nid, None)
        if g is None:
            continue
        for in_nid, vjp in pairs:
            contrib = vjp(g)
            held = grads.get(in_nid)
            grads[in_nid] = contrib if held is None else held + contrib
    out = {}
    for nid, shape in tape.leaves.items():
        g = grads.get(nid)
        out[nid] = Tensor(np.zeros(shape) if g is None else np.asarray(g, dtype=np.float64).reshape(shape))
    return out
