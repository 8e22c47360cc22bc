"""Reverse-mode gradients for the fixed computation graphs the models use.

This is not a general autodiff system: it provides exactly the primitives
the reduction and construction models are built from, each with an
analytically written backward rule.  Every value is a 2-D numpy array.

Ops accept either a :class:`Var` (recorded on its tape) or a plain ndarray
(computed directly, nothing recorded), so one model implementation serves
both the training path and the far hotter inference path.

Backward-pass aliasing rule: a closure may hand `_acc` any array, including
views of a consumer's grad buffer; `_acc` copies on first accumulation so
two leaves never share a grad buffer.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Union

import numpy as np

Arr = np.ndarray
Operand = Union["Var", np.ndarray]


class Tape:
    """Records backward closures in execution order."""

    __slots__ = ("_steps",)

    def __init__(self) -> None:
        self._steps: list = []

    def backward(self, out: "Var", seed: Union[float, Arr] = 1.0) -> None:
        """Seed d(loss)/d(out) and run all recorded closures in reverse."""
        grad = np.full_like(out.value, seed) if np.isscalar(seed) else np.asarray(seed)
        _acc(out, grad)
        for fn in reversed(self._steps):
            fn()
        self._steps.clear()


class Var:
    """A tape-tracked 2-D array; ``grad`` is filled during backward."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value: Arr, tape: Tape) -> None:
        self.value = value
        self.grad: Optional[Arr] = None
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape


def value_of(x: Operand) -> Arr:
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs: Operand) -> Optional[Tape]:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _acc(v: Var, g: Arr) -> None:
    if v.grad is None:
        v.grad = np.array(g, copy=True)
    else:
        v.grad += g


def _unbroadcast(g: Arr, shape) -> Arr:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _out(value: Arr, tape: Optional[Tape], backward) -> Operand:
    if tape is None:
        return value
    out = Var(value, tape)
    tape._steps.append(lambda: backward(out))
    return out


# -----------------------------
# Primitives
# -----------------------------


def matmul(a: Operand, b: Operand) -> Operand:
    av, bv = value_of(a), value_of(b)
    tape = _tape_of(a, b)
    val = av @ bv

    def backward(out: Var) -> None:
        g = out.grad
        if isinstance(a, Var):
            _acc(a, g @ bv.T)
        if isinstance(b, Var):
            _acc(b, av.T @ g)

    return _out(val, tape, backward)


def transpose(x: Operand) -> Operand:
    xv = value_of(x)
    tape = _tape_of(x)

    def backward(out: Var) -> None:
        if isinstance(x, Var):
            _acc(x, out.grad.T)

    return _out(xv.T, tape, backward)


def add(a: Operand, b: Operand) -> Operand:
    av, bv = value_of(a), value_of(b)
    tape = _tape_of(a, b)

    def backward(out: Var) -> None:
        g = out.grad
        if isinstance(a, Var):
            _acc(a, _unbroadcast(g, av.shape))
        if isinstance(b, Var):
            _acc(b, _unbroadcast(g, bv.shape))

    return _out(av + bv, tape, backward)


def sub(a: Operand, b: Operand) -> Operand:
    av, bv = value_of(a), value_of(b)
    tape = _tape_of(a, b)

    def backward(out: Var) -> None:
        g = out.grad
        if isinstance(a, Var):
            _acc(a, _unbroadcast(g, av.shape))
        if isinstance(b, Var):
            _acc(b, _unbroadcast(-g, bv.shape))

    return _out(av - bv, tape, backward)


def mul(a: Operand, b: Union[Operand, float]) -> Operand:
    """Elementwise product; `b` may be a python float constant."""
    if isinstance(b, (int, float)):
        av = value_of(a)
        tape = _tape_of(a)
        c = float(b)

        def backward_const(out: Var) -> None:
            if isinstance(a, Var):
                _acc(a, out.grad * c)

        return _out(av * c, tape, backward_const)

    av, bv = value_of(a), value_of(b)
    tape = _tape_of(a, b)

    def backward(out: Var) -> None:
        g = out.grad
        if isinstance(a, Var):
            _acc(a, _unbroadcast(g * bv, av.shape))
        if isinstance(b, Var):
            _acc(b, _unbroadcast(g * av, bv.shape))

    return _out(av * bv, tape, backward)


def div(a: Operand, b: Operand) -> Operand:
    av, bv = value_of(a), value_of(b)
    tape = _tape_of(a, b)
    val = av / bv

    def backward(out: Var) -> None:
        g = out.grad
        if isinstance(a, Var):
            _acc(a, _unbroadcast(g / bv, av.shape))
        if isinstance(b, Var):
            _acc(b, _unbroadcast(-g * val / bv, bv.shape))

    return _out(val, tape, backward)


def exp(x: Operand) -> Operand:
    xv = value_of(x)
    tape = _tape_of(x)
    val = np.exp(xv)

    def backward(out: Var) -> None:
        if isinstance(x, Var):
            _acc(x, out.grad * val)

    return _out(val, tape, backward)


def log(x: Operand) -> Operand:
    xv = value_of(x)
    tape = _tape_of(x)

    def backward(out: Var) -> None:
        if isinstance(x, Var):
            _acc(x, out.grad / xv)

    return _out(np.log(xv), tape, backward)


def sigmoid(x: Operand) -> Operand:
    xv = value_of(x)
    tape = _tape_of(x)
    # stable on both tails
    val = np.where(xv >= 0, 1.0 / (1.0 + np.exp(-np.abs(xv))),
                   np.exp(-np.abs(xv)) / (1.0 + np.exp(-np.abs(xv))))
    val = val.astype(xv.dtype, copy=False)

    def backward(out: Var) -> None:
        if isinstance(x, Var):
            _acc(x, out.grad * val * (1.0 - val))

    return _out(val, tape, backward)


def tanh(x: Operand) -> Operand:
    xv = value_of(x)
    tape = _tape_of(x)
    val = np.tanh(xv)

    def backward(out: Var) -> None:
        if isinstance(x, Var):
            _acc(x, out.grad * (1.0 - val * val))

    return _out(val, tape, backward)


def relu(x: Operand) -> Operand:
    xv = value_of(x)
    tape = _tape_of(x)
    val = np.maximum(xv, 0.0)

    def backward(out: Var) -> None:
        if isinstance(x, Var):
            _acc(x, out.grad * (xv > 0))

    return _out(val, tape, backward)


def sum_all(x: Operand) -> Operand:
    xv = value_of(x)
    tape = _tape_of(x)

    def backward(out: Var) -> None:
        if isinstance(x, Var):
            _acc(x, np.broadcast_to(out.grad, xv.shape))

    return _out(xv.sum().reshape(1, 1), tape, backward)


def add_n(xs: Sequence[Operand]) -> Operand:
    """Sum of same-shape operands (cheaper than a chain of adds)."""
    vals = [value_of(x) for x in xs]
    tape = _tape_of(*xs)
    val = vals[0].copy()
    for v in vals[1:]:
        val += v

    def backward(out: Var) -> None:
        for x in xs:
            if isinstance(x, Var):
                _acc(x, out.grad)

    return _out(val, tape, backward)


def concat_rows(xs: Sequence[Operand]) -> Operand:
    vals = [value_of(x) for x in xs]
    tape = _tape_of(*xs)
    sizes = [v.shape[0] for v in vals]

    def backward(out: Var) -> None:
        offset = 0
        for x, size in zip(xs, sizes):
            if isinstance(x, Var):
                _acc(x, out.grad[offset : offset + size])
            offset += size

    return _out(np.concatenate(vals, axis=0), tape, backward)


def gather_rows(x: Operand, idx: np.ndarray) -> Operand:
    """Rows of x selected by an index array (duplicates allowed)."""
    xv = value_of(x)
    tape = _tape_of(x)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(out: Var) -> None:
        if isinstance(x, Var):
            g = np.zeros_like(xv)
            np.add.at(g, idx, out.grad)
            _acc(x, g)

    return _out(xv[idx], tape, backward)


def concat_cols(xs: Sequence[Operand]) -> Operand:
    vals = [value_of(x) for x in xs]
    tape = _tape_of(*xs)
    sizes = [v.shape[1] for v in vals]

    def backward(out: Var) -> None:
        offset = 0
        for x, size in zip(xs, sizes):
            if isinstance(x, Var):
                _acc(x, out.grad[:, offset : offset + size])
            offset += size

    return _out(np.concatenate(vals, axis=1), tape, backward)


def pick_row(x: Operand, i: int) -> Operand:
    xv = value_of(x)
    tape = _tape_of(x)

    def backward(out: Var) -> None:
        if isinstance(x, Var):
            g = np.zeros_like(xv)
            g[i] = out.grad[0]
            _acc(x, g)

    return _out(xv[i : i + 1], tape, backward)


def slice_rows(x: Operand, start: int, stop: Optional[int] = None) -> Operand:
    xv = value_of(x)
    tape = _tape_of(x)
    stop_ = xv.shape[0] if stop is None else stop

    def backward(out: Var) -> None:
        if isinstance(x, Var):
            g = np.zeros_like(xv)
            g[start:stop_] = out.grad
            _acc(x, g)

    return _out(xv[start:stop_], tape, backward)


def pick_entry(x: Operand, i: int, j: int) -> Operand:
    """One scalar entry as a (1, 1) array."""
    xv = value_of(x)
    tape = _tape_of(x)

    def backward(out: Var) -> None:
        if isinstance(x, Var):
            g = np.zeros_like(xv)
            g[i, j] = out.grad[0, 0]
            _acc(x, g)

    return _out(xv[i : i + 1, j : j + 1].copy(), tape, backward)


def softmax(x: Operand) -> Operand:
    """Row-wise softmax with a detached max shift."""
    xv = value_of(x)
    tape = _tape_of(x)
    shifted = xv - xv.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=1, keepdims=True)

    def backward(out: Var) -> None:
        if isinstance(x, Var):
            g = out.grad
            dot = (g * val).sum(axis=1, keepdims=True)
            _acc(x, (g - dot) * val)

    return _out(val, tape, backward)


def log_softmax(x: Operand) -> Operand:
    xv = value_of(x)
    tape = _tape_of(x)
    shifted = xv - xv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    val = shifted - lse

    def backward(out: Var) -> None:
        if isinstance(x, Var):
            g = out.grad
            _acc(x, g - np.exp(val) * g.sum(axis=1, keepdims=True))

    return _out(val, tape, backward)


def layer_norm(x: Operand, gain: Operand, bias: Operand, eps: float = 1e-6) -> Operand:
    """Row-wise normalization with a learned affine map."""
    xv, gv, bv = value_of(x), value_of(gain), value_of(bias)
    tape = _tape_of(x, gain, bias)
    mu = xv.mean(axis=1, keepdims=True)
    centered = xv - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    val = xhat * gv + bv

    def backward(out: Var) -> None:
        g = out.grad
        if isinstance(gain, Var):
            _acc(gain, (g * xhat).sum(axis=0, keepdims=True))
        if isinstance(bias, Var):
            _acc(bias, g.sum(axis=0, keepdims=True))
        if isinstance(x, Var):
            gx = g * gv
            term = gx - gx.mean(axis=1, keepdims=True) - xhat * (
                (gx * xhat).mean(axis=1, keepdims=True)
            )
            _acc(x, term * inv)

    return _out(val, tape, backward)


# -----------------------------
# Attention primitive
# -----------------------------


class EmptyAttentionError(ValueError):
    """Raised when an attention row has no unmasked key at all."""


def aafm(Q: Operand, K: Operand, V: Operand, A: Operand) -> Operand:
    """Gated attention-free mixing: sigma(Q) * (exp(A)(exp(K) * V)) / (exp(A)exp(K)).

    Q: (q, d); K, V: (m, d); A: (q, m) additive pair weights (may hold -inf
    for masked pairs).  The ratio is invariant to a per-column shift of K and
    a per-row shift of A, so both are shifted by their detached maxima before
    exponentiation; gradients are exact because the shifts cancel.
    """
    kv = value_of(K)
    av = value_of(A)
    if av.shape[1] != kv.shape[0]:
        raise ValueError(f"A has {av.shape[1]} columns, K has {kv.shape[0]} rows")
    kmax = kv.max(axis=0, keepdims=True)
    amax = av.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(amax)):
        raise EmptyAttentionError("attention row with every pair masked")
    eK = exp(sub(K, kmax))
    eA = exp(sub(A, amax))
    num = matmul(eA, mul(eK, V))
    den = matmul(eA, eK)
    if np.any(value_of(den) == 0.0):
        raise EmptyAttentionError("attention denominator underflowed to zero")
    return mul(sigmoid(Q), div(num, den))
