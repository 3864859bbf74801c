"""Dense float64 numerics with a small reverse-mode tape.

Every differentiable computation in the package is expressed as a sequence
of primitive operations recorded on a :class:`Tape`.  Calling
:meth:`Tape.backward` replays the record in reverse and accumulates
gradients into ``Tensor.grad``.

Fused primitives (LSTM layers, CTC loss) are registered from their owning
modules through :meth:`Tape.apply`; they supply their own backward closure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, OracleInvalidError

DTYPE = np.float64


class Tensor:
    """A float64 array plus an optional gradient slot.

    Most tensors are 2-D (features x time, weights); sequence batches use a
    leading time axis and a batch axis, ``(T, B, D)``.
    """

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def rows(self):
        return self.value.shape[0]

    @property
    def cols(self):
        return self.value.shape[1]

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.value.shape}, requires_grad={self.requires_grad})"


def parameter(value, name=None) -> Tensor:
    return Tensor(np.ascontiguousarray(value, dtype=DTYPE), requires_grad=True, name=name)


@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    backward: Callable


class Tape:
    """Ordered record of primitive operations.

    With ``record=False`` the tape only evaluates; nothing is stored, which is
    what inference and finite-difference probes use.
    """

    def __init__(self, record=True):
        self.record = record
        self.records: list[_Record] = []

    def apply(self, inputs: Sequence[Tensor], value, backward) -> Tensor:
        """Register a primitive.

        ``backward(grad_out)`` must return one gradient (or ``None``) per
        input, in order.
        """
        needs = any(t.requires_grad for t in inputs)
        out = Tensor(value, requires_grad=needs)
        if self.record and needs:
            self.records.append(_Record(tuple(inputs), out, backward))
        return out

    def backward(self, loss: Tensor):
        if loss.value.size != 1:
            raise ContractError("backward() needs a scalar loss")
        loss.grad = np.ones_like(loss.value)
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for t, gi in zip(rec.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.array(gi, dtype=DTYPE, copy=True)
                else:
                    t.grad += gi

    # -- elementary ops -------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ContractError(f"add: shape mismatch {a.shape} vs {b.shape}")
        return self.apply((a, b), a.value + b.value, lambda g: (g, g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ContractError(f"mul: shape mismatch {a.shape} vs {b.shape}")
        av, bv = a.value, b.value
        return self.apply((a, b), av * bv, lambda g: (g * bv, g * av))

    def scale(self, a: Tensor, c: float) -> Tensor:
        return self.apply((a,), a.value * c, lambda g: (g * c,))

    def sum(self, a: Tensor) -> Tensor:
        shape = a.shape
        return self.apply((a,), np.array(a.value.sum()), lambda g: (np.full(shape, float(g)),))

    def weighted_sum(self, terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
        total = sum(w * float(t.value) for t, w in zip(terms, weights))
        return self.apply(
            tuple(terms), np.array(total), lambda g: tuple(g * w for w in weights)
        )

    def linear(self, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
        """Affine map over the last axis: ``x @ weight.T + bias``.

        ``weight`` is ``(out, in)``, matching the per-head projection layout.
        """
        xv, W = x.value, weight.value
        if xv.shape[-1] != W.shape[1] or bias.shape != (W.shape[0],):
            raise ContractError(
                f"linear: input {xv.shape} incompatible with weight {W.shape} / bias {bias.shape}"
            )
        out = xv @ W.T + bias.value

        def backward(g):
            g2 = g.reshape(-1, W.shape[0])
            x2 = xv.reshape(-1, W.shape[1])
            return g @ W, g2.T @ x2, g2.sum(axis=0)

        return self.apply((x, weight, bias), out, backward)

    def concat(self, a: Tensor, b: Tensor) -> Tensor:
        """Concatenate along the last axis."""
        split = a.shape[-1]
        out = np.concatenate([a.value, b.value], axis=-1)
        return self.apply((a, b), out, lambda g: (g[..., :split], g[..., split:]))

    def reverse_time(self, x: Tensor, lengths: Sequence[int]) -> Tensor:
        """Reverse each sequence of a ``(T, B, D)`` batch within its own length.

        Padding frames stay in place, so valid frames never mix with padding.
        """
        idx = reverse_index(x.shape[0], lengths)
        cols = np.arange(x.shape[1])[None, :]
        out = x.value[idx, cols]

        def backward(g):
            # the permutation is an involution
            return (g[idx, cols],)

        return self.apply((x,), out, backward)

    def log_softmax(self, x: Tensor) -> Tensor:
        out = log_softmax(x.value)

        def backward(g):
            p = np.exp(out)
            return (g - p * g.sum(axis=-1, keepdims=True),)

        return self.apply((x,), out, backward)


def reverse_index(T, lengths):
    """Time indices that reverse each column within its length."""
    lengths = np.asarray(lengths)
    t = np.arange(T)[:, None]
    return np.where(t < lengths[None, :], lengths[None, :] - 1 - t, t)


def zero_grads(params):
    for p in params:
        p.zero_grad()


def log_sum_exp(values) -> float:
    """``log(sum(exp(values)))`` with max shifting.

    Entries may be ``-inf``; the result is ``-inf`` only when all are.
    """
    v = np.asarray(values, dtype=DTYPE).ravel()
    if v.size == 0:
        raise ContractError("log_sum_exp of an empty vector")
    m = v.max()
    if m == -np.inf:
        return -math.inf
    return float(m + math.log(np.exp(v - m).sum()))


def log_softmax(x):
    """Log-softmax over the last axis; shift invariant and NaN free for finite input."""
    x = np.asarray(x, dtype=DTYPE)
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def grad_check(fn, params, epsilon=1e-5, n_samples=None, rng=None):
    """Compare tape gradients against central differences.

    ``fn(tape)`` must build a scalar loss on the given tape.  Returns the
    maximum over probed coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    ``n_samples=None`` probes every coordinate.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ContractError(f"epsilon {epsilon} outside [1e-7, 1e-4]")
    params = list(params)
    zero_grads(params)
    tape = Tape()
    loss = fn(tape)
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    base = float(loss.value)
    again = float(fn(Tape(record=False)).value)
    if again != base:
        raise OracleInvalidError(
            f"function is not deterministic: {base!r} then {again!r}"
        )

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.value.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    for i, j in coords:
        flat = params[i].value.reshape(-1)
        if not np.shares_memory(flat, params[i].value):
            raise ContractError("grad_check needs contiguous parameter storage")
        orig = flat[j]
        flat[j] = orig + epsilon
        f_plus = float(fn(Tape(record=False)).value)
        flat[j] = orig - epsilon
        f_minus = float(fn(Tape(record=False)).value)
        flat[j] = orig
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        a = float(analytic[i].reshape(-1)[j])
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst
