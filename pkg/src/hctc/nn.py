"""LSTM and affine building blocks.

Gate layout inside every LSTM weight block is ``[input, forget, output,
candidate]``, each ``H`` rows tall.  No peepholes.  Sequence batches are
``(T, B, D)`` arrays; single utterances use the ``D x T`` matrix layout at the
public ``*_forward`` helpers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .numerics import DTYPE, Tape, Tensor, parameter, sigmoid


@dataclass
class InitConfig:
    scale: float = 0.05
    forget_bias: float = 1.0


@dataclass
class LstmDirection:
    W: Tensor  # (4H, I)
    U: Tensor  # (4H, H)
    b: Tensor  # (4H,)

    @property
    def hidden(self):
        return self.U.shape[1]

    @property
    def input_dim(self):
        return self.W.shape[1]

    def params(self):
        return [self.W, self.U, self.b]


@dataclass
class LstmLayer:
    """One LSTM layer; bidirectional when it holds two directions."""

    directions: list = field(default_factory=list)

    @property
    def hidden(self):
        return self.directions[0].hidden

    @property
    def input_dim(self):
        return self.directions[0].input_dim

    @property
    def bidirectional(self):
        return len(self.directions) == 2

    @property
    def output_dim(self):
        return self.hidden * len(self.directions)

    def params(self):
        return [p for d in self.directions for p in d.params()]


@dataclass
class Projection:
    weight: Tensor  # (out, in)
    bias: Tensor  # (out,)

    @property
    def output_dim(self):
        return self.weight.shape[0]

    @property
    def input_dim(self):
        return self.weight.shape[1]

    def params(self):
        return [self.weight, self.bias]


def init_lstm_direction(rng, input_dim, hidden, init=None, name="lstm"):
    init = init or InitConfig()
    s = init.scale
    W = rng.uniform(-s, s, size=(4 * hidden, input_dim))
    U = rng.uniform(-s, s, size=(4 * hidden, hidden))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = init.forget_bias
    return LstmDirection(
        parameter(W, f"{name}.W"), parameter(U, f"{name}.U"), parameter(b, f"{name}.b")
    )


def init_lstm_layer(rng, input_dim, hidden, bidirectional=True, init=None, name="lstm"):
    tags = ("fwd", "bwd") if bidirectional else ("fwd",)
    return LstmLayer(
        [init_lstm_direction(rng, input_dim, hidden, init, f"{name}.{t}") for t in tags]
    )


def init_projection(rng, input_dim, output_dim, init=None, name="proj"):
    init = init or InitConfig()
    s = init.scale
    W = rng.uniform(-s, s, size=(output_dim, input_dim))
    return Projection(parameter(W, f"{name}.weight"), parameter(np.zeros(output_dim), f"{name}.bias"))


# -- counting ------------------------------------------------------------


def lstm_param_count(input_dim, hidden, bidirectional=True):
    per_direction = 4 * (hidden * (input_dim + hidden) + hidden)
    return per_direction * (2 if bidirectional else 1)


def projection_param_count(input_dim, output_dim):
    return output_dim * input_dim + output_dim


def count_params(component) -> int:
    """Exact scalar parameter count of anything exposing ``params()``."""
    return int(sum(p.value.size for p in component.params()))


# -- single step reference ----------------------------------------------


def lstm_step(direction: LstmDirection, x_t, h_prev, c_prev):
    """One LSTM time step on plain vectors; returns ``(h_t, c_t)``."""
    x_t = np.asarray(x_t, dtype=DTYPE)
    h_prev = np.asarray(h_prev, dtype=DTYPE)
    c_prev = np.asarray(c_prev, dtype=DTYPE)
    H = direction.hidden
    if x_t.shape != (direction.input_dim,) or h_prev.shape != (H,) or c_prev.shape != (H,):
        raise ContractError(
            f"lstm_step: got x{x_t.shape} h{h_prev.shape} c{c_prev.shape} "
            f"for input_dim={direction.input_dim} hidden={H}"
        )
    z = direction.W.value @ x_t + direction.U.value @ h_prev + direction.b.value
    i = sigmoid(z[:H])
    f = sigmoid(z[H:2 * H])
    o = sigmoid(z[2 * H:3 * H])
    g = np.tanh(z[3 * H:])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


# -- fused sequence op ----------------------------------------------------


def lstm_sequence(tape: Tape, x: Tensor, d: LstmDirection) -> Tensor:
    """Run one direction over a ``(T, B, I)`` batch from zero state."""
    xv = x.value
    if xv.ndim != 3 or xv.shape[2] != d.input_dim:
        raise ContractError(f"lstm: input {xv.shape} does not match input_dim={d.input_dim}")
    T, B, _ = xv.shape
    H = d.hidden
    W, U = d.W.value, d.U.value
    pre = xv @ W.T + d.b.value
    gates = np.empty((T, B, 4 * H))
    cs = np.empty((T, B, H))
    hs = np.empty((T, B, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        z = pre[t] + h @ U.T
        a = gates[t]
        a[:, :3 * H] = sigmoid(z[:, :3 * H])
        a[:, 3 * H:] = np.tanh(z[:, 3 * H:])
        c = a[:, H:2 * H] * c + a[:, :H] * a[:, 3 * H:]
        h = a[:, 2 * H:3 * H] * np.tanh(c)
        cs[t] = c
        hs[t] = h

    def backward(gh):
        dz = np.empty_like(gates)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            a = gates[t]
            i, f, o, g = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            tc = np.tanh(cs[t])
            dh = gh[t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            c_prev = cs[t - 1] if t > 0 else 0.0
            dzt = dz[t]
            dzt[:, :H] = dc * g * i * (1.0 - i)
            dzt[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
            dzt[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
            dzt[:, 3 * H:] = dc * i * (1.0 - g * g)
            dc_next = dc * f
            dh_next = dzt @ U
        dz2 = dz.reshape(T * B, 4 * H)
        gW = dz2.T @ xv.reshape(T * B, -1)
        gU = dz[1:].reshape(-1, 4 * H).T @ hs[:-1].reshape(-1, H) if T > 1 else np.zeros_like(U)
        gb = dz2.sum(axis=0)
        gx = dz @ W
        return gx, gW, gU, gb

    return tape.apply((x, d.W, d.U, d.b), hs, backward)


def lstm_layer_apply(tape: Tape, x: Tensor, layer: LstmLayer, lengths) -> Tensor:
    """Layer output ``(T, B, H * directions)``; backward half reversed per length."""
    fwd = lstm_sequence(tape, x, layer.directions[0])
    if not layer.bidirectional:
        return fwd
    rev = tape.reverse_time(x, lengths)
    bwd = tape.reverse_time(lstm_sequence(tape, rev, layer.directions[1]), lengths)
    return tape.concat(fwd, bwd)


def projection_apply(tape: Tape, x: Tensor, proj: Projection) -> Tensor:
    return tape.linear(x, proj.weight, proj.bias)


# -- matrix-layout helpers -------------------------------------------------


def _as_batch(X):
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim != 2:
        raise ContractError(f"expected a D x T matrix, got shape {X.shape}")
    return X.T[:, None, :]


def bilstm_forward(layer: LstmLayer, X) -> np.ndarray:
    """``F x T`` input to ``(2H) x T`` output; rows ``H:`` hold the backward pass."""
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ContractError("bilstm_forward needs a nonempty F x T matrix")
    out = lstm_layer_apply(Tape(record=False), Tensor(_as_batch(X)), layer, [X.shape[1]])
    return out.value[:, 0, :].T


def linear_forward(proj: Projection, Hmat) -> np.ndarray:
    out = projection_apply(Tape(record=False), Tensor(_as_batch(Hmat)), proj)
    return out.value[:, 0, :].T
