"""Unit-level language models for shallow fusion.

Two backends share one interface: an add-alpha n-gram model whose scores are
closed-form (handy as a decoding oracle) and a two-layer unidirectional LSTM.
Both predict over the labels ``1..|L|`` of one inventory; the blank is not in
their support, so ``log_probs`` puts ``-inf`` at index 0.  There is an implicit
begin-of-sequence context and no end-of-sequence unit.
"""

from __future__ import annotations

import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Any

import numpy as np

from .binio import Reader, pack_array, pack_str, pack_u32
from .errors import ContractError, FormatError
from .nn import InitConfig, init_lstm_layer, init_projection, lstm_sequence, lstm_step
from .numerics import Tape, log_softmax, parameter

BOS = 0


@dataclass(frozen=True)
class LmState:
    owner: Any
    context: tuple
    payload: Any = None


class _Base:
    backend = ""

    def _check(self, state):
        if not isinstance(state, LmState) or state.owner is not self:
            raise ContractError("LM state was not produced by this model")

    def probs(self, state):
        return np.exp(self.log_probs(state))


class NgramLM(_Base):
    """Add-alpha smoothed n-gram model over unit indices."""

    backend = "ngram"

    def __init__(self, n_labels, order=3, alpha=0.1, inventory_hash=""):
        if order < 1:
            raise ContractError("n-gram order must be >= 1")
        if alpha < 0:
            raise ContractError("alpha must be >= 0")
        self.n_labels = n_labels
        self.order = order
        self.alpha = alpha
        self.inventory_hash = inventory_hash
        self.counts = {}
        self._cache = {}

    def fit(self, corpus):
        counts = defaultdict(lambda: np.zeros(self.n_labels + 1))
        for seq in corpus:
            ctx = (BOS,) * (self.order - 1)
            for u in seq:
                if not 1 <= u <= self.n_labels:
                    raise ContractError(f"unit {u} outside 1..{self.n_labels}")
                counts[ctx][u] += 1
                ctx = (ctx + (u,))[1:] if self.order > 1 else ()
        self.counts = dict(counts)
        self._cache = {}
        return self

    def initial_state(self):
        return LmState(self, (BOS,) * (self.order - 1))

    def advance(self, state, unit):
        self._check(state)
        ctx = (state.context + (int(unit),))[1:] if self.order > 1 else ()
        return LmState(self, ctx)

    def log_probs(self, state):
        self._check(state)
        got = self._cache.get(state.context)
        if got is None:
            L = self.n_labels
            c = self.counts.get(state.context)
            out = np.full(L + 1, -math.inf)
            total = 0.0 if c is None else c[1:].sum()
            if total + self.alpha * L == 0:
                out[1:] = -math.log(L)
            else:
                num = (c[1:] if c is not None else np.zeros(L)) + self.alpha
                with np.errstate(divide="ignore"):
                    out[1:] = np.log(num) - math.log(total + self.alpha * L)
            self._cache[state.context] = got = out
        return got


class LstmLM(_Base):
    """Embedding, stacked unidirectional LSTM layers, softmax over labels."""

    backend = "lstm"

    def __init__(self, n_labels, hidden=256, embed=64, layers=2, seed=0,
                 init_scale=0.05, inventory_hash=""):
        self.n_labels = n_labels
        self.hidden = hidden
        self.embed_dim = embed
        self.n_layers = layers
        self.inventory_hash = inventory_hash
        rng = np.random.default_rng(seed)
        init = InitConfig(init_scale, 1.0)
        self.embedding = parameter(rng.uniform(-init_scale, init_scale, (n_labels + 1, embed)), "embedding")
        self.layers = []
        dim = embed
        for i in range(layers):
            self.layers.append(init_lstm_layer(rng, dim, hidden, False, init, f"lm{i}"))
            dim = hidden
        self.output = init_projection(rng, hidden, n_labels, init, "lm_out")

    def params(self):
        ps = [self.embedding]
        for layer in self.layers:
            ps += layer.params()
        return ps + self.output.params()

    def named_params(self):
        return {p.name: p for p in self.params()}

    # -- training graph ------------------------------------------------

    def loss(self, tape, batch):
        """Mean next-unit cross entropy over the real tokens of ``batch``."""
        T = max(len(s) for s in batch)
        B = len(batch)
        inputs = np.zeros((T, B), dtype=np.int64)
        targets = np.zeros((T, B), dtype=np.int64)
        mask = np.zeros((T, B))
        for b, seq in enumerate(batch):
            n = len(seq)
            inputs[1:n, b] = seq[:-1]
            targets[:n, b] = seq
            mask[:n, b] = 1.0
        h = _embed(tape, self.embedding, inputs)
        for layer in self.layers:
            h = lstm_sequence(tape, h, layer.directions[0])
        logits = tape.linear(h, self.output.weight, self.output.bias)
        return _cross_entropy(tape, logits, targets - 1, mask, 1.0 / mask.sum())

    # -- incremental scoring -------------------------------------------------

    def _step(self, states, unit):
        x = self.embedding.value[unit]
        new = []
        for layer, (h, c) in zip(self.layers, states):
            h, c = lstm_step(layer.directions[0], x, h, c)
            new.append((h, c))
            x = h
        return tuple(new)

    def initial_state(self):
        zero = tuple((np.zeros(self.hidden), np.zeros(self.hidden)) for _ in self.layers)
        return LmState(self, (), self._step(zero, BOS))

    def advance(self, state, unit):
        self._check(state)
        return LmState(self, state.context + (int(unit),), self._step(state.payload, int(unit)))

    def log_probs(self, state):
        self._check(state)
        h = state.payload[-1][0]
        logits = self.output.weight.value @ h + self.output.bias.value
        out = np.empty(self.n_labels + 1)
        out[0] = -math.inf
        out[1:] = log_softmax(logits)
        return out


def _embed(tape, table, idx):
    def backward(g):
        grad = np.zeros_like(table.value)
        np.add.at(grad, idx.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (grad,)

    return tape.apply((table,), table.value[idx], backward)


def _cross_entropy(tape, logits, targets, mask, scale):
    lp = log_softmax(logits.value)
    safe = np.where(mask > 0, targets, 0)
    picked = np.take_along_axis(lp, safe[..., None], axis=-1)[..., 0]
    value = -scale * float((picked * mask).sum())

    def backward(g):
        d = np.exp(lp)
        np.put_along_axis(d, safe[..., None], np.take_along_axis(d, safe[..., None], -1) - 1.0, -1)
        return (float(g) * scale * d * mask[..., None],)

    return tape.apply((logits,), np.array(value), backward)


def lm_train(corpus, n_labels, backend="ngram", inventory_hash="", order=3, alpha=0.1,
             hidden=256, embed=64, layers=2, epochs=10, learning_rate=0.5, clip_norm=5.0,
             batch_size=16, seed=0, init_scale=0.05, callback=None):
    """Fit a language model on unit index sequences of one inventory."""
    corpus = [list(map(int, s)) for s in corpus]
    corpus = [s for s in corpus if s]
    if not corpus:
        raise ContractError("cannot train a language model on an empty corpus")
    if backend == "ngram":
        return NgramLM(n_labels, order, alpha, inventory_hash).fit(corpus)
    if backend != "lstm":
        raise ContractError(f"unknown LM backend {backend!r}")
    model = LstmLM(n_labels, hidden, embed, layers, seed, init_scale, inventory_hash)
    for s in corpus:
        if not all(1 <= u <= n_labels for u in s):
            raise ContractError(f"unit outside 1..{n_labels}")
    rng = np.random.default_rng(seed + 1)
    params = model.params()
    for epoch in range(epochs):
        order_ = rng.permutation(len(corpus))
        total = 0.0
        n = 0
        for start in range(0, len(order_), batch_size):
            batch = [corpus[i] for i in order_[start:start + batch_size]]
            for p in params:
                p.zero_grad()
            tape = Tape()
            loss = model.loss(tape, batch)
            tape.backward(loss)
            norm = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))
            scale = min(1.0, clip_norm / norm) if norm > 0 else 1.0
            for p in params:
                p.value -= learning_rate * scale * p.grad
            total += float(loss.value)
            n += 1
        if callback is not None:
            callback(epoch, total / n)
    return model


def lm_next(model, state):
    """Next-unit distribution (index 0, the blank, has probability 0) and an advance function."""
    dist = model.probs(state)
    return dist, lambda unit: model.advance(state, unit)


def perplexity(model, corpus):
    """Per-unit perplexity of ``corpus``."""
    nll = 0.0
    n = 0
    for seq in corpus:
        state = model.initial_state()
        for u in seq:
            nll -= model.log_probs(state)[u]
            state = model.advance(state, u)
            n += 1
    return math.exp(nll / n)


# -- checkpoints -------------------------------------------------------------

LM_MAGIC = b"HLMC"
LM_VERSION = 1


def save_lm(path, model):
    buf = io.BytesIO()
    buf.write(LM_MAGIC)
    pack_u32(buf, LM_VERSION)
    pack_str(buf, model.backend)
    pack_str(buf, model.inventory_hash)
    if model.backend == "ngram":
        meta = {"n_labels": model.n_labels, "order": model.order, "alpha": model.alpha}
        pack_str(buf, json.dumps(meta, sort_keys=True))
        pack_u32(buf, len(model.counts))
        for ctx in sorted(model.counts):
            pack_u32(buf, len(ctx), *ctx)
            pack_array(buf, "", model.counts[ctx])
    else:
        meta = {"n_labels": model.n_labels, "hidden": model.hidden,
                "embed": model.embed_dim, "layers": model.n_layers}
        pack_str(buf, json.dumps(meta, sort_keys=True))
        named = model.named_params()
        pack_u32(buf, len(named))
        for name, p in named.items():
            pack_array(buf, name, p.value)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_lm(path):
    with open(path, "rb") as f:
        r = Reader(f.read(), str(path))
    if r.take(4) != LM_MAGIC:
        raise FormatError(f"{path}: bad magic", offset=0)
    version = r.u32()
    if version != LM_VERSION:
        raise FormatError(f"{path}: unsupported LM version {version}", offset=4)
    backend = r.str()
    inv_hash = r.str()
    meta = json.loads(r.str())
    if backend == "ngram":
        model = NgramLM(meta["n_labels"], meta["order"], meta["alpha"], inv_hash)
        for _ in range(r.u32()):
            n = r.u32()
            ctx = tuple(r.u32() for _ in range(n))
            _, counts = r.array()
            model.counts[ctx] = counts
    elif backend == "lstm":
        model = LstmLM(meta["n_labels"], meta["hidden"], meta["embed"], meta["layers"],
                       inventory_hash=inv_hash)
        named = model.named_params()
        for _ in range(r.u32()):
            name, data = r.array()
            if name not in named or named[name].value.shape != data.shape:
                raise FormatError(f"{path}: unexpected tensor {name}", offset=r.pos)
            named[name].value[...] = data
    else:
        raise FormatError(f"{path}: unknown backend {backend!r}", offset=8)
    r.expect_end()
    return model
