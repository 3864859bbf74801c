"""STL / BMTL / HMTL acoustic models and multitask CTC training.

Trunk representations are numbered from the shared encoder output ``e0``.
BMTL attaches every head to ``e0``.  HMTL stacks one cascade BiLSTM per extra
head and attaches head ``k`` to ``e_k``, so heads are ordered fine to coarse.
STL has a single head on top of the trunk; when sized for parameter parity
its trunk may include cascade layers and its output projection may be split
through a wide bottleneck.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .binio import Reader, pack_array, pack_str, pack_u32
from .ctc import ctc_loss_batch, is_feasible
from .errors import ConfigError, ContractError, EmptyBatchError, FormatError
from .nn import (
    InitConfig,
    LstmLayer,
    Projection,
    count_params,
    init_lstm_layer,
    init_projection,
    lstm_layer_apply,
    lstm_param_count,
    projection_apply,
    projection_param_count,
)
from .numerics import DTYPE, Tape, Tensor, log_softmax
from .units import parse_head_name

TOPOLOGIES = ("stl", "bmtl", "hmtl")


@dataclass
class TopologyConfig:
    """Every knob of a model and its training run.

    Defaults follow the reference architecture: two shared BiLSTM layers of
    320 cells, 340-wide affine projections between shared layers, input
    frames stacked three at a time.
    """

    topology: str = "hmtl"
    heads: tuple = ("char", "s300", "s1k", "s10k")
    input_dim: int = 129
    shared_layers: int = 2
    hidden: int = 320
    projection: int = 340
    head_hidden: int = 320
    cascade_layers: Optional[int] = None
    cascade_hidden: Optional[int] = None
    stl_bottleneck: int = 0
    head_weights: Optional[tuple] = None
    seed: int = 0
    init_scale: float = 0.05
    forget_bias: float = 1.0
    optimizer: str = "sgd"
    learning_rate: float = 0.05
    momentum: float = 0.0
    clip_norm: float = 5.0
    batch_size: int = 16
    epochs: int = 20
    subsample: int = 3
    augment: bool = True
    lowercase: bool = True

    def __post_init__(self):
        self.heads = tuple(self.heads)
        if self.head_weights is not None:
            self.head_weights = tuple(float(w) for w in self.head_weights)

    @property
    def weights(self):
        return self.head_weights if self.head_weights is not None else (1.0,) * len(self.heads)

    @property
    def cascade_width(self):
        return self.cascade_hidden or self.hidden

    def tap_dim(self, tap):
        return 2 * (self.hidden if tap == 0 else self.cascade_width)

    @property
    def n_cascade(self):
        if self.topology == "hmtl":
            return len(self.heads) - 1
        if self.topology == "stl":
            return self.cascade_layers or 0
        return 0

    def taps(self):
        if self.topology == "hmtl":
            return {h: k for k, h in enumerate(self.heads)}
        if self.topology == "stl":
            return {self.heads[0]: self.n_cascade}
        return {h: 0 for h in self.heads}

    def validate(self):
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"topology must be one of {TOPOLOGIES}, got {self.topology!r}")
        if not self.heads:
            raise ConfigError("at least one head is required")
        if len(set(self.heads)) != len(self.heads):
            raise ConfigError("head names must be unique")
        if self.topology == "stl" and len(self.heads) != 1:
            raise ConfigError(f"STL needs exactly one head, got {len(self.heads)}")
        if self.topology == "hmtl":
            if self.cascade_layers is not None and self.cascade_layers != len(self.heads) - 1:
                raise ConfigError(
                    f"HMTL with {len(self.heads)} heads taps {len(self.heads)} trunk levels; "
                    f"cascade_layers={self.cascade_layers} gives {self.cascade_layers + 1}"
                )
            order = [parse_head_name(h) for h in self.heads]
            keys = [-1 if n is None else n for n in order]
            if keys != sorted(keys) or len(set(keys)) != len(keys):
                raise ConfigError(f"HMTL heads must run fine to coarse, got {list(self.heads)}")
        if self.topology == "bmtl" and self.cascade_layers:
            raise ConfigError("BMTL has no cascade layers")
        if self.stl_bottleneck and self.topology != "stl":
            raise ConfigError("stl_bottleneck only applies to STL")
        if len(self.weights) != len(self.heads):
            raise ConfigError("head_weights must have one entry per head")
        if self.shared_layers < 1 or self.hidden < 1 or self.head_hidden < 1:
            raise ConfigError("layer counts and widths must be positive")
        if self.optimizer not in ("sgd", "momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.subsample < 1:
            raise ConfigError("subsample must be >= 1")
        return self


# -- config text files ---------------------------------------------------------


def _format_value(v):
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v).lower() if isinstance(v, bool) else str(v)


def config_to_text(cfg: TopologyConfig) -> str:
    lines = ["# hctc model/training configuration"]
    for f in dataclasses.fields(cfg):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def _parse_value(name, raw, default):
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    if name == "heads":
        return tuple(h.strip() for h in raw.split(",") if h.strip())
    if name == "head_weights":
        return tuple(float(x) for x in raw.split(","))
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(default, int) or name in ("cascade_layers", "cascade_hidden"):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def config_from_text(text, base: TopologyConfig | None = None) -> TopologyConfig:
    cfg = dataclasses.replace(base) if base else TopologyConfig()
    names = {f.name for f in dataclasses.fields(cfg)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in names:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            setattr(cfg, key, _parse_value(key, raw, getattr(TopologyConfig(), key)))
        except ValueError as exc:
            raise ConfigError(f"config line {lineno}: {exc}") from None
    cfg.__post_init__()
    return cfg


def config_to_dict(cfg):
    d = dataclasses.asdict(cfg)
    d["heads"] = list(cfg.heads)
    if cfg.head_weights is not None:
        d["head_weights"] = list(cfg.head_weights)
    return d


def config_from_dict(d):
    return TopologyConfig(**d)


# -- graph ---------------------------------------------------------------------


@dataclass
class HeadModule:
    lstm: LstmLayer
    output: Projection
    bottleneck: Optional[Projection] = None

    def params(self):
        ps = self.lstm.params()
        if self.bottleneck is not None:
            ps += self.bottleneck.params()
        return ps + self.output.params()


@dataclass
class ModelGraph:
    config: TopologyConfig
    head_sizes: dict
    shared: list
    shared_proj: list
    cascade: list
    heads: dict
    taps: dict
    inventory_hashes: dict = field(default_factory=dict)

    def params(self):
        return list(self.named_params().values())

    def named_params(self):
        parts = [*self.shared, *self.shared_proj, *self.cascade, *self.heads.values()]
        return {t.name: t for part in parts for t in part.params()}

    @property
    def n_params(self):
        return count_params(self)

    def trunk(self, tape, x: Tensor, lengths, depth):
        """Representations ``e0 .. e_depth``."""
        h = x
        for i, layer in enumerate(self.shared):
            h = lstm_layer_apply(tape, h, layer, lengths)
            if i < len(self.shared_proj):
                h = projection_apply(tape, h, self.shared_proj[i])
        reps = [h]
        for layer in self.cascade[:depth]:
            reps.append(lstm_layer_apply(tape, reps[-1], layer, lengths))
        return reps

    def logits(self, tape, x: Tensor, lengths, heads=None):
        heads = list(self.heads) if heads is None else list(heads)
        depth = max(self.taps[h] for h in heads)
        reps = self.trunk(tape, x, lengths, depth)
        out = {}
        for name in heads:
            head = self.heads[name]
            h = lstm_layer_apply(tape, reps[self.taps[name]], head.lstm, lengths)
            if head.bottleneck is not None:
                h = projection_apply(tape, h, head.bottleneck)
            out[name] = projection_apply(tape, h, head.output)
        return out


def build_model(cfg: TopologyConfig, head_sizes) -> ModelGraph:
    """Wire and initialize a model.

    ``head_sizes`` maps each head name to ``|L'|`` (inventory size including
    blank), or to an inventory/coder object with ``len``.
    """
    cfg.validate()
    sizes = {}
    hashes = {}
    for h in cfg.heads:
        if h not in head_sizes:
            raise ConfigError(f"no inventory for head {h!r}")
        v = head_sizes[h]
        inv = getattr(v, "inventory", v)
        sizes[h] = v if isinstance(v, int) else len(inv)
        if hasattr(inv, "hash"):
            hashes[h] = inv.hash
    rng = np.random.default_rng(cfg.seed)
    init = InitConfig(cfg.init_scale, cfg.forget_bias)
    H = cfg.hidden

    shared, shared_proj = [], []
    dim = cfg.input_dim
    for i in range(cfg.shared_layers):
        shared.append(init_lstm_layer(rng, dim, H, True, init, f"shared{i}"))
        dim = 2 * H
        if cfg.projection and i < cfg.shared_layers - 1:
            shared_proj.append(init_projection(rng, dim, cfg.projection, init, f"shared_proj{i}"))
            dim = cfg.projection
    cascade = []
    for k in range(cfg.n_cascade):
        cascade.append(init_lstm_layer(rng, cfg.tap_dim(k), cfg.cascade_width, True, init, f"cascade{k + 1}"))
    taps = cfg.taps()
    heads = {}
    for name in cfg.heads:
        Hh = cfg.head_hidden
        lstm = init_lstm_layer(rng, cfg.tap_dim(taps[name]), Hh, True, init, f"head[{name}].lstm")
        bottleneck = None
        dim = 2 * Hh
        if cfg.stl_bottleneck:
            bottleneck = init_projection(rng, dim, cfg.stl_bottleneck, init, f"head[{name}].bottleneck")
            dim = cfg.stl_bottleneck
        output = init_projection(rng, dim, sizes[name], init, f"head[{name}].output")
        heads[name] = HeadModule(lstm, output, bottleneck)
    return ModelGraph(cfg, sizes, shared, shared_proj, cascade, heads, taps, hashes)


def topology_param_count(cfg: TopologyConfig, head_sizes) -> int:
    """Closed-form parameter count of ``build_model(cfg, head_sizes)``."""
    H = cfg.hidden
    n = 0
    dim = cfg.input_dim
    for i in range(cfg.shared_layers):
        n += lstm_param_count(dim, H)
        dim = 2 * H
        if cfg.projection and i < cfg.shared_layers - 1:
            n += projection_param_count(dim, cfg.projection)
            dim = cfg.projection
    for k in range(cfg.n_cascade):
        n += lstm_param_count(cfg.tap_dim(k), cfg.cascade_width)
    taps = cfg.taps() if cfg.heads else {}
    for name in cfg.heads:
        K = _size(head_sizes[name])
        Hh = cfg.head_hidden
        n += lstm_param_count(cfg.tap_dim(taps[name]), Hh)
        if cfg.stl_bottleneck:
            n += projection_param_count(2 * Hh, cfg.stl_bottleneck)
            n += projection_param_count(cfg.stl_bottleneck, K)
        else:
            n += projection_param_count(2 * Hh, K)
    return n


def _size(v):
    return v if isinstance(v, int) else len(getattr(v, "inventory", v))


def stl_parity_config(mtl: TopologyConfig, head_sizes, head=None, max_width_change=None):
    """Size an STL model on ``head`` to match ``mtl``'s parameter count.

    The STL trunk copies the MTL trunk depth (shared encoder plus the same
    number of cascade layers, so the single head sits as deep as the MTL's
    top head).  The parameter budget of the dropped heads moves into the
    remaining head: its BiLSTM width and a bottleneck inside the output
    projection (the widened final projection).  When no exact match exists
    at the MTL cascade width, cascade widths progressively further from it
    are tried.  Preference order: exact match, smallest cascade width
    change, head width closest to ``mtl.head_hidden``, narrowest bottleneck.

    Returns ``(stl_config, delta)`` with ``delta = params(stl) - params(mtl)``.
    """
    head = head or mtl.heads[-1]
    target = topology_param_count(mtl, head_sizes)
    K = _size(head_sizes[head])
    H = mtl.hidden
    base = dataclasses.replace(
        mtl, topology="stl", heads=(head,), head_weights=None,
        cascade_layers=mtl.n_cascade, cascade_hidden=None, stl_bottleneck=0,
    )
    max_change = max_width_change if max_width_change is not None else max(8, H // 4)
    if base.n_cascade == 0:
        max_change = 0
    Hh = mtl.head_hidden
    best = None
    for change in range(max_change + 1):
        for Hc in sorted({H - change, H + change}):
            if Hc < 1:
                continue
            trunk_cfg = dataclasses.replace(base, heads=(), cascade_hidden=Hc)
            trunk = topology_param_count(trunk_cfg, {})
            head_in = trunk_cfg.tap_dim(base.n_cascade)
            for Hf in range(1, 4 * Hh + 1):
                core = trunk + lstm_param_count(head_in, Hf)
                candidates = [(core + projection_param_count(2 * Hf, K) - target, 0)]
                slope = 2 * Hf + 1 + K
                rest = target - core - K
                if rest >= slope:
                    q = rest // slope
                    candidates += [(core + q * slope + K - target, q),
                                   (core + (q + 1) * slope + K - target, q + 1)]
                for delta, q in candidates:
                    key = (abs(delta), change, abs(Hf - Hh), q)
                    if best is None or key < best[0]:
                        best = (key, Hc, Hf, q, delta)
        if best[0][0] == 0:
            break
    _, Hc, Hf, q, delta = best
    stl = dataclasses.replace(
        base, cascade_hidden=None if Hc == H else Hc, head_hidden=Hf, stl_bottleneck=q
    )
    return stl, delta


# -- augmentation ----------------------------------------------------------------


def subsample_augment(X, factor=3):
    """Frame-rate reduction by ``factor`` with context stacking.

    ``X`` is ``(T, F)``.  For every phase ``phi`` frames are grouped into
    consecutive runs of ``factor`` starting at ``phi`` and each run becomes one
    ``factor * F`` frame (left..right).  Indices past the end repeat the last
    frame; a phase with no complete start still yields one frame.
    """
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ContractError(f"expected a nonempty (T, F) array, got {X.shape}")
    T = X.shape[0]
    out = []
    for phase in range(factor):
        n = max(1, math.ceil((T - phase) / factor))
        starts = phase + factor * np.arange(n)
        idx = np.minimum(starts[:, None] + np.arange(factor)[None, :], T - 1)
        out.append(X[idx].reshape(n, factor * X.shape[1]))
    return out


def model_input(X, cfg: TopologyConfig):
    """Test-time input: phase 0 of the training subsampling."""
    if cfg.subsample == 1:
        return np.asarray(X, dtype=DTYPE)
    return subsample_augment(X, cfg.subsample)[0]


@dataclass
class Example:
    utt_id: str
    features: np.ndarray  # (T, F)
    targets: dict  # head -> list of unit indices


def prepare_examples(features, transcripts, coders, cfg: TopologyConfig):
    """Encode targets per head and apply subsampling.

    With augmentation every utterance yields ``cfg.subsample`` examples, one
    per phase; otherwise only phase 0 is kept.
    """
    examples = []
    for utt, X in features.items():
        text = transcripts[utt]
        targets = {h: coders[h].encode(text) for h in cfg.heads}
        if cfg.subsample == 1:
            views = [np.asarray(X, dtype=DTYPE)]
        else:
            views = subsample_augment(X, cfg.subsample)
            if not cfg.augment:
                views = views[:1]
        for phase, V in enumerate(views):
            examples.append(Example(f"{utt}#{phase}" if len(views) > 1 else utt, V, targets))
    return examples


# -- training ----------------------------------------------------------------


@dataclass
class MultitaskLoss:
    per_head: dict
    combined: float
    weights: dict
    skipped: int = 0
    used: int = 0


def pad_batch(feats):
    lengths = [f.shape[0] for f in feats]
    T = max(lengths)
    x = np.zeros((T, len(feats), feats[0].shape[1]))
    for b, f in enumerate(feats):
        x[: f.shape[0], b] = f
    return x, lengths


class Trainer:
    """Stateful SGD over a :class:`ModelGraph` (holds momentum buffers)."""

    def __init__(self, model: ModelGraph):
        self.model = model
        self.cfg = model.config
        self.velocity = None

    def compute_gradients(self, batch):
        """Forward + backward; returns the :class:`MultitaskLoss` with grads left in params."""
        model = self.model
        cfg = self.cfg
        weights = dict(zip(cfg.heads, cfg.weights))
        active = [h for h in cfg.heads if weights[h] != 0.0]
        usable = [
            ex for ex in batch
            if all(is_feasible(ex.targets[h], ex.features.shape[0]) for h in cfg.heads)
        ]
        skipped = len(batch) - len(usable)
        if not usable:
            raise EmptyBatchError(f"all {len(batch)} utterances infeasible for some head")
        params = model.params()
        for p in params:
            p.zero_grad()
        x, lengths = pad_batch([ex.features for ex in usable])
        tape = Tape()
        logits = model.logits(tape, Tensor(x), lengths, heads=active)
        terms = []
        per_head = {}
        B = len(usable)
        for h in active:
            t, per_utt = ctc_loss_batch(tape, logits[h], lengths, [ex.targets[h] for ex in usable])
            terms.append(t)
            per_head[h] = float(per_utt.mean())
        loss = tape.weighted_sum(terms, [weights[h] / B for h in active])
        tape.backward(loss)
        return MultitaskLoss(per_head, float(loss.value), weights, skipped, B)

    def apply_update(self):
        cfg = self.cfg
        params = self.model.params()
        grads = [p.grad for p in params]
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        scale = 1.0
        if cfg.clip_norm and norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
        lr = cfg.learning_rate
        if cfg.optimizer == "momentum":
            if self.velocity is None:
                self.velocity = [np.zeros_like(p.value) for p in params]
            for p, g, v in zip(params, grads, self.velocity):
                v *= cfg.momentum
                v += scale * g
                p.value -= lr * v
        else:
            for p, g in zip(params, grads):
                p.value -= (lr * scale) * g
        return norm

    def step(self, batch) -> MultitaskLoss:
        result = self.compute_gradients(batch)
        self.apply_update()
        return result


def train_step(model, batch, trainer=None) -> MultitaskLoss:
    """One combined-loss update on ``batch`` (a list of :class:`Example`)."""
    trainer = trainer or Trainer(model)
    return trainer.step(batch)


def make_batches(examples, batch_size, rng):
    """Length-sorted batches in a seeded random order."""
    order = sorted(range(len(examples)), key=lambda i: (examples[i].features.shape[0], i))
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    perm = rng.permutation(len(batches))
    return [[examples[i] for i in batches[k]] for k in perm]


def train(model, examples, epochs=None, callback=None):
    """Run ``epochs`` passes; returns a list of per-epoch mean combined losses."""
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng(cfg.seed + 1)
    trainer = Trainer(model)
    history = []
    for epoch in range(epochs):
        total, count = 0.0, 0
        for batch in make_batches(examples, cfg.batch_size, rng):
            try:
                res = trainer.step(batch)
            except EmptyBatchError:
                continue
            total += res.combined * res.used
            count += res.used
        history.append(total / max(count, 1))
        if callback is not None:
            callback(epoch, history[-1])
    return history


# -- inference -------------------------------------------------------------------


def forward_all_heads(model: ModelGraph, X):
    """Per-head ``|L'| x T`` log-posteriors for one ``F x T`` feature matrix."""
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ContractError(f"forward_all_heads needs a nonempty F x T matrix, got {X.shape}")
    logits = model.logits(Tape(record=False), Tensor(X.T[:, None, :]), [X.shape[1]])
    return {h: log_softmax(v.value[:, 0, :]).T for h, v in logits.items()}


def batch_posteriors(model: ModelGraph, feats, heads=None, batch_size=32):
    """Log-posteriors for a list of ``(T, F)`` arrays; each item is ``head -> |L'| x T``."""
    out = [None] * len(feats)
    order = sorted(range(len(feats)), key=lambda i: feats[i].shape[0])
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        x, lengths = pad_batch([feats[i] for i in idx])
        logits = model.logits(Tape(record=False), Tensor(x), lengths, heads=heads)
        for b, i in enumerate(idx):
            n = lengths[b]
            out[i] = {h: log_softmax(v.value[:n, b]).T for h, v in logits.items()}
    return out


# -- checkpoints -------------------------------------------------------------------

MAGIC = b"HCTC"
FORMAT_VERSION = 1


def save_checkpoint(path, model: ModelGraph):
    buf = io.BytesIO()
    buf.write(MAGIC)
    pack_u32(buf, FORMAT_VERSION)
    meta = {
        "config": config_to_dict(model.config),
        "head_sizes": model.head_sizes,
        "tool_version": __version__,
    }
    pack_str(buf, json.dumps(meta, sort_keys=True))
    pack_u32(buf, len(model.config.heads))
    for h in model.config.heads:
        pack_str(buf, h)
        pack_str(buf, model.inventory_hashes.get(h, ""))
    named = model.named_params()
    pack_u32(buf, len(named))
    for name, t in named.items():
        pack_array(buf, name, t.value)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path, inventories=None) -> ModelGraph:
    """Rebuild a model; with ``inventories`` (head -> inventory) hashes are verified."""
    with open(path, "rb") as f:
        r = Reader(f.read(), str(path))
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic", offset=0)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
    meta = json.loads(r.str())
    cfg = config_from_dict(meta["config"])
    hashes = {}
    for _ in range(r.u32()):
        h = r.str()
        hashes[h] = r.str()
    if inventories:
        for h, inv in inventories.items():
            inv = getattr(inv, "inventory", inv)
            if hashes.get(h) and inv.hash != hashes[h]:
                raise ContractError(f"inventory for head {h!r} does not match checkpoint")
    model = build_model(cfg, meta["head_sizes"])
    model.inventory_hashes = hashes
    named = model.named_params()
    n = r.u32()
    if n != len(named):
        raise FormatError(f"{path}: expected {len(named)} tensors, found {n}", offset=r.pos)
    for _ in range(n):
        name, data = r.array()
        if name not in named or named[name].value.shape != data.shape:
            raise FormatError(f"{path}: unexpected tensor {name} {data.shape}", offset=r.pos)
        named[name].value[...] = data
    r.expect_end()
    return model


def read_checkpoint_meta(path):
    """Header fields of a checkpoint without building the model."""
    with open(path, "rb") as f:
        r = Reader(f.read(), str(path))
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic", offset=0)
    version = r.u32()
    meta = json.loads(r.str())
    heads = {}
    for _ in range(r.u32()):
        h = r.str()
        heads[h] = r.str()
    tensors = []
    for _ in range(r.u32()):
        name, data = r.array()
        tensors.append((name, data.shape))
    return {"version": version, **meta, "inventory_hashes": heads, "tensors": tensors}
