"""Small model fixtures shared by the model tests and the acceptance suite."""

from conftest import random_log_posterior

from hctc.ctc import ctc_loss_batch
from hctc.decode import FusionConfig
from hctc.lm import NgramLM
from hctc.model import TopologyConfig, build_model, pad_batch
from hctc.numerics import Tensor

TOY_SIZES = {"char": 5, "s300": 7, "s1k": 9, "s10k": 11}


def toy_config(topology="hmtl", heads=("char", "s300", "s1k", "s10k"), **kw):
    base = dict(
        topology=topology, heads=heads, input_dim=4, hidden=3, projection=4,
        head_hidden=3, init_scale=0.5, seed=7,
    )
    base.update(kw)
    return TopologyConfig(**base)


def toy_batch(rng, cfg, lengths=(6, 4), n_targets=2):
    feats = [rng.normal(size=(T, cfg.input_dim)) for T in lengths]
    x, lens = pad_batch(feats)
    targets = {
        h: [list(rng.integers(1, TOY_SIZES[h], size=n_targets)) for _ in lengths] for h in cfg.heads
    }
    return x, lens, targets


def combined_loss(model, x, lengths, targets):
    """``fn(tape)`` building the weighted multitask CTC loss of a fixed batch."""
    cfg = model.config
    weights = dict(zip(cfg.heads, cfg.weights))

    def fn(tape):
        logits = model.logits(tape, Tensor(x), lengths)
        terms = [ctc_loss_batch(tape, logits[h], lengths, targets[h])[0] for h in cfg.heads]
        return tape.weighted_sum(terms, [weights[h] for h in cfg.heads])

    return fn


def toy_model(topology="hmtl", **kw):
    cfg = toy_config(topology, **kw)
    return build_model(cfg, {h: TOY_SIZES[h] for h in cfg.heads})


def logits_of(model, x, lengths):
    from hctc.numerics import Tape

    return {h: v.value.copy() for h, v in model.logits(Tape(record=False), Tensor(x), lengths).items()}


def perturb_above(model, k, rng, scale=0.1):
    """Add noise to every parameter that lies above trunk level ``k``."""
    touched = 0
    for layer in model.cascade[k:]:
        for p in layer.params():
            p.value += scale * rng.normal(size=p.value.shape)
            touched += 1
    for name, head in model.heads.items():
        if model.taps[name] > k:
            for p in head.params():
                p.value += scale * rng.normal(size=p.value.shape)
                touched += 1
    return touched


def random_fusion_instance(rng, max_paths=4000, repeat_lm=False):
    """Random posterior, n-gram LM and full-beam config small enough for the oracle."""
    K = int(rng.integers(2, 5))
    T = int(rng.integers(1, 7))
    while K ** T > max_paths:
        T -= 1
    post = random_log_posterior(rng, K, T, scale=1.5)
    corpus = [list(rng.integers(1, K, size=rng.integers(1, 5))) for _ in range(4)]
    lm = NgramLM(K - 1, order=int(rng.integers(1, 4)), alpha=float(rng.uniform(0.05, 1))).fit(corpus)
    cfg = FusionConfig(beam=K ** T, bonus=float(rng.uniform(0.3, 3.0)), repeat_lm=repeat_lm)
    return post, lm, cfg
