"""Synthetic end-to-end runs: corpus, unit sets, training, decoding, scoring.

This is the desk-scale stand-in for full Switchboard experiments.  Everything
is driven by a :class:`SyntheticExperiment` so a run is reproducible from its
fields alone.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

from .data import SyntheticSpec, generate_synthetic
from .decode import FusionConfig, fusion_beam_search, greedy_decode
from .eval import score_corpus
from .lm import lm_train
from .model import (
    TopologyConfig,
    batch_posteriors,
    build_model,
    model_input,
    prepare_examples,
    stl_parity_config,
    train,
)
from .units import build_coder


@dataclass
class SyntheticExperiment:
    corpus: SyntheticSpec = field(default_factory=SyntheticSpec)
    n_train: int = 300
    n_test: int = 50
    heads: tuple = ("char", "bpe-20", "bpe-60")
    topology: str = "hmtl"
    seed: int = 0
    hidden: int = 32
    projection: int = 32
    head_hidden: int = 32
    learning_rate: float = 0.5
    init_scale: float = 0.1
    batch_size: int = 16
    epochs: int = 9
    beam: int = 40
    bonus: float = 1.5
    lm_order: int = 3

    def mtl_config(self):
        return TopologyConfig(
            topology="hmtl" if self.topology == "stl" else self.topology,
            heads=tuple(self.heads),
            input_dim=3 * self.corpus.feature_dim,
            hidden=self.hidden,
            projection=self.projection,
            head_hidden=self.head_hidden,
            seed=self.seed,
            init_scale=self.init_scale,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
        ).validate()


@dataclass
class RunResult:
    config: TopologyConfig
    n_params: int
    parity_delta: int
    history: list
    greedy: object  # ErrorBreakdown
    fusion: object
    hypotheses: dict
    seconds: float
    head: str


def split_corpus(exp: SyntheticExperiment):
    pairs = generate_synthetic(exp.corpus, exp.n_train + exp.n_test)
    return pairs[: exp.n_train], pairs[exp.n_train:]


def run_synthetic(exp: SyntheticExperiment, fusion=True, callback=None) -> RunResult:
    """Train on the synthetic corpus, decode the coarsest head, score words.

    For ``topology="stl"`` the model is the parameter-matched single-task
    counterpart of the HMTL model on the same heads, trained on the last
    (coarsest) head only.
    """
    start = time.perf_counter()
    train_set, test_set = split_corpus(exp)
    texts = [t for _, t in train_set]
    coders = {h: build_coder(h, texts) for h in exp.heads}
    sizes = {h: len(c.inventory) for h, c in coders.items()}
    cfg = exp.mtl_config()
    delta = 0
    if exp.topology == "stl":
        cfg, delta = stl_parity_config(cfg, sizes)
    model = build_model(cfg, {h: coders[h] for h in cfg.heads})
    feats = {fm.utt_id: fm.values for fm, _ in train_set}
    trans = {fm.utt_id: t for fm, t in train_set}
    history = train(model, prepare_examples(feats, trans, coders, cfg), callback=callback)

    top = cfg.heads[-1]
    coder = coders[top]
    inputs = [model_input(fm.values, cfg) for fm, _ in test_set]
    posts = [p[top] for p in batch_posteriors(model, inputs, heads=[top])]
    refs = {fm.utt_id: t for fm, t in test_set}
    greedy_hyps = {fm.utt_id: coder.decode(greedy_decode(p)) for (fm, _), p in zip(test_set, posts)}
    hyps = {"greedy": greedy_hyps}
    fused = None
    if fusion:
        lm = lm_train([coder.encode(t) for t in texts], coder.inventory.n_labels,
                      order=exp.lm_order, inventory_hash=coder.inventory.hash)
        fcfg = FusionConfig(beam=exp.beam, bonus=exp.bonus)
        hyps["fusion"] = {
            fm.utt_id: coder.decode(fusion_beam_search(p, lm, fcfg, coder.inventory))
            for (fm, _), p in zip(test_set, posts)
        }
        fused = score_corpus(refs, hyps["fusion"])
    return RunResult(
        config=cfg,
        n_params=model.n_params,
        parity_delta=delta,
        history=history,
        greedy=score_corpus(refs, greedy_hyps),
        fusion=fused,
        hypotheses=hyps,
        seconds=time.perf_counter() - start,
        head=top,
    )


def compare_stl(exp: SyntheticExperiment, seeds=(0, 1, 2, 3)):
    """Greedy WER of HMTL and its parameter-matched STL, per seed."""
    rows = []
    for seed in seeds:
        base = dataclasses.replace(exp, seed=seed)
        mtl = run_synthetic(dataclasses.replace(base, topology="hmtl"), fusion=False)
        stl = run_synthetic(dataclasses.replace(base, topology="stl"), fusion=False)
        rows.append((seed, mtl.greedy.rate, stl.greedy.rate, mtl.n_params, stl.n_params))
    return rows
