"""Greedy and shallow-fusion decoding of CTC posteriors.

A path ``p`` scores

    prod_t P_AM(p_t | X) * P'_LM(p_t | squash(p_1..p_{t-1}))

with ``P'_LM(blank) = 1`` and ``P'_LM(k) = P_LM(k | prefix)^w * b``.  With
``repeat_lm`` set the factor applies to every non-blank frame, including a
frame that repeats the previous label (the product taken literally); otherwise
a repeated frame contributes only its acoustic term, so the LM and bonus are
paid once per emitted unit.  A transcription's score is the sum over all paths
squashing to it.  Beam search keeps, for each squashed prefix, the
log mass of paths ending in blank and in a label; because the per-frame factor
depends only on the prefix and the emitted unit, merged prefixes stay exact.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .ctc import BLANK_INDEX, check_posterior, squash
from .errors import ConfigError, ContractError, OracleSizeError

NEG_INF = -math.inf


@dataclass
class FusionConfig:
    beam: int = 40
    bonus: float = 1.5
    lm_weight: float = 1.0
    repeat_lm: bool = False

    def validate(self):
        if self.beam < 1:
            raise ConfigError(f"beam width must be >= 1, got {self.beam}")
        if not self.bonus > 0:
            raise ConfigError(f"insertion bonus must be > 0, got {self.bonus}")
        return self


def greedy_decode(post):
    """Best path per frame (ties to the lowest index), then squash."""
    post = np.asarray(post)
    return squash(np.argmax(post, axis=0))


class _LmCache:
    """Per-prefix LM states and log-probabilities for one decode call."""

    def __init__(self, lm, weight):
        self.lm = lm
        self.weight = weight
        self.entries = {(): lm.initial_state()}
        self.scores = {}

    def log_scores(self, prefix):
        got = self.scores.get(prefix)
        if got is None:
            state = self.entries.get(prefix)
            if state is None:
                parent = self.entries.get(prefix[:-1])
                if parent is None:
                    self.log_scores(prefix[:-1])
                    parent = self.entries[prefix[:-1]]
                state = self.lm.advance(parent, prefix[-1])
                self.entries[prefix] = state
            got = self.weight * self.lm.log_probs(state)
            self.scores[prefix] = got
        return got


def _check_inputs(post, lm, inventory):
    post = check_posterior(post)
    K = post.shape[0]
    if lm.n_labels != K - 1:
        raise ContractError(f"LM covers {lm.n_labels} labels but posterior has {K - 1}")
    if inventory is not None and lm.inventory_hash and inventory.hash != lm.inventory_hash:
        raise ContractError("LM and acoustic head use different inventories")
    return post


def _rank_key(item):
    prefix, (pb, pnb) = item
    return (-np.logaddexp(pb, pnb), prefix)


def fusion_beam_search(post, lm, cfg: FusionConfig | None = None, inventory=None, return_score=False):
    """Prefix beam search with LM fusion and insertion bonus.

    ``post`` is ``|L'| x T`` log-posteriors from the head whose inventory the
    LM was trained on.  Returns the best unit index sequence, and its log
    score when ``return_score`` is set.  Equal scores resolve to the
    lexicographically smaller prefix.
    """
    cfg = (cfg or FusionConfig()).validate()
    post = _check_inputs(post, lm, inventory)
    K, T = post.shape
    cache = _LmCache(lm, cfg.lm_weight)
    log_bonus = math.log(cfg.bonus)
    beam = {(): (0.0, NEG_INF)}
    for t in range(T):
        frame = post[:, t]
        nxt = {}

        def add(prefix, pb, pnb):
            old = nxt.get(prefix)
            if old is None:
                nxt[prefix] = (pb, pnb)
            else:
                nxt[prefix] = (np.logaddexp(old[0], pb), np.logaddexp(old[1], pnb))

        for prefix, (pb, pnb) in beam.items():
            total = np.logaddexp(pb, pnb)
            add(prefix, total + frame[BLANK_INDEX], NEG_INF)
            ext = frame + cache.log_scores(prefix) + log_bonus
            last = prefix[-1] if prefix else None
            for k in range(1, K):
                f = ext[k]
                if k == last:
                    stay = f if cfg.repeat_lm else frame[k]
                    if stay != NEG_INF:
                        add(prefix, NEG_INF, pnb + stay)
                    if f != NEG_INF:
                        add(prefix + (k,), NEG_INF, pb + f)
                elif f != NEG_INF:
                    add(prefix + (k,), NEG_INF, total + f)
        ranked = sorted(nxt.items(), key=_rank_key)[: cfg.beam]
        beam = dict(ranked)
    best_prefix, (pb, pnb) = min(beam.items(), key=_rank_key)
    best = list(best_prefix)
    if return_score:
        return best, float(np.logaddexp(pb, pnb))
    return best


ORACLE_LIMIT = 10 ** 6


def exhaustive_fusion_oracle(post, lm, bonus, lm_weight=1.0, repeat_lm=False):
    """Exact fused argmax by enumerating every path; returns ``(units, log_score)``."""
    post = check_posterior(post)
    K, T = post.shape
    if lm.n_labels != K - 1:
        raise ContractError(f"LM covers {lm.n_labels} labels but posterior has {K - 1}")
    if K ** T > ORACLE_LIMIT:
        raise OracleSizeError(f"|L'|^T = {K}^{T} exceeds {ORACLE_LIMIT}")
    memo = {}

    def lm_scores(context):
        if context not in memo:
            state = lm.initial_state()
            for u in context:
                state = lm.advance(state, u)
            memo[context] = lm_weight * lm.log_probs(state)
        return memo[context]

    log_bonus = math.log(bonus)
    classes = {}
    for path in itertools.product(range(K), repeat=T):
        score = 0.0
        for t, k in enumerate(path):
            score += post[k, t]
            if k != BLANK_INDEX and (repeat_lm or t == 0 or path[t - 1] != k):
                context = tuple(squash(path[:t]))
                score += lm_scores(context)[k] + log_bonus
        classes.setdefault(tuple(squash(path)), []).append(score)
    scored = {z: _lse(v) for z, v in classes.items()}
    best = min(scored.items(), key=lambda kv: (-kv[1], kv[0]))
    return list(best[0]), best[1]


def _lse(values):
    v = np.asarray(values)
    m = v.max()
    if m == NEG_INF:
        return NEG_INF
    return float(m + math.log(np.exp(v - m).sum()))


def write_hypotheses(path, hyps):
    with open(path, "w", encoding="utf-8") as f:
        for utt, text in hyps.items():
            f.write(f"{utt}\t{text}\n")
