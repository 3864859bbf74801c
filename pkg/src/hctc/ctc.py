"""CTC: squash mapping, log-space forward-backward loss, and a brute-force oracle.

Posterior matrices are ``|L'| x T`` arrays of per-frame log-probabilities with
the blank at row 0.
"""

from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np

from .errors import ContractError, InfeasibleTargetError, OracleSizeError
from .numerics import DTYPE, Tape, Tensor, log_softmax

BLANK_INDEX = 0
NORMALIZATION_TOL = 1e-10


def squash(path, blank=BLANK_INDEX):
    """Collapse consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def min_frames(z):
    """Shortest path length that squashes to ``z``."""
    repeats = sum(1 for a, b in zip(z[:-1], z[1:]) if a == b)
    return len(z) + repeats


def is_feasible(z, T):
    return min_frames(z) <= T


def check_posterior(post, tol=NORMALIZATION_TOL):
    post = np.asarray(post, dtype=DTYPE)
    if post.ndim != 2 or post.shape[1] < 1:
        raise ContractError(f"posterior must be a nonempty |L'| x T matrix, got {post.shape}")
    sums = np.exp(post).sum(axis=0)
    bad = np.abs(sums - 1.0) > tol
    if bad.any():
        t = int(np.argmax(bad))
        raise ContractError(f"posterior column {t} sums to {sums[t]!r}, not 1")
    return post


def _check_target(z, K, T):
    z = [int(u) for u in z]
    for u in z:
        if not 0 < u < K:
            raise ContractError(f"target label {u} outside 1..{K - 1}")
    if not is_feasible(z, T):
        raise InfeasibleTargetError(
            f"target of length {len(z)} needs {min_frames(z)} frames, only {T} available"
        )
    return z


def forward_backward(logp, z):
    """Log-space lattice pass over ``(T, K)`` log-probabilities.

    Returns ``(log P(z|X), occupancy)`` where ``occupancy[t, k]`` is the
    posterior probability that frame ``t`` emits unit ``k``.
    """
    T, K = logp.shape
    ext = np.zeros(2 * len(z) + 1, dtype=np.int64)
    ext[1::2] = z
    S = ext.size
    skip = np.zeros(S, dtype=bool)
    if S > 2:
        skip[2:] = (ext[2:] != BLANK_INDEX) & (ext[2:] != ext[:-2])
    emit = logp[:, ext]

    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a = prev.copy()
        a[1:] = np.logaddexp(a[1:], prev[:-1])
        a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
        alpha[t] = a + emit[t]

    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        b = nxt.copy()
        b[:-1] = np.logaddexp(b[:-1], nxt[1:])
        b[:-2] = np.where(skip[2:], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
        beta[t] = b

    if S > 1:
        log_p = float(np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]))
    else:
        log_p = float(alpha[T - 1, 0])
    occ_states = np.exp(alpha + beta - log_p)
    occupancy = np.zeros((T, K))
    for s in range(S):
        occupancy[:, ext[s]] += occ_states[:, s]
    return log_p, occupancy


def ctc_loss(post, z):
    """Negative log-likelihood of ``z`` and its gradient w.r.t. pre-softmax logits.

    ``post`` is ``|L'| x T`` log-probabilities (the log-softmax of the logits,
    so the gradient is ``softmax - occupancy`` in the same layout).
    """
    post = check_posterior(post)
    K, T = post.shape
    z = _check_target(z, K, T)
    logp = post.T
    log_p, occ = forward_backward(logp, z)
    grad = np.exp(logp) - occ
    return -log_p, grad.T


def ctc_loss_batch(tape: Tape, logits: Tensor, lengths, targets, weight=1.0):
    """Summed CTC loss of a padded ``(T, B, K)`` logit batch.

    Softmax is fused into the op; padding frames receive zero gradient.
    Returns ``(loss_tensor, per_utterance_losses)``.
    """
    lv = logits.value
    T, B, K = lv.shape
    lp = log_softmax(lv)
    per_utt = np.empty(B)
    dlogits = np.zeros_like(lv)
    for b in range(B):
        n = int(lengths[b])
        z = _check_target(targets[b], K, n)
        log_p, occ = forward_backward(lp[:n, b], z)
        per_utt[b] = -log_p
        dlogits[:n, b] = np.exp(lp[:n, b]) - occ
    total = weight * per_utt.sum()
    dlogits *= weight

    def backward(g):
        return (float(g) * dlogits,)

    return tape.apply((logits,), np.array(total), backward), per_utt


@lru_cache(maxsize=64)
def _squash_classes(K, T):
    paths = np.array(list(itertools.product(range(K), repeat=T)), dtype=np.int64).reshape(-1, T)
    classes = {}
    for i, p in enumerate(paths):
        classes.setdefault(tuple(squash(p)), []).append(i)
    return paths, {z: np.array(ix) for z, ix in classes.items()}


BRUTE_FORCE_LIMIT = 10 ** 7


def brute_force_ctc(post, z):
    """P(z|X) by enumerating every path; test oracle for :func:`ctc_loss`."""
    post = check_posterior(post)
    K, T = post.shape
    if K ** T > BRUTE_FORCE_LIMIT:
        raise OracleSizeError(f"|L'|^T = {K}^{T} exceeds {BRUTE_FORCE_LIMIT}")
    paths, classes = _squash_classes(K, T)
    idx = classes.get(tuple(int(u) for u in z))
    if idx is None:
        return 0.0
    probs = np.exp(post)
    sel = paths[idx]
    return float(np.prod(probs[sel, np.arange(T)], axis=1).sum())
