"""Feature files, posterior dumps, and the synthetic corpus.

Feature file layout (little-endian)::

    offset 0   b"FEAT"
    offset 4   u32 version (1)
    offset 8   u32 T, frame count
    offset 12  u32 F, feature dimension
    offset 16  T*F float32, time-major

Values are widened to float64 on read.

The synthetic corpus uses numpy's PCG64 generator (``default_rng``) so a seed
reproduces the same corpus on every platform numpy supports.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

FEAT_MAGIC = b"FEAT"
POST_MAGIC = b"POST"
FEAT_VERSION = 1
HEADER = struct.Struct("<4sIII")


@dataclass
class FeatureMatrix:
    utt_id: str
    values: np.ndarray  # (T, F) float64

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ContractError(f"{self.utt_id}: feature matrix must be (T>=1, F>=1), got {v.shape}")
        if not np.isfinite(v).all():
            raise ContractError(f"{self.utt_id}: non-finite feature values")
        self.values = v

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def F(self):
        return self.values.shape[1]


def _write_matrix(path, magic, values, dtype):
    values = np.asarray(values)
    rows, cols = values.shape
    if rows >= 2 ** 32 or cols >= 2 ** 32:
        raise ContractError(f"matrix shape {values.shape} does not fit the header")
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(HEADER.pack(magic, FEAT_VERSION, rows, cols))
        f.write(np.ascontiguousarray(values, dtype=dtype).tobytes())
    os.replace(tmp, path)


def _read_matrix(path, magic, dtype):
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    got, version, rows, cols = HEADER.unpack_from(data)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}", offset=0)
    if version != FEAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    itemsize = np.dtype(dtype).itemsize
    need = HEADER.size + rows * cols * itemsize
    if len(data) < need:
        raise FormatError(
            f"{path}: truncated body, {rows}x{cols} needs {need} bytes, file has {len(data)}",
            offset=len(data),
        )
    if len(data) > need:
        raise FormatError(f"{path}: {len(data) - need} trailing bytes", offset=need)
    body = np.frombuffer(data, dtype=dtype, offset=HEADER.size, count=rows * cols)
    return body.reshape(rows, cols).astype(np.float64)


def write_features(path, fm: FeatureMatrix):
    _write_matrix(path, FEAT_MAGIC, fm.values, "<f4")


def read_features(path, utt_id=None) -> FeatureMatrix:
    values = _read_matrix(path, FEAT_MAGIC, "<f4")
    if values.shape[0] < 1 or values.shape[1] < 1:
        raise FormatError(f"{path}: empty feature matrix {values.shape}", offset=8)
    return FeatureMatrix(utt_id or Path(path).stem, values)


def write_posteriors(path, post):
    """Dump an ``|L'| x T`` log-posterior matrix (float64) for inspection."""
    _write_matrix(path, POST_MAGIC, post, "<f8")


def read_posteriors(path):
    return _read_matrix(path, POST_MAGIC, "<f8")


def write_feature_dir(directory, matrices):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for fm in matrices:
        write_features(d / f"{fm.utt_id}.feat", fm)


def read_feature_dir(directory):
    """All ``*.feat`` files of a directory, keyed and ordered by utterance id."""
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"{directory}: not a directory")
    out = {}
    for p in sorted(d.glob("*.feat")):
        fm = read_features(p)
        out[fm.utt_id] = fm
    return out


def parse_text_matrices(text, default_id="utt"):
    """Plain-text matrices to :class:`FeatureMatrix` objects.

    Accepts either one bare matrix (one frame per line) or Kaldi-style text
    archives: ``utt_id [`` followed by rows, the last row ending in ``]``.
    """
    out = []
    rows = []
    current = None
    bare = True
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if "[" in line:
            head, rest = line.split("[", 1)
            current = head.strip() or f"{default_id}{len(out)}"
            bare = False
            rows = []
            line = rest.strip()
            if not line:
                continue
        closing = line.endswith("]")
        if closing:
            line = line[:-1].strip()
        if line:
            try:
                rows.append([float(x) for x in line.split()])
            except ValueError:
                raise FormatError(f"line {lineno}: non-numeric value in {raw!r}") from None
        if closing:
            out.append(_rows_to_matrix(current, rows, lineno))
            rows = []
            current = None
    if bare and rows:
        out.append(_rows_to_matrix(default_id, rows, None))
    elif rows or current is not None:
        raise FormatError("unterminated matrix (missing ']')")
    return out


def _rows_to_matrix(utt, rows, lineno):
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        where = f" ending at line {lineno}" if lineno else ""
        raise FormatError(f"matrix {utt}{where}: ragged rows {sorted(widths)}")
    return FeatureMatrix(utt, np.array(rows, dtype=np.float64))


# -- synthetic corpus --------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic acoustic corpus.

    Each symbol owns a random template vector; an utterance is a sequence of
    words from a fixed lexicon, each symbol a run of noisy template frames,
    words separated by short runs of near-silence.  Word order follows a
    sparse Markov chain (each word allows ``successors`` next words; 0 means
    independent draws) so a language model has structure to learn.
    """

    alphabet_size: int = 8
    frames_per_symbol: tuple = (4, 7)
    noise: float = 0.1
    seed: int = 0
    feature_dim: int = 16
    lexicon_size: int = 24
    word_length: tuple = (2, 4)
    words_per_utt: tuple = (2, 4)
    gap_frames: tuple = (1, 2)
    successors: int = 3

    @property
    def alphabet(self):
        return "abcdefghijklmnopqrstuvwxyz"[: self.alphabet_size]


def _lexicon(spec, rng):
    if not 2 <= spec.alphabet_size <= 26:
        raise ContractError("alphabet_size must be in 2..26")
    alphabet = spec.alphabet
    words = []
    seen = set()
    attempts = 0
    while len(words) < spec.lexicon_size:
        attempts += 1
        if attempts > 100000:
            raise ContractError("cannot draw enough distinct lexicon words")
        n = int(rng.integers(spec.word_length[0], spec.word_length[1] + 1))
        w = [alphabet[rng.integers(len(alphabet))]]
        while len(w) < n:
            c = alphabet[rng.integers(len(alphabet))]
            if c != w[-1]:
                w.append(c)
        word = "".join(w)
        if word not in seen:
            seen.add(word)
            words.append(word)
    # Zipf-like frequencies give BPE something to find
    freqs = 1.0 / np.arange(1, len(words) + 1)
    return words, freqs / freqs.sum()


def _transitions(spec, n_words):
    """Row-stochastic word transition matrix; uniform Zipf rows when ``successors`` is 0."""
    freqs = 1.0 / np.arange(1, n_words + 1)
    if spec.successors <= 0:
        return np.tile(freqs / freqs.sum(), (n_words, 1))
    rng = np.random.default_rng([spec.seed, 3])
    k = min(spec.successors, n_words)
    P = np.zeros((n_words, n_words))
    for i in range(n_words):
        nxt = rng.choice(n_words, size=k, replace=False)
        P[i, nxt] = rng.dirichlet(np.ones(k))
    return P


def synthetic_templates(spec):
    rng = np.random.default_rng(spec.seed)
    return rng.normal(size=(spec.alphabet_size, spec.feature_dim))


def _draw_utterance(spec, i, words, probs, trans):
    """Word choice and per-frame symbol index (-1 = silence) of utterance ``i``."""
    rng = np.random.default_rng([spec.seed, 2, i])
    n_words = int(rng.integers(spec.words_per_utt[0], spec.words_per_utt[1] + 1))
    k = int(rng.choice(len(words), p=probs))
    picks = [k]
    while len(picks) < n_words:
        k = int(rng.choice(len(words), p=trans[k]))
        picks.append(k)
    chosen = [words[k] for k in picks]
    index = {c: k for k, c in enumerate(spec.alphabet)}

    def gap():
        return [-1] * int(rng.integers(spec.gap_frames[0], spec.gap_frames[1] + 1))

    labels = gap()
    for w in chosen:
        for c in w:
            run = int(rng.integers(spec.frames_per_symbol[0], spec.frames_per_symbol[1] + 1))
            labels += [index[c]] * run
        labels += gap()
    return chosen, np.array(labels), rng


def generate_synthetic(spec: SyntheticSpec, n_utts, start=0):
    """``n_utts`` (FeatureMatrix, transcript) pairs; ids ``synth-NNNNN``.

    Templates and lexicon depend only on ``spec.seed``; utterance ``i`` is
    drawn from a stream seeded by ``(seed, i)``, so any slice is reproducible
    on its own.
    """
    templates = np.vstack([synthetic_templates(spec), np.zeros(spec.feature_dim)])
    words, probs = _lexicon(spec, np.random.default_rng([spec.seed, 1]))
    trans = _transitions(spec, len(words))
    out = []
    for i in range(start, start + n_utts):
        chosen, labels, rng = _draw_utterance(spec, i, words, probs, trans)
        clean = templates[labels]
        noisy = clean + spec.noise * rng.normal(size=clean.shape) if spec.noise else clean
        out.append((FeatureMatrix(f"synth-{i:05d}", noisy), " ".join(chosen)))
    return out


def frame_labels(spec: SyntheticSpec, n_utts, start=0):
    """Per-frame symbol index (-1 for silence) matching :func:`generate_synthetic`."""
    words, probs = _lexicon(spec, np.random.default_rng([spec.seed, 1]))
    trans = _transitions(spec, len(words))
    return [_draw_utterance(spec, i, words, probs, trans)[1] for i in range(start, start + n_utts)]


def lexicon(spec: SyntheticSpec):
    return _lexicon(spec, np.random.default_rng([spec.seed, 1]))[0]
