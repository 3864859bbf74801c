"""Word and character error rates."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import AlignmentError


@dataclass(frozen=True)
class ErrorBreakdown:
    sub: int = 0
    ins: int = 0
    dele: int = 0
    ref_len: int = 0

    @property
    def errors(self):
        return self.sub + self.ins + self.dele

    @property
    def rate(self):
        """(S + I + D) / N; an empty reference scores 0 if the hypothesis is empty too."""
        if self.ref_len == 0:
            return 0.0 if self.errors == 0 else float("inf")
        return self.errors / self.ref_len

    def __add__(self, other):
        return ErrorBreakdown(
            self.sub + other.sub, self.ins + other.ins,
            self.dele + other.dele, self.ref_len + other.ref_len,
        )

    def key_values(self, prefix="wer"):
        return (
            f"{prefix}={100.0 * self.rate:.2f}\nerrors={self.errors}\nsub={self.sub}\n"
            f"ins={self.ins}\ndel={self.dele}\nref={self.ref_len}\n"
        )

    def summary(self, label="WER"):
        return (
            f"%{label} {100.0 * self.rate:.2f} [ {self.errors} / {self.ref_len}, "
            f"{self.sub} sub, {self.ins} ins, {self.dele} del ]"
        )


def edit_distance(ref, hyp) -> ErrorBreakdown:
    """Minimum-cost alignment with unit costs.

    When several alignments share the minimum, the backtrace takes a
    substitution (or match) first, then an insertion, then a deletion.
    """
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    D = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        D[i][0] = i
    for j in range(1, m + 1):
        D[0][j] = j
    for i in range(1, n + 1):
        ri = ref[i - 1]
        row, prev = D[i], D[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (ri != hyp[j - 1]), row[j - 1] + 1, prev[j] + 1)
    sub = ins = dele = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and D[i][j] == D[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and D[i][j] == D[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dele += 1
            i -= 1
    return ErrorBreakdown(sub, ins, dele, n)


def tokenize(text, granularity="word"):
    if granularity == "word":
        return text.split()
    if granularity == "char":
        return [c for c in text if not c.isspace()]
    raise ValueError(f"granularity must be 'word' or 'char', got {granularity!r}")


def score_corpus(refs, hyps, granularity="word", per_utterance=False):
    """Pooled error counts over matching utterance ids.

    ``refs`` and ``hyps`` map utt_id to text.  The rate is total errors over
    total reference tokens, not a mean of per-utterance rates.
    """
    missing = set(refs) - set(hyps)
    extra = set(hyps) - set(refs)
    if missing or extra:
        raise AlignmentError(missing, extra)
    total = ErrorBreakdown()
    details = {}
    for utt in refs:
        eb = edit_distance(tokenize(refs[utt], granularity), tokenize(hyps[utt], granularity))
        details[utt] = eb
        total = total + eb
    return (total, details) if per_utterance else total
