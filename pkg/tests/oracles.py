"""Slow reference implementations used only by tests."""

from functools import lru_cache


def recursive_edit_distance(ref, hyp):
    """Plain recursive Levenshtein distance with unit costs."""
    ref, hyp = tuple(ref), tuple(hyp)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(
            d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]),
            d(i, j - 1) + 1,
            d(i - 1, j) + 1,
        )

    return d(len(ref), len(hyp))
