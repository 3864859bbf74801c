"""Unit inventories: characters and BPE subwords with the ``@`` marker.

Subword pieces that do not end a word carry a trailing ``@``; a piece without
it closes the word.  BPE therefore runs over *marked* characters: the word
``cold`` starts life as ``c@ o@ l@ d`` and a merge joins ``left`` and ``right``
into ``left[:-1] + right``.  Because a marked base symbol and its word-final
twin (``d@`` / ``d``) are distinct units, the base inventory of a subword set
is the set of marked characters seen in the corpus.
"""

from __future__ import annotations

import hashlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError, FormatError, UnknownSymbolError

BLANK = "<blank>"
MARKER = "@"


def normalize_text(text, lowercase=True):
    text = " ".join(text.split())
    return text.lower() if lowercase else text


@dataclass(frozen=True)
class UnitInventory:
    """Ordered units with the CTC blank at index 0."""

    units: tuple
    character_level: bool = False
    marker: str = MARKER
    _index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.units or self.units[0] != BLANK:
            raise ContractError("inventory must start with the blank unit")
        if len(set(self.units)) != len(self.units):
            raise ContractError("inventory units must be unique")
        if any(not u for u in self.units):
            raise ContractError("inventory units must be nonempty")
        object.__setattr__(self, "_index", {u: i for i, u in enumerate(self.units)})

    def __len__(self):
        return len(self.units)

    @property
    def n_labels(self):
        """|L|, the label count without blank."""
        return len(self.units) - 1

    def __contains__(self, unit):
        return unit in self._index

    def index(self, unit):
        try:
            return self._index[unit]
        except KeyError:
            raise UnknownSymbolError(unit) from None

    def indices(self, units):
        return [self.index(u) for u in units]

    def lookup(self, indices):
        return [self.units[i] for i in indices]

    @property
    def hash(self):
        h = hashlib.sha256()
        h.update(b"char" if self.character_level else b"subword")
        for u in self.units:
            h.update(b"\x00" + u.encode("utf-8"))
        return h.hexdigest()[:16]


def build_char_inventory(corpus) -> UnitInventory:
    """Every non-space character in ``corpus`` (sorted) plus blank."""
    chars = set()
    n = 0
    for text in corpus:
        n += 1
        chars.update(c for c in text if not c.isspace())
    if n == 0 or not chars:
        raise ContractError("cannot build a character inventory from an empty corpus")
    return UnitInventory((BLANK, *sorted(chars)), character_level=True)


# -- BPE -------------------------------------------------------------------


def mark_word(word):
    """Marked characters of one word: ``cold`` -> ``c@ o@ l@ d``."""
    if MARKER in word:
        raise ContractError(f"word {word!r} contains the reserved marker {MARKER!r}")
    return tuple(c + MARKER for c in word[:-1]) + (word[-1],)


def merged_unit(left, right):
    return left[: -len(MARKER)] + right


@dataclass(frozen=True)
class MergeTable:
    """Ordered ``(left, right)`` merges; application order is list order."""

    merges: tuple = ()

    def __len__(self):
        return len(self.merges)

    def prefix(self, n):
        return MergeTable(self.merges[:n])

    @property
    def units(self):
        return [merged_unit(a, b) for a, b in self.merges]

    @property
    def ranks(self):
        return {pair: r for r, pair in enumerate(self.merges)}


def _word_counts(corpus):
    counts = Counter()
    for text in corpus:
        counts.update(text.split())
    return counts


def base_subword_units(corpus):
    """Sorted marked characters that occur in ``corpus``."""
    units = set()
    for word in _word_counts(corpus):
        units.update(mark_word(word))
    return sorted(units)


def _pairs(seq):
    return zip(seq[:-1], seq[1:])


def _apply_merge(seq, pair, new):
    out = []
    i = 0
    while i < len(seq):
        if i + 1 < len(seq) and seq[i] == pair[0] and seq[i + 1] == pair[1]:
            out.append(new)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return tuple(out)


def learn_bpe(corpus, n_ops) -> MergeTable:
    """Learn up to ``n_ops`` merges from whitespace-tokenized transcripts.

    Pairs are counted inside words only, weighted by word frequency.  The most
    frequent pair wins; ties go to the lexicographically smallest
    ``(left, right)``.  Learning stops early once no pair occurs at least
    twice.  A pair whose merged string is already a unit is never chosen, so
    each merge adds exactly one unit.
    """
    if n_ops < 0:
        raise ContractError("n_ops must be >= 0")
    word_freq = _word_counts(corpus)
    words = [mark_word(w) for w in word_freq]
    freqs = list(word_freq.values())
    known = set(u for w in words for u in w)

    pair_counts = Counter()
    where = defaultdict(set)
    for wi, seq in enumerate(words):
        for p in _pairs(seq):
            pair_counts[p] += freqs[wi]
            where[p].add(wi)

    merges = []
    while len(merges) < n_ops:
        candidates = [
            (c, p) for p, c in pair_counts.items() if c >= 2 and merged_unit(*p) not in known
        ]
        if not candidates:
            break
        count, best = min(candidates, key=lambda cp: (-cp[0], cp[1]))
        new = merged_unit(*best)
        merges.append(best)
        known.add(new)
        for wi in sorted(where.pop(best, ())):
            old = words[wi]
            seq = _apply_merge(old, best, new)
            if seq == old:
                continue
            for p in _pairs(old):
                pair_counts[p] -= freqs[wi]
                if pair_counts[p] <= 0:
                    del pair_counts[p]
            for p in _pairs(seq):
                pair_counts[p] += freqs[wi]
                where[p].add(wi)
            words[wi] = seq
        pair_counts.pop(best, None)
    return MergeTable(tuple(merges))


def bpe_inventory(base_units, merges: MergeTable) -> UnitInventory:
    """Blank + base marked characters + one unit per merge."""
    units = [BLANK, *base_units]
    seen = set(units)
    for u in merges.units:
        if u in seen:
            raise ContractError(f"merge produces existing unit {u!r}")
        seen.add(u)
        units.append(u)
    return UnitInventory(tuple(units), character_level=False)


def segment_word(word, ranks):
    """Apply merges to one word in rank order (equivalent to list order)."""
    seq = list(mark_word(word))
    while len(seq) > 1:
        best = None
        for k, p in enumerate(_pairs(seq)):
            r = ranks.get(p)
            if r is not None and (best is None or r < best[0]):
                best = (r, k)
        if best is None:
            break
        r, k = best
        seq[k:k + 2] = [merged_unit(seq[k], seq[k + 1])]
    return seq


def encode_subwords(text, merges: MergeTable, inventory: UnitInventory | None = None):
    """Segment every word of ``text``; returns unit strings.

    When ``inventory`` is given every piece must be in it; the first unknown
    base character raises :class:`UnknownSymbolError`.
    """
    ranks = merges.ranks
    out = []
    for word in text.split():
        if inventory is not None:
            for c, u in zip(word, mark_word(word)):
                if u not in inventory:
                    raise UnknownSymbolError(c, word)
        pieces = segment_word(word, ranks)
        if inventory is not None:
            for p in pieces:
                if p not in inventory:
                    raise UnknownSymbolError(p, word)
        out.extend(pieces)
    return out


def encode_chars(text, inventory: UnitInventory | None = None):
    units = [c for c in text if not c.isspace()]
    if inventory is not None:
        for c in units:
            if c not in inventory:
                raise UnknownSymbolError(c, text)
    return units


def decode_units(units, character_level=False):
    """Unit strings back to text.

    Character units are concatenated without spaces.  Subword units lose
    their ``@`` and a space follows every unit without one.
    """
    units = [u for u in units if u != BLANK]
    if character_level:
        return "".join(units)
    words = []
    current = ""
    for u in units:
        if u.endswith(MARKER):
            current += u[: -len(MARKER)]
        else:
            words.append(current + u)
            current = ""
    if current:
        words.append(current)
    return " ".join(words)


@dataclass(frozen=True)
class UnitCoder:
    """Text <-> index sequences for one head: an inventory and, for subwords, merges."""

    name: str
    inventory: UnitInventory
    merges: MergeTable | None = None

    @property
    def character_level(self):
        return self.merges is None

    def units(self, text):
        if self.merges is None:
            return encode_chars(text, self.inventory)
        return encode_subwords(text, self.merges, self.inventory)

    def encode(self, text):
        return self.inventory.indices(self.units(text))

    def decode(self, indices):
        return decode_units(self.inventory.lookup(indices), self.character_level)


def parse_head_name(name):
    """``char`` -> None; ``s300``/``s1k``/``bpe-20``/``bpe20`` -> merge count."""
    key = name.strip().lower()
    if key in ("char", "chars", "character"):
        return None
    for prefix in ("bpe-", "bpe", "s"):
        if key.startswith(prefix):
            num = key[len(prefix):]
            mult = 1
            if num.endswith("k"):
                num, mult = num[:-1], 1000
            if num.isdigit():
                return int(num) * mult
    raise ContractError(f"unrecognized head name {name!r}")


def build_coder(name, corpus) -> UnitCoder:
    """Learn the unit set named ``name`` from a list of normalized transcripts."""
    corpus = list(corpus)
    n_ops = parse_head_name(name)
    if n_ops is None:
        return UnitCoder(name, build_char_inventory(corpus))
    merges = learn_bpe(corpus, n_ops)
    return UnitCoder(name, bpe_inventory(base_subword_units(corpus), merges), merges)


# -- files -------------------------------------------------------------------


def write_merges(path, merges: MergeTable):
    with open(path, "w", encoding="utf-8") as f:
        f.write("# hctc merge table: left right, in application order\n")
        for a, b in merges.merges:
            f.write(f"{a} {b}\n")


def read_merges(path) -> MergeTable:
    merges = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'left right', got {line!r}")
            merges.append((parts[0], parts[1]))
    return MergeTable(tuple(merges))


def write_inventory(path, inventory: UnitInventory):
    with open(path, "w", encoding="utf-8") as f:
        for u in inventory.units:
            f.write(u + "\n")


def read_inventory(path, character_level=None) -> UnitInventory:
    with open(path, encoding="utf-8") as f:
        units = [line.rstrip("\n") for line in f if line.rstrip("\n")]
    if not units or units[0] != BLANK:
        raise FormatError(f"{path}: first line must be {BLANK}")
    if character_level is None:
        character_level = all(len(u) == 1 for u in units[1:])
    return UnitInventory(tuple(units), character_level=character_level)


def read_transcripts(path, lowercase=True):
    """``utt_id<TAB>text`` lines -> ordered dict of normalized text."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise FormatError(f"{path}:{lineno}: expected utt_id<TAB>text")
            utt, text = line.split("\t", 1)
            if utt in out:
                raise FormatError(f"{path}:{lineno}: duplicate utterance id {utt!r}")
            out[utt] = normalize_text(text, lowercase)
    return out


def write_transcripts(path, transcripts):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for utt, text in transcripts.items():
            f.write(f"{utt}\t{text}\n")


def save_coder(directory, coder: UnitCoder):
    """Write ``<name>.units`` (and ``<name>.merges`` for subwords) into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = [d / f"{coder.name}.units"]
    write_inventory(paths[0], coder.inventory)
    if coder.merges is not None:
        paths.append(d / f"{coder.name}.merges")
        write_merges(paths[1], coder.merges)
    return paths


def load_coder(directory, name) -> UnitCoder:
    d = Path(directory)
    units = d / f"{name}.units"
    if not units.exists():
        raise FormatError(f"{units}: no unit inventory for head {name!r}")
    merges_path = d / f"{name}.merges"
    if parse_head_name(name) is None:
        return UnitCoder(name, read_inventory(units, character_level=True))
    merges = read_merges(merges_path)
    return UnitCoder(name, read_inventory(units, character_level=False), merges)
