import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hctc.errors import ContractError, FormatError, UnknownSymbolError
from hctc.units import (
    BLANK,
    MergeTable,
    UnitInventory,
    base_subword_units,
    bpe_inventory,
    build_char_inventory,
    build_coder,
    decode_units,
    encode_chars,
    encode_subwords,
    learn_bpe,
    load_coder,
    mark_word,
    parse_head_name,
    read_inventory,
    read_merges,
    read_transcripts,
    save_coder,
    segment_word,
    write_inventory,
    write_merges,
    write_transcripts,
)

words = st.text(alphabet="abcde", min_size=1, max_size=6)
corpora = st.lists(st.lists(words, min_size=1, max_size=5).map(" ".join), min_size=1, max_size=12)

COLD_WEATHER = MergeTable((
    ("c@", "o@"), ("l@", "d"),
    ("w@", "e@"), ("we@", "a@"),
    ("t@", "h@"), ("th@", "e@"), ("the@", "r"),
))


class TestCharInventory:
    def test_two_words(self):
        inv = build_char_inventory(["ab", "ba"])
        assert inv.units == (BLANK, "a", "b")
        assert len(inv) == 3

    def test_no_space_unit(self):
        inv = build_char_inventory(["you know"])
        assert set(inv.units[1:]) == set("youknw")
        assert " " not in inv

    @given(corpora)
    def test_size_is_distinct_chars_plus_blank(self, corpus):
        inv = build_char_inventory(corpus)
        assert len(inv) == len(set("".join(corpus).replace(" ", ""))) + 1

    def test_empty_corpus(self):
        with pytest.raises(ContractError):
            build_char_inventory([])

    def test_blank_first_enforced(self):
        with pytest.raises(ContractError):
            UnitInventory(("a", BLANK))
        with pytest.raises(ContractError):
            UnitInventory((BLANK, "a", "a"))

    def test_hash_depends_on_units(self):
        a = build_char_inventory(["ab"])
        b = build_char_inventory(["abc"])
        assert a.hash != b.hash
        assert a.hash == build_char_inventory(["ba"]).hash


class TestLearn:
    def test_zero_ops(self):
        corpus = ["hello world"]
        assert len(learn_bpe(corpus, 0)) == 0
        inv = bpe_inventory(base_subword_units(corpus), MergeTable())
        assert len(inv) == len(base_subword_units(corpus)) + 1

    def test_most_frequent_pair_first(self):
        merges = learn_bpe(["aa aa ab"], 1)
        # within-word pairs: (a@, a) twice, (a@, b) once
        assert merges.merges == (("a@", "a"),)
        assert merges.units == ["aa"]

    def test_tie_breaks_lexicographically(self):
        merges = learn_bpe(["ab ab cd cd"], 1)
        assert merges.merges == (("a@", "b"),)

    def test_stops_without_repeated_pairs(self):
        assert len(learn_bpe(["abc"], 10)) == 0

    def test_marked_and_final_are_distinct(self):
        assert mark_word("cold") == ("c@", "o@", "l@", "d")
        assert base_subword_units(["dd"]) == ["d", "d@"]

    def test_marker_in_word_rejected(self):
        with pytest.raises(ContractError):
            learn_bpe(["a@b"], 1)

    def test_negative_ops(self):
        with pytest.raises(ContractError):
            learn_bpe(["a"], -1)

    @given(corpora, st.integers(0, 40))
    def test_each_merge_adds_one_unit(self, corpus, n_ops):
        merges = learn_bpe(corpus, n_ops)
        base = base_subword_units(corpus)
        inv = bpe_inventory(base, merges)
        assert len(merges) <= n_ops
        assert len(inv) == len(base) + len(merges) + 1

    @given(corpora, st.integers(0, 30), st.integers(0, 30))
    def test_smaller_table_is_prefix(self, corpus, a, b):
        lo, hi = sorted((a, b))
        assert learn_bpe(corpus, hi).prefix(lo) == learn_bpe(corpus, lo)


class TestSegment:
    def test_cold_weather_decomposition(self):
        assert encode_subwords("cold weather", COLD_WEATHER) == ["co@", "ld", "wea@", "ther"]

    def test_whole_word_unit(self):
        table = MergeTable(COLD_WEATHER.merges + (("wea@", "ther"),))
        assert encode_subwords("weather", table) == ["weather"]

    def test_single_character_word(self):
        assert encode_subwords("a", COLD_WEATHER) == ["a"]

    def test_rank_order_equals_sequential_application(self):
        corpus = ["abab abba baab", "abab bab"]
        merges = learn_bpe(corpus, 6)
        for word in "abab abba baab bab aabb".split():
            seq = list(mark_word(word))
            for a, b in merges.merges:
                i, out = 0, []
                while i < len(seq):
                    if i + 1 < len(seq) and (seq[i], seq[i + 1]) == (a, b):
                        out.append(a[:-1] + b)
                        i += 2
                    else:
                        out.append(seq[i])
                        i += 1
                seq = out
            assert segment_word(word, merges.ranks) == seq

    def test_unknown_character_named(self):
        inv = bpe_inventory(base_subword_units(["ab"]), MergeTable())
        with pytest.raises(UnknownSymbolError) as exc:
            encode_subwords("az", MergeTable(), inv)
        assert exc.value.symbol == "z"

    @given(corpora, st.integers(0, 40))
    def test_round_trip(self, corpus, n_ops):
        merges = learn_bpe(corpus, n_ops)
        inv = bpe_inventory(base_subword_units(corpus), merges)
        for text in corpus:
            units = encode_subwords(text, merges, inv)
            assert decode_units(units) == text


class TestDecode:
    def test_cold_weather(self):
        assert decode_units(["co@", "ld", "wea@", "ther"]) == "cold weather"

    def test_empty(self):
        assert decode_units([]) == ""

    def test_characters_concatenate(self):
        assert decode_units(list("youknow"), character_level=True) == "youknow"
        assert encode_chars("you know") == list("youknow")

    def test_blank_ignored(self):
        assert decode_units(["a@", BLANK, "b"]) == "ab"


class TestCoders:
    @pytest.mark.parametrize("name,ops", [("char", None), ("s300", 300), ("s1k", 1000),
                                          ("s10k", 10000), ("bpe-20", 20), ("bpe60", 60)])
    def test_head_names(self, name, ops):
        assert parse_head_name(name) == ops

    def test_bad_head_name(self):
        with pytest.raises(ContractError):
            parse_head_name("words")

    def test_coder_round_trip(self, tmp_path):
        corpus = ["the cat sat", "the cat ran", "a cat"]
        for name in ("char", "bpe-5"):
            coder = build_coder(name, corpus)
            save_coder(tmp_path, coder)
            again = load_coder(tmp_path, name)
            assert again == coder
            idx = coder.encode("the cat")
            assert all(0 < i < len(coder.inventory) for i in idx)
            expected = "thecat" if name == "char" else "the cat"
            assert coder.decode(idx) == expected


class TestFiles:
    def test_merges_round_trip(self, tmp_path):
        p = tmp_path / "m.txt"
        write_merges(p, COLD_WEATHER)
        assert read_merges(p) == COLD_WEATHER

    def test_merges_bad_line(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text("a@ b\nonly\n")
        with pytest.raises(FormatError):
            read_merges(p)

    def test_inventory_round_trip(self, tmp_path):
        inv = bpe_inventory(base_subword_units(["cold weather"]), COLD_WEATHER)
        p = tmp_path / "u.txt"
        write_inventory(p, inv)
        assert read_inventory(p, character_level=False) == inv

    def test_transcripts(self, tmp_path):
        p = tmp_path / "t.tsv"
        write_transcripts(p, {"u1": "Hello  World", "u2": "x"})
        assert read_transcripts(p) == {"u1": "hello world", "u2": "x"}
        p.write_text("u1\ta\nu1\tb\n")
        with pytest.raises(FormatError):
            read_transcripts(p)


def test_units_per_word_nonincreasing():
    rng = np.random.default_rng(0)
    corpus = [" ".join("".join(rng.choice(list("abcdef"), size=rng.integers(1, 6))) for _ in range(5))
              for _ in range(50)]
    means = []
    for n in (0, 5, 20, 60):
        m = learn_bpe(corpus, n)
        pieces = sum(len(encode_subwords(t, m)) for t in corpus)
        means.append(pieces / sum(len(t.split()) for t in corpus))
    assert means == sorted(means, reverse=True)
