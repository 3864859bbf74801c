import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import recursive_edit_distance

from hctc.errors import AlignmentError
from hctc.eval import ErrorBreakdown, edit_distance, score_corpus, tokenize

seqs = st.lists(st.sampled_from("abcd"), max_size=7)


class TestEditDistance:
    def test_identical(self):
        eb = edit_distance("a b c".split(), "a b c".split())
        assert eb == ErrorBreakdown(0, 0, 0, 3) and eb.rate == 0.0

    def test_one_substitution(self):
        eb = edit_distance("a b c".split(), "a x c".split())
        assert (eb.sub, eb.ins, eb.dele) == (1, 0, 0)
        assert 100 * eb.rate == pytest.approx(33.33, abs=0.005)

    def test_one_deletion(self):
        eb = edit_distance(["a"], [])
        assert eb == ErrorBreakdown(0, 0, 1, 1) and eb.rate == 1.0

    def test_rate_can_exceed_one(self):
        eb = edit_distance(["a"], ["x", "y", "z"])
        assert eb.errors == 3 and eb.rate == 3.0

    def test_tie_prefers_substitution(self):
        # "a b" vs "b c": two subs or one del + one ins; both cost 2
        eb = edit_distance(["a", "b"], ["b", "c"])
        assert (eb.sub, eb.ins, eb.dele) == (2, 0, 0)

    def test_empty_both(self):
        assert edit_distance([], []).rate == 0.0

    @given(seqs, seqs)
    def test_matches_recursive_oracle(self, a, b):
        eb = edit_distance(a, b)
        assert eb.errors == recursive_edit_distance(a, b)
        assert eb.ref_len == len(a)
        assert eb.dele - eb.ins == len(a) - len(b)

    @given(seqs, seqs)
    def test_symmetric(self, a, b):
        assert edit_distance(a, b).errors == edit_distance(b, a).errors

    @given(seqs, seqs, seqs)
    def test_triangle_inequality(self, a, b, c):
        assert edit_distance(a, c).errors <= edit_distance(a, b).errors + edit_distance(b, c).errors

    @given(seqs)
    def test_identity(self, a):
        assert edit_distance(a, a).errors == 0


class TestCorpus:
    def test_pooled_not_averaged(self):
        refs = {"u1": "a b c d e f g h i", "u2": "z"}
        hyps = {"u1": "a b c d e f g h i", "u2": ""}
        eb = score_corpus(refs, hyps)
        assert eb.rate == pytest.approx(0.10, abs=1e-15)

    def test_identical_files(self):
        refs = {"u1": "x y", "u2": "z"}
        assert score_corpus(refs, dict(refs)).rate == 0.0

    def test_char_granularity_strips_spaces(self):
        assert tokenize("ab c", "char") == ["a", "b", "c"]
        eb = score_corpus({"u": "ab c"}, {"u": "abc"}, granularity="char")
        assert eb.errors == 0 and eb.ref_len == 3

    def test_bad_granularity(self):
        with pytest.raises(ValueError):
            tokenize("a", "phone")

    def test_alignment_error_lists_ids(self):
        with pytest.raises(AlignmentError) as info:
            score_corpus({"u1": "a", "u2": "b"}, {"u1": "a", "u3": "c"})
        msg = str(info.value)
        assert "u2" in msg and "u3" in msg

    def test_per_utterance_details(self):
        total, details = score_corpus({"u1": "a b", "u2": "c"}, {"u1": "a", "u2": "d"}, per_utterance=True)
        assert details["u1"] == ErrorBreakdown(0, 0, 1, 2)
        assert details["u2"] == ErrorBreakdown(1, 0, 0, 1)
        assert total == details["u1"] + details["u2"]

    def test_partition_invariance(self):
        rng = np.random.default_rng(5)
        words = list("abcde")
        refs, hyps = {}, {}
        for i in range(40):
            refs[f"u{i}"] = " ".join(rng.choice(words, rng.integers(0, 6)))
            hyps[f"u{i}"] = " ".join(rng.choice(words, rng.integers(0, 6)))
        whole = score_corpus(refs, hyps)
        ids = list(refs)
        cut = 17
        parts = [ids[:cut], ids[cut:]]
        pooled = ErrorBreakdown()
        for part in parts:
            pooled = pooled + score_corpus({u: refs[u] for u in part}, {u: hyps[u] for u in part})
        assert pooled == whole
        oracle = sum(recursive_edit_distance(refs[u].split(), hyps[u].split()) for u in ids)
        assert whole.errors == oracle

    def test_key_values(self):
        text = ErrorBreakdown(1, 2, 3, 10).key_values()
        assert text.splitlines()[0] == "wer=60.00"
        assert "del=3" in text
