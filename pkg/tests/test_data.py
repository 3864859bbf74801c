import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hctc.data import (
    FeatureMatrix,
    SyntheticSpec,
    frame_labels,
    generate_synthetic,
    lexicon,
    parse_text_matrices,
    read_feature_dir,
    read_features,
    read_posteriors,
    synthetic_templates,
    write_feature_dir,
    write_features,
    write_posteriors,
)
from hctc.errors import ContractError, FormatError

f32 = st.floats(-1e6, 1e6, width=32, allow_nan=False)


class TestFeatureFiles:
    def test_layout(self, tmp_path):
        p = tmp_path / "u.feat"
        write_features(p, FeatureMatrix("u", np.arange(6.0).reshape(3, 2)))
        data = p.read_bytes()
        assert len(data) == 16 + 3 * 2 * 4
        assert data[:4] == b"FEAT"
        assert int.from_bytes(data[8:12], "little") == 3
        assert int.from_bytes(data[12:16], "little") == 2

    @given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 5)), elements=f32))
    def test_round_trip_bit_identical(self, tmp_path_factory, values):
        p = tmp_path_factory.mktemp("f") / "x.feat"
        write_features(p, FeatureMatrix("x", values.astype(np.float64)))
        back = read_features(p)
        assert back.utt_id == "x"
        assert back.values.astype(np.float32).tobytes() == values.tobytes()

    def test_truncated_body(self, tmp_path):
        p = tmp_path / "u.feat"
        write_features(p, FeatureMatrix("u", np.ones((3, 2))))
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(FormatError) as info:
            read_features(p)
        assert info.value.offset == 37
        assert "offset 37" in str(info.value)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "u.feat"
        p.write_bytes(b"FEAT\x01")
        with pytest.raises(FormatError):
            read_features(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "u.feat"
        write_features(p, FeatureMatrix("u", np.ones((1, 1))))
        p.write_bytes(b"JUNK" + p.read_bytes()[4:])
        with pytest.raises(FormatError) as info:
            read_features(p)
        assert info.value.offset == 0

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "u.feat"
        write_features(p, FeatureMatrix("u", np.ones((1, 1))))
        p.write_bytes(p.read_bytes() + b"\0")
        with pytest.raises(FormatError):
            read_features(p)

    def test_zero_frames_rejected(self, tmp_path):
        p = tmp_path / "u.feat"
        p.write_bytes(b"FEAT" + (1).to_bytes(4, "little") + bytes(8))
        with pytest.raises(FormatError):
            read_features(p)

    def test_contract(self):
        with pytest.raises(ContractError):
            FeatureMatrix("u", np.ones(3))
        with pytest.raises(ContractError):
            FeatureMatrix("u", np.array([[np.nan]]))

    def test_directory(self, tmp_path):
        mats = [FeatureMatrix(f"u{i}", np.full((i + 1, 2), i)) for i in range(3)]
        write_feature_dir(tmp_path / "d", mats)
        back = read_feature_dir(tmp_path / "d")
        assert list(back) == ["u0", "u1", "u2"]
        assert back["u2"].T == 3

    def test_posteriors(self, tmp_path, rng):
        post = rng.normal(size=(4, 7))
        write_posteriors(tmp_path / "p.post", post)
        assert np.array_equal(read_posteriors(tmp_path / "p.post"), post)


class TestTextMatrices:
    def test_bare(self):
        (fm,) = parse_text_matrices("1 2\n3 4\n")
        assert fm.values.tolist() == [[1, 2], [3, 4]]

    def test_archive(self):
        text = "a [\n 1 2\n 3 4 ]\nb [ 5 6 ]\n"
        mats = parse_text_matrices(text)
        assert [m.utt_id for m in mats] == ["a", "b"]
        assert mats[1].values.tolist() == [[5, 6]]

    def test_ragged(self):
        with pytest.raises(FormatError):
            parse_text_matrices("1 2\n3\n")

    def test_unterminated(self):
        with pytest.raises(FormatError):
            parse_text_matrices("a [\n1 2\n")

    def test_non_numeric(self):
        with pytest.raises(FormatError):
            parse_text_matrices("1 x\n")


class TestSynthetic:
    def test_noise_free_frames_are_templates(self):
        spec = SyntheticSpec(noise=0.0)
        templates = synthetic_templates(spec)
        pairs = generate_synthetic(spec, 5)
        for (fm, _), labels in zip(pairs, frame_labels(spec, 5)):
            for t, k in enumerate(labels):
                expect = templates[k] if k >= 0 else np.zeros(spec.feature_dim)
                assert np.array_equal(fm.values[t], expect)

    def test_reproducible(self):
        a = generate_synthetic(SyntheticSpec(seed=4), 6)
        b = generate_synthetic(SyntheticSpec(seed=4), 6)
        assert [t for _, t in a] == [t for _, t in b]
        assert all(np.array_equal(x.values, y.values) for (x, _), (y, _) in zip(a, b))
        c = generate_synthetic(SyntheticSpec(seed=5), 6)
        assert [t for _, t in a] != [t for _, t in c]

    def test_slices_independent(self):
        spec = SyntheticSpec()
        whole = generate_synthetic(spec, 8)
        tail = generate_synthetic(spec, 3, start=5)
        assert [t for _, t in whole[5:]] == [t for _, t in tail]
        assert tail[0][0].utt_id == "synth-00005"

    def test_transcripts_use_lexicon_and_alphabet(self):
        spec = SyntheticSpec()
        words = set(lexicon(spec))
        assert len(words) == spec.lexicon_size
        for _, text in generate_synthetic(spec, 30):
            assert set(text.split()) <= words
            assert set(text.replace(" ", "")) <= set(spec.alphabet)

    def test_markov_order_restricts_bigrams(self):
        spec = SyntheticSpec()
        bigrams = set()
        for _, text in generate_synthetic(spec, 300):
            w = text.split()
            bigrams.update(zip(w, w[1:]))
        assert len(bigrams) <= spec.lexicon_size * spec.successors

    def test_frames_linearly_separable(self):
        # at noise 0.1 a least-squares frame classifier is nearly perfect
        spec = SyntheticSpec(noise=0.1)
        pairs = generate_synthetic(spec, 40)
        X = np.vstack([fm.values for fm, _ in pairs])
        y = np.concatenate(frame_labels(spec, 40)) + 1
        Xb = np.hstack([X, np.ones((len(X), 1))])
        Y = np.eye(spec.alphabet_size + 1)[y]
        W, *_ = np.linalg.lstsq(Xb, Y, rcond=None)
        acc = np.mean(np.argmax(Xb @ W, axis=1) == y)
        assert acc > 0.99
