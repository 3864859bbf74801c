import math

import numpy as np
import pytest

from hctc.errors import ContractError, FormatError
from hctc.lm import LstmLM, NgramLM, lm_next, lm_train, load_lm, perplexity, save_lm
from hctc.numerics import grad_check


class TestNgram:
    def test_hand_counts_bigram(self):
        lm = NgramLM(2, order=2, alpha=0.5).fit([[1, 2], [1, 1], [2]])
        s0 = lm.initial_state()
        np.testing.assert_allclose(np.exp(lm.log_probs(s0)[1:]), [2.5 / 4, 1.5 / 4], rtol=1e-14)
        s1 = lm.advance(s0, 1)
        np.testing.assert_allclose(np.exp(lm.log_probs(s1)[1:]), [1.5 / 3, 1.5 / 3], rtol=1e-14)
        s2 = lm.advance(s0, 2)  # unseen context: smoothing alone, uniform
        np.testing.assert_allclose(np.exp(lm.log_probs(s2)[1:]), [0.5, 0.5], rtol=1e-14)

    def test_fresh_state_is_start_distribution(self):
        lm = NgramLM(3, order=2, alpha=1.0).fit([[1, 2], [1, 3], [2]])
        p = lm.probs(lm.initial_state())
        np.testing.assert_allclose(p[1:], np.array([2 + 1, 1 + 1, 0 + 1]) / 6, rtol=1e-14)

    def test_vanishing_alpha(self):
        lm = NgramLM(2, order=2, alpha=1e-12).fit([[1, 2]])
        p = lm.probs(lm.advance(lm.initial_state(), 1))
        assert p[2] == pytest.approx(1.0, abs=1e-9)

    def test_blank_has_no_mass(self):
        lm = NgramLM(4, order=3).fit([[1, 2, 3, 4]])
        lp = lm.log_probs(lm.initial_state())
        assert lp[0] == -math.inf
        assert abs(np.exp(lp).sum() - 1.0) < 1e-12

    def test_distribution_normalized_everywhere(self, rng):
        corpus = [list(rng.integers(1, 6, size=rng.integers(1, 8))) for _ in range(30)]
        lm = NgramLM(5, order=3, alpha=0.1).fit(corpus)
        state = lm.initial_state()
        for u in rng.integers(1, 6, size=20):
            dist, advance = lm_next(lm, state)
            assert dist[0] == 0.0
            assert abs(dist.sum() - 1.0) < 1e-12
            state = advance(int(u))

    def test_uniform_source_perplexity(self):
        rng = np.random.default_rng(5)
        L = 6
        train = [list(rng.integers(1, L + 1, size=50)) for _ in range(400)]
        test = [list(rng.integers(1, L + 1, size=50)) for _ in range(40)]
        lm = NgramLM(L, order=2, alpha=1.0).fit(train)
        assert perplexity(lm, test) == pytest.approx(L, rel=0.02)

    def test_foreign_state_rejected(self):
        a = NgramLM(2).fit([[1]])
        b = NgramLM(2).fit([[1]])
        with pytest.raises(ContractError):
            b.log_probs(a.initial_state())

    def test_out_of_range_unit(self):
        with pytest.raises(ContractError):
            NgramLM(2).fit([[3]])

    def test_unigram_order(self):
        lm = NgramLM(2, order=1, alpha=0.0).fit([[1, 1, 2]])
        s = lm.advance(lm.initial_state(), 2)
        np.testing.assert_allclose(lm.probs(s)[1:], [2 / 3, 1 / 3])


class TestLstm:
    def test_distribution(self):
        lm = LstmLM(5, hidden=6, embed=4, layers=2, seed=1)
        s = lm.advance(lm.initial_state(), 3)
        lp = lm.log_probs(s)
        assert lp[0] == -math.inf
        assert abs(np.exp(lp).sum() - 1.0) < 1e-12

    def test_incremental_matches_training_graph(self):
        from hctc.numerics import Tape

        lm = LstmLM(4, hidden=5, embed=3, layers=2, seed=2, init_scale=0.5)
        seq = [2, 4, 1, 3]
        loss = float(lm.loss(Tape(record=False), [seq]).value) * len(seq)
        state = lm.initial_state()
        nll = 0.0
        for u in seq:
            nll -= lm.log_probs(state)[u]
            state = lm.advance(state, u)
        assert loss == pytest.approx(nll, rel=1e-12)

    def test_gradients(self):
        lm = LstmLM(4, hidden=3, embed=3, layers=2, seed=3, init_scale=0.5)
        batch = [[1, 2, 3], [4, 1]]
        assert grad_check(lambda tape: lm.loss(tape, batch), lm.params(), n_samples=120) < 1e-5

    def test_training_reduces_loss(self):
        corpus = [[1, 2, 3, 4], [1, 2, 3], [2, 3, 4, 1], [4, 3, 2, 1]]
        losses = []
        lm_train(corpus, 4, backend="lstm", hidden=8, embed=4, epochs=200, batch_size=4,
                 learning_rate=1.0, init_scale=0.3, callback=lambda e, loss: losses.append(loss))
        assert losses[-1] < 0.8 * losses[0]
        smooth = np.convolve(losses, np.ones(20) / 20, mode="valid")
        assert smooth[-1] < smooth[0]


class TestTrainAndPersist:
    def test_empty_corpus(self):
        with pytest.raises(ContractError):
            lm_train([[], []], 3)

    def test_unknown_backend(self):
        with pytest.raises(ContractError):
            lm_train([[1]], 3, backend="kenlm")

    @pytest.mark.parametrize("backend", ["ngram", "lstm"])
    def test_round_trip(self, tmp_path, backend):
        corpus = [[1, 2, 3], [3, 2, 1], [2, 2]]
        lm = lm_train(corpus, 3, backend=backend, inventory_hash="abc", hidden=4, embed=3, epochs=2)
        path = tmp_path / "lm.bin"
        save_lm(path, lm)
        again = load_lm(path)
        assert again.inventory_hash == "abc"
        s1, s2 = lm.initial_state(), again.initial_state()
        for u in (1, 3, 2):
            np.testing.assert_array_equal(lm.log_probs(s1), again.log_probs(s2))
            s1, s2 = lm.advance(s1, u), again.advance(s2, u)

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "lm.bin"
        save_lm(path, lm_train([[1, 2]], 2))
        data = path.read_bytes()
        path.write_bytes(data[:-3])
        with pytest.raises(FormatError):
            load_lm(path)
        path.write_bytes(b"XXXX" + data[4:])
        with pytest.raises(FormatError):
            load_lm(path)
