import numpy as np
import pytest

import knnmem.autodiff as ad
from knnmem.autodiff import Tape, grad_check
from knnmem.corpus import Document, build_vocab
from knnmem.encoder import (
    EncoderConfig,
    EncoderError,
    TextEncoder,
    load_pretrained_embeddings,
    random_embedding_table,
)

TINY = EncoderConfig(word_dim=4, char_dim=3, char_lstm_dim=4, hidden=5, max_tokens=16)


def make_vocab(texts):
    docs = [
        Document(id=i, label=0, title=t, body="", tokens=tuple(t.split()))
        for i, t in enumerate(texts)
    ]
    return build_vocab(docs)


@pytest.fixture
def tiny_encoder():
    vocab = make_vocab(["the cat sat on the mat", "a dog ran fast", "birds fly high up"])
    return TextEncoder.create(TINY, vocab, seed=11)


def ref_lstm_step(Wx, Wh, b, x, h, c):
    """Independent numpy reference for one fused-gate LSTM step (i, f, g, o)."""
    hidden = Wh.shape[0]
    z = x @ Wx + h @ Wh + b
    i = 1.0 / (1.0 + np.exp(-z[:, :hidden]))
    f = 1.0 / (1.0 + np.exp(-z[:, hidden:2 * hidden]))
    g = np.tanh(z[:, 2 * hidden:3 * hidden])
    o = 1.0 / (1.0 + np.exp(-z[:, 3 * hidden:]))
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


class TestShapes:
    def test_default_word_representation_width(self):
        assert EncoderConfig().d == 350
        assert EncoderConfig().l == 200

    def test_text_embedding_length(self, tiny_encoder):
        emb = tiny_encoder.encode_text(["the", "cat"])
        assert emb.shape == (2 * TINY.hidden,)

    def test_word_represent_width_any_config(self):
        for word_dim, char_dim in ((4, 3), (6, 2)):
            cfg = EncoderConfig(word_dim=word_dim, char_dim=char_dim, char_lstm_dim=3, hidden=4)
            vocab = make_vocab(["x y z"])
            enc = TextEncoder.create(cfg, vocab, seed=0)
            assert enc.word_represent("x").shape == (cfg.d,)

    def test_batch_shape(self, tiny_encoder):
        out = tiny_encoder.encode_batch([["the", "cat"], ["dog"], ["birds", "fly", "high"]])
        assert out.shape == (3, TINY.l)


class TestCharCompose:
    def test_single_char_is_one_step_from_zero_state(self, tiny_encoder):
        enc = tiny_encoder
        got = enc.char_compose("a").data
        p = enc.params.char_lstm
        x = enc.params.char_table.data[enc.vocab.char_id("a")][None, :]
        want, _ = ref_lstm_step(p.Wx.data, p.Wh.data, p.b.data,
                                x, np.zeros((1, 4)), np.zeros((1, 4)))
        assert np.allclose(got, want[0], atol=1e-12)

    def test_deterministic(self, tiny_encoder):
        a = tiny_encoder.char_compose("cat").data
        b = tiny_encoder.char_compose("cat").data
        assert np.array_equal(a, b)

    def test_unknown_chars_map_to_id_zero(self, tiny_encoder):
        # Both words are entirely unknown characters of equal length.
        a = tiny_encoder.char_compose("@@").data
        b = tiny_encoder.char_compose("##").data
        assert np.array_equal(a, b)

    def test_empty_word_rejected(self, tiny_encoder):
        with pytest.raises(EncoderError):
            tiny_encoder.char_compose("")

    def test_gradient_matches_fd(self, tiny_encoder):
        enc = tiny_encoder

        def loss_fn():
            return ad.sum(enc.char_compose("cat"))

        report = grad_check(loss_fn, {"char_emb": enc.params.char_table}, h=1e-4)
        assert report.worst() < 1e-3, report.max_rel_err


class TestWordRepresent:
    def test_oov_uses_row_zero(self, tiny_encoder):
        enc = tiny_encoder
        vec = enc.word_represent("zzzz").data
        assert np.allclose(vec[: TINY.word_dim], enc.params.word.tensor.data[0])

    def test_known_token_uses_its_row(self, tiny_encoder):
        enc = tiny_encoder
        row = enc.vocab.word_id("cat")
        vec = enc.word_represent("cat").data
        assert np.allclose(vec[: TINY.word_dim], enc.params.word.tensor.data[row])


class TestEncodeText:
    def test_single_token_single_step(self, tiny_encoder):
        # With one token, forward and backward each take exactly one step from zero.
        enc = tiny_encoder
        emb = enc.encode_text(["cat"]).data
        with Tape():
            x = enc.word_represent("cat")
        x = x.data[None, :]
        hf, _ = ref_lstm_step(enc.params.fwd.Wx.data, enc.params.fwd.Wh.data,
                              enc.params.fwd.b.data, x, np.zeros((1, 5)), np.zeros((1, 5)))
        hb, _ = ref_lstm_step(enc.params.bwd.Wx.data, enc.params.bwd.Wh.data,
                              enc.params.bwd.b.data, x, np.zeros((1, 5)), np.zeros((1, 5)))
        assert np.allclose(emb, np.concatenate([hf[0], hb[0]]), atol=1e-12)

    def test_order_sensitivity(self, tiny_encoder):
        a = tiny_encoder.encode_text(["the", "cat", "sat"]).data
        b = tiny_encoder.encode_text(["sat", "cat", "the"]).data
        assert not np.allclose(a, b)

    def test_empty_sequence_rejected(self, tiny_encoder):
        with pytest.raises(EncoderError):
            tiny_encoder.encode_text([])

    def test_batch_matches_single(self, tiny_encoder):
        seqs = [["the", "cat", "sat", "on"], ["dog"], ["birds", "fly"]]
        batched = tiny_encoder.encode_batch(seqs).data
        for row, seq in enumerate(seqs):
            single = tiny_encoder.encode_text(seq).data
            assert np.allclose(batched[row], single, rtol=1e-9, atol=1e-12)

    def test_padding_invariance(self, tiny_encoder):
        # The same sequence encodes identically regardless of batch companions.
        seq = ["the", "cat"]
        alone = tiny_encoder.encode_batch([seq, ["dog"]]).data[0]
        padded = tiny_encoder.encode_batch([seq, ["birds", "fly", "high", "up"]]).data[0]
        assert np.allclose(alone, padded, rtol=1e-12, atol=1e-14)

    def test_truncation_at_max_tokens(self, tiny_encoder):
        long_seq = ["the", "cat"] * 20  # 40 tokens > max_tokens=16
        truncated = tiny_encoder.encode_text(long_seq[:16]).data
        full = tiny_encoder.encode_text(long_seq).data
        assert np.allclose(full, truncated, atol=1e-12)

    def test_full_encoder_grad_check(self, tiny_encoder):
        enc = tiny_encoder
        seqs = [["the", "cat"], ["dog", "ran", "fast"]]

        def loss_fn():
            return ad.sum(ad.tanh(enc.encode_batch(seqs)))

        params = {n: p for n, p in enc.named_params().items() if p.requires_grad}
        assert "word_emb" not in params  # frozen by default
        report = grad_check(loss_fn, params, h=1e-4)
        assert report.worst() < 1e-3, report.max_rel_err

    def test_shared_parameters_for_all_texts(self, tiny_encoder):
        # One parameter set regardless of how many texts are encoded.
        names = set(tiny_encoder.named_params())
        assert names == {
            "word_emb", "char_emb",
            "char_lstm.Wx", "char_lstm.Wh", "char_lstm.b",
            "lstm_fwd.Wx", "lstm_fwd.Wh", "lstm_fwd.b",
            "lstm_bwd.Wx", "lstm_bwd.Wh", "lstm_bwd.b",
        }


class TestFrozenEmbeddings:
    def test_word_table_gets_no_gradient(self, tiny_encoder):
        enc = tiny_encoder
        with Tape() as tape:
            loss = ad.sum(enc.encode_batch([["the", "cat"]]))
        tape.backward(loss)
        assert enc.params.word.tensor.grad is None
        assert enc.params.char_table.grad is not None

    def test_table_is_frozen_flagged(self, tiny_encoder):
        assert tiny_encoder.params.word.frozen


class TestPretrainedEmbeddings:
    def vocab(self):
        return make_vocab(["alpha beta gamma"])

    def test_exact_row_from_file(self, tmp_path):
        p = tmp_path / "vecs.txt"
        p.write_text("alpha 1.0 2.0 3.0\nbeta -1.0 0.5 0.25\n", encoding="utf-8")
        vocab = self.vocab()
        table = load_pretrained_embeddings(p, vocab, seed=5)
        assert table.dim == 3
        assert np.array_equal(table.tensor.data[vocab.word_id("alpha")], [1.0, 2.0, 3.0])
        assert not table.random_rows[vocab.word_id("alpha")]
        assert table.random_rows[vocab.word_id("gamma")]
        assert table.random_rows[0]

    def test_width_inferred(self, tmp_path):
        p = tmp_path / "vecs.txt"
        p.write_text("alpha " + " ".join(["0.1"] * 50) + "\n", encoding="utf-8")
        table = load_pretrained_embeddings(p, self.vocab(), seed=0)
        assert table.dim == 50

    def test_inconsistent_width_rejected(self, tmp_path):
        p = tmp_path / "vecs.txt"
        p.write_text("alpha 1.0 2.0\nbeta 1.0 2.0 3.0\n", encoding="utf-8")
        with pytest.raises(EncoderError, match="line 2"):
            load_pretrained_embeddings(p, self.vocab())

    def test_empty_file_all_random_frozen(self, tmp_path):
        p = tmp_path / "vecs.txt"
        p.write_text("", encoding="utf-8")
        table = load_pretrained_embeddings(p, self.vocab(), seed=1, fallback_dim=7)
        assert table.dim == 7
        assert table.random_rows.all()
        assert table.frozen

    def test_missing_rows_in_uniform_range(self, tmp_path):
        p = tmp_path / "vecs.txt"
        p.write_text("alpha 9.0 9.0 9.0\n", encoding="utf-8")
        table = load_pretrained_embeddings(p, self.vocab(), seed=2)
        random_part = table.tensor.data[table.random_rows]
        assert np.all(np.abs(random_part) <= 0.05)

    def test_random_table_deterministic(self):
        a = random_embedding_table(10, 4, seed=3).tensor.data
        b = random_embedding_table(10, 4, seed=3).tensor.data
        assert np.array_equal(a, b)
