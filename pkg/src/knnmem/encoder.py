"""Text encoder: frozen word vectors + trainable character-composed vectors,
composed by a BiLSTM whose final forward/backward states form the text
embedding.

Encoding is batched: sequences are padded to the batch maximum and masked
steps carry state through unchanged (exactly, since ``1*h + 0*h_new == h``
in floats), so a sequence's embedding does not depend on what it is
batched with. Character composition runs once per unique word in the
batch and is gathered back per occurrence.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Vocabulary


class EncoderError(ValueError):
    """Bad encoder configuration or embedding file."""


@dataclass(frozen=True)
class EncoderConfig:
    word_dim: int = 300
    char_dim: int = 20
    char_lstm_dim: int = 50
    hidden: int = 100
    max_tokens: int = 256
    max_word_chars: int = 32

    def __post_init__(self):
        for field_name in ("word_dim", "char_dim", "char_lstm_dim", "hidden", "max_tokens", "max_word_chars"):
            if getattr(self, field_name) < 1:
                raise EncoderError(f"{field_name} must be >= 1")

    @property
    def l(self) -> int:
        """Text-embedding width: forward plus backward final states."""
        return 2 * self.hidden

    @property
    def d(self) -> int:
        """Per-word representation width: word vector plus char composition."""
        return self.word_dim + self.char_lstm_dim


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream per parameter name, so adding or removing one
    parameter never shifts another's initialization."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


@dataclass
class EmbeddingTable:
    """Word-vector matrix; row 0 is the OOV row. ``random_rows`` marks rows
    that were randomly initialized rather than loaded from a vector file."""

    tensor: Tensor
    random_rows: np.ndarray

    @property
    def dim(self) -> int:
        return self.tensor.shape[1]

    @property
    def frozen(self) -> bool:
        return not self.tensor.requires_grad


@dataclass
class LstmParams:
    """Fused-gate LSTM weights; gate order along columns is i, f, g, o."""

    Wx: Tensor
    Wh: Tensor
    b: Tensor

    @property
    def hidden(self) -> int:
        return self.Wh.shape[0]


def init_lstm(seed: int, name: str, in_dim: int, hidden: int) -> LstmParams:
    rng = param_rng(seed, name)
    Wx = rng.uniform(-0.08, 0.08, (in_dim, 4 * hidden))
    Wh = rng.uniform(-0.08, 0.08, (hidden, 4 * hidden))
    b = np.zeros((1, 4 * hidden))
    b[0, hidden:2 * hidden] = 1.0  # forget-gate bias
    return LstmParams(
        Wx=Tensor(Wx, requires_grad=True, name=f"{name}.Wx"),
        Wh=Tensor(Wh, requires_grad=True, name=f"{name}.Wh"),
        b=Tensor(b, requires_grad=True, name=f"{name}.b"),
    )


def random_embedding_table(n_words: int, dim: int, seed: int) -> EmbeddingTable:
    rng = param_rng(seed, "word_emb")
    data = rng.uniform(-0.05, 0.05, (n_words, dim))
    return EmbeddingTable(
        tensor=Tensor(data, requires_grad=False, name="word_emb"),
        random_rows=np.ones(n_words, dtype=bool),
    )


def load_pretrained_embeddings(path: str | Path, vocab: Vocabulary, seed: int = 0,
                               fallback_dim: int = 300) -> EmbeddingTable:
    """Whitespace-separated text vectors; vocabulary rows missing from the
    file (and the OOV row) are drawn from U(-0.05, 0.05). Width is inferred
    from the file; an empty file falls back to ``fallback_dim``."""
    vectors: dict[str, np.ndarray] = {}
    width: int | None = None
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if width is None:
                width = len(values)
                if width == 0:
                    raise EncoderError(f"{path}: line {lineno} has no vector components")
            elif len(values) != width:
                raise EncoderError(
                    f"{path}: inconsistent vector width at line {lineno} "
                    f"({len(values)} vs {width})"
                )
            if token in vocab.word_to_id:
                vectors[token] = np.asarray([float(v) for v in values])
    dim = width if width is not None else fallback_dim
    table = random_embedding_table(vocab.n_words, dim, seed)
    random_rows = np.ones(vocab.n_words, dtype=bool)
    for token, vec in vectors.items():
        row = vocab.word_to_id[token]
        table.tensor.data[row] = vec
        random_rows[row] = False
    return EmbeddingTable(tensor=table.tensor, random_rows=random_rows)


@dataclass
class EncoderParams:
    word: EmbeddingTable
    char_table: Tensor
    char_lstm: LstmParams
    fwd: LstmParams
    bwd: LstmParams

    def named(self) -> dict[str, Tensor]:
        out = {"word_emb": self.word.tensor, "char_emb": self.char_table}
        for prefix, lstm in (("char_lstm", self.char_lstm), ("lstm_fwd", self.fwd), ("lstm_bwd", self.bwd)):
            out[f"{prefix}.Wx"] = lstm.Wx
            out[f"{prefix}.Wh"] = lstm.Wh
            out[f"{prefix}.b"] = lstm.b
        return out


def init_encoder_params(config: EncoderConfig, vocab: Vocabulary, seed: int,
                        word_table: EmbeddingTable | None = None) -> EncoderParams:
    if word_table is None:
        word_table = random_embedding_table(vocab.n_words, config.word_dim, seed)
    if word_table.dim != config.word_dim:
        raise EncoderError(
            f"embedding width {word_table.dim} != configured word_dim {config.word_dim}"
        )
    char_rng = param_rng(seed, "char_emb")
    char_table = Tensor(
        char_rng.uniform(-0.05, 0.05, (vocab.n_chars, config.char_dim)),
        requires_grad=True, name="char_emb",
    )
    return EncoderParams(
        word=word_table,
        char_table=char_table,
        char_lstm=init_lstm(seed, "char_lstm", config.char_dim, config.char_lstm_dim),
        fwd=init_lstm(seed, "lstm_fwd", config.d, config.hidden),
        bwd=init_lstm(seed, "lstm_bwd", config.d, config.hidden),
    )


def lstm_step(p: LstmParams, x: Tensor, h_prev: Tensor, c_prev: Tensor,
              mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """One masked LSTM step; where mask is 0 the previous state carries over."""
    hidden = p.hidden
    z = ad.add(ad.add(ad.matmul(x, p.Wx), ad.matmul(h_prev, p.Wh)), p.b)
    i = ad.sigmoid(ad.slice_cols(z, 0, hidden))
    f = ad.sigmoid(ad.slice_cols(z, hidden, 2 * hidden))
    g = ad.tanh(ad.slice_cols(z, 2 * hidden, 3 * hidden))
    o = ad.sigmoid(ad.slice_cols(z, 3 * hidden, 4 * hidden))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    if mask is not None and not mask.all():
        dtype = ad.get_default_dtype()
        m = Tensor(mask.astype(dtype).reshape(-1, 1))
        inv = Tensor((~mask).astype(dtype).reshape(-1, 1))
        c = ad.add(ad.mul(c, m), ad.mul(c_prev, inv))
        h = ad.add(ad.mul(h, m), ad.mul(h_prev, inv))
    return h, c


class TextEncoder:
    """Shared encoder applied to input texts and to every retrieved neighbor."""

    def __init__(self, config: EncoderConfig, vocab: Vocabulary, params: EncoderParams):
        self.config = config
        self.vocab = vocab
        self.params = params

    @classmethod
    def create(cls, config: EncoderConfig, vocab: Vocabulary, seed: int,
               word_table: EmbeddingTable | None = None) -> "TextEncoder":
        return cls(config, vocab, init_encoder_params(config, vocab, seed, word_table))

    def named_params(self) -> dict[str, Tensor]:
        return self.params.named()

    def _zeros(self, n: int, dim: int) -> Tensor:
        return Tensor(np.zeros((n, dim)))

    def _char_compose_batch(self, words: Sequence[str]) -> Tensor:
        cfg = self.config
        clipped = [w[: cfg.max_word_chars] for w in words]
        n = len(clipped)
        lens = np.array([len(w) for w in clipped], dtype=np.int64)
        if n == 0 or lens.min() < 1:
            raise EncoderError("char composition needs nonempty words")
        max_len = int(lens.max())
        ids = np.zeros((n, max_len), dtype=np.int64)
        for row, word in enumerate(clipped):
            ids[row, : len(word)] = [self.vocab.char_id(ch) for ch in word]
        h = self._zeros(n, cfg.char_lstm_dim)
        c = self._zeros(n, cfg.char_lstm_dim)
        for t in range(max_len):
            x_t = ad.rows(self.params.char_table, ids[:, t])
            h, c = lstm_step(self.params.char_lstm, x_t, h, c, mask=lens > t)
        return h

    def encode_batch(self, token_seqs: Sequence[Sequence[str]]) -> Tensor:
        """Encode a batch of token sequences into a (batch, 2*hidden) tensor."""
        cfg = self.config
        seqs = [list(s)[: cfg.max_tokens] for s in token_seqs]
        if not seqs:
            raise EncoderError("empty batch")
        if any(len(s) == 0 for s in seqs):
            raise EncoderError("empty token sequence")
        uniq: dict[str, int] = {}
        batch = len(seqs)
        lens = np.array([len(s) for s in seqs], dtype=np.int64)
        max_len = int(lens.max())
        word_ids = np.zeros((batch, max_len), dtype=np.int64)
        occ_ids = np.zeros((batch, max_len), dtype=np.int64)
        for b, seq in enumerate(seqs):
            for t, tok in enumerate(seq):
                word_ids[b, t] = self.vocab.word_id(tok)
                occ_ids[b, t] = uniq.setdefault(tok, len(uniq))
        char_vecs = self._char_compose_batch(list(uniq))

        def word_vectors(word_col: np.ndarray, occ_col: np.ndarray) -> Tensor:
            return ad.concat(
                [ad.rows(self.params.word.tensor, word_col), ad.rows(char_vecs, occ_col)],
                axis=1,
            )

        h_f = self._zeros(batch, cfg.hidden)
        c_f = self._zeros(batch, cfg.hidden)
        for t in range(max_len):
            x_t = word_vectors(word_ids[:, t], occ_ids[:, t])
            h_f, c_f = lstm_step(self.params.fwd, x_t, h_f, c_f, mask=lens > t)

        h_b = self._zeros(batch, cfg.hidden)
        c_b = self._zeros(batch, cfg.hidden)
        rows_idx = np.arange(batch)
        for t in range(max_len):
            pos = np.maximum(lens - 1 - t, 0)
            x_t = word_vectors(word_ids[rows_idx, pos], occ_ids[rows_idx, pos])
            h_b, c_b = lstm_step(self.params.bwd, x_t, h_b, c_b, mask=lens > t)

        return ad.concat([h_f, h_b], axis=1)

    def encode_text(self, tokens: Sequence[str]) -> Tensor:
        """Single-text embedding of length 2*hidden."""
        return ad.reshape(self.encode_batch([tokens]), (self.config.l,))

    def char_compose(self, word: str) -> Tensor:
        """Final hidden state of the character LSTM over one word."""
        if not word:
            raise EncoderError("char composition needs a nonempty word")
        return ad.reshape(self._char_compose_batch([word]), (self.config.char_lstm_dim,))

    def word_represent(self, token: str) -> Tensor:
        """Concatenation [word embedding; char-composed embedding], length d."""
        word_row = ad.rows(self.params.word.tensor, [self.vocab.word_id(token)])
        char_row = self._char_compose_batch([token])
        return ad.reshape(ad.concat([word_row, char_row], axis=1), (self.config.d,))
