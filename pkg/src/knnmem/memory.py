"""kNN external memory: multi-perspective cosine attention over retrieved
neighbors, attention-weighted label/text features, and the softmax head.

Attention-weighted sums are evaluated in a canonical row order (sorted on
the contribution values), so the outputs are exactly invariant to the
order in which neighbors are listed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Document
from .encoder import EncoderConfig, EmbeddingTable, TextEncoder, param_rng
from .retrieval import NeighborSet

MULTI_PERSPECTIVE = "multi_perspective"
VANILLA_COSINE = "vanilla_cosine"
MODES = (MULTI_PERSPECTIVE, VANILLA_COSINE)


class ModelError(ValueError):
    """Invalid feature configuration or mismatched model inputs."""


@dataclass(frozen=True)
class FeatureConfig:
    use_text_embedding: bool
    use_attn_label: bool
    use_attn_text: bool

    def __post_init__(self):
        if not (self.use_text_embedding or self.use_attn_label or self.use_attn_text):
            raise ModelError("at least one feature source must be enabled")

    @property
    def uses_memory(self) -> bool:
        return self.use_attn_label or self.use_attn_text


PRESETS: dict[str, FeatureConfig] = {
    "M1": FeatureConfig(True, False, False),
    "M2": FeatureConfig(False, True, False),
    "M3": FeatureConfig(False, False, True),
    "M4": FeatureConfig(False, True, True),
    "M5": FeatureConfig(True, True, False),
    "M6": FeatureConfig(True, False, True),
    "M7": FeatureConfig(True, True, True),
}


def preset(name: str) -> FeatureConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ModelError(f"unknown feature preset {name!r}; expected M1..M7") from None


@dataclass
class MatchingParams:
    """Per-perspective reweighting rows; unused in vanilla-cosine mode."""

    W: Tensor | None
    perspectives: int
    mode: str

    @classmethod
    def create(cls, embedding_len: int, perspectives: int, seed: int,
               mode: str = MULTI_PERSPECTIVE) -> "MatchingParams":
        if mode not in MODES:
            raise ModelError(f"unknown matching mode {mode!r}")
        if mode == VANILLA_COSINE:
            return cls(W=None, perspectives=1, mode=mode)
        if perspectives < 1:
            raise ModelError(f"perspectives must be >= 1, got {perspectives}")
        rng = param_rng(seed, "match.W")
        # Start near plain cosine: all-ones rows plus small noise.
        data = 1.0 + rng.uniform(-0.01, 0.01, (perspectives, embedding_len))
        return cls(W=Tensor(data, requires_grad=True, name="match.W"),
                   perspectives=perspectives, mode=mode)


def match_multi_perspective(h: Tensor, h_nbr: Tensor, params: MatchingParams) -> Tensor:
    """Similarity vector of length I: cosine of the two embeddings after
    elementwise reweighting by each perspective row (plain cosine in
    vanilla mode)."""
    h2 = ad.reshape(h, (1, h.size))
    n2 = ad.reshape(h_nbr, (1, h_nbr.size))
    if h2.shape != n2.shape:
        raise ModelError(f"embedding lengths differ: {h.size} vs {h_nbr.size}")
    if params.mode == VANILLA_COSINE:
        return cosine_similarity_rows(h2, n2)
    if params.W is None or params.W.shape[1] != h2.shape[1]:
        raise ModelError("matching weights do not fit the embedding length")
    return cosine_similarity_rows(ad.mul(params.W, h2), ad.mul(params.W, n2))


def cosine_similarity_rows(a: Tensor, b: Tensor) -> Tensor:
    return ad.cosine_rows(a, b)


def _canonical_order(*key_groups: np.ndarray) -> np.ndarray:
    """Lexicographic row order over the stacked key columns; any permutation
    of identical row multisets maps to the same ordered sequence."""
    keys: list[np.ndarray] = []
    for group in key_groups:
        for col in reversed(range(group.shape[1])):
            keys.append(group[:, col])
    return np.lexsort(tuple(keys))


def attentive_label_distribution(attention: Tensor, neighbor_labels: Sequence[int],
                                 c: int) -> Tensor:
    """Per perspective, the attention-weighted sum of neighbor one-hot labels;
    perspectives concatenated into a vector of length I*c."""
    if attention.ndim != 2:
        raise ModelError(f"attention must be 2-d, got shape {attention.shape}")
    k, perspectives = attention.shape
    labels = np.asarray(neighbor_labels, dtype=np.int64)
    if labels.shape[0] != k:
        raise ModelError(f"{k} attention rows vs {labels.shape[0]} labels")
    if k == 0:
        return Tensor(np.zeros(perspectives * c))
    if labels.min() < 0 or labels.max() >= c:
        raise ModelError(f"neighbor label out of range for c={c}")
    order = _canonical_order(labels[:, None].astype(np.float64), attention.data)
    att_sorted = ad.rows(attention, order)
    onehot = np.zeros((k, c))
    onehot[np.arange(k), labels[order]] = 1.0
    summed = ad.matmul(ad.transpose(att_sorted), Tensor(onehot))
    return ad.reshape(summed, (perspectives * c,))


def attentive_text_embedding(attention: Tensor, neighbor_embeddings: Tensor) -> Tensor:
    """Per perspective, the attention-weighted sum of neighbor embeddings;
    perspectives concatenated into a vector of length I*l."""
    if attention.ndim != 2 or neighbor_embeddings.ndim != 2:
        raise ModelError("attention and embeddings must be 2-d")
    k, perspectives = attention.shape
    if neighbor_embeddings.shape[0] != k:
        raise ModelError(f"{k} attention rows vs {neighbor_embeddings.shape[0]} embeddings")
    emb_len = neighbor_embeddings.shape[1]
    if k == 0:
        return Tensor(np.zeros(perspectives * emb_len))
    order = _canonical_order(neighbor_embeddings.data, attention.data)
    att_sorted = ad.rows(attention, order)
    emb_sorted = ad.rows(neighbor_embeddings, order)
    summed = ad.matmul(ad.transpose(att_sorted), emb_sorted)
    return ad.reshape(summed, (perspectives * emb_len,))


def feature_width(features: FeatureConfig, embedding_len: int, perspectives: int,
                  neighbor_classes: int) -> int:
    width = 0
    if features.use_text_embedding:
        width += embedding_len
    if features.use_attn_label:
        width += perspectives * neighbor_classes
    if features.use_attn_text:
        width += perspectives * embedding_len
    return width


def assemble_features(h: Tensor | None, attn_label: Tensor | None,
                      attn_text: Tensor | None, features: FeatureConfig) -> Tensor:
    """Fixed-order concatenation [text embedding; attentive label; attentive text]."""
    parts = []
    if features.use_text_embedding:
        if h is None:
            raise ModelError("text-embedding feature enabled but no embedding given")
        parts.append(h)
    if features.use_attn_label:
        if attn_label is None:
            raise ModelError("attentive-label feature enabled but no distribution given")
        parts.append(attn_label)
    if features.use_attn_text:
        if attn_text is None:
            raise ModelError("attentive-text feature enabled but no embedding given")
        parts.append(attn_text)
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)


@dataclass
class ClassifierParams:
    W: Tensor
    b: Tensor

    @classmethod
    def create(cls, in_width: int, n_classes: int, seed: int) -> "ClassifierParams":
        rng = param_rng(seed, "clf.W")
        return cls(
            W=Tensor(rng.uniform(-0.08, 0.08, (in_width, n_classes)),
                     requires_grad=True, name="clf.W"),
            b=Tensor(np.zeros((1, n_classes)), requires_grad=True, name="clf.b"),
        )


def predict(features: Tensor | np.ndarray, classifier: ClassifierParams) -> tuple[int, np.ndarray]:
    """Class label (argmax, lowest index on ties) and softmax probabilities."""
    vec = features.data if isinstance(features, Tensor) else np.asarray(features)
    vec = vec.reshape(-1)
    if vec.shape[0] != classifier.W.shape[0]:
        raise ModelError(
            f"feature width {vec.shape[0]} != classifier input width {classifier.W.shape[0]}"
        )
    logits = vec @ classifier.W.data + classifier.b.data.reshape(-1)
    probs = ad.softmax_probs(logits)
    return int(np.argmax(probs)), probs


@dataclass
class NeighborAttentionRecord:
    doc_id: int
    bm25_score: float
    attention: list[float]
    label: int | None


@dataclass
class ForwardResult:
    loss: Tensor
    per_example_loss: np.ndarray
    logits: np.ndarray
    predictions: np.ndarray
    probabilities: np.ndarray
    attention: list[list[NeighborAttentionRecord]]


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    preset: str = "M7"
    perspectives: int = 5
    mode: str = MULTI_PERSPECTIVE
    n_classes: int = 2
    neighbor_classes: int | None = None
    stop_grad_neighbors: bool = False

    def __post_init__(self):
        preset(self.preset)
        if self.mode not in MODES:
            raise ModelError(f"unknown matching mode {self.mode!r}")
        if self.n_classes < 2:
            raise ModelError("need at least 2 classes")

    @property
    def features(self) -> FeatureConfig:
        return preset(self.preset)

    @property
    def effective_perspectives(self) -> int:
        return 1 if self.mode == VANILLA_COSINE else self.perspectives

    @property
    def effective_neighbor_classes(self) -> int:
        return self.n_classes if self.neighbor_classes is None else self.neighbor_classes


class KnnTextModel:
    """Full model: shared text encoder, kNN memory head, softmax classifier."""

    def __init__(self, config: ModelConfig, encoder: TextEncoder,
                 matching: MatchingParams | None, classifier: ClassifierParams):
        self.config = config
        self.encoder = encoder
        self.matching = matching
        self.classifier = classifier

    @classmethod
    def create(cls, config: ModelConfig, vocab, seed: int,
               word_table: EmbeddingTable | None = None) -> "KnnTextModel":
        encoder = TextEncoder.create(config.encoder, vocab, seed, word_table)
        matching = None
        if config.features.uses_memory:
            matching = MatchingParams.create(config.encoder.l, config.perspectives,
                                             seed, mode=config.mode)
        width = feature_width(config.features, config.encoder.l,
                              config.effective_perspectives,
                              config.effective_neighbor_classes)
        classifier = ClassifierParams.create(width, config.n_classes, seed)
        return cls(config, encoder, matching, classifier)

    def named_params(self) -> dict[str, Tensor]:
        out = self.encoder.named_params()
        if self.matching is not None and self.matching.W is not None:
            out["match.W"] = self.matching.W
        out["clf.W"] = self.classifier.W
        out["clf.b"] = self.classifier.b
        return out

    def feature_width(self) -> int:
        return self.classifier.W.shape[0]

    def forward_batch(self, docs: Sequence[Document],
                      neighbor_map: Mapping[int, NeighborSet] | None = None,
                      neighbor_docs: Mapping[int, Document] | None = None) -> ForwardResult:
        """Encode inputs (and neighbors, deduplicated), apply the memory head,
        and return the mean cross-entropy plus per-example predictions.

        Gradients flow through both the input and the neighbor encodings
        unless the model was configured with ``stop_grad_neighbors``.
        """
        if not docs:
            raise ModelError("empty batch")
        cfg = self.config
        features = cfg.features
        neighbor_docs = neighbor_docs or {}

        slots: dict[object, int] = {}
        seqs: list[Sequence[str]] = []

        def slot_for(key, tokens) -> int:
            found = slots.get(key)
            if found is None:
                found = len(seqs)
                slots[key] = found
                seqs.append(tokens)
            return found

        input_slots = []
        for pos, doc in enumerate(docs):
            shared = neighbor_docs.get(doc.id) is doc
            input_slots.append(slot_for(doc.id if shared else ("query", pos), doc.tokens))

        neighbor_slots: list[list[int]] = []
        neighbor_sets: list[NeighborSet] = []
        if features.uses_memory:
            if neighbor_map is None:
                raise ModelError("memory features enabled but no neighbor map given")
            for doc in docs:
                ns = neighbor_map.get(doc.id)
                if ns is None:
                    raise ModelError(f"no precomputed neighbors for doc {doc.id}")
                row_slots = []
                for nbr_id, _ in ns.neighbors:
                    nbr = neighbor_docs.get(nbr_id)
                    if nbr is None:
                        raise ModelError(f"neighbor doc {nbr_id} missing from lookup")
                    row_slots.append(slot_for(nbr_id, nbr.tokens))
                neighbor_slots.append(row_slots)
                neighbor_sets.append(ns)

        H = self.encoder.encode_batch(seqs)
        H_nbr = H.detach() if cfg.stop_grad_neighbors else H

        emb_len = cfg.encoder.l
        n_perspectives = cfg.effective_perspectives
        c_nbr = cfg.effective_neighbor_classes
        attention_records: list[list[NeighborAttentionRecord]] = []

        if not features.uses_memory:
            feat_mat = ad.rows(H, input_slots)
            attention_records = [[] for _ in docs]
        else:
            rows_out = []
            for pos, doc in enumerate(docs):
                h_b = ad.rows(H, [input_slots[pos]])
                ns, row_slots = neighbor_sets[pos], neighbor_slots[pos]
                h_vec = ad.reshape(h_b, (emb_len,)) if features.use_text_embedding else None
                attn_label = attn_text = None
                records: list[NeighborAttentionRecord] = []
                if row_slots:
                    att_rows = []
                    for s in row_slots:
                        sim = match_multi_perspective(h_b, ad.rows(H_nbr, [s]), self.matching)
                        att_rows.append(ad.reshape(sim, (1, n_perspectives)))
                    att = att_rows[0] if len(att_rows) == 1 else ad.concat(att_rows, axis=0)
                    labels = [neighbor_docs[nbr_id].label for nbr_id, _ in ns.neighbors]
                    if features.use_attn_label:
                        attn_label = attentive_label_distribution(att, labels, c_nbr)
                    if features.use_attn_text:
                        attn_text = attentive_text_embedding(att, ad.rows(H_nbr, row_slots))
                    for (nbr_id, score), a_row, label in zip(ns.neighbors, att.data, labels):
                        records.append(NeighborAttentionRecord(
                            doc_id=nbr_id, bm25_score=score,
                            attention=[float(v) for v in a_row], label=label))
                else:
                    if features.use_attn_label:
                        attn_label = Tensor(np.zeros(n_perspectives * c_nbr))
                    if features.use_attn_text:
                        attn_text = Tensor(np.zeros(n_perspectives * emb_len))
                feat = assemble_features(h_vec, attn_label, attn_text, features)
                rows_out.append(ad.reshape(feat, (1, feat.size)))
                attention_records.append(records)
            feat_mat = rows_out[0] if len(rows_out) == 1 else ad.concat(rows_out, axis=0)

        if feat_mat.shape[1] != self.classifier.W.shape[0]:
            raise ModelError(
                f"feature width {feat_mat.shape[1]} != classifier width {self.classifier.W.shape[0]}"
            )
        logits = ad.add(ad.matmul(feat_mat, self.classifier.W), self.classifier.b)
        targets = [doc.label for doc in docs]
        losses = ad.softmax_cross_entropy(logits, targets)
        loss = ad.scalar_mul(ad.sum(losses), 1.0 / len(docs))
        probs = ad.softmax_probs(logits.data)
        return ForwardResult(
            loss=loss,
            per_example_loss=losses.data.copy(),
            logits=logits.data,
            predictions=np.argmax(logits.data, axis=1),
            probabilities=probs,
            attention=attention_records,
        )
