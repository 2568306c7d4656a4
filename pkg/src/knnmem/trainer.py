"""Training loop with Adam, per-epoch dev evaluation, best-on-dev selection,
checkpointing, and the full/low-resource/unbalanced/semi-supervised/transfer
experimental setups.

Dev and test neighbors are always retrieved from the training-side index;
training-time retrieval excludes the query document itself by default.
"""

from __future__ import annotations

import base64
import dataclasses
import json
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape, clip_global_norm, zero_grads
from .corpus import (
    Document,
    LabelSpace,
    LowResource,
    Unbalanced,
    Vocabulary,
    build_vocab,
    subsample,
)
from .encoder import EmbeddingTable, EncoderConfig
from .memory import (
    MULTI_PERSPECTIVE,
    KnnTextModel,
    ModelConfig,
    preset,
)
from .retrieval import (
    InvertedIndex,
    NeighborSet,
    build_index,
    precompute_neighbors,
    search_knn,
)

_CKPT_MAGIC = b"KNNTXT01"

SETUPS = ("full", "low_resource", "unbalanced", "semi_supervised", "transfer")


class TrainingError(ValueError):
    """Unusable training request (bad config, missing corpus, unknown setup)."""


class NumericFailure(TrainingError):
    """Training aborted on a non-finite loss."""


class CheckpointError(ValueError):
    """Corrupt checkpoint file or checkpoint/corpus mismatch."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    lr: float = 1e-4
    batch_size: int = 32
    k_neighbors: int = 5
    perspectives: int = 5
    seed: int = 0
    preset: str = "M7"
    mode: str = MULTI_PERSPECTIVE
    self_exclude: bool = True
    clip_norm: float = 5.0
    min_count: int = 1
    eval_batch_size: int = 64
    stop_grad_neighbors: bool = False
    train_oov_embeddings: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.k_neighbors < 0:
            raise TrainingError("k_neighbors must be >= 0")
        if self.mode == MULTI_PERSPECTIVE and self.perspectives < 1:
            raise TrainingError("perspectives must be >= 1 in multi-perspective mode")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    dev_accuracy: float


@dataclass
class EvalReport:
    accuracy: float
    per_class: list[float]
    confusion: np.ndarray  # rows gold, columns predicted
    total: int


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict[str, np.ndarray]

    @property
    def epoch(self) -> int:
        return self.manifest["epoch"]

    @property
    def dev_accuracy(self) -> float:
        return self.manifest["dev_accuracy"]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochStats]

    @property
    def best_epoch(self) -> int:
        return self.checkpoint.epoch

    @property
    def best_dev_accuracy(self) -> float:
        return self.checkpoint.dev_accuracy


def _slice_neighbors(neighbors: Mapping[int, NeighborSet], k: int) -> dict[int, NeighborSet]:
    return {doc_id: ns.top(k) for doc_id, ns in neighbors.items()}


def make_checkpoint(model: KnnTextModel, vocab: Vocabulary, epoch: int,
                    dev_accuracy: float, config_echo: dict | None = None) -> Checkpoint:
    cfg = model.config
    tensors = {name: p.data.copy() for name, p in model.named_params().items()}
    packed = np.packbits(model.encoder.params.word.random_rows.astype(np.uint8))
    manifest = {
        "format": "knnmem-checkpoint",
        "model": {
            "preset": cfg.preset,
            "perspectives": cfg.perspectives,
            "mode": cfg.mode,
            "n_classes": cfg.n_classes,
            "neighbor_classes": cfg.neighbor_classes,
            "stop_grad_neighbors": cfg.stop_grad_neighbors,
            "encoder": dataclasses.asdict(cfg.encoder),
        },
        "vocab": {
            "word_hash": vocab.word_hash(),
            "char_hash": vocab.char_hash(),
            "n_words": vocab.n_words,
            "n_chars": vocab.n_chars,
        },
        "word_random_rows": base64.b64encode(packed.tobytes()).decode("ascii"),
        "epoch": epoch,
        "dev_accuracy": dev_accuracy,
        "config_echo": config_echo or {},
        "tensors": [
            {"name": name, "shape": list(p.data.shape), "frozen": not p.requires_grad}
            for name, p in model.named_params().items()
        ],
    }
    return Checkpoint(manifest=manifest, tensors=tensors)


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    width = np.dtype(ad.get_default_dtype()).itemsize
    blob = json.dumps(checkpoint.manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<B", width))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        dtype = "<f8" if width == 8 else "<f4"
        for spec in checkpoint.manifest["tensors"]:
            fh.write(np.ascontiguousarray(checkpoint.tensors[spec["name"]], dtype=dtype).tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    with Path(path).open("rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad checkpoint magic {magic!r}")
        raw = fh.read(1)
        if len(raw) != 1:
            raise CheckpointError(f"{path}: truncated checkpoint header")
        (width,) = struct.unpack("<B", raw)
        if width not in (4, 8):
            raise CheckpointError(f"{path}: unknown float width {width}")
        raw = fh.read(8)
        if len(raw) != 8:
            raise CheckpointError(f"{path}: truncated checkpoint header")
        (size,) = struct.unpack("<Q", raw)
        blob = fh.read(size)
        if len(blob) != size:
            raise CheckpointError(f"{path}: truncated checkpoint manifest")
        manifest = json.loads(blob.decode("utf-8"))
        dtype = "<f8" if width == 8 else "<f4"
        tensors = {}
        for spec in manifest["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * width)
            if len(raw) != count * width:
                raise CheckpointError(f"{path}: truncated tensor data for {spec['name']}")
            tensors[spec["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after tensor data")
    expected = np.dtype(ad.get_default_dtype()).itemsize
    if width != expected:
        raise CheckpointError(
            f"{path}: checkpoint float width {width} != active width {expected}; "
            f"set the matching default dtype before loading"
        )
    return Checkpoint(manifest=manifest, tensors=tensors)


def model_from_checkpoint(checkpoint: Checkpoint, vocab: Vocabulary,
                          expected_classes: int | None = None) -> KnnTextModel:
    manifest = checkpoint.manifest
    vc = manifest["vocab"]
    if vc["word_hash"] != vocab.word_hash():
        raise CheckpointError("word vocabulary hash mismatch")
    if vc["char_hash"] != vocab.char_hash():
        raise CheckpointError("char vocabulary hash mismatch")
    mc = manifest["model"]
    if expected_classes is not None and expected_classes != mc["n_classes"]:
        raise CheckpointError(
            f"n_classes mismatch: checkpoint has {mc['n_classes']}, corpus has {expected_classes}"
        )
    config = ModelConfig(
        encoder=EncoderConfig(**mc["encoder"]),
        preset=mc["preset"],
        perspectives=mc["perspectives"],
        mode=mc["mode"],
        n_classes=mc["n_classes"],
        neighbor_classes=mc["neighbor_classes"],
        stop_grad_neighbors=mc["stop_grad_neighbors"],
    )
    model = KnnTextModel.create(config, vocab, seed=0)
    packed = np.frombuffer(base64.b64decode(manifest["word_random_rows"]), dtype=np.uint8)
    random_rows = np.unpackbits(packed)[: vocab.n_words].astype(bool)
    model.encoder.params.word = EmbeddingTable(
        tensor=model.encoder.params.word.tensor, random_rows=random_rows
    )
    params = model.named_params()
    for spec in manifest["tensors"]:
        name = spec["name"]
        if name not in params:
            raise CheckpointError(f"checkpoint tensor {name} has no slot in the model")
        if tuple(spec["shape"]) != params[name].data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: manifest {spec['shape']} vs model {params[name].data.shape}"
            )
        params[name].data = checkpoint.tensors[name].astype(ad.get_default_dtype())
        params[name].requires_grad = not spec["frozen"]
    return model


def evaluate(model: KnnTextModel, docs: Sequence[Document],
             neighbors: Mapping[int, NeighborSet] | None,
             neighbor_docs: Mapping[int, Document] | None,
             batch_size: int = 64, k: int | None = None) -> EvalReport:
    """Accuracy, per-class accuracy, and gold-by-predicted confusion matrix."""
    if not docs:
        raise TrainingError("cannot evaluate on an empty corpus")
    if k is not None and neighbors is not None:
        neighbors = _slice_neighbors(neighbors, k)
    c = model.config.n_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    for start in range(0, len(docs), batch_size):
        batch = docs[start:start + batch_size]
        result = model.forward_batch(batch, neighbors, neighbor_docs)
        for doc, pred in zip(batch, result.predictions):
            confusion[doc.label, pred] += 1
    total = int(confusion.sum())
    accuracy = float(np.trace(confusion)) / total
    support = confusion.sum(axis=1)
    per_class = [
        float(confusion[i, i]) / int(support[i]) if support[i] else 0.0 for i in range(c)
    ]
    return EvalReport(accuracy=accuracy, per_class=per_class, confusion=confusion, total=total)


def predict_with_provenance(model: KnnTextModel, docs: Sequence[Document],
                            neighbors: Mapping[int, NeighborSet] | None,
                            neighbor_docs: Mapping[int, Document] | None,
                            batch_size: int = 64, k: int | None = None,
                            has_gold: bool = True) -> list[dict]:
    """One record per input: predicted/gold labels, probabilities, and the
    neighbor ids, BM25 scores, and per-perspective attentions."""
    if k is not None and neighbors is not None:
        neighbors = _slice_neighbors(neighbors, k)
    records = []
    for start in range(0, len(docs), batch_size):
        batch = docs[start:start + batch_size]
        result = model.forward_batch(batch, neighbors, neighbor_docs)
        for pos, doc in enumerate(batch):
            records.append({
                "id": doc.id,
                "gold": doc.label if has_gold else None,
                "predicted": int(result.predictions[pos]),
                "probabilities": [float(p) for p in result.probabilities[pos]],
                "neighbors": [
                    {
                        "doc_id": rec.doc_id,
                        "bm25": rec.bm25_score,
                        "label": rec.label,
                        "attention": rec.attention,
                    }
                    for rec in result.attention[pos]
                ],
            })
    return records


def write_provenance(path: str | Path, records: Sequence[dict]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def train(model: KnnTextModel, train_docs: Sequence[Document], dev_docs: Sequence[Document],
          neighbors: Mapping[int, NeighborSet] | None,
          neighbor_docs: Mapping[int, Document] | None,
          config: TrainConfig, vocab: Vocabulary,
          metrics_path: str | Path | None = None,
          config_echo: dict | None = None) -> TrainResult:
    """Run exactly ``config.epochs`` passes with per-epoch seeded reshuffles,
    evaluate on dev after each epoch, and return the best-on-dev checkpoint
    (earliest epoch wins ties)."""
    if not train_docs:
        raise TrainingError("empty training corpus")
    params = model.named_params()
    trainable = [p for p in params.values() if p.requires_grad]
    row_masks = {}
    word = model.encoder.params.word
    if word.tensor.requires_grad and not word.random_rows.all():
        row_masks["word_emb"] = word.random_rows.astype(ad.get_default_dtype())
    optimizer = Adam(params, lr=config.lr, row_masks=row_masks)
    if neighbors is not None:
        neighbors = _slice_neighbors(neighbors, config.k_neighbors)
    rng = np.random.default_rng([config.seed, zlib.crc32(b"epoch-shuffle")])
    history: list[EpochStats] = []
    best: Checkpoint | None = None
    metrics_fh = Path(metrics_path).open("w", encoding="utf-8") if metrics_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(train_docs))
            loss_sum, seen = 0.0, 0
            for batch_index, start in enumerate(range(0, len(train_docs), config.batch_size)):
                batch = [train_docs[i] for i in order[start:start + config.batch_size]]
                zero_grads(params.values())
                with Tape() as tape:
                    result = model.forward_batch(batch, neighbors, neighbor_docs)
                loss_val = float(result.loss.data)
                if not math.isfinite(loss_val):
                    raise NumericFailure(
                        f"non-finite loss at epoch {epoch}, batch {batch_index}"
                    )
                tape.backward(result.loss)
                if config.clip_norm and config.clip_norm > 0:
                    clip_global_norm(trainable, config.clip_norm)
                optimizer.step()
                loss_sum += loss_val * len(batch)
                seen += len(batch)
            dev_report = evaluate(model, dev_docs, neighbors, neighbor_docs,
                                  batch_size=config.eval_batch_size)
            stats = EpochStats(epoch=epoch, train_loss=loss_sum / seen,
                               dev_accuracy=dev_report.accuracy)
            history.append(stats)
            if metrics_fh:
                metrics_fh.write(json.dumps({
                    "epoch": epoch,
                    "train_loss": stats.train_loss,
                    "dev_accuracy": stats.dev_accuracy,
                }, sort_keys=True) + "\n")
                metrics_fh.flush()
            if best is None or dev_report.accuracy > best.dev_accuracy:
                best = make_checkpoint(model, vocab, epoch, dev_report.accuracy, config_echo)
        if metrics_fh:
            metrics_fh.write(json.dumps({
                "summary": {
                    "best_epoch": best.epoch,
                    "best_dev_accuracy": best.dev_accuracy,
                    "epochs": config.epochs,
                    "config": config_echo or {},
                }
            }, sort_keys=True) + "\n")
    finally:
        if metrics_fh:
            metrics_fh.close()
    return TrainResult(checkpoint=best, history=history)


@dataclass
class PipelineResult:
    train_result: TrainResult
    dev_report: EvalReport
    model: KnnTextModel
    vocab: Vocabulary
    index: InvertedIndex | None
    neighbors: dict[int, NeighborSet] | None
    neighbor_docs: dict[int, Document] | None

    @property
    def best_dev_accuracy(self) -> float:
        return self.train_result.best_dev_accuracy


def run_pipeline(train_docs: Sequence[Document], dev_docs: Sequence[Document],
                 label_space: LabelSpace, config: TrainConfig,
                 encoder_config: EncoderConfig, *,
                 word_table: EmbeddingTable | None = None,
                 external_docs: Sequence[Document] | None = None,
                 external_label_space: LabelSpace | None = None,
                 metrics_path: str | Path | None = None,
                 config_echo: dict | None = None,
                 threads: int = 1) -> PipelineResult:
    """Index, retrieve, build, train, and evaluate in one pass.

    Neighbors come from ``external_docs`` when given (semi-supervised or
    transfer setups), otherwise from the training corpus itself. The final
    dev report is computed from the reloaded best checkpoint.
    """
    features = preset(config.preset)
    vocab = build_vocab(train_docs, min_count=config.min_count)
    model_config = ModelConfig(
        encoder=encoder_config,
        preset=config.preset,
        perspectives=config.perspectives,
        mode=config.mode,
        n_classes=label_space.c,
        neighbor_classes=(
            external_label_space.c
            if external_docs is not None and external_label_space is not None
            and features.use_attn_label else None
        ),
        stop_grad_neighbors=config.stop_grad_neighbors,
    )
    model = KnnTextModel.create(model_config, vocab, seed=config.seed, word_table=word_table)
    if config.train_oov_embeddings:
        model.encoder.params.word.tensor.requires_grad = True

    index = None
    neighbors: dict[int, NeighborSet] | None = None
    neighbor_docs: dict[int, Document] | None = None
    if features.uses_memory:
        source = external_docs if external_docs is not None else train_docs
        neighbor_docs = {d.id: d for d in source}
        index = build_index(source)
        same_corpus = external_docs is None
        neighbors = precompute_neighbors(
            index, train_docs, config.k_neighbors,
            self_exclude=config.self_exclude and same_corpus, threads=threads,
        )
        for doc in dev_docs:
            neighbors[doc.id] = search_knn(index, doc, config.k_neighbors)

    result = train(model, train_docs, dev_docs, neighbors, neighbor_docs, config,
                   vocab, metrics_path=metrics_path, config_echo=config_echo)
    best_model = model_from_checkpoint(result.checkpoint, vocab,
                                       expected_classes=label_space.c)
    dev_report = evaluate(best_model, dev_docs, neighbors, neighbor_docs,
                          batch_size=config.eval_batch_size, k=config.k_neighbors)
    return PipelineResult(
        train_result=result,
        dev_report=dev_report,
        model=best_model,
        vocab=vocab,
        index=index,
        neighbors=neighbors,
        neighbor_docs=neighbor_docs,
    )


def run_setup(setup: str, train_docs: Sequence[Document], dev_docs: Sequence[Document],
              label_space: LabelSpace, config: TrainConfig, encoder_config: EncoderConfig, *,
              external_docs: Sequence[Document] | None = None,
              external_label_space: LabelSpace | None = None,
              low_resource_fraction: float = 0.1,
              per_class_counts: Sequence[int] | None = None,
              word_table: EmbeddingTable | None = None,
              metrics_path: str | Path | None = None,
              config_echo: dict | None = None,
              threads: int = 1) -> dict:
    """One experimental setup end to end; returns a report dict.

    ``semi_supervised`` forces the text-only neighbor features (M6) with
    neighbors from the external corpus; ``transfer`` keeps label features
    but one-hots them in the external corpus's own label space.
    """
    if setup not in SETUPS:
        raise TrainingError(f"unknown setup {setup!r}; expected one of {SETUPS}")
    effective_train = list(train_docs)
    effective_config = config
    ext_docs = None
    ext_labels = None
    if setup == "low_resource":
        effective_train = subsample(train_docs, LowResource(low_resource_fraction), config.seed)
    elif setup == "unbalanced":
        if per_class_counts is None:
            raise TrainingError("unbalanced setup needs per_class_counts")
        effective_train = subsample(train_docs, Unbalanced(tuple(per_class_counts)), config.seed)
    elif setup in ("semi_supervised", "transfer"):
        if external_docs is None or external_label_space is None:
            raise TrainingError(f"{setup} setup needs an external corpus and label space")
        ext_docs, ext_labels = external_docs, external_label_space
        if setup == "semi_supervised":
            effective_config = dataclasses.replace(config, preset="M6")
        elif not preset(config.preset).use_attn_label:
            raise TrainingError("transfer setup needs a preset with the attentive-label feature")
    result = run_pipeline(
        effective_train, dev_docs, label_space, effective_config, encoder_config,
        word_table=word_table, external_docs=ext_docs, external_label_space=ext_labels,
        metrics_path=metrics_path, config_echo=config_echo, threads=threads,
    )
    per_class_train = [0] * label_space.c
    for doc in effective_train:
        per_class_train[doc.label] += 1
    return {
        "setup": setup,
        "preset": effective_config.preset,
        "train_size": len(effective_train),
        "train_per_class": per_class_train,
        "dev_size": len(dev_docs),
        "best_epoch": result.train_result.best_epoch,
        "dev_accuracy": result.dev_report.accuracy,
        "per_class_accuracy": result.dev_report.per_class,
        "history": [dataclasses.asdict(h) for h in result.train_result.history],
        "config": config_echo or {},
        "_pipeline": result,
    }
