import dataclasses
import json

import numpy as np
import pytest

import knnmem.autodiff as ad
from knnmem.corpus import LabelSpace, build_vocab
from knnmem.datagen import make_separable_corpus
from knnmem.encoder import EncoderConfig
from knnmem.memory import KnnTextModel, ModelConfig
from knnmem.retrieval import NeighborSet
from knnmem.trainer import (
    Checkpoint,
    CheckpointError,
    TrainConfig,
    TrainingError,
    evaluate,
    load_checkpoint,
    make_checkpoint,
    model_from_checkpoint,
    predict_with_provenance,
    run_pipeline,
    run_setup,
    save_checkpoint,
    train,
)

TINY = EncoderConfig(word_dim=4, char_dim=3, char_lstm_dim=4, hidden=4, max_tokens=12)


def quick_config(**kwargs):
    base = dict(epochs=2, lr=3e-3, batch_size=8, k_neighbors=2, perspectives=2,
                seed=0, preset="M7", eval_batch_size=16)
    base.update(kwargs)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def world():
    train_docs, labels = make_separable_corpus(10, 3, seed=1)
    dev_docs, _ = make_separable_corpus(4, 3, seed=2)
    offset = len(train_docs)
    dev_docs = [dataclasses.replace(d, id=d.id + offset) for d in dev_docs]
    return train_docs, dev_docs, labels


class TestTrainLoop:
    def test_overfits_small_separable_set(self, world):
        train_docs, dev_docs, labels = world
        config = quick_config(epochs=40, lr=3e-2, preset="M1")
        result = run_pipeline(train_docs, dev_docs, labels, config, TINY)
        final = evaluate(result.model, train_docs, result.neighbors,
                         result.neighbor_docs, k=config.k_neighbors)
        assert final.accuracy == 1.0

    def test_epochs_one_checkpoint_is_epoch_one(self, world):
        train_docs, dev_docs, labels = world
        result = run_pipeline(train_docs, dev_docs, labels, quick_config(epochs=1), TINY)
        assert result.train_result.best_epoch == 1
        assert len(result.train_result.history) == 1

    def test_deterministic_history(self, world):
        train_docs, dev_docs, labels = world
        config = quick_config(epochs=3)
        a = run_pipeline(train_docs, dev_docs, labels, config, TINY)
        b = run_pipeline(train_docs, dev_docs, labels, config, TINY)
        assert [h.dev_accuracy for h in a.train_result.history] == \
               [h.dev_accuracy for h in b.train_result.history]
        assert [h.train_loss for h in a.train_result.history] == \
               [h.train_loss for h in b.train_result.history]

    def test_best_on_dev_equals_history_max(self, world):
        train_docs, dev_docs, labels = world
        result = run_pipeline(train_docs, dev_docs, labels, quick_config(epochs=4), TINY)
        best = max(h.dev_accuracy for h in result.train_result.history)
        assert result.train_result.best_dev_accuracy == best

    def test_tie_keeps_earliest_epoch(self, world):
        train_docs, dev_docs, labels = world
        config = quick_config(epochs=4, preset="M1", lr=5e-3)
        result = run_pipeline(train_docs, dev_docs, labels, config, TINY)
        history = result.train_result.history
        best_acc = result.train_result.best_dev_accuracy
        first_best = next(h.epoch for h in history if h.dev_accuracy == best_acc)
        assert result.train_result.best_epoch == first_best

    def test_frozen_word_embeddings_constant(self, world):
        train_docs, dev_docs, labels = world
        config = quick_config(epochs=2)
        vocab = build_vocab(train_docs)
        model_config = ModelConfig(encoder=TINY, preset="M7", perspectives=2,
                                   n_classes=labels.c)
        model = KnnTextModel.create(model_config, vocab, seed=0)
        before = model.encoder.params.word.tensor.data.copy()
        neighbors = {d.id: NeighborSet(d.id, ()) for d in train_docs + dev_docs}
        train(model, train_docs, dev_docs, neighbors, {d.id: d for d in train_docs},
              config, vocab)
        assert model.encoder.params.word.tensor.data.tobytes() == before.tobytes()

    def test_non_finite_loss_aborts_with_location(self, world):
        train_docs, dev_docs, labels = world
        vocab = build_vocab(train_docs)
        model = KnnTextModel.create(
            ModelConfig(encoder=TINY, preset="M1", n_classes=labels.c), vocab, seed=0)
        model.classifier.b.data[:] = np.inf
        ad.set_finite_checks(False)
        try:
            with pytest.raises((TrainingError, FloatingPointError), match="epoch 1"), \
                 np.errstate(all="ignore"):
                train(model, train_docs, dev_docs, None, None,
                      quick_config(preset="M1"), vocab)
        finally:
            ad.set_finite_checks(True)

    def test_metrics_file(self, world, tmp_path):
        train_docs, dev_docs, labels = world
        metrics = tmp_path / "metrics.jsonl"
        run_pipeline(train_docs, dev_docs, labels, quick_config(epochs=2), TINY,
                     metrics_path=metrics, config_echo={"preset": "M7"})
        lines = [json.loads(line) for line in metrics.read_text().splitlines()]
        assert len(lines) == 3
        assert lines[0]["epoch"] == 1 and "train_loss" in lines[0] and "dev_accuracy" in lines[0]
        assert "summary" in lines[-1]
        assert lines[-1]["summary"]["config"] == {"preset": "M7"}


class TestEvaluate:
    def test_perfect_predictor_diagonal(self, world):
        train_docs, dev_docs, labels = world
        config = quick_config(epochs=40, lr=3e-2, preset="M1")
        result = run_pipeline(train_docs, dev_docs, labels, config, TINY)
        report = evaluate(result.model, train_docs, result.neighbors, result.neighbor_docs)
        assert report.accuracy == 1.0
        assert np.all(report.confusion == np.diag(np.diag(report.confusion)))

    def test_majority_predictor_on_balanced_classes(self, world):
        train_docs, dev_docs, labels = world
        vocab = build_vocab(train_docs)
        model = KnnTextModel.create(
            ModelConfig(encoder=TINY, preset="M1", n_classes=labels.c), vocab, seed=0)
        model.classifier.W.data[:] = 0.0
        model.classifier.b.data[:] = [[1.0, 0.0, 0.0]]
        report = evaluate(model, train_docs, None, None)
        assert report.accuracy == pytest.approx(1.0 / 3.0)
        assert report.per_class[0] == 1.0 and report.per_class[1] == 0.0

    def test_confusion_rows_match_support(self, world):
        train_docs, dev_docs, labels = world
        result = run_pipeline(train_docs, dev_docs, labels, quick_config(), TINY)
        report = evaluate(result.model, dev_docs, result.neighbors, result.neighbor_docs)
        for label in range(labels.c):
            support = sum(1 for d in dev_docs if d.label == label)
            assert report.confusion[label].sum() == support
        assert report.accuracy == pytest.approx(np.trace(report.confusion) / report.total)

    def test_accuracy_matches_provenance_recount(self, world):
        train_docs, dev_docs, labels = world
        result = run_pipeline(train_docs, dev_docs, labels, quick_config(), TINY)
        report = evaluate(result.model, dev_docs, result.neighbors, result.neighbor_docs,
                          k=2)
        records = predict_with_provenance(result.model, dev_docs, result.neighbors,
                                          result.neighbor_docs, k=2)
        recount = sum(1 for r in records if r["predicted"] == r["gold"]) / len(records)
        assert report.accuracy == pytest.approx(recount)

    def test_provenance_respects_k(self, world):
        train_docs, dev_docs, labels = world
        result = run_pipeline(train_docs, dev_docs, labels, quick_config(k_neighbors=2), TINY)
        records = predict_with_provenance(result.model, dev_docs, result.neighbors,
                                          result.neighbor_docs, k=1)
        assert all(len(r["neighbors"]) <= 1 for r in records)
        assert any(r["neighbors"] for r in records)
        sample = next(r for r in records if r["neighbors"])
        assert {"doc_id", "bm25", "label", "attention"} <= set(sample["neighbors"][0])


class TestCheckpoints:
    def test_save_load_save_byte_identical(self, world, tmp_path):
        train_docs, dev_docs, labels = world
        result = run_pipeline(train_docs, dev_docs, labels, quick_config(), TINY)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, result.train_result.checkpoint)
        loaded = load_checkpoint(p1)
        save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_round_trip_preserves_forward_and_accuracy(self, world, tmp_path):
        train_docs, dev_docs, labels = world
        result = run_pipeline(train_docs, dev_docs, labels, quick_config(), TINY)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, result.train_result.checkpoint)
        reloaded = model_from_checkpoint(load_checkpoint(path), result.vocab)
        base = result.model.forward_batch(dev_docs[:5],
                                          {d.id: result.neighbors[d.id].top(2) for d in dev_docs[:5]},
                                          result.neighbor_docs)
        got = reloaded.forward_batch(dev_docs[:5],
                                     {d.id: result.neighbors[d.id].top(2) for d in dev_docs[:5]},
                                     result.neighbor_docs)
        assert base.logits.tobytes() == got.logits.tobytes()
        r1 = evaluate(result.model, dev_docs, result.neighbors, result.neighbor_docs, k=2)
        r2 = evaluate(reloaded, dev_docs, result.neighbors, result.neighbor_docs, k=2)
        assert r1.accuracy == r2.accuracy

    def test_truncated_file_is_explicit_error(self, world, tmp_path):
        train_docs, dev_docs, labels = world
        result = run_pipeline(train_docs, dev_docs, labels, quick_config(epochs=1), TINY)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, result.train_result.checkpoint)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_mismatched_class_count_names_field(self, world):
        train_docs, dev_docs, labels = world
        vocab = build_vocab(train_docs)
        model = KnnTextModel.create(
            ModelConfig(encoder=TINY, preset="M1", n_classes=labels.c), vocab, seed=0)
        ckpt = make_checkpoint(model, vocab, epoch=1, dev_accuracy=0.5)
        with pytest.raises(CheckpointError, match="n_classes"):
            model_from_checkpoint(ckpt, vocab, expected_classes=7)

    def test_vocab_hash_mismatch(self, world):
        train_docs, dev_docs, labels = world
        vocab = build_vocab(train_docs)
        other_vocab = build_vocab(dev_docs)
        model = KnnTextModel.create(
            ModelConfig(encoder=TINY, preset="M1", n_classes=labels.c), vocab, seed=0)
        ckpt = make_checkpoint(model, vocab, epoch=1, dev_accuracy=0.5)
        with pytest.raises(CheckpointError, match="hash"):
            model_from_checkpoint(ckpt, other_vocab)


class TestSetups:
    def test_unbalanced_counts(self, world):
        train_docs, dev_docs, labels = world
        report = run_setup("unbalanced", train_docs, dev_docs, labels,
                           quick_config(epochs=1), TINY, per_class_counts=(2, 4, 8))
        assert report["train_size"] == 14
        assert report["train_per_class"] == [2, 4, 8]
        assert 0.0 <= report["dev_accuracy"] <= 1.0

    def test_semi_supervised_forces_m6(self, world):
        train_docs, dev_docs, labels = world
        external, ext_labels = make_separable_corpus(4, 5, seed=9)
        report = run_setup("semi_supervised", train_docs, dev_docs, labels,
                           quick_config(epochs=1), TINY,
                           external_docs=external, external_label_space=ext_labels)
        assert report["preset"] == "M6"
        model = report["_pipeline"].model
        # No attentive-label block: width is l + I*l.
        assert model.feature_width() == TINY.l + 2 * TINY.l

    def test_transfer_uses_external_label_width(self, world):
        train_docs, dev_docs, labels = world
        external, ext_labels = make_separable_corpus(2, 14, seed=9)
        report = run_setup("transfer", train_docs, dev_docs, labels,
                           quick_config(epochs=1), TINY,
                           external_docs=external, external_label_space=ext_labels)
        model = report["_pipeline"].model
        assert model.feature_width() == TINY.l + 2 * 14 + 2 * TINY.l
        assert model.config.n_classes == labels.c

    def test_transfer_requires_label_feature(self, world):
        train_docs, dev_docs, labels = world
        external, ext_labels = make_separable_corpus(2, 5, seed=9)
        with pytest.raises(TrainingError, match="label"):
            run_setup("transfer", train_docs, dev_docs, labels,
                      quick_config(preset="M6"), TINY,
                      external_docs=external, external_label_space=ext_labels)

    def test_low_resource_fraction(self, world):
        train_docs, dev_docs, labels = world
        report = run_setup("low_resource", train_docs, dev_docs, labels,
                           quick_config(epochs=1), TINY, low_resource_fraction=0.5)
        assert report["train_size"] == 15

    def test_unknown_setup(self, world):
        train_docs, dev_docs, labels = world
        with pytest.raises(TrainingError, match="unknown setup"):
            run_setup("bogus", train_docs, dev_docs, labels, quick_config(), TINY)

    def test_missing_external_corpus(self, world):
        train_docs, dev_docs, labels = world
        with pytest.raises(TrainingError, match="external"):
            run_setup("semi_supervised", train_docs, dev_docs, labels, quick_config(), TINY)


class TestConfigValidation:
    def test_bad_epochs(self):
        with pytest.raises(TrainingError):
            TrainConfig(epochs=0)

    def test_bad_k(self):
        with pytest.raises(TrainingError):
            TrainConfig(k_neighbors=-1)

    def test_vanilla_mode_allows_any_perspectives(self):
        config = TrainConfig(mode="vanilla_cosine", perspectives=0)
        assert config.mode == "vanilla_cosine"
