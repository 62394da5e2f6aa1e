"""Trainer contracts: determinism, schedule, checkpoint selection, errors."""

from dataclasses import replace

import numpy as np
import pytest

from layoutspace.datastore import SyntheticSpec, synthesize
from layoutspace.errors import (
    EmptySplit,
    NonFiniteLoss,
    TooFewClasses,
    UnknownClass,
    ValidationError,
)
from layoutspace.losses import LossWeights
from layoutspace.training import (
    ClassifierConfig,
    ClassifierResult,
    TrainConfig,
    train_layout_classifier,
    train_metric_head,
)
from layoutspace.nets import classify_layout
from layoutspace.vectors import EmbeddingSet


def trainer_fixture(n_layouts=5, per=20, dim=16, seed=50, spread=0.15):
    spec = SyntheticSpec(n_layouts=n_layouts, samples_per_layout=(per, per),
                         dim=dim, rng_seed=seed, intra_class_spread=spread,
                         inter_class_separation=0.5,
                         split_fractions=(0.8, 0.2, 0.0))
    return synthesize(spec)[0]


def quick_config(**overrides):
    defaults = dict(epochs=4, stage_epochs=(2, 1), learning_rates=(0.02, 0.004),
                    hidden=24, batch_size=32, rng_seed=0)
    defaults.update(overrides)
    return TrainConfig(**defaults)


class TestMetricTrainer:
    def test_zero_epochs_returns_initialization(self):
        ds = trainer_fixture()
        a = train_metric_head(ds, quick_config(epochs=0))
        b = train_metric_head(ds, quick_config(epochs=0))
        assert a.history == ()
        assert a.best_epoch == 0
        for name, arr in a.model.tensors().items():
            assert np.array_equal(arr, b.model.tensors()[name])

    def test_deterministic_given_seed(self):
        ds = trainer_fixture()
        a = train_metric_head(ds, quick_config(rng_seed=3))
        b = train_metric_head(ds, quick_config(rng_seed=3))
        assert a.history == b.history
        for name, arr in a.model.tensors().items():
            assert np.array_equal(arr, b.model.tensors()[name])

    def test_history_covers_every_epoch_with_stages(self):
        ds = trainer_fixture()
        cfg = quick_config(epochs=5, stage_epochs=(2, 2))
        res = train_metric_head(ds, cfg)
        assert [h["epoch"] for h in res.history] == [0, 1, 2, 3, 4, 5]
        assert [h["stage"] for h in res.history] == [0, 1, 1, 2, 2, 3]
        for entry in res.history:
            assert {"val_silhouette", "val_dbi", "loss",
                    "arcface", "supcon", "center"} <= set(entry)

    def test_training_improves_validation_silhouette(self):
        ds = trainer_fixture()
        res = train_metric_head(ds, quick_config(epochs=8, stage_epochs=(4, 2)))
        assert res.history[-1]["val_silhouette"] > res.history[0]["val_silhouette"]

    def test_best_epoch_matches_history(self):
        ds = trainer_fixture()
        res = train_metric_head(ds, quick_config(epochs=6, stage_epochs=(3, 2)))
        ranked = min(res.history,
                     key=lambda h: (-h["val_silhouette"], h["val_dbi"], h["epoch"]))
        assert res.best_epoch == ranked["epoch"]
        # the returned model really is that checkpoint
        val = ds.split_subset("val")
        from layoutspace.clustering import DistanceMetric, clustering_metrics
        emb = res.model.embed(val.float64())
        stats = clustering_metrics(emb, val.labels, DistanceMetric.COSINE)
        best = res.history[res.best_epoch]
        assert abs(stats.silhouette_mean - best["val_silhouette"]) < 1e-12
        assert abs(stats.dbi - best["val_dbi"]) < 1e-12

    def test_embedding_dimension_is_512(self):
        ds = trainer_fixture()
        res = train_metric_head(ds, quick_config(epochs=1, stage_epochs=(1, 0)))
        emb = res.model.embed(ds.split_subset("val").float64())
        assert emb.shape[1] == 512

    def test_arcface_rows_stay_unit_norm(self):
        ds = trainer_fixture()
        res = train_metric_head(ds, quick_config(epochs=3, stage_epochs=(1, 1)))
        norms = np.linalg.norm(res.model.arcface.weights, axis=1)
        assert np.allclose(norms, 1.0, atol=1e-9)

    def test_empty_split_rejected(self):
        ds = trainer_fixture()
        no_val = ds.split_subset("train")
        with pytest.raises(EmptySplit):
            train_metric_head(no_val, quick_config())

    def test_unlabeled_samples_rejected(self):
        ds = trainer_fixture()
        records = [replace(rec, layout_label=None) for rec in ds.to_records()]
        stripped = EmbeddingSet.from_records(records, dataset_id=ds.dataset_id,
                                             snapshot_version=1)
        with pytest.raises(ValidationError):
            train_metric_head(stripped, quick_config())

    def test_val_class_missing_from_train_rejected(self):
        ds = trainer_fixture()
        records = [
            replace(rec, layout_label="never-seen")
            if rec.split_tag == "val" else rec
            for rec in ds.to_records()
        ]
        bad = EmbeddingSet.from_records(records, dataset_id=ds.dataset_id,
                                        snapshot_version=1)
        with pytest.raises(UnknownClass):
            train_metric_head(bad, quick_config())

    def test_runaway_learning_rate_raises_nonfinite(self):
        ds = trainer_fixture()
        cfg = quick_config(epochs=2, stage_epochs=(2, 0),
                           learning_rates=(1e160, 1e160),
                           weights=LossWeights(0.0, 0.0, 1.0))
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NonFiniteLoss):
                train_metric_head(ds, cfg)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            TrainConfig(epochs=-1)
        with pytest.raises(ValidationError):
            TrainConfig(learning_rates=(0.0, 0.1))
        with pytest.raises(ValidationError):
            TrainConfig(stage_epochs=(-1, 2))

    def test_stage_lookup(self):
        cfg = TrainConfig(epochs=10, stage_epochs=(3, 4),
                          learning_rates=(1e-3, 1e-4), full_lr_factor=0.1)
        assert [cfg.stage_of(e) for e in (1, 3, 4, 7, 8, 10)] == [1, 1, 2, 2, 3, 3]
        assert cfg.lr_of(1) == 1e-3
        assert cfg.lr_of(2) == 1e-4
        assert cfg.lr_of(3) == pytest.approx(1e-5)

    def test_small_final_batch_is_folded_in(self):
        # 65 train samples with batch 64 would leave a 1-sample batch, which
        # the contrastive term cannot use; the trainer folds it into the
        # previous batch instead of failing.
        spec = SyntheticSpec(n_layouts=2, samples_per_layout=(41, 41), dim=8,
                             rng_seed=51, intra_class_spread=0.1,
                             split_fractions=(0.8, 0.2, 0.0))
        ds, _ = synthesize(spec)
        n_train = len(ds.split_subset("train"))
        assert n_train >= 3
        res = train_metric_head(ds, quick_config(epochs=1, stage_epochs=(1, 0),
                                                 batch_size=n_train - 1))
        assert len(res.history) == 2


class TestLayoutClassifierTrainer:
    def test_separable_classes_reach_perfect_accuracy(self):
        spec = SyntheticSpec(n_layouts=4, samples_per_layout=(30, 30), dim=16,
                             rng_seed=60, intra_class_spread=0.05,
                             inter_class_separation=0.5)
        ds, _ = synthesize(spec)
        res = train_layout_classifier(ds, ClassifierConfig(epochs=25, rng_seed=0))
        assert res.accuracy == 1.0
        assert res.excluded_classes == ()

    def test_deterministic(self):
        spec = SyntheticSpec(n_layouts=3, samples_per_layout=(12, 12), dim=8,
                             rng_seed=61, intra_class_spread=0.1)
        ds, _ = synthesize(spec)
        cfg = ClassifierConfig(epochs=5, rng_seed=2)
        a = train_layout_classifier(ds, cfg)
        b = train_layout_classifier(ds, cfg)
        assert a.accuracy == b.accuracy
        assert a.holdout_ids == b.holdout_ids
        for name, arr in a.classifier.params().items():
            assert np.array_equal(arr, b.classifier.params()[name])

    def test_rare_classes_excluded(self):
        rng = np.random.default_rng(62)
        records = []
        from layoutspace.vectors import EmbeddingRecord
        for i in range(12):
            records.append(EmbeddingRecord(
                sample_id=f"a{i}", vector=rng.normal(1.0, 0.05, 6),
                layout_label="big-a"))
            records.append(EmbeddingRecord(
                sample_id=f"b{i}", vector=rng.normal(-1.0, 0.05, 6),
                layout_label="big-b"))
        for i in range(3):
            records.append(EmbeddingRecord(
                sample_id=f"r{i}", vector=rng.normal(0.0, 0.05, 6),
                layout_label="rare"))
        ds = EmbeddingSet.from_records(records, dataset_id="t", snapshot_version=1)
        res = train_layout_classifier(ds, ClassifierConfig(epochs=10, rng_seed=0))
        assert res.excluded_classes == ("rare",)
        assert res.class_names == ("big-a", "big-b")

    def test_too_few_classes_after_exclusion(self):
        rng = np.random.default_rng(63)
        from layoutspace.vectors import EmbeddingRecord
        records = [EmbeddingRecord(sample_id=f"a{i}", vector=rng.normal(size=4),
                                   layout_label="only") for i in range(8)]
        records += [EmbeddingRecord(sample_id=f"r{i}", vector=rng.normal(size=4),
                                    layout_label="rare") for i in range(2)]
        ds = EmbeddingSet.from_records(records, dataset_id="t", snapshot_version=1)
        with pytest.raises(TooFewClasses):
            train_layout_classifier(ds, ClassifierConfig(epochs=2, rng_seed=0))

    def test_holdout_is_stratified(self):
        spec = SyntheticSpec(n_layouts=3, samples_per_layout=(20, 20), dim=8,
                             rng_seed=64, intra_class_spread=0.05)
        ds, _ = synthesize(spec)
        res = train_layout_classifier(ds, ClassifierConfig(epochs=2, rng_seed=1))
        # 20% of each 20-sample class
        held = {}
        label_of = dict(zip(ds.ids, ds.labels))
        for sid in res.holdout_ids:
            held[label_of[sid]] = held.get(label_of[sid], 0) + 1
        assert all(count == 4 for count in held.values())
        assert len(held) == 3

    def test_trained_model_classifies_training_sample(self):
        spec = SyntheticSpec(n_layouts=3, samples_per_layout=(15, 15), dim=8,
                             rng_seed=65, intra_class_spread=0.05,
                             inter_class_separation=0.6)
        ds, _ = synthesize(spec)
        res = train_layout_classifier(ds, ClassifierConfig(epochs=25, rng_seed=0))
        row = ds.labels.index(res.class_names[0])
        label, probs = classify_layout(ds.matrix[row], res.classifier)
        assert label == res.class_names[0]
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)
