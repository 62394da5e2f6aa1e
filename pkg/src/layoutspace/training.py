"""Desk-scale trainers: the metric head with its staged schedule, and the
layout classifier.

Both trainers are plain mini-batch gradient descent with momentum in
float64. All shuffling and initialization is derived from the config's
rng_seed, so two runs with the same config produce identical histories and
identical parameters.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .clustering import DistanceMetric, clustering_metrics
from .errors import (
    EmptySplit,
    NonFiniteLoss,
    TooFewClasses,
    UnknownClass,
    ValidationError,
)
from .losses import (
    ArcFaceHead,
    Batch,
    ClassCenters,
    LossWeights,
    SupConConfig,
    composite_loss,
    update_centers,
)
from .nets import (
    EncoderStandIn,
    LayoutClassifier,
    ProjectionHead,
    cross_entropy,
)
from .vectors import EmbeddingSet


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for the metric-head trainer.

    The schedule has three stages: heads only, then the top half of the
    encoder stand-in joins at the second learning rate, then everything
    trains at ``full_lr_factor`` times that rate.
    """

    weights: LossWeights = field(default_factory=LossWeights)
    scale: float = 30.0
    margin: float = 0.5
    temperature: float = 0.1
    center_lr: float = 0.5
    epochs: int = 12
    batch_size: int = 64
    stage_epochs: Tuple[int, int] = (4, 4)
    learning_rates: Tuple[float, float] = (5e-4, 1e-5)
    full_lr_factor: float = 0.1
    momentum: float = 0.9
    hidden: int = 1024
    dropout_rate: float = 0.1
    encoder_depth: int = 2
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be at least 1")
        if len(self.stage_epochs) != 2 or min(self.stage_epochs) < 0:
            raise ValidationError("stage_epochs must be two nonnegative ints")
        if len(self.learning_rates) != 2 or min(self.learning_rates) <= 0:
            raise ValidationError("learning_rates must be two positive reals")
        if self.full_lr_factor <= 0:
            raise ValidationError("full_lr_factor must be positive")

    def stage_of(self, epoch: int) -> int:
        """1-based stage for a 1-based epoch number."""
        warm, partial = self.stage_epochs
        if epoch <= warm:
            return 1
        if epoch <= warm + partial:
            return 2
        return 3

    def lr_of(self, stage: int) -> float:
        if stage == 1:
            return self.learning_rates[0]
        if stage == 2:
            return self.learning_rates[1]
        return self.learning_rates[1] * self.full_lr_factor


@dataclass
class MetricModel:
    """Everything the metric trainer learns, bundled for inference."""

    encoder: EncoderStandIn
    projection: ProjectionHead
    arcface: ArcFaceHead
    centers: ClassCenters
    class_names: Tuple[str, ...]

    def embed(self, features: np.ndarray) -> np.ndarray:
        feats, _ = self.encoder.forward(np.asarray(features, dtype=np.float64))
        out, _ = self.projection.forward(feats, training=False)
        return out

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, arr in self.encoder.params().items():
            out[f"encoder.{name}"] = arr
        for name, arr in self.projection.params().items():
            out[f"projection.{name}"] = arr
        out["projection.norm.running_mean"] = self.projection.norm.running_mean
        out["projection.norm.running_var"] = self.projection.norm.running_var
        out["arcface.weights"] = self.arcface.weights
        out["centers.centers"] = self.centers.centers
        return out


@dataclass
class TrainResult:
    model: MetricModel
    history: Tuple[dict, ...]
    best_epoch: int
    config: TrainConfig


def _split_arrays(dataset: EmbeddingSet):
    train = dataset.split_subset("train")
    val = dataset.split_subset("val")
    if len(train) == 0:
        raise EmptySplit("train split is empty")
    if len(val) == 0:
        raise EmptySplit("val split is empty")
    if any(label is None for label in train.labels + val.labels):
        raise ValidationError("metric training requires labels on train and val")
    class_names = tuple(sorted(set(train.labels)))
    index = {name: i for i, name in enumerate(class_names)}
    missing = sorted(set(val.labels) - set(class_names))
    if missing:
        raise UnknownClass(f"val classes absent from train: {missing}")
    x_train = train.float64()
    y_train = np.array([index[l] for l in train.labels], dtype=np.int64)
    x_val = val.float64()
    y_val = np.array([index[l] for l in val.labels], dtype=np.int64)
    return x_train, y_train, x_val, y_val, class_names


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # a trailing single-sample batch would break the contrastive term; fold it in
    if len(batches) >= 2 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


class _Momentum:
    """SGD-with-momentum state addressed by parameter name."""

    def __init__(self, coefficient: float):
        self.coefficient = coefficient
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        v = self.velocity.get(name)
        if v is None:
            v = np.zeros_like(param)
        v = self.coefficient * v - lr * grad
        self.velocity[name] = v
        return param + v


def _snapshot(model: MetricModel) -> dict:
    return {
        "encoder": {k: v.copy() for k, v in model.encoder.params().items()},
        "projection": {k: v.copy() for k, v in model.projection.params().items()},
        "running_mean": model.projection.norm.running_mean.copy(),
        "running_var": model.projection.norm.running_var.copy(),
        "arcface": model.arcface.weights.copy(),
        "centers": model.centers.centers.copy(),
    }


def _restore(model: MetricModel, snap: dict) -> None:
    for name, arr in snap["encoder"].items():
        model.encoder.set_param(name, arr.copy())
    for name, arr in snap["projection"].items():
        model.projection.set_param(name, arr.copy())
    model.projection.norm.running_mean = snap["running_mean"].copy()
    model.projection.norm.running_var = snap["running_var"].copy()
    model.arcface = model.arcface.with_weights(snap["arcface"].copy())
    model.centers = ClassCenters(centers=snap["centers"].copy(),
                                 center_lr=model.centers.center_lr)


def train_metric_head(dataset: EmbeddingSet, config: TrainConfig) -> TrainResult:
    """Train encoder + projection + ArcFace head + centers on the train split.

    History carries one entry per epoch, starting with the untouched
    initialization as epoch 0. The returned model is the checkpoint with the
    best validation silhouette (ties: lower DBI, then earlier epoch).
    """
    x_train, y_train, x_val, y_val, class_names = _split_arrays(dataset)
    dim = x_train.shape[1]
    n_classes = len(class_names)

    init_rng = np.random.default_rng(np.random.SeedSequence([config.rng_seed, 1]))
    encoder = EncoderStandIn.init(dim=dim, depth=config.encoder_depth,
                                  rng_seed=config.rng_seed)
    projection = ProjectionHead.init(hidden=config.hidden,
                                     dropout_rate=config.dropout_rate,
                                     rng_seed=config.rng_seed, input_dim=dim)
    arc_w = init_rng.normal(size=(n_classes, projection.output_dim))
    arcface = ArcFaceHead(weights=arc_w, scale=config.scale, margin=config.margin)
    centers = ClassCenters(
        centers=np.zeros((n_classes, projection.output_dim)),
        center_lr=config.center_lr)
    supcon_cfg = SupConConfig(temperature=config.temperature)
    model = MetricModel(encoder=encoder, projection=projection, arcface=arcface,
                        centers=centers, class_names=class_names)

    if config.epochs == 0:
        return TrainResult(model=model, history=(), best_epoch=0, config=config)

    def evaluate() -> Tuple[float, float, dict]:
        emb_val = model.embed(x_val)
        stats = clustering_metrics(emb_val, [class_names[i] for i in y_val],
                                   DistanceMetric.COSINE)
        emb_train = model.embed(x_train)
        bundle = composite_loss(Batch(embeddings=emb_train, labels=y_train),
                                model.arcface, supcon_cfg, model.centers,
                                config.weights)
        return stats.silhouette_mean, stats.dbi, {
            "loss": bundle.value, **bundle.components}

    history: List[dict] = []
    sil, dbi, comps = evaluate()
    history.append({"epoch": 0, "stage": 0, "val_silhouette": sil,
                    "val_dbi": dbi, **comps})
    best = (sil, dbi, 0)
    best_snap = _snapshot(model)

    opt = _Momentum(config.momentum)
    step = 0
    for epoch in range(1, config.epochs + 1):
        stage = config.stage_of(epoch)
        lr = config.lr_of(stage)
        if stage == 1:
            enc_trainable: Tuple[str, ...] = ()
        elif stage == 2:
            top = range(model.encoder.depth // 2, model.encoder.depth)
            enc_trainable = tuple(
                name for i in top
                for name in (f"layers.{i}.weights", f"layers.{i}.bias"))
        else:
            enc_trainable = tuple(model.encoder.params())

        shuffle_rng = np.random.default_rng(
            np.random.SeedSequence([config.rng_seed, 2, epoch]))
        for rows in _epoch_batches(len(x_train), config.batch_size, shuffle_rng):
            step += 1
            feats, enc_cache = model.encoder.forward(x_train[rows])
            emb, head_cache = model.projection.forward(feats, training=True,
                                                       step=step)
            batch = Batch(embeddings=emb, labels=y_train[rows])
            bundle = composite_loss(batch, model.arcface, supcon_cfg,
                                    model.centers, config.weights)
            if not np.isfinite(bundle.value):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"{bundle.components}")
            grad_feats, proj_grads = model.projection.backward(
                head_cache, bundle.grad_embeddings)

            proj_params = model.projection.params()
            for name, grad in proj_grads.items():
                updated = opt.step(f"proj.{name}", proj_params[name], grad, lr)
                model.projection.set_param(name, updated)
            if bundle.grad_weights is not None:
                new_w = opt.step("arc.weights", model.arcface.weights,
                                 bundle.grad_weights, lr)
                model.arcface = model.arcface.with_weights(new_w)
            if enc_trainable:
                _, enc_grads = model.encoder.backward(enc_cache, grad_feats)
                enc_params = model.encoder.params()
                for name in enc_trainable:
                    updated = opt.step(f"enc.{name}", enc_params[name],
                                       enc_grads[name], lr)
                    model.encoder.set_param(name, updated)
            if config.weights.center > 0:
                model.centers = update_centers(batch, model.centers)

        sil, dbi, comps = evaluate()
        history.append({"epoch": epoch, "stage": stage, "val_silhouette": sil,
                        "val_dbi": dbi, **comps})
        if sil > best[0] or (sil == best[0] and dbi < best[1]):
            best = (sil, dbi, epoch)
            best_snap = _snapshot(model)

    _restore(model, best_snap)
    return TrainResult(model=model, history=tuple(history),
                       best_epoch=best[2], config=config)


# --- layout classifier -------------------------------------------------------

MIN_CLASS_SIZE = 5


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 40
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    dropout_rate: float = 0.2
    hidden: int = 256
    holdout_fraction: float = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be at least 1")
        if not (0.0 < self.holdout_fraction < 1.0):
            raise ValidationError("holdout_fraction must lie in (0, 1)")


@dataclass
class ClassifierResult:
    classifier: LayoutClassifier
    accuracy: float
    class_names: Tuple[str, ...]
    holdout_ids: Tuple[str, ...]
    excluded_classes: Tuple[str, ...]


def train_layout_classifier(dataset: EmbeddingSet,
                            config: ClassifierConfig = ClassifierConfig()) -> ClassifierResult:
    """Cross-entropy training of the dense layout classifier.

    Classes with fewer than MIN_CLASS_SIZE labeled samples are excluded up
    front. The per-class holdout split is seeded, so the reported accuracy
    is reproducible.
    """
    labeled = dataset.labeled_subset()
    if len(labeled) == 0:
        raise TooFewClasses("no labeled samples to train on")
    by_class: Dict[str, List[int]] = {}
    for i, label in enumerate(labeled.labels):
        by_class.setdefault(label, []).append(i)
    excluded = tuple(sorted(c for c, rows in by_class.items()
                            if len(rows) < MIN_CLASS_SIZE))
    kept = {c: rows for c, rows in by_class.items() if len(rows) >= MIN_CLASS_SIZE}
    if len(kept) < 2:
        raise TooFewClasses(
            f"need at least two classes with >= {MIN_CLASS_SIZE} samples, "
            f"have {len(kept)}")
    class_names = tuple(sorted(kept))
    index = {name: i for i, name in enumerate(class_names)}

    rng = np.random.default_rng(np.random.SeedSequence([config.rng_seed, 17]))
    train_rows: List[int] = []
    test_rows: List[int] = []
    for name in class_names:
        rows = np.array(kept[name])
        rows = rows[rng.permutation(len(rows))]
        n_test = max(1, int(round(config.holdout_fraction * len(rows))))
        test_rows.extend(rows[:n_test])
        train_rows.extend(rows[n_test:])
    train_rows = sorted(train_rows)
    test_rows = sorted(test_rows)

    x = labeled.float64()
    # rows of excluded classes are never selected, so the -1 stays unused
    y = np.array([index.get(l, -1) for l in labeled.labels], dtype=np.int64)
    x_train, y_train = x[train_rows], y[train_rows]
    x_test, y_test = x[test_rows], y[test_rows]

    clf = LayoutClassifier.init(input_dim=x.shape[1], class_names=class_names,
                                hidden=config.hidden,
                                dropout_rate=config.dropout_rate,
                                rng_seed=config.rng_seed)
    opt = _Momentum(config.momentum)
    step = 0
    for epoch in range(1, config.epochs + 1):
        shuffle_rng = np.random.default_rng(
            np.random.SeedSequence([config.rng_seed, 18, epoch]))
        for rows in _epoch_batches(len(x_train), config.batch_size, shuffle_rng):
            step += 1
            logits, cache = clf.forward(x_train[rows], training=True, step=step)
            value, grad_logits = cross_entropy(logits, y_train[rows])
            if not np.isfinite(value):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch} step {step}")
            _, grads = clf.backward(cache, grad_logits)
            params = clf.params()
            for name, grad in grads.items():
                clf.set_param(name, opt.step(name, params[name], grad,
                                             config.learning_rate))

    logits, _ = clf.forward(x_test)
    predicted = np.argmax(logits, axis=1)
    accuracy = float(np.mean(predicted == y_test))
    holdout_ids = tuple(labeled.ids[i] for i in test_rows)
    return ClassifierResult(classifier=clf, accuracy=accuracy,
                            class_names=class_names, holdout_ids=holdout_ids,
                            excluded_classes=excluded)
