"""Forward values and analytic gradients for the composite metric objective.

Three components — additive-angular-margin softmax (ArcFace-style), supervised
contrastive, and class-center pull — plus their weighted combination. Values
and gradients are computed in float64 with gradients derived by hand from the
implemented forward, so central finite differences must agree to ~1e-7.

Gradient conventions:
  * angular losses normalize embeddings (and classifier rows) internally, and
    their gradients w.r.t. the *raw* inputs chain through the normalization
    Jacobian  (g - (g.u)u) / ||z||;
  * the center loss acts on raw embeddings (no normalization).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    BatchTooSmall,
    DegenerateEmbedding,
    InvalidLabel,
    UnknownClass,
    ValidationError,
)
from .vectors import normalize_rows

_COS_CLAMP = 1e-7
_ZERO_NORM = 1e-30

WARN_NO_POSITIVES = "no_positives"


def _norm_backward(grad_unit: np.ndarray, raw: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. row-normalized vectors back to the raw rows."""
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    unit = raw / norms
    inner = np.sum(grad_unit * unit, axis=1, keepdims=True)
    return (grad_unit - inner * unit) / norms


def _check_rows_nonzero(matrix: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms < _ZERO_NORM):
        raise DegenerateEmbedding(f"{what} row {int(np.argmin(norms))} is a zero vector")


@dataclass(frozen=True)
class Batch:
    """A training batch: N x D embeddings and N integer class labels."""

    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        lab = np.asarray(self.labels, dtype=np.int64)
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise ValidationError("batch embeddings must be a nonempty N x D matrix")
        if lab.shape != (emb.shape[0],):
            raise ValidationError("labels must be a length-N integer sequence")
        if not np.all(np.isfinite(emb)):
            raise DegenerateEmbedding("batch embeddings contain non-finite values")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "labels", lab)

    @property
    def size(self) -> int:
        return int(self.embeddings.shape[0])


@dataclass(frozen=True)
class ArcFaceHead:
    """Per-class weight rows (stored unit-norm), feature scale and angular margin."""

    weights: np.ndarray
    scale: float = 30.0
    margin: float = 0.5

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ValidationError("weights must be a C x D matrix")
        if self.scale <= 0:
            raise ValidationError("scale must be positive")
        if not (0.0 <= self.margin < math.pi / 2):
            raise ValidationError("margin must lie in [0, pi/2)")
        object.__setattr__(self, "weights", normalize_rows(w))

    @property
    def num_classes(self) -> int:
        return int(self.weights.shape[0])

    def with_weights(self, weights: np.ndarray) -> "ArcFaceHead":
        return ArcFaceHead(weights=weights, scale=self.scale, margin=self.margin)


@dataclass(frozen=True)
class SupConConfig:
    temperature: float = 0.1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")


@dataclass(frozen=True)
class ClassCenters:
    """One center row per known class; center_lr governs the running update."""

    centers: np.ndarray
    center_lr: float = 0.5

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        if c.ndim != 2:
            raise ValidationError("centers must be a K x D matrix")
        if not np.all(np.isfinite(c)):
            raise ValidationError("centers contain non-finite values")
        if not (0.0 < self.center_lr <= 1.0):
            raise ValidationError("center_lr must lie in (0, 1]")
        object.__setattr__(self, "centers", c)

    @property
    def num_classes(self) -> int:
        return int(self.centers.shape[0])


@dataclass(frozen=True)
class LossWeights:
    arcface: float = 1.0
    supcon: float = 1.0
    center: float = 0.003

    def __post_init__(self):
        if min(self.arcface, self.supcon, self.center) < 0:
            raise ValidationError("loss weights must be nonnegative")
        if max(self.arcface, self.supcon, self.center) <= 0:
            raise ValidationError("at least one loss weight must be positive")


@dataclass(frozen=True)
class LossBundle:
    """Scalar loss plus gradients w.r.t. every trainable tensor of one batch."""

    value: float
    grad_embeddings: np.ndarray
    grad_weights: Optional[np.ndarray] = None
    grad_centers: Optional[np.ndarray] = None
    components: dict = field(default_factory=dict)
    warnings: tuple = ()


def arcface_loss(batch: Batch, head: ArcFaceHead) -> LossBundle:
    """Additive angular-margin softmax over cosine logits.

    The margin uses cos(theta+m) = cos(theta)cos(m) - sin(theta)sin(m) with the
    target cosine clamped into [-1+1e-7, 1-1e-7]; when the margin would wrap
    past pi (cos(theta) < cos(pi - m)) the linear fallback cos(theta) - m sin(m)
    keeps the logit monotone and the gradient finite.
    """
    n, _ = batch.embeddings.shape
    c_classes = head.num_classes
    labels = batch.labels
    if np.any(labels < 0) or np.any(labels >= c_classes):
        raise InvalidLabel(f"labels must lie in [0, {c_classes})")
    _check_rows_nonzero(batch.embeddings, "embedding")

    unit = normalize_rows(batch.embeddings)
    w_unit = normalize_rows(head.weights)
    cosines = unit @ w_unit.T  # N x C

    rows = np.arange(n)
    target_cos = cosines[rows, labels]
    clamped = np.clip(target_cos, -1.0 + _COS_CLAMP, 1.0 - _COS_CLAMP)
    in_range = (target_cos > -1.0 + _COS_CLAMP) & (target_cos < 1.0 - _COS_CLAMP)

    cos_m = math.cos(head.margin)
    sin_m = math.sin(head.margin)
    sine = np.sqrt(1.0 - clamped * clamped)
    use_margin = clamped >= math.cos(math.pi - head.margin)
    phi = np.where(use_margin, clamped * cos_m - sine * sin_m, clamped - head.margin * sin_m)
    dphi = np.where(use_margin, cos_m + clamped * sin_m / sine, 1.0)
    dphi = dphi * in_range  # clamp saturates the gradient

    logits = head.scale * cosines
    logits[rows, labels] = head.scale * phi

    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    value = float(np.mean(shifted[rows, labels] - np.log(exp.sum(axis=1))) * -1.0)

    grad_logits = probs.copy()
    grad_logits[rows, labels] -= 1.0
    grad_logits /= n

    grad_cos = head.scale * grad_logits
    grad_cos[rows, labels] *= dphi

    grad_unit = grad_cos @ w_unit
    grad_w_unit = grad_cos.T @ unit
    return LossBundle(
        value=value,
        grad_embeddings=_norm_backward(grad_unit, batch.embeddings),
        grad_weights=_norm_backward(grad_w_unit, head.weights),
    )


def supcon_loss(batch: Batch, cfg: SupConConfig) -> LossBundle:
    """Supervised contrastive loss on internally normalized embeddings.

    Anchors with no positive in the batch contribute nothing and are excluded
    from the anchor average; if every anchor lacks positives the value is 0 and
    a ``no_positives`` warning is surfaced.
    """
    n = batch.size
    if n < 2:
        raise BatchTooSmall("supervised contrastive loss needs at least 2 samples")
    _check_rows_nonzero(batch.embeddings, "embedding")

    unit = normalize_rows(batch.embeddings)
    sims = (unit @ unit.T) / cfg.temperature  # N x N

    labels = batch.labels
    positive = (labels[:, None] == labels[None, :]) & ~np.eye(n, dtype=bool)
    pos_counts = positive.sum(axis=1)
    valid = pos_counts > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        zeros = np.zeros_like(batch.embeddings)
        return LossBundle(value=0.0, grad_embeddings=zeros, warnings=(WARN_NO_POSITIVES,))

    off_diag = sims.copy()
    np.fill_diagonal(off_diag, -np.inf)
    row_max = off_diag.max(axis=1, keepdims=True)
    exp = np.exp(off_diag - row_max)
    denom = exp.sum(axis=1, keepdims=True)
    log_z = (np.log(denom) + row_max).ravel()
    softmax = exp / denom  # rows sum to 1, zero diagonal

    pos_mean_sim = np.where(valid, (sims * positive).sum(axis=1) / np.maximum(pos_counts, 1), 0.0)
    per_anchor = np.where(valid, log_z - pos_mean_sim, 0.0)
    value = float(per_anchor.sum() / n_valid)

    grad_sims = softmax - positive / np.maximum(pos_counts, 1)[:, None]
    grad_sims[~valid, :] = 0.0
    grad_sims /= n_valid

    grad_unit = ((grad_sims + grad_sims.T) @ unit) / cfg.temperature
    return LossBundle(value=value, grad_embeddings=_norm_backward(grad_unit, batch.embeddings))


def center_loss(batch: Batch, centers: ClassCenters) -> LossBundle:
    """Half the summed squared distance of each raw embedding to its class center."""
    k = centers.num_classes
    labels = batch.labels
    if np.any(labels < 0) or np.any(labels >= k):
        raise UnknownClass(f"labels must lie in [0, {k})")
    diff = batch.embeddings - centers.centers[labels]
    value = 0.5 * float(np.sum(diff * diff))
    grad_centers = np.zeros_like(centers.centers)
    np.add.at(grad_centers, labels, -diff)
    return LossBundle(value=value, grad_embeddings=diff.copy(), grad_centers=grad_centers)


def update_centers(batch: Batch, centers: ClassCenters) -> ClassCenters:
    """Mini-batch center update: c_k <- c_k - lr * sum(c_k - z_i) / (1 + n_k).

    Classes absent from the batch are unchanged; returns a new ClassCenters.
    """
    k = centers.num_classes
    labels = batch.labels
    if np.any(labels < 0) or np.any(labels >= k):
        raise UnknownClass(f"labels must lie in [0, {k})")
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    residual = np.zeros_like(centers.centers)
    np.add.at(residual, labels, centers.centers[labels] - batch.embeddings)
    new = centers.centers - centers.center_lr * residual / (1.0 + counts)[:, None]
    return ClassCenters(centers=new, center_lr=centers.center_lr)


def composite_loss(
    batch: Batch,
    head: Optional[ArcFaceHead],
    cfg: Optional[SupConConfig],
    centers: Optional[ClassCenters],
    weights: LossWeights,
) -> LossBundle:
    """Weighted sum of the three components; zero-weight components are skipped."""
    value = 0.0
    grad_emb = np.zeros_like(batch.embeddings)
    grad_w = None
    grad_c = None
    components: dict = {}
    warn: tuple = ()

    if weights.arcface > 0:
        if head is None:
            raise ValidationError("arcface weight is positive but no head given")
        part = arcface_loss(batch, head)
        components["arcface"] = part.value
        value += weights.arcface * part.value
        grad_emb += weights.arcface * part.grad_embeddings
        grad_w = weights.arcface * part.grad_weights
    if weights.supcon > 0:
        if cfg is None:
            raise ValidationError("supcon weight is positive but no config given")
        part = supcon_loss(batch, cfg)
        components["supcon"] = part.value
        value += weights.supcon * part.value
        grad_emb += weights.supcon * part.grad_embeddings
        warn += part.warnings
    if weights.center > 0:
        if centers is None:
            raise ValidationError("center weight is positive but no centers given")
        part = center_loss(batch, centers)
        components["center"] = part.value
        value += weights.center * part.value
        grad_emb += weights.center * part.grad_embeddings
        grad_c = weights.center * part.grad_centers

    return LossBundle(
        value=value,
        grad_embeddings=grad_emb,
        grad_weights=grad_w,
        grad_centers=grad_c,
        components=components,
        warnings=warn,
    )
