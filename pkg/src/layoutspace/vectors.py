"""Vector primitives shared by every other module.

All math is done in float64 regardless of how vectors are stored; cosine is
always computed on L2-normalized copies and clamped into [-1, 1] so downstream
arccos / margin code never sees a domain error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, EmptySet, ZeroVector

_ZERO_NORM = 1e-30

SPLIT_TAGS = ("train", "val", "test")


class DistanceMetric(str, Enum):
    """cosine_distance is 1 - cosine similarity; both metrics are symmetric."""

    COSINE = "cosine_distance"
    EUCLIDEAN = "euclidean"


@dataclass(frozen=True)
class EmbeddingRecord:
    """One document's vector plus identity, layout label and review state."""

    sample_id: str
    vector: np.ndarray
    layout_label: Optional[str] = None
    split_tag: Optional[str] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float32)
        if vec.ndim != 1 or vec.size == 0:
            raise DimensionMismatch(f"record {self.sample_id!r}: vector must be 1-D and nonempty")
        if not np.all(np.isfinite(vec)):
            raise ZeroVector(f"record {self.sample_id!r}: vector has non-finite components")
        if self.split_tag is not None and self.split_tag not in SPLIT_TAGS:
            raise DimensionMismatch(
                f"record {self.sample_id!r}: split_tag must be one of {SPLIT_TAGS}"
            )
        object.__setattr__(self, "vector", vec)

    @property
    def dimension(self) -> int:
        return int(self.vector.shape[0])


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm, preserving direction."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm < _ZERO_NORM:
        raise ZeroVector("cannot normalize a (near-)zero vector")
    return v / norm


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``, clamped into [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < _ZERO_NORM or nb < _ZERO_NORM:
        raise ZeroVector("cosine similarity undefined for zero vectors")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_distance(a, b) -> float:
    return 1.0 - cosine_similarity(a, b)


def as_matrix(vectors) -> np.ndarray:
    """Stack a sequence of vectors (or records) into an N x D float64 matrix."""
    rows = [r.vector if isinstance(r, EmbeddingRecord) else r for r in vectors]
    if len(rows) == 0:
        raise EmptySet("empty vector sequence")
    dims = {np.asarray(r).shape for r in rows}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise DimensionMismatch(f"vectors have mixed shapes: {sorted(dims)}")
    return np.asarray(rows, dtype=np.float64)


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """L2-normalize every row; raises ZeroVector if any row is (near-)zero."""
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms < _ZERO_NORM):
        bad = int(np.argmin(norms))
        raise ZeroVector(f"row {bad} has (near-)zero norm")
    return matrix / norms[:, None]


def pairwise_distances(vectors, metric: DistanceMetric = DistanceMetric.COSINE) -> np.ndarray:
    """Symmetric distance matrix with an exactly zero diagonal.

    Accepts EmbeddingRecords or raw vectors; mixed dimensions raise
    DimensionMismatch.
    """
    mat = as_matrix(vectors)
    if metric == DistanceMetric.COSINE:
        unit = normalize_rows(mat)
        sims = np.clip(unit @ unit.T, -1.0, 1.0)
        dist = 1.0 - sims
    else:
        sq = np.sum(mat * mat, axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (mat @ mat.T)
        dist = np.sqrt(np.maximum(d2, 0.0))
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    return dist


def distances_to_point(matrix: np.ndarray, point: np.ndarray,
                       metric: DistanceMetric = DistanceMetric.COSINE) -> np.ndarray:
    """Distance from every row of ``matrix`` to ``point``."""
    matrix = np.asarray(matrix, dtype=np.float64)
    point = np.asarray(point, dtype=np.float64)
    if matrix.shape[1] != point.shape[0]:
        raise DimensionMismatch(f"dimension mismatch: {matrix.shape[1]} vs {point.shape[0]}")
    if metric == DistanceMetric.COSINE:
        unit = normalize_rows(matrix)
        p = l2_normalize(point)
        return 1.0 - np.clip(unit @ p, -1.0, 1.0)
    diff = matrix - point[None, :]
    return np.sqrt(np.sum(diff * diff, axis=1))


def centroid(vectors) -> np.ndarray:
    """Componentwise arithmetic mean of a nonempty vector sequence."""
    mat = as_matrix(vectors)
    return mat.mean(axis=0)


@dataclass(frozen=True)
class EmbeddingSet:
    """Column-oriented view of a record collection, the working type of all
    analytics: ids plus an N x D matrix plus parallel label/split columns.

    Vectors are stored float32 (inference outputs); math paths promote to
    float64. ``snapshot_version`` ties derived artifacts back to the dataset
    state they were computed from.
    """

    ids: tuple
    matrix: np.ndarray
    labels: tuple
    splits: tuple
    metadata: tuple
    dataset_id: str = ""
    snapshot_version: int = 0

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=np.float32)
        n = len(self.ids)
        if mat.ndim != 2 or mat.shape[0] != n:
            raise DimensionMismatch("matrix rows must match the id count")
        if len(self.labels) != n or len(self.splits) != n or len(self.metadata) != n:
            raise DimensionMismatch("parallel columns must match the id count")
        if len(set(self.ids)) != n:
            raise DimensionMismatch("sample ids must be unique")
        if not np.all(np.isfinite(mat)):
            raise ZeroVector("matrix contains non-finite values")
        object.__setattr__(self, "matrix", mat)

    @classmethod
    def from_records(cls, records, dataset_id: str = "",
                     snapshot_version: int = 0) -> "EmbeddingSet":
        records = list(records)
        if not records:
            raise EmptySet("cannot build a set from zero records")
        dims = {r.dimension for r in records}
        if len(dims) != 1:
            raise DimensionMismatch(f"records have mixed dimensions: {sorted(dims)}")
        return cls(
            ids=tuple(r.sample_id for r in records),
            matrix=np.stack([r.vector for r in records]),
            labels=tuple(r.layout_label for r in records),
            splits=tuple(r.split_tag for r in records),
            metadata=tuple(dict(r.metadata) for r in records),
            dataset_id=dataset_id,
            snapshot_version=snapshot_version,
        )

    def to_records(self):
        return [
            EmbeddingRecord(
                sample_id=self.ids[i],
                vector=self.matrix[i],
                layout_label=self.labels[i],
                split_tag=self.splits[i],
                metadata=dict(self.metadata[i]),
            )
            for i in range(len(self.ids))
        ]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dimension(self) -> int:
        return int(self.matrix.shape[1])

    def row_of(self, sample_id: str) -> int:
        try:
            return self._index[sample_id]
        except AttributeError:
            object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.ids)})
            return self._index[sample_id]

    def subset(self, indices) -> "EmbeddingSet":
        idx = list(indices)
        return EmbeddingSet(
            ids=tuple(self.ids[i] for i in idx),
            matrix=self.matrix[idx],
            labels=tuple(self.labels[i] for i in idx),
            splits=tuple(self.splits[i] for i in idx),
            metadata=tuple(self.metadata[i] for i in idx),
            dataset_id=self.dataset_id,
            snapshot_version=self.snapshot_version,
        )

    def split_subset(self, tag: str) -> "EmbeddingSet":
        return self.subset([i for i, s in enumerate(self.splits) if s == tag])

    def labeled_subset(self) -> "EmbeddingSet":
        return self.subset([i for i, lab in enumerate(self.labels) if lab is not None])

    def float64(self) -> np.ndarray:
        return self.matrix.astype(np.float64)
