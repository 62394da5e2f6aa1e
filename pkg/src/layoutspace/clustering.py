"""Clustering-quality metrics, seeded k-means and investigator-driven refinement.

Distance convention follows the engine default: cosine distance on
L2-normalized embeddings, with euclidean selectable per call. Under the cosine
metric k-means operates on a normalized copy of the vectors (spherical
k-means) so that mean-centroid updates minimize the cosine objective and the
per-iteration inertia is non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    DegenerateCentroids,
    EmptySet,
    InvalidPercentile,
    KTooLarge,
    ParseError,
    TooFewClasses,
    UnknownCluster,
    ValidationError,
)
from .vectors import DistanceMetric, EmbeddingSet, normalize_rows, pairwise_distances


def effective_vectors(matrix: np.ndarray, metric: DistanceMetric) -> np.ndarray:
    """The float64 vectors a model actually measures: unit rows under cosine."""
    mat = np.asarray(matrix, dtype=np.float64)
    if metric == DistanceMetric.COSINE:
        return normalize_rows(mat)
    return mat


def _point_distances(matrix: np.ndarray, points: np.ndarray,
                     metric: DistanceMetric) -> np.ndarray:
    """N x K distances from rows of ``matrix`` to rows of ``points``.

    Assumes ``matrix`` is already in effective form (unit rows for cosine).
    """
    if metric == DistanceMetric.COSINE:
        unit_p = normalize_rows(points)
        return 1.0 - np.clip(matrix @ unit_p.T, -1.0, 1.0)
    sq_m = np.sum(matrix * matrix, axis=1)
    sq_p = np.sum(points * points, axis=1)
    d2 = sq_m[:, None] + sq_p[None, :] - 2.0 * (matrix @ points.T)
    return np.sqrt(np.maximum(d2, 0.0))


# --- labeled metrics ---------------------------------------------------------

@dataclass(frozen=True)
class LabeledMetrics:
    """The four ablation-table columns plus the raw per-sample silhouettes."""

    intra_class_mean: float
    inter_class_mean: float
    silhouette_mean: float
    per_sample_silhouette: np.ndarray
    dbi: float

    def as_row(self) -> Dict[str, float]:
        return {
            "intra_class": self.intra_class_mean,
            "inter_class": self.inter_class_mean,
            "silhouette": self.silhouette_mean,
            "dbi": self.dbi,
        }


def silhouette_samples(dist: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample silhouette from a precomputed distance matrix.

    ``labels`` are dense integers 0..K-1. Samples in singleton classes get 0.
    """
    n = dist.shape[0]
    k = int(labels.max()) + 1
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    counts = onehot.sum(axis=0)
    sums = dist @ onehot  # sums[i, c] = total distance from i to class c

    own_count = counts[labels]
    own_sum = sums[np.arange(n), labels]
    mean_to_class = sums / np.maximum(counts, 1)[None, :]
    mean_to_class[:, counts == 0] = np.inf
    mean_to_class[np.arange(n), labels] = np.inf
    b = mean_to_class.min(axis=1)

    s = np.zeros(n)
    multi = (own_count > 1) & np.isfinite(b)
    a = np.zeros(n)
    a[multi] = own_sum[multi] / (own_count[multi] - 1)
    denom = np.maximum(a[multi], b[multi])
    safe = np.zeros(denom.shape)
    np.divide(b[multi] - a[multi], denom, out=safe, where=denom > 0)
    s[multi] = safe
    return s


def _dense_labels(raw_labels: Sequence) -> Tuple[np.ndarray, List]:
    classes = sorted(set(raw_labels))
    index = {c: i for i, c in enumerate(classes)}
    return np.array([index[l] for l in raw_labels], dtype=np.int64), classes


def clustering_metrics(matrix: np.ndarray, raw_labels: Sequence,
                       metric: DistanceMetric = DistanceMetric.COSINE) -> LabeledMetrics:
    """Silhouette, Davies-Bouldin, intra-/inter-class means for labeled vectors."""
    labels, classes = _dense_labels(raw_labels)
    if len(classes) < 2:
        raise TooFewClasses("labeled metrics need at least 2 classes")
    work = effective_vectors(matrix, metric)
    dist = pairwise_distances(work, metric)
    sil = silhouette_samples(dist, labels)

    k = len(classes)
    n = dist.shape[0]
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    counts = onehot.sum(axis=0)

    # intra-class: mean over classes (>=2 members) of mean within-class pair distance
    within_sums = np.einsum("ic,ij,jc->c", onehot, dist, onehot)  # 2x pair sums
    multi = counts > 1
    pair_counts = counts * (counts - 1)
    intra = float(np.mean(within_sums[multi] / pair_counts[multi]))

    cents = (onehot.T @ work) / counts[:, None]
    cent_dist = pairwise_distances(cents, metric)
    iu = np.triu_indices(k, 1)
    inter = float(np.mean(cent_dist[iu]))

    if np.any(cent_dist[iu] == 0.0):
        raise DegenerateCentroids("two class centroids coincide; DBI undefined")
    member_dist = _point_distances(work, cents, metric)
    scatter = np.array([member_dist[labels == c, c].mean() for c in range(k)])
    ratio = (scatter[:, None] + scatter[None, :]) / np.where(cent_dist > 0, cent_dist, np.inf)
    np.fill_diagonal(ratio, -np.inf)
    dbi = float(np.mean(ratio.max(axis=1)))

    return LabeledMetrics(
        intra_class_mean=intra,
        inter_class_mean=inter,
        silhouette_mean=float(sil.mean()),
        per_sample_silhouette=sil,
        dbi=dbi,
    )


def labeled_metrics(embedding_set: EmbeddingSet,
                    metric: DistanceMetric = DistanceMetric.COSINE) -> LabeledMetrics:
    """clustering_metrics over the labeled rows of a set."""
    labeled = embedding_set.labeled_subset()
    if len(labeled) == 0:
        raise TooFewClasses("no labeled samples")
    return clustering_metrics(labeled.matrix, labeled.labels, metric)


# --- k-means ------------------------------------------------------------------

@dataclass(frozen=True)
class ClusterStats:
    size: int
    mean_distance: float
    std_distance: float


@dataclass(frozen=True)
class ClusterModel:
    """An immutable clustering: assignments, centroids, per-cluster stats.

    Refinement returns a new model version; ``ops_log`` is the audit trail.
    """

    dataset_id: str
    snapshot_version: int
    metric: DistanceMetric
    k: int
    assignments: Dict[str, int]
    centroids: Dict[int, np.ndarray]
    stats: Dict[int, ClusterStats]
    inertia: float
    inertia_history: Tuple[float, ...] = ()
    noise_ids: frozenset = frozenset()
    ops_log: Tuple[dict, ...] = ()
    params: dict = field(default_factory=dict)
    version: int = 1

    @property
    def cluster_ids(self) -> Tuple[int, ...]:
        return tuple(sorted(self.centroids))

    def members(self, cluster_id: int) -> List[str]:
        if cluster_id not in self.centroids:
            raise UnknownCluster(f"no cluster {cluster_id}")
        return sorted(s for s, c in self.assignments.items() if c == cluster_id)

    def covers(self, embedding_set: EmbeddingSet) -> bool:
        if (self.dataset_id, self.snapshot_version) != (
                embedding_set.dataset_id, embedding_set.snapshot_version):
            return False
        covered = set(self.assignments) | set(self.noise_ids)
        return covered == set(embedding_set.ids)

    def summary(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "snapshot_version": self.snapshot_version,
            "metric": self.metric.value,
            "k": len(self.centroids),
            "version": self.version,
            "inertia": self.inertia,
            "noise": sorted(self.noise_ids),
            "clusters": [
                {
                    "cluster_id": cid,
                    "size": self.stats[cid].size,
                    "mean_distance": self.stats[cid].mean_distance,
                    "std_distance": self.stats[cid].std_distance,
                }
                for cid in self.cluster_ids
            ],
            "ops_log": list(self.ops_log),
            "params": dict(self.params),
        }

    def to_json(self) -> dict:
        """Full lossless form (assignments and centroids included)."""
        return {
            "dataset_id": self.dataset_id,
            "snapshot_version": self.snapshot_version,
            "metric": self.metric.value,
            "k": self.k,
            "assignments": dict(sorted(self.assignments.items())),
            "centroids": {str(cid): self.centroids[cid].tolist()
                          for cid in self.cluster_ids},
            "stats": {str(cid): {"size": self.stats[cid].size,
                                 "mean_distance": self.stats[cid].mean_distance,
                                 "std_distance": self.stats[cid].std_distance}
                      for cid in self.cluster_ids},
            "inertia": self.inertia,
            "inertia_history": list(self.inertia_history),
            "noise_ids": sorted(self.noise_ids),
            "ops_log": list(self.ops_log),
            "params": dict(self.params),
            "version": self.version,
        }


def model_from_json(obj: dict) -> ClusterModel:
    try:
        return ClusterModel(
            dataset_id=obj["dataset_id"],
            snapshot_version=int(obj["snapshot_version"]),
            metric=DistanceMetric(obj["metric"]),
            k=int(obj["k"]),
            assignments={str(s): int(c) for s, c in obj["assignments"].items()},
            centroids={int(cid): np.asarray(vec, dtype=np.float64)
                       for cid, vec in obj["centroids"].items()},
            stats={int(cid): ClusterStats(size=int(st["size"]),
                                          mean_distance=float(st["mean_distance"]),
                                          std_distance=float(st["std_distance"]))
                   for cid, st in obj["stats"].items()},
            inertia=float(obj["inertia"]),
            inertia_history=tuple(obj.get("inertia_history", ())),
            noise_ids=frozenset(obj.get("noise_ids", ())),
            ops_log=tuple(obj.get("ops_log", ())),
            params=dict(obj.get("params", {})),
            version=int(obj.get("version", 1)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed cluster model: {exc}") from exc


def _recompute_stats(vectors: np.ndarray, rows_by_cluster: Dict[int, np.ndarray],
                     metric: DistanceMetric):
    """Centroids (member means) and distance stats for the given row groups."""
    centroids: Dict[int, np.ndarray] = {}
    stats: Dict[int, ClusterStats] = {}
    for cid, rows in rows_by_cluster.items():
        members = vectors[rows]
        cent = members.mean(axis=0)
        dists = _point_distances(members, cent[None, :], metric)[:, 0]
        centroids[cid] = cent
        stats[cid] = ClusterStats(
            size=len(rows),
            mean_distance=float(dists.mean()),
            std_distance=float(dists.std()),
        )
    return centroids, stats


def _repair_empty(assign: np.ndarray, chosen: np.ndarray, centers: np.ndarray,
                  vectors: np.ndarray, k: int) -> None:
    """Reseed each empty cluster's center to the worst-fitting point, in place.

    Points that are the sole member of their cluster are not eligible, so a
    repair never empties another cluster. Moving the center onto the stolen
    point keeps the recorded inertia exact and non-increasing.
    """
    counts = np.bincount(assign, minlength=k)
    for cid in range(k):
        if counts[cid] > 0:
            continue
        eligible = counts[assign] > 1
        cand = np.where(eligible, chosen, -np.inf)
        worst = int(np.argmax(cand))
        counts[assign[worst]] -= 1
        assign[worst] = cid
        counts[cid] = 1
        centers[cid] = vectors[worst]
        chosen[worst] = 0.0


def _plus_plus_init(vectors: np.ndarray, k: int, rng: np.random.Generator,
                    metric: DistanceMetric) -> np.ndarray:
    n = vectors.shape[0]
    centers = np.empty((k, vectors.shape[1]))
    first = int(rng.integers(n))
    centers[0] = vectors[first]
    closest = _point_distances(vectors, centers[0:1], metric)[:, 0] ** 2
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[j] = vectors[idx]
        cand = _point_distances(vectors, centers[j:j + 1], metric)[:, 0] ** 2
        closest = np.minimum(closest, cand)
    return centers


def kmeans(embedding_set: EmbeddingSet, k: int, rng_seed: int,
           metric: DistanceMetric = DistanceMetric.COSINE,
           max_iter: int = 100, tol: float = 1e-6,
           cancel_check=None) -> ClusterModel:
    """Seeded k-means++ plus Lloyd iterations; deterministic given rng_seed.

    Empty clusters are repaired by reseeding them to the point currently
    farthest from its assigned centroid.
    """
    n = len(embedding_set)
    if k < 1 or k > n:
        raise KTooLarge(f"k={k} outside [1, {n}]")
    vectors = effective_vectors(embedding_set.matrix, metric)
    rng = np.random.default_rng(rng_seed)
    centers = _plus_plus_init(vectors, k, rng, metric)

    inertia_history: List[float] = []
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        if cancel_check is not None:
            cancel_check()
        dist = _point_distances(vectors, centers, metric)
        assign = dist.argmin(axis=1)
        chosen = dist[np.arange(n), assign]
        _repair_empty(assign, chosen, centers, vectors, k)

        inertia = float(np.sum(chosen ** 2)) if metric == DistanceMetric.EUCLIDEAN \
            else float(np.sum(chosen))
        inertia_history.append(inertia)

        new_centers = np.stack([vectors[assign == cid].mean(axis=0) for cid in range(k)])
        shift = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        if shift < tol:
            break

    dist = _point_distances(vectors, centers, metric)
    assign = dist.argmin(axis=1)
    chosen = dist[np.arange(n), assign]
    _repair_empty(assign, chosen, centers, vectors, k)
    final_inertia = float(np.sum(chosen ** 2)) if metric == DistanceMetric.EUCLIDEAN \
        else float(np.sum(chosen))
    inertia_history.append(final_inertia)

    rows_by_cluster = {cid: np.where(assign == cid)[0] for cid in range(k)}
    centroids, stats = _recompute_stats(vectors, rows_by_cluster, metric)
    return ClusterModel(
        dataset_id=embedding_set.dataset_id,
        snapshot_version=embedding_set.snapshot_version,
        metric=metric,
        k=k,
        assignments={embedding_set.ids[i]: int(assign[i]) for i in range(n)},
        centroids=centroids,
        stats=stats,
        inertia=final_inertia,
        inertia_history=tuple(inertia_history),
        params={"k": k, "rng_seed": rng_seed, "max_iter": max_iter, "tol": tol,
                "metric": metric.value},
    )


def select_k(embedding_set: EmbeddingSet, k_range: Sequence[int], rng_seed: int,
             metric: DistanceMetric = DistanceMetric.COSINE,
             max_iter: int = 100, tol: float = 1e-6):
    """Silhouette sweep over ``k_range``; ties resolve to the smaller k."""
    ks = sorted(set(int(k) for k in k_range))
    n = len(embedding_set)
    if not ks:
        raise ValidationError("k_range is empty")
    if ks[0] < 2 or ks[-1] > n - 1:
        raise KTooLarge(f"k_range must lie within [2, {n - 1}]")
    dist = pairwise_distances(embedding_set.matrix, metric)
    scores: Dict[int, float] = {}
    for k in ks:
        model = kmeans(embedding_set, k, rng_seed, metric, max_iter, tol)
        labels = np.array([model.assignments[s] for s in embedding_set.ids])
        scores[k] = float(silhouette_samples(dist, labels).mean())
    best = max(ks, key=lambda k: (scores[k], -k))
    return {"k": best, "scores": scores}


# --- refinement ---------------------------------------------------------------

def _model_rows(model: ClusterModel, embedding_set: EmbeddingSet) -> Dict[int, np.ndarray]:
    row = {s: i for i, s in enumerate(embedding_set.ids)}
    out: Dict[int, List[int]] = {cid: [] for cid in model.centroids}
    for s, cid in model.assignments.items():
        out[cid].append(row[s])
    return {cid: np.array(sorted(rows), dtype=np.int64) for cid, rows in out.items()}


def _mean_silhouette_of(rows: np.ndarray, assign_map: Dict[str, int],
                        embedding_set: EmbeddingSet, vectors: np.ndarray,
                        metric: DistanceMetric) -> float:
    """Mean s(i) over ``rows`` in the context of the full assignment.

    Only the rows-by-everything distance block is materialized, so the cost is
    O(|rows| * N) rather than a full pairwise matrix.
    """
    ids = embedding_set.ids
    assigned_rows = np.array([i for i, s in enumerate(ids) if s in assign_map],
                             dtype=np.int64)
    labels, _ = _dense_labels([assign_map[ids[i]] for i in assigned_rows])
    k = int(labels.max()) + 1
    if k == 1:
        return 0.0
    all_vecs = vectors[assigned_rows]
    pos = {int(r): j for j, r in enumerate(assigned_rows)}
    sub_pos = np.array([pos[int(r)] for r in rows], dtype=np.int64)
    dist = _point_distances(all_vecs[sub_pos], all_vecs, metric)
    dist[np.arange(len(sub_pos)), sub_pos] = 0.0

    m = len(assigned_rows)
    onehot = np.zeros((m, k))
    onehot[np.arange(m), labels] = 1.0
    counts = onehot.sum(axis=0)
    sums = dist @ onehot
    own = labels[sub_pos]

    mean_to = sums / np.maximum(counts, 1)[None, :]
    mean_to[:, counts == 0] = np.inf
    mean_to[np.arange(len(sub_pos)), own] = np.inf
    b = mean_to.min(axis=1)

    s = np.zeros(len(sub_pos))
    multi = (counts[own] > 1) & np.isfinite(b)
    a = sums[np.arange(len(sub_pos)), own][multi] / (counts[own][multi] - 1)
    denom = np.maximum(a, b[multi])
    safe = np.zeros(denom.shape)
    np.divide(b[multi] - a, denom, out=safe, where=denom > 0)
    s[multi] = safe
    return float(s.mean())


def _op_field(op: dict, key: str, cast):
    try:
        return cast(op[key])
    except KeyError:
        raise ValidationError(
            f"{op.get('op')} op requires field {key!r}") from None
    except (TypeError, ValueError):
        raise ValidationError(
            f"{op.get('op')} op field {key!r} must be numeric") from None


def refine_clusters(model: ClusterModel, embedding_set: EmbeddingSet,
                    ops: Sequence[dict]) -> ClusterModel:
    """Apply split / merge / remove_outliers / trim, recomputing all stats.

    Every op is appended to the model's log with its outcome; the returned
    model is a new version and the input model is untouched.
    """
    if not model.covers(embedding_set):
        raise ValidationError("model does not cover this dataset snapshot")
    vectors = effective_vectors(embedding_set.matrix, model.metric)
    assignments = dict(model.assignments)
    noise = set(model.noise_ids)
    log = list(model.ops_log)
    rows_by_cluster = _model_rows(model, embedding_set)

    for op in ops:
        kind = op.get("op")
        if kind == "split":
            cid = _op_field(op, "cluster_id", int)
            if cid not in rows_by_cluster:
                raise UnknownCluster(f"no cluster {cid}")
            rows = rows_by_cluster[cid]
            if len(rows) < 2:
                log.append({**op, "applied": False, "reason": "fewer than 2 members"})
                continue
            sub = embedding_set.subset(rows)
            seed = int(model.params.get("rng_seed", 0)) + len(log) + 1
            split_model = kmeans(sub, 2, seed, model.metric)
            new_cid = max(rows_by_cluster) + 1
            trial = dict(assignments)
            groups = {0: [], 1: []}
            for j, sid in enumerate(sub.ids):
                groups[split_model.assignments[sid]].append(int(rows[j]))
            if not groups[0] or not groups[1]:
                log.append({**op, "applied": False, "reason": "split produced one group"})
                continue
            # larger group keeps the original id; tie -> smallest sample id keeps
            if len(groups[0]) != len(groups[1]):
                keep = 0 if len(groups[0]) > len(groups[1]) else 1
            else:
                keep = 0 if min(embedding_set.ids[r] for r in groups[0]) < \
                    min(embedding_set.ids[r] for r in groups[1]) else 1
            spawn = 1 - keep
            for r in groups[spawn]:
                trial[embedding_set.ids[r]] = new_cid
            before = _mean_silhouette_of(rows, assignments, embedding_set, vectors,
                                         model.metric)
            after = _mean_silhouette_of(rows, trial, embedding_set, vectors,
                                        model.metric)
            if after > before:
                assignments = trial
                rows_by_cluster[cid] = np.array(sorted(groups[keep]), dtype=np.int64)
                rows_by_cluster[new_cid] = np.array(sorted(groups[spawn]), dtype=np.int64)
                log.append({**op, "applied": True, "new_cluster_id": new_cid,
                            "silhouette_before": before, "silhouette_after": after})
            else:
                log.append({**op, "applied": False,
                            "reason": "silhouette did not improve",
                            "silhouette_before": before, "silhouette_after": after})
        elif kind == "merge":
            a, b = _op_field(op, "a", int), _op_field(op, "b", int)
            for cid in (a, b):
                if cid not in rows_by_cluster:
                    raise UnknownCluster(f"no cluster {cid}")
            if a == b:
                log.append({**op, "applied": False, "reason": "same cluster"})
                continue
            keep, gone = min(a, b), max(a, b)
            for sid, cid in assignments.items():
                if cid == gone:
                    assignments[sid] = keep
            rows_by_cluster[keep] = np.sort(
                np.concatenate([rows_by_cluster[keep], rows_by_cluster[gone]]))
            del rows_by_cluster[gone]
            log.append({**op, "applied": True, "kept": keep})
        elif kind == "remove_outliers":
            z_max = _op_field(op, "z_max", float)
            removed = []
            for cid, rows in list(rows_by_cluster.items()):
                members = vectors[rows]
                cent = members.mean(axis=0)
                dists = _point_distances(members, cent[None, :], model.metric)[:, 0]
                sigma = dists.std()
                if sigma == 0:
                    continue
                z = (dists - dists.mean()) / sigma
                out_rows = rows[z > z_max]
                for r in out_rows:
                    sid = embedding_set.ids[int(r)]
                    removed.append(sid)
                    del assignments[sid]
                    noise.add(sid)
                rows_by_cluster[cid] = rows[z <= z_max]
            log.append({**op, "applied": True, "removed": sorted(removed)})
        elif kind == "trim":
            p = _op_field(op, "percentile", float)
            if not (0.0 <= p <= 100.0):
                raise InvalidPercentile(f"percentile {p} outside [0, 100]")
            removed = []
            for cid, rows in list(rows_by_cluster.items()):
                members = vectors[rows]
                cent = members.mean(axis=0)
                dists = _point_distances(members, cent[None, :], model.metric)[:, 0]
                cutoff = np.percentile(dists, p)
                out_rows = rows[dists > cutoff]
                for r in out_rows:
                    sid = embedding_set.ids[int(r)]
                    removed.append(sid)
                    del assignments[sid]
                    noise.add(sid)
                rows_by_cluster[cid] = rows[dists <= cutoff]
            log.append({**op, "applied": True, "removed": sorted(removed)})
        else:
            raise ValidationError(f"unknown refinement op {kind!r}")

    rows_by_cluster = {cid: rows for cid, rows in rows_by_cluster.items() if len(rows)}
    centroids, stats = _recompute_stats(vectors, rows_by_cluster, model.metric)
    dist_total = 0.0
    for cid, rows in rows_by_cluster.items():
        d = _point_distances(vectors[rows], centroids[cid][None, :], model.metric)[:, 0]
        dist_total += float(np.sum(d ** 2)) if model.metric == DistanceMetric.EUCLIDEAN \
            else float(np.sum(d))
    return replace(
        model,
        k=len(rows_by_cluster),
        assignments=assignments,
        centroids=centroids,
        stats=stats,
        inertia=dist_total,
        noise_ids=frozenset(noise),
        ops_log=tuple(log),
        version=model.version + 1,
    )
