"""Open-set discovery: z-score outliers, off-manifold clusters, seed expansion,
and the human triage queue with its append-only audit log.

All similarity here is cosine on unit vectors. Sample-level scores stay
attached to the dataset snapshot they were computed from, so a queue assembled
from mixed sources can refuse mismatched inputs instead of silently mixing
snapshots.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .clustering import ClusterModel, effective_vectors
from .errors import (
    AlreadyReviewed,
    NoKnownLayouts,
    ParseError,
    SnapshotMismatch,
    StaleModel,
    UnknownItem,
    UnknownSeed,
    ValidationError,
)
from .vectors import DistanceMetric, EmbeddingSet, normalize_rows

DEFAULT_K_NEIGHBORS = 20
DEFAULT_THRESHOLD = 0.9
DEFAULT_MAX_HOPS = 3
DEFAULT_MIN_SIZE = 10
DEFAULT_DISTANCE_QUANTILE = 0.95

VERDICTS = ("confirmed_fraud", "confirmed_genuine", "skipped")
PROVENANCE_WEIGHTS = {"z_score": 1.0, "anomalous_cluster": 1.0, "seed_expansion": 1.0}


# --- per-sample anomaly scores -------------------------------------------------

@dataclass(frozen=True)
class AnomalyScore:
    sample_id: str
    z: float
    cluster_id: int
    centroid_distance: float


def zscore_anomalies(model: ClusterModel, embedding_set: EmbeddingSet) -> List[AnomalyScore]:
    """Every assigned sample scored by z = (x − μ)/σ within its own cluster.

    Sorted by z descending, ties by sample_id; σ=0 clusters score 0.
    """
    if not model.covers(embedding_set):
        raise StaleModel("cluster model does not match this dataset snapshot")
    vectors = effective_vectors(embedding_set.matrix, model.metric)
    row = {s: i for i, s in enumerate(embedding_set.ids)}
    scores: List[AnomalyScore] = []
    for cid in model.cluster_ids:
        members = model.members(cid)
        rows = [row[s] for s in members]
        cent = model.centroids[cid]
        if model.metric == DistanceMetric.COSINE:
            unit_c = cent / np.linalg.norm(cent)
            dists = 1.0 - np.clip(vectors[rows] @ unit_c, -1.0, 1.0)
        else:
            dists = np.linalg.norm(vectors[rows] - cent[None, :], axis=1)
        mu = model.stats[cid].mean_distance
        sigma = model.stats[cid].std_distance
        for sid, d in zip(members, dists):
            z = 0.0 if sigma == 0.0 else (float(d) - mu) / sigma
            scores.append(AnomalyScore(sample_id=sid, z=z, cluster_id=cid,
                                       centroid_distance=float(d)))
    scores.sort(key=lambda a: (-a.z, a.sample_id))
    return scores


# --- similarity graph and expansion --------------------------------------------

@dataclass(frozen=True)
class SimilarityGraph:
    ids: Tuple[str, ...]
    neighbors: Dict[str, Tuple[Tuple[str, float], ...]]
    unit_vectors: np.ndarray
    params: dict
    dataset_id: str = ""
    snapshot_version: int = 0

    @property
    def edge_count(self) -> int:
        return sum(len(v) for v in self.neighbors.values()) // 2

    def row_of(self, sample_id: str) -> int:
        try:
            index = self._index
        except AttributeError:
            index = {s: i for i, s in enumerate(self.ids)}
            object.__setattr__(self, "_index", index)
        return index[sample_id]


def build_similarity_graph(embedding_set: EmbeddingSet,
                           k_neighbors: int = DEFAULT_K_NEIGHBORS,
                           min_similarity: Optional[float] = None,
                           chunk_size: int = 512,
                           cancel_check=None) -> SimilarityGraph:
    """Exact cosine k-NN graph, symmetrized by edge union.

    An edge survives if it is in either endpoint's k nearest list and its
    weight is >= min_similarity (when given). Ties at the k-th place resolve
    to the lower row index, so the graph is deterministic.
    """
    n = len(embedding_set)
    if n < 2:
        raise ValidationError("need at least 2 samples to build a graph")
    if k_neighbors < 1:
        raise ValidationError("k_neighbors must be >= 1")
    k = min(k_neighbors, n - 1)
    unit = normalize_rows(embedding_set.float64())
    ids = embedding_set.ids

    edges: Dict[int, Dict[int, float]] = {i: {} for i in range(n)}
    for start in range(0, n, chunk_size):
        if cancel_check is not None:
            cancel_check()
        stop = min(start + chunk_size, n)
        sims = np.clip(unit[start:stop] @ unit.T, -1.0, 1.0)
        for local in range(stop - start):
            i = start + local
            row = sims[local].copy()
            row[i] = -np.inf  # no self-edges
            # top-k with deterministic ties: order by (-sim, index)
            cand = np.argpartition(row, -k)[-k:]
            cand = cand[np.lexsort((cand, -row[cand]))]
            for j in cand:
                w = float(row[j])
                if min_similarity is not None and w < min_similarity:
                    continue
                edges[i][int(j)] = w
                edges[int(j)][i] = w

    neighbors = {
        ids[i]: tuple(sorted(((ids[j], w) for j, w in edges[i].items()),
                             key=lambda e: (-e[1], e[0])))
        for i in range(n)
    }
    return SimilarityGraph(
        ids=ids,
        neighbors=neighbors,
        unit_vectors=unit,
        params={"k_neighbors": k_neighbors, "min_similarity": min_similarity},
        dataset_id=embedding_set.dataset_id,
        snapshot_version=embedding_set.snapshot_version,
    )


@dataclass(frozen=True)
class Candidate:
    sample_id: str
    score: float
    hops: int


@dataclass(frozen=True)
class ExpansionResult:
    seed_ids: Tuple[str, ...]
    candidates: Tuple[Candidate, ...]
    params: dict
    dataset_id: str = ""
    snapshot_version: int = 0

    def candidate_ids(self) -> List[str]:
        return [c.sample_id for c in self.candidates]


def expand_from_seeds(graph: SimilarityGraph, seeds: Iterable[str],
                      threshold: float = DEFAULT_THRESHOLD,
                      max_hops: int = DEFAULT_MAX_HOPS) -> ExpansionResult:
    """Breadth-first expansion across edges >= threshold, up to max_hops.

    A candidate's score is its best cosine similarity to any seed, computed
    from the stored vectors, so scores do not depend on traversal order.
    """
    seed_set = set(seeds)
    if not seed_set:
        raise ValidationError("need at least one seed")
    if threshold < 0.0:
        raise ValidationError("threshold must be nonnegative")
    if max_hops < 1:
        raise ValidationError("max_hops must be >= 1")
    known = set(graph.ids)
    for s in seed_set:
        if s not in known:
            raise UnknownSeed(f"seed {s!r} is not in the graph")

    hops: Dict[str, int] = {s: 0 for s in seed_set}
    frontier = sorted(seed_set)
    for depth in range(1, max_hops + 1):
        nxt = []
        for node in frontier:
            for other, w in graph.neighbors[node]:
                if w >= threshold and other not in hops:
                    hops[other] = depth
                    nxt.append(other)
        if not nxt:
            break
        frontier = sorted(nxt)

    reached = sorted(set(hops) - seed_set)
    if reached:
        rows = [graph.row_of(s) for s in reached]
        seed_rows = [graph.row_of(s) for s in sorted(seed_set)]
        sims = np.clip(graph.unit_vectors[rows] @ graph.unit_vectors[seed_rows].T,
                       -1.0, 1.0)
        best = sims.max(axis=1)
        cands = [Candidate(sample_id=s, score=float(best[i]), hops=hops[s])
                 for i, s in enumerate(reached)]
        cands.sort(key=lambda c: (-c.score, c.sample_id))
    else:
        cands = []
    return ExpansionResult(
        seed_ids=tuple(sorted(seed_set)),
        candidates=tuple(cands),
        params={"threshold": threshold, "max_hops": max_hops},
        dataset_id=graph.dataset_id,
        snapshot_version=graph.snapshot_version,
    )


# --- anomalous clusters ---------------------------------------------------------

def layout_centroids(embedding_set: EmbeddingSet,
                     metric: DistanceMetric = DistanceMetric.COSINE) -> Dict[str, np.ndarray]:
    """label → centroid of that label's samples (unit-space under cosine)."""
    labeled = embedding_set.labeled_subset()
    if len(labeled) == 0:
        raise NoKnownLayouts("dataset has no labeled samples")
    work = effective_vectors(labeled.matrix, metric)
    out: Dict[str, np.ndarray] = {}
    for label in sorted(set(labeled.labels)):
        rows = [i for i, lab in enumerate(labeled.labels) if lab == label]
        out[label] = work[rows].mean(axis=0)
    return out


def _metric_distance(a: np.ndarray, b: np.ndarray, metric: DistanceMetric) -> float:
    if metric == DistanceMetric.COSINE:
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        return 1.0 - float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
    return float(np.linalg.norm(a - b))


@dataclass(frozen=True)
class FlaggedCluster:
    cluster_id: int
    size: int
    min_distance_to_known_layout: float


def detect_anomalous_clusters(model: ClusterModel,
                              centroids_by_layout: Dict[str, np.ndarray],
                              min_size: int = DEFAULT_MIN_SIZE,
                              distance_quantile: float = DEFAULT_DISTANCE_QUANTILE,
                              ) -> List[FlaggedCluster]:
    """Clusters that are big enough and farther from every known layout than
    the q-quantile of inter-layout distances; ordered by distance descending.
    """
    if not centroids_by_layout:
        raise NoKnownLayouts("no layout centroids supplied")
    if not (0.0 <= distance_quantile <= 1.0):
        raise ValidationError("distance_quantile must be in [0, 1]")
    labels = sorted(centroids_by_layout)
    layout_mat = np.stack([centroids_by_layout[l] for l in labels])
    inter = [
        _metric_distance(layout_mat[i], layout_mat[j], model.metric)
        for i in range(len(labels)) for j in range(i + 1, len(labels))
    ]
    # a single known layout gives no inter-layout scale; fall back to zero
    cutoff = float(np.quantile(inter, distance_quantile)) if inter else 0.0

    flagged = []
    for cid in model.cluster_ids:
        size = model.stats[cid].size
        if size < min_size:
            continue
        dmin = min(_metric_distance(model.centroids[cid], layout_mat[i], model.metric)
                   for i in range(len(labels)))
        if dmin > cutoff:
            flagged.append(FlaggedCluster(cluster_id=cid, size=size,
                                          min_distance_to_known_layout=dmin))
    flagged.sort(key=lambda f: (-f.min_distance_to_known_layout, f.cluster_id))
    return flagged


# --- triage queue ----------------------------------------------------------------

@dataclass(frozen=True)
class TriageItem:
    item_id: str
    kind: str  # "sample" | "cluster"
    target_id: str
    priority: float
    provenance: str  # "z_score" | "anomalous_cluster" | "seed_expansion"
    review_state: str = "pending"
    reviewer: Optional[str] = None
    timestamp: Optional[float] = None
    representatives: Tuple[str, ...] = ()
    members: Tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "item_id": self.item_id,
            "kind": self.kind,
            "target_id": self.target_id,
            "priority": self.priority,
            "provenance": self.provenance,
            "review_state": self.review_state,
            "reviewer": self.reviewer,
            "timestamp": self.timestamp,
            "representatives": list(self.representatives),
            "members": list(self.members),
        }


def _normalized(scores: Sequence[float]) -> List[float]:
    """Scores scaled into [0, 1] by the source's max; non-positive scores -> 0."""
    top = max(scores) if scores else 0.0
    if top <= 0.0:
        return [0.0 for _ in scores]
    return [max(0.0, s) / top for s in scores]


def assemble_triage_queue(model: ClusterModel, embedding_set: EmbeddingSet,
                          anomalies: Sequence[AnomalyScore] = (),
                          flagged: Sequence[FlaggedCluster] = (),
                          expansion: Optional[ExpansionResult] = None,
                          weights: Optional[Dict[str, float]] = None,
                          ) -> List[TriageItem]:
    """Merge the three discovery sources into one deduplicated, ranked queue.

    priority = provenance weight × (score / max score within that source).
    Samples already covered by a flagged cluster item are dropped; a target
    surfaced by several sources keeps its single highest-priority item.
    """
    if not model.covers(embedding_set):
        raise SnapshotMismatch("cluster model does not match this dataset snapshot")
    if expansion is not None and (
            expansion.dataset_id, expansion.snapshot_version) != (
            embedding_set.dataset_id, embedding_set.snapshot_version):
        raise SnapshotMismatch("expansion result comes from a different snapshot")
    w = dict(PROVENANCE_WEIGHTS)
    if weights:
        w.update(weights)

    items: List[TriageItem] = []
    covered: set = set()
    z_by_sample = {a.sample_id: a.z for a in anomalies}
    row = {s: i for i, s in enumerate(embedding_set.ids)}
    vectors = effective_vectors(embedding_set.matrix, model.metric) if flagged else None

    for f, norm in zip(flagged, _normalized([f.min_distance_to_known_layout
                                             for f in flagged])):
        members = model.members(f.cluster_id)
        member_rows = [row[s] for s in members]
        cent = model.centroids[f.cluster_id]
        if model.metric == DistanceMetric.COSINE:
            unit_c = cent / np.linalg.norm(cent)
            dists = 1.0 - np.clip(vectors[member_rows] @ unit_c, -1.0, 1.0)
        else:
            dists = np.linalg.norm(vectors[member_rows] - cent[None, :], axis=1)
        medoid = members[int(np.argmin(dists))]
        by_z = sorted(members, key=lambda s: (-z_by_sample.get(s, 0.0), s))
        reps = [medoid] + [s for s in by_z if s != medoid][:2]
        covered.update(members)
        items.append(TriageItem(
            item_id=f"cluster:{f.cluster_id}",
            kind="cluster",
            target_id=str(f.cluster_id),
            priority=w["anomalous_cluster"] * norm,
            provenance="anomalous_cluster",
            representatives=tuple(reps),
            members=tuple(members),
        ))

    sample_items: Dict[str, TriageItem] = {}

    def offer(item: TriageItem):
        old = sample_items.get(item.target_id)
        if old is None or (item.priority, item.provenance) > (old.priority, old.provenance):
            sample_items[item.target_id] = item

    for a, norm in zip(anomalies, _normalized([a.z for a in anomalies])):
        if a.sample_id in covered:
            continue
        offer(TriageItem(
            item_id=f"sample:{a.sample_id}",
            kind="sample",
            target_id=a.sample_id,
            priority=w["z_score"] * norm,
            provenance="z_score",
        ))

    if expansion is not None:
        cands = expansion.candidates
        for c, norm in zip(cands, _normalized([c.score for c in cands])):
            if c.sample_id in covered:
                continue
            offer(TriageItem(
                item_id=f"sample:{c.sample_id}",
                kind="sample",
                target_id=c.sample_id,
                priority=w["seed_expansion"] * norm,
                provenance="seed_expansion",
            ))

    items.extend(sample_items.values())
    items.sort(key=lambda t: (-t.priority, t.kind, t.target_id))
    return items


# --- verdicts and the audit log ---------------------------------------------------

class TriageQueue:
    """Review workflow over an assembled queue.

    Mutations go through record_verdict only; every change appends one entry
    to the audit log (and to ``audit_path`` as one JSON line when set).
    Confirmed-fraud samples accumulate in ``seeds`` for later expansions.
    """

    def __init__(self, dataset_id: str, snapshot_version: int,
                 items: Sequence[TriageItem], audit_path: Optional[str] = None):
        self.dataset_id = dataset_id
        self.snapshot_version = snapshot_version
        self.items: Dict[str, TriageItem] = {}
        for it in items:
            if it.item_id in self.items:
                raise ValidationError(f"duplicate queue item {it.item_id}")
            self.items[it.item_id] = it
        self.audit: List[dict] = []
        self.seeds: set = set()
        self.audit_path = audit_path

    def ordered_items(self) -> List[TriageItem]:
        return sorted(self.items.values(), key=lambda t: (-t.priority, t.kind, t.target_id))

    def record_verdict(self, item_id: str, verdict: str, reviewer: str,
                       timestamp: Optional[float] = None) -> TriageItem:
        if verdict not in VERDICTS:
            raise ValidationError(f"verdict must be one of {VERDICTS}")
        item = self.items.get(item_id)
        if item is None:
            raise UnknownItem(f"no queue item {item_id!r}")
        if item.review_state != "pending":
            raise AlreadyReviewed(f"{item_id} already {item.review_state}")
        ts = time.time() if timestamp is None else float(timestamp)
        updated = replace(item, review_state=verdict, reviewer=reviewer, timestamp=ts)
        self.items[item_id] = updated
        affected = list(item.members) if item.kind == "cluster" else [item.target_id]
        entry = {
            "seq": len(self.audit) + 1,
            "item_id": item_id,
            "kind": item.kind,
            "verdict": verdict,
            "reviewer": reviewer,
            "timestamp": ts,
            "samples": affected,
        }
        self.audit.append(entry)
        if self.audit_path:
            with open(self.audit_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if verdict == "confirmed_fraud":
            self.seeds.update(affected)
        return updated

    def to_json(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "snapshot_version": self.snapshot_version,
            "items": [it.to_json() for it in self.ordered_items()],
            "audit": list(self.audit),
            "seeds": sorted(self.seeds),
        }


def queue_from_json(obj: dict, audit_path: Optional[str] = None) -> TriageQueue:
    try:
        items = [
            TriageItem(
                item_id=it["item_id"],
                kind=it["kind"],
                target_id=it["target_id"],
                priority=float(it["priority"]),
                provenance=it["provenance"],
                review_state=it.get("review_state", "pending"),
                reviewer=it.get("reviewer"),
                timestamp=it.get("timestamp"),
                representatives=tuple(it.get("representatives", ())),
                members=tuple(it.get("members", ())),
            )
            for it in obj["items"]
        ]
        queue = TriageQueue(dataset_id=obj["dataset_id"],
                            snapshot_version=int(obj["snapshot_version"]),
                            items=items, audit_path=audit_path)
        queue.audit = list(obj.get("audit", ()))
        queue.seeds = set(obj.get("seeds", ()))
        return queue
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed triage queue: {exc}") from exc


def replay_audit(entries: Iterable[dict]) -> Dict[str, str]:
    """Reconstruct the review_state map from an audit log."""
    state: Dict[str, str] = {}
    last_seq = 0
    for entry in entries:
        if entry["seq"] <= last_seq:
            raise ValidationError("audit sequence numbers must increase")
        last_seq = entry["seq"]
        state[entry["item_id"]] = entry["verdict"]
    return state


def load_audit(path: str) -> List[dict]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries
