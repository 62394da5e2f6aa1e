"""Dataset persistence, the two embedding file formats, and the synthetic
generator that every self-contained fixture is built from.

Two formats:

* jsonl — one UTF-8 JSON object per line: {"id", "vec", "label", "meta"} plus
  an optional "split" tag; exports are sorted by id so diffs are stable. JSON
  shortest-repr floats round-trip float32 values bit-exactly.
* packed — binary for service scale: magic "IDEM", version u32 LE, count
  u64 LE, dim u32 LE, an id table of count × {u16 length + UTF-8 bytes}, then
  count × dim float32 LE rows in id-table order. Ids and vectors only.

Ground truth from the generator lives in a side file, never in the dataset
itself, so discovery code cannot accidentally consume generator labels.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateId,
    EmptySet,
    InfeasibleSpec,
    IoError,
    MissingHeader,
    ParseError,
    StaleSnapshot,
    UnknownDataset,
    ValidationError,
)
from .vectors import SPLIT_TAGS, EmbeddingRecord, EmbeddingSet, normalize_rows

PACKED_MAGIC = b"IDEM"
PACKED_VERSION = 1
FORMATS = ("jsonl", "packed")


# --- reading -------------------------------------------------------------------

def _record_from_json(obj: dict, row: int, dim: Optional[int]) -> EmbeddingRecord:
    if not isinstance(obj, dict) or "id" not in obj or "vec" not in obj:
        raise ParseError(f"row {row}: need 'id' and 'vec' fields", row=row)
    sample_id = obj["id"]
    if not isinstance(sample_id, str) or not sample_id:
        raise ParseError(f"row {row}: 'id' must be a non-empty string", row=row)
    vec = obj["vec"]
    if not isinstance(vec, list) or not vec or \
            not all(isinstance(x, (int, float)) for x in vec):
        raise ParseError(f"row {row}: 'vec' must be a non-empty number list", row=row)
    arr = np.asarray(vec, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ParseError(f"row {row}: non-finite vector component", row=row)
    if dim is not None and arr.shape[0] != dim:
        raise DimensionMismatch(
            f"row {row}: dimension {arr.shape[0]} != dataset dimension {dim}",
            row=row)
    label = obj.get("label")
    if label is not None and not isinstance(label, str):
        raise ParseError(f"row {row}: 'label' must be a string or null", row=row)
    split = obj.get("split")
    if split is not None and split not in SPLIT_TAGS:
        raise ParseError(f"row {row}: 'split' must be one of {SPLIT_TAGS}", row=row)
    meta = obj.get("meta") or {}
    if not isinstance(meta, dict) or \
            not all(isinstance(k, str) and isinstance(v, str) for k, v in meta.items()):
        raise ParseError(f"row {row}: 'meta' must map strings to strings", row=row)
    return EmbeddingRecord(sample_id=sample_id, vector=arr.astype(np.float32),
                           layout_label=label, split_tag=split, metadata=meta)


def _read_jsonl(path: str) -> List[EmbeddingRecord]:
    records: List[EmbeddingRecord] = []
    seen: Dict[str, int] = {}
    dim: Optional[int] = None
    with open(path, "r", encoding="utf-8") as fh:
        row = 0
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row += 1
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"row {row}: invalid JSON ({exc.msg})", row=row)
            rec = _record_from_json(obj, row, dim)
            if rec.sample_id in seen:
                raise DuplicateId(
                    f"row {row}: id {rec.sample_id!r} already seen at row "
                    f"{seen[rec.sample_id]}", row=row)
            seen[rec.sample_id] = row
            if dim is None:
                dim = rec.vector.shape[0]
            records.append(rec)
    if not records:
        raise MissingHeader(f"{path}: empty jsonl file, no record to take the "
                            "dataset dimension from")
    return records


def _read_packed(path: str) -> List[EmbeddingRecord]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != PACKED_MAGIC:
        raise ParseError(f"{path}: not a packed embedding file")
    version, = struct.unpack_from("<I", blob, 4)
    if version != PACKED_VERSION:
        raise ParseError(f"{path}: unsupported packed version {version}")
    count, = struct.unpack_from("<Q", blob, 8)
    dim, = struct.unpack_from("<I", blob, 16)
    if dim == 0 and count > 0:
        raise ParseError(f"{path}: zero dimension with nonzero count")
    if 20 + count * (2 + 4 * dim) > len(blob):
        raise ParseError(f"{path}: header claims {count} records but the file "
                         "is too small to hold them")
    offset = 20
    ids: List[str] = []
    seen = set()
    for row in range(1, count + 1):
        if offset + 2 > len(blob):
            raise ParseError(f"row {row}: truncated id table", row=row)
        ln, = struct.unpack_from("<H", blob, offset)
        offset += 2
        if offset + ln > len(blob):
            raise ParseError(f"row {row}: truncated id entry", row=row)
        try:
            sid = blob[offset:offset + ln].decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError(f"row {row}: id is not valid UTF-8", row=row)
        offset += ln
        if not sid:
            raise ParseError(f"row {row}: empty id", row=row)
        if sid in seen:
            raise DuplicateId(f"row {row}: id {sid!r} repeated", row=row)
        seen.add(sid)
        ids.append(sid)
    need = count * dim * 4
    if len(blob) - offset != need:
        raise ParseError(
            f"{path}: expected {need} payload bytes, found {len(blob) - offset}")
    matrix = np.frombuffer(blob, dtype="<f4", count=count * dim,
                           offset=offset).reshape(count, dim)
    finite = np.isfinite(matrix).all(axis=1)
    if not finite.all():
        row = int(np.argmin(finite)) + 1
        raise ParseError(f"row {row}: non-finite vector component", row=row)
    return [EmbeddingRecord(sample_id=sid, vector=matrix[i].copy())
            for i, sid in enumerate(ids)]


def import_embeddings(path: str, format: str = "jsonl",
                      dataset_id: Optional[str] = None) -> EmbeddingSet:
    """Read a dataset file; any invalid row aborts the whole import."""
    if format not in FORMATS:
        raise ValidationError(f"format must be one of {FORMATS}")
    if not os.path.exists(path):
        raise IoError(f"no such file: {path}")
    records = _read_jsonl(path) if format == "jsonl" else _read_packed(path)
    name = dataset_id or os.path.splitext(os.path.basename(path))[0]
    return EmbeddingSet.from_records(records, dataset_id=name, snapshot_version=1)


# --- writing -------------------------------------------------------------------

def _jsonl_line(es: EmbeddingSet, i: int) -> str:
    obj = {
        "id": es.ids[i],
        "vec": [float(x) for x in es.matrix[i]],
        "label": es.labels[i],
        "meta": dict(es.metadata[i]),
    }
    if es.splits[i] is not None:
        obj["split"] = es.splits[i]
    return json.dumps(obj, sort_keys=True)


def export_embeddings(embedding_set: EmbeddingSet, path: str,
                      format: str = "jsonl") -> None:
    """Write a dataset file; jsonl rows are sorted by id, packed keeps order."""
    if format not in FORMATS:
        raise ValidationError(f"format must be one of {FORMATS}")
    if len(embedding_set) == 0:
        raise EmptySet("refusing to export an empty dataset")
    order = sorted(range(len(embedding_set)), key=lambda i: embedding_set.ids[i])
    try:
        if format == "jsonl":
            with open(path, "w", encoding="utf-8") as fh:
                for i in order:
                    fh.write(_jsonl_line(embedding_set, i) + "\n")
        else:
            n, dim = embedding_set.matrix.shape
            with open(path, "wb") as fh:
                fh.write(PACKED_MAGIC)
                fh.write(struct.pack("<I", PACKED_VERSION))
                fh.write(struct.pack("<Q", n))
                fh.write(struct.pack("<I", dim))
                for i in order:
                    raw = embedding_set.ids[i].encode("utf-8")
                    if len(raw) > 0xFFFF:
                        raise ValidationError(
                            f"id {embedding_set.ids[i]!r} exceeds 65535 bytes")
                    fh.write(struct.pack("<H", len(raw)))
                    fh.write(raw)
                rows = np.ascontiguousarray(
                    embedding_set.matrix[order], dtype="<f4")
                fh.write(rows.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}")


# --- synthetic generator ---------------------------------------------------------

@dataclass(frozen=True)
class FamilySpec:
    size: int
    offset_scale: float = 0.3
    template_jitter: float = 0.01


@dataclass(frozen=True)
class SyntheticSpec:
    """Geometry knobs for the self-contained fixtures.

    Layout classes are tight Gaussian blobs around unit-norm centers kept at
    least ``inter_class_separation`` apart in cosine distance. Each fraud
    family is a much tighter blob placed opposite the layout bulk, far enough
    that its centroid clears the configured detection quantile. Outliers are
    layout members displaced by ``outlier_magnitude`` × the layout spread.
    """

    n_layouts: int
    samples_per_layout: Tuple[int, int]
    dim: int
    rng_seed: int
    intra_class_spread: float = 0.05
    inter_class_separation: float = 0.5
    fraud_families: Tuple[FamilySpec, ...] = ()
    outlier_count: int = 0
    outlier_magnitude: float = 5.0
    split_fractions: Optional[Tuple[float, float, float]] = None
    detection_quantile: float = 0.95

    def __post_init__(self):
        lo, hi = self.samples_per_layout
        if self.n_layouts < 1 or lo < 1 or hi < lo or self.dim < 2:
            raise ValidationError("layouts, samples per layout and dim must be positive")
        if self.intra_class_spread <= 0 or self.inter_class_separation < 0:
            raise ValidationError("spreads must be positive")
        if self.outlier_count < 0 or self.outlier_magnitude <= 0:
            raise ValidationError("outlier settings must be positive")
        if self.split_fractions is not None:
            if len(self.split_fractions) != 3 or \
                    abs(sum(self.split_fractions) - 1.0) > 1e-9 or \
                    any(f < 0 for f in self.split_fractions):
                raise ValidationError("split_fractions must be 3 nonnegative "
                                      "values summing to 1")

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticSpec":
        families = tuple(FamilySpec(**f) for f in obj.get("fraud_families", []))
        known = {
            "n_layouts", "samples_per_layout", "dim", "rng_seed",
            "intra_class_spread", "inter_class_separation", "outlier_count",
            "outlier_magnitude", "split_fractions", "detection_quantile",
        }
        extra = set(obj) - known - {"fraud_families"}
        if extra:
            raise ValidationError(f"unknown spec fields: {sorted(extra)}")
        kwargs = {k: obj[k] for k in known if k in obj}
        if "samples_per_layout" in kwargs:
            kwargs["samples_per_layout"] = tuple(kwargs["samples_per_layout"])
        if kwargs.get("split_fractions") is not None:
            kwargs["split_fractions"] = tuple(kwargs["split_fractions"])
        return cls(fraud_families=families, **kwargs)


def _cosine_dist(a: np.ndarray, b: np.ndarray) -> float:
    return 1.0 - float(np.clip(
        np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0))


def _place_layout_centers(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    centers: List[np.ndarray] = []
    for _ in range(spec.n_layouts):
        placed = False
        for _attempt in range(2000):
            cand = rng.normal(size=spec.dim)
            cand /= np.linalg.norm(cand)
            if all(_cosine_dist(cand, c) >= spec.inter_class_separation
                   for c in centers):
                centers.append(cand)
                placed = True
                break
        if not placed:
            raise InfeasibleSpec(
                f"cannot place {spec.n_layouts} layout centers at separation "
                f"{spec.inter_class_separation} in dimension {spec.dim}")
    return np.stack(centers)


def _place_family_centers(spec: SyntheticSpec, centers: np.ndarray,
                          rng: np.random.Generator) -> np.ndarray:
    """Family centers opposite the layout bulk, past the detection cutoff."""
    if not spec.fraud_families:
        return np.zeros((0, spec.dim))
    k = len(centers)
    inter = [_cosine_dist(centers[i], centers[j])
             for i in range(k) for j in range(i + 1, k)]
    cutoff = float(np.quantile(inter, spec.detection_quantile)) if inter else 0.0
    anti = -centers.mean(axis=0)
    anti /= np.linalg.norm(anti)

    placed: List[np.ndarray] = []
    for fam in spec.fraud_families:
        ok = False
        for _attempt in range(2000):
            cand = anti + fam.offset_scale * rng.normal(size=spec.dim) / np.sqrt(spec.dim)
            cand /= np.linalg.norm(cand)
            far_from_layouts = min(
                _cosine_dist(cand, c) for c in centers) > cutoff + 0.02
            separated = all(_cosine_dist(cand, p) >= 8.0 * fam.template_jitter
                            for p in placed)
            if far_from_layouts and separated:
                placed.append(cand)
                ok = True
                break
        if not ok:
            raise InfeasibleSpec(
                "cannot place a fraud family past the detection cutoff "
                f"({cutoff:.3f}) in dimension {spec.dim}")
    return np.stack(placed)


def synthesize(spec: SyntheticSpec,
               dataset_id: str = "synthetic") -> Tuple[EmbeddingSet, dict]:
    """Generate a dataset plus its ground-truth side data, deterministically."""
    rng = np.random.default_rng(spec.rng_seed)
    centers = _place_layout_centers(spec, rng)
    fam_centers = _place_family_centers(spec, centers, rng)

    lo, hi = spec.samples_per_layout
    per_layout = rng.integers(lo, hi + 1, size=spec.n_layouts)

    vectors: List[np.ndarray] = []
    labels: List[Optional[str]] = []
    truth_layouts: Dict[str, str] = {}
    families: Dict[str, List[str]] = {}
    outlier_ids: List[str] = []
    counter = 0

    def next_id() -> str:
        nonlocal counter
        sid = f"d{counter:06d}"
        counter += 1
        return sid

    layout_members: List[List[int]] = []
    for li in range(spec.n_layouts):
        name = f"layout-{li:02d}"
        rows = []
        block = centers[li] + rng.normal(scale=spec.intra_class_spread,
                                         size=(per_layout[li], spec.dim))
        for v in block:
            sid = next_id()
            rows.append(len(vectors))
            vectors.append(v)
            labels.append(name)
            truth_layouts[sid] = name
        layout_members.append(rows)

    for fi, fam in enumerate(spec.fraud_families):
        fam_name = f"family-{fi}"
        members = []
        block = fam_centers[fi] + rng.normal(scale=fam.template_jitter,
                                             size=(fam.size, spec.dim))
        for v in block:
            sid = next_id()
            members.append(sid)
            vectors.append(v)
            labels.append(None)
        families[fam_name] = members

    for _ in range(spec.outlier_count):
        li = int(rng.integers(spec.n_layouts))
        direction = rng.normal(size=spec.dim)
        direction /= np.linalg.norm(direction)
        v = centers[li] + direction * spec.outlier_magnitude * spec.intra_class_spread
        sid = next_id()
        vectors.append(v)
        labels.append(f"layout-{li:02d}")
        truth_layouts[sid] = f"layout-{li:02d}"
        outlier_ids.append(sid)

    n = len(vectors)
    ids = tuple(f"d{i:06d}" for i in range(n))
    splits: List[Optional[str]] = [None] * n
    if spec.split_fractions is not None:
        tr, va, _te = spec.split_fractions
        order = rng.permutation(n)
        n_tr = int(round(tr * n))
        n_va = int(round(va * n))
        for j, row in enumerate(order):
            splits[row] = ("train" if j < n_tr
                           else "val" if j < n_tr + n_va else "test")

    es = EmbeddingSet(
        ids=ids,
        matrix=np.asarray(np.stack(vectors), dtype=np.float32),
        labels=tuple(labels),
        splits=tuple(splits),
        metadata=tuple({} for _ in range(n)),
        dataset_id=dataset_id,
        snapshot_version=1,
    )
    truth = {
        "layouts": truth_layouts,
        "families": families,
        "outliers": outlier_ids,
        "layout_centers": centers.tolist(),
        "family_centers": fam_centers.tolist(),
        "spec": {
            "n_layouts": spec.n_layouts,
            "samples_per_layout": list(spec.samples_per_layout),
            "dim": spec.dim,
            "rng_seed": spec.rng_seed,
            "intra_class_spread": spec.intra_class_spread,
            "inter_class_separation": spec.inter_class_separation,
            "fraud_families": [
                {"size": f.size, "offset_scale": f.offset_scale,
                 "template_jitter": f.template_jitter}
                for f in spec.fraud_families
            ],
            "outlier_count": spec.outlier_count,
            "outlier_magnitude": spec.outlier_magnitude,
            "split_fractions": (list(spec.split_fractions)
                                if spec.split_fractions else None),
            "detection_quantile": spec.detection_quantile,
        },
    }
    return es, truth


# --- in-memory store with snapshots ----------------------------------------------

@dataclass(frozen=True)
class SnapshotHandle:
    dataset_id: str
    snapshot_version: int


class Dataset:
    """A named embedding collection with immutable, versioned snapshots."""

    def __init__(self, embedding_set: EmbeddingSet, provenance: str = ""):
        if not embedding_set.dataset_id:
            raise ValidationError("dataset needs a non-empty id")
        self.dataset_id = embedding_set.dataset_id
        self.provenance = provenance
        self._snapshots: Dict[int, EmbeddingSet] = {
            embedding_set.snapshot_version: embedding_set}
        self._current = embedding_set.snapshot_version

    @property
    def current(self) -> EmbeddingSet:
        return self._snapshots[self._current]

    @property
    def snapshot_version(self) -> int:
        return self._current

    @property
    def dimension(self) -> int:
        return self.current.dimension

    def __len__(self) -> int:
        return len(self.current)

    def snapshot(self) -> SnapshotHandle:
        return SnapshotHandle(self.dataset_id, self._current)

    def at(self, version: int) -> EmbeddingSet:
        if version not in self._snapshots:
            raise StaleSnapshot(
                f"{self.dataset_id} has no snapshot version {version}")
        return self._snapshots[version]

    def mutate(self, records: Sequence[EmbeddingRecord]) -> EmbeddingSet:
        """Replace contents; bumps the snapshot version."""
        new_version = self._current + 1
        es = EmbeddingSet.from_records(records, dataset_id=self.dataset_id,
                                       snapshot_version=new_version)
        self._snapshots[new_version] = es
        self._current = new_version
        return es

    def set_labels(self, labels_by_id: Dict[str, Optional[str]]) -> EmbeddingSet:
        records = []
        for rec in self.current.to_records():
            if rec.sample_id in labels_by_id:
                rec = EmbeddingRecord(
                    sample_id=rec.sample_id, vector=rec.vector,
                    layout_label=labels_by_id[rec.sample_id],
                    split_tag=rec.split_tag, metadata=rec.metadata)
            records.append(rec)
        return self.mutate(records)

    def summary(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "snapshot_version": self._current,
            "count": len(self),
            "dimension": self.dimension if len(self) else 0,
            "provenance": self.provenance,
        }


class DataStore:
    """All datasets known to one process, with optional directory persistence."""

    def __init__(self, root: Optional[str] = None):
        self.root = root
        self._datasets: Dict[str, Dataset] = {}
        if root:
            os.makedirs(root, exist_ok=True)
            for name in sorted(os.listdir(root)):
                meta_path = os.path.join(root, name, "meta.json")
                data_path = os.path.join(root, name, "data.jsonl")
                if os.path.isfile(meta_path) and os.path.isfile(data_path):
                    with open(meta_path, "r", encoding="utf-8") as fh:
                        meta = json.load(fh)
                    es = import_embeddings(data_path, "jsonl", dataset_id=name)
                    es = EmbeddingSet(
                        ids=es.ids, matrix=es.matrix, labels=es.labels,
                        splits=es.splits, metadata=es.metadata,
                        dataset_id=name,
                        snapshot_version=int(meta.get("snapshot_version", 1)))
                    self._datasets[name] = Dataset(
                        es, provenance=meta.get("provenance", ""))

    def list(self) -> List[dict]:
        return [self._datasets[k].summary() for k in sorted(self._datasets)]

    def add(self, dataset: Dataset) -> Dataset:
        if dataset.dataset_id in self._datasets:
            raise DuplicateId(f"dataset {dataset.dataset_id!r} already exists")
        self._datasets[dataset.dataset_id] = dataset
        return dataset

    def get(self, dataset_id: str) -> Dataset:
        ds = self._datasets.get(dataset_id)
        if ds is None:
            raise UnknownDataset(f"no dataset {dataset_id!r}")
        return ds

    def delete(self, dataset_id: str) -> None:
        self.get(dataset_id)
        del self._datasets[dataset_id]

    def resolve(self, handle: SnapshotHandle) -> EmbeddingSet:
        ds = self._datasets.get(handle.dataset_id)
        if ds is None:
            raise StaleSnapshot(
                f"dataset {handle.dataset_id!r} no longer exists")
        return ds.at(handle.snapshot_version)

    def dataset_dir(self, dataset_id: str) -> str:
        if not self.root:
            raise IoError("store has no persistence directory")
        path = os.path.join(self.root, dataset_id)
        os.makedirs(path, exist_ok=True)
        return path

    def save(self, dataset_id: str, ground_truth: Optional[dict] = None) -> str:
        ds = self.get(dataset_id)
        path = self.dataset_dir(dataset_id)
        export_embeddings(ds.current, os.path.join(path, "data.jsonl"), "jsonl")
        with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as fh:
            json.dump(ds.summary(), fh, sort_keys=True, indent=2)
        if ground_truth is not None:
            with open(os.path.join(path, "ground_truth.json"), "w",
                      encoding="utf-8") as fh:
                json.dump(ground_truth, fh, sort_keys=True)
        return path
