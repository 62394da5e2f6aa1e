"""HTTP/JSON service for interactive triage.

Long computations (clustering, projection, training) run as background jobs
with polling; quick queries (expansion on a cached graph, anomaly listing,
queue reads) answer synchronously. All mutating endpoints accept a
client-supplied ``request_id`` and replay the stored response on retries, so
double submits never duplicate work or audit entries.
"""

import threading
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from fastapi import Body, Depends, FastAPI, Header, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .clustering import ClusterModel, DistanceMetric, clustering_metrics, kmeans, refine_clusters
from .datastore import DataStore, Dataset
from .discovery import (
    DEFAULT_K_NEIGHBORS,
    DEFAULT_MAX_HOPS,
    DEFAULT_THRESHOLD,
    TriageQueue,
    assemble_triage_queue,
    build_similarity_graph,
    detect_anomalous_clusters,
    expand_from_seeds,
    layout_centroids,
    zscore_anomalies,
)
from .errors import (
    JobCanceled,
    JobConflict,
    LayoutspaceError,
    NoKnownLayouts,
    UnknownCluster,
    UnknownJob,
    ValidationError,
)
from .losses import LossWeights
from .projection import ProjectionResult, tsne_project
from .training import TrainConfig, train_metric_head
from .vectors import EmbeddingRecord, EmbeddingSet

JOB_KINDS = ("kmeans", "tsne", "train", "metrics")

_HTTP_STATUS = {
    "unknown_dataset": 404,
    "unknown_cluster": 404,
    "unknown_item": 404,
    "unknown_job": 404,
    "unknown_seed": 404,
    "job_conflict": 409,
    "already_reviewed": 409,
    "duplicate_id": 409,
}


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _status_of(err: LayoutspaceError) -> int:
    if err.code in _HTTP_STATUS:
        return _HTTP_STATUS[err.code]
    if err.exit_code == 2:
        return 400
    if err.exit_code == 4:
        return 400
    return 500


@dataclass
class Job:
    job_id: str
    dataset_id: str
    kind: str
    params: dict
    state: str = "queued"
    progress: float = 0.0
    result: Optional[dict] = None
    error: Optional[str] = None
    cancel_event: threading.Event = field(default_factory=threading.Event)

    def to_json(self) -> dict:
        return {
            "job_id": self.job_id,
            "dataset_id": self.dataset_id,
            "kind": self.kind,
            "params": self.params,
            "state": self.state,
            "progress": round(self.progress, 4),
            "result": self.result,
            "error": self.error,
        }


class ServiceState:
    """Everything one service process knows, guarded by a single lock.

    Datasets and their snapshots are immutable, so reads need no locking;
    the lock serializes registry mutations (models, jobs, queues, replays).
    """

    def __init__(self, data_dir: Optional[str] = None):
        self.store = DataStore(data_dir)
        self.lock = threading.RLock()
        self.models: Dict[str, Dict[int, ClusterModel]] = {}
        self.projections: Dict[str, Dict[str, ProjectionResult]] = {}
        self.queues: Dict[str, TriageQueue] = {}
        self.jobs: Dict[str, Job] = {}
        self.active: Dict[Tuple[str, str], str] = {}
        self.replays: Dict[Tuple[str, str], dict] = {}
        self.graphs: Dict[Tuple, object] = {}
        self._job_counter = 0

    # -- replay registry ---------------------------------------------------

    def replay(self, endpoint: str, request_id: Optional[str]):
        if request_id is None:
            return None
        return self.replays.get((endpoint, str(request_id)))

    def remember(self, endpoint: str, request_id: Optional[str],
                 response: dict) -> dict:
        if request_id is not None:
            self.replays[(endpoint, str(request_id))] = response
        return response

    # -- models --------------------------------------------------------------

    def commit_model(self, model: ClusterModel) -> ClusterModel:
        with self.lock:
            versions = self.models.setdefault(model.dataset_id, {})
            model = replace(model, version=max(versions, default=0) + 1)
            versions[model.version] = model
            return model

    def model_of(self, dataset_id: str, version: Optional[int]) -> ClusterModel:
        versions = self.models.get(dataset_id, {})
        if not versions:
            raise UnknownCluster(
                f"dataset {dataset_id!r} has no cluster model yet")
        pick = version if version is not None else max(versions)
        if pick not in versions:
            raise UnknownCluster(f"no cluster model version {pick}")
        return versions[pick]

    # -- cached artifacts ------------------------------------------------------

    def graph_for(self, es: EmbeddingSet, k_neighbors: int,
                  min_similarity: Optional[float]):
        key = (es.dataset_id, es.snapshot_version, k_neighbors, min_similarity)
        with self.lock:
            if key not in self.graphs:
                self.graphs[key] = build_similarity_graph(
                    es, k_neighbors=k_neighbors, min_similarity=min_similarity)
            return self.graphs[key]

    def queue_for(self, dataset_id: str) -> TriageQueue:
        with self.lock:
            queue = self.queues.get(dataset_id)
            if queue is None:
                ds = self.store.get(dataset_id)
                model = self.model_of(dataset_id, None)
                scores = zscore_anomalies(model, ds.current)
                try:
                    flagged = detect_anomalous_clusters(
                        model, layout_centroids(ds.current, metric=model.metric))
                except NoKnownLayouts:
                    flagged = []
                items = assemble_triage_queue(model, ds.current,
                                              anomalies=scores, flagged=flagged)
                queue = TriageQueue(dataset_id, ds.snapshot_version, items)
                self.queues[dataset_id] = queue
            return queue

    # -- jobs -----------------------------------------------------------------

    def new_job(self, dataset_id: str, kind: str, params: dict) -> Job:
        with self.lock:
            active_id = self.active.get((dataset_id, kind))
            if active_id is not None:
                raise JobConflict(
                    f"a {kind} job is already running for {dataset_id!r}",
                    job_id=active_id)
            self._job_counter += 1
            job = Job(job_id=f"job-{self._job_counter:06d}",
                      dataset_id=dataset_id, kind=kind, params=params)
            self.jobs[job.job_id] = job
            self.active[(dataset_id, kind)] = job.job_id
            return job

    def job_of(self, job_id: str) -> Job:
        job = self.jobs.get(job_id)
        if job is None:
            raise UnknownJob(f"no job {job_id!r}")
        return job

    def finish_job(self, job: Job) -> None:
        with self.lock:
            if self.active.get((job.dataset_id, job.kind)) == job.job_id:
                del self.active[(job.dataset_id, job.kind)]


def _require(params: dict, allowed: Dict[str, object]) -> dict:
    unknown = set(params) - set(allowed)
    if unknown:
        raise ValidationError(f"unknown params: {sorted(unknown)}")
    return {key: params.get(key, default) for key, default in allowed.items()}


def _parse_metric(name) -> DistanceMetric:
    mapping = {"cosine": DistanceMetric.COSINE,
               "euclidean": DistanceMetric.EUCLIDEAN}
    if name not in mapping:
        raise ValidationError(f"unknown metric {name!r}")
    return mapping[name]


def _cancel_hook(job: Job, expected_calls: int):
    calls = {"n": 0}

    def check():
        if job.cancel_event.is_set():
            raise JobCanceled(f"job {job.job_id} canceled")
        calls["n"] += 1
        job.progress = min(0.95, calls["n"] / max(1, expected_calls))

    return check


def _run_kmeans(state: ServiceState, job: Job) -> dict:
    params = _require(job.params, {"k": None, "seed": 0, "metric": "cosine",
                                   "max_iter": 100})
    if params["k"] is None:
        raise ValidationError("kmeans job requires param 'k'")
    ds = state.store.get(job.dataset_id)
    model = kmeans(ds.current, k=int(params["k"]), rng_seed=int(params["seed"]),
                   metric=_parse_metric(params["metric"]),
                   max_iter=int(params["max_iter"]),
                   cancel_check=_cancel_hook(job, int(params["max_iter"])))
    model = state.commit_model(model)
    return {"model_version": model.version, "k": model.k,
            "inertia": model.inertia}


def _run_tsne(state: ServiceState, job: Job) -> dict:
    params = _require(job.params, {"perplexity": 30.0, "iterations": 1000,
                                   "seed": 0})
    ds = state.store.get(job.dataset_id)
    result = tsne_project(ds.current, perplexity=float(params["perplexity"]),
                          iterations=int(params["iterations"]),
                          rng_seed=int(params["seed"]),
                          cancel_check=_cancel_hook(
                              job, int(params["iterations"]) // 50))
    with state.lock:
        state.projections.setdefault(job.dataset_id, {})[job.job_id] = result
    return {"projection_job": job.job_id,
            "kl_divergence": result.kl_divergence}


def _run_train(state: ServiceState, job: Job) -> dict:
    params = _require(job.params, {
        "epochs": 12, "batch_size": 64, "stage_epochs": [4, 4],
        "learning_rates": [5e-4, 1e-5], "hidden": 1024, "dropout": 0.1,
        "weights": [1.0, 1.0, 0.003], "seed": 0,
    })
    if job.cancel_event.is_set():
        raise JobCanceled(f"job {job.job_id} canceled")
    ds = state.store.get(job.dataset_id)
    config = TrainConfig(
        weights=LossWeights(*[float(w) for w in params["weights"]]),
        epochs=int(params["epochs"]), batch_size=int(params["batch_size"]),
        stage_epochs=tuple(int(e) for e in params["stage_epochs"]),
        learning_rates=tuple(float(r) for r in params["learning_rates"]),
        hidden=int(params["hidden"]), dropout_rate=float(params["dropout"]),
        rng_seed=int(params["seed"]))
    result = train_metric_head(ds.current.labeled_subset(), config)
    return {"best_epoch": result.best_epoch,
            "history": _jsonable(list(result.history))}


def _run_metrics(state: ServiceState, job: Job) -> dict:
    params = _require(job.params, {"labels": "layout", "model": None,
                                   "metric": "cosine"})
    ds = state.store.get(job.dataset_id)
    metric = _parse_metric(params["metric"])
    if params["labels"] == "layout":
        subset = ds.current.labeled_subset()
        if len(subset) == 0:
            raise NoKnownLayouts("dataset has no layout labels")
        stats = clustering_metrics(subset.float64(), subset.labels, metric)
        name = "layout-labels"
    elif params["labels"] == "cluster":
        model = state.model_of(job.dataset_id, params["model"])
        rows = [i for i, sid in enumerate(ds.current.ids)
                if sid in model.assignments]
        labels = [model.assignments[ds.current.ids[i]] for i in rows]
        stats = clustering_metrics(ds.current.float64()[rows], labels, metric)
        name = f"cluster-model-v{model.version}"
    else:
        raise ValidationError("labels must be 'layout' or 'cluster'")
    return {"configuration": name, **stats.as_row()}


_RUNNERS = {"kmeans": _run_kmeans, "tsne": _run_tsne, "train": _run_train,
            "metrics": _run_metrics}


def _job_thread(state: ServiceState, job: Job) -> None:
    job.state = "running"
    try:
        result = _RUNNERS[job.kind](state, job)
    except JobCanceled:
        job.state = "canceled"
    except LayoutspaceError as err:
        job.error = f"{err.code}: {err}"
        job.state = "failed"
    except Exception as exc:  # noqa: BLE001 — background thread must not die silently
        job.error = str(exc)
        job.state = "failed"
    else:
        job.result = _jsonable(result)
        job.progress = 1.0
        job.state = "done"
    finally:
        state.finish_job(job)


def _page(args_limit: Optional[int], offset: int, rows: List[dict]) -> dict:
    total = len(rows)
    if offset:
        rows = rows[offset:]
    if args_limit is not None:
        rows = rows[:args_limit]
    return {"total": total, "offset": offset, "limit": args_limit,
            "items": rows}


def create_app(data_dir: Optional[str] = None,
               token: Optional[str] = None) -> FastAPI:
    state = ServiceState(data_dir)
    app = FastAPI(title="layoutspace triage service", openapi_url=None)
    app.state.service = state
    # the browser UI is served from its own origin and authenticates with a
    # bearer header, so preflights must succeed for any configured endpoint
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    def require_auth(authorization: Optional[str] = Header(default=None)):
        if token is None:
            return
        if authorization != f"Bearer {token}":
            raise _AuthError()

    class _AuthError(Exception):
        pass

    @app.exception_handler(_AuthError)
    def _auth_error(_request: Request, _exc: _AuthError):
        return JSONResponse(status_code=401, content={
            "code": "unauthorized", "message": "missing or bad bearer token",
            "detail": {}})

    @app.exception_handler(LayoutspaceError)
    def _domain_error(_request: Request, exc: LayoutspaceError):
        return JSONResponse(status_code=_status_of(exc), content={
            "code": exc.code, "message": str(exc),
            "detail": _jsonable(exc.detail)})

    @app.exception_handler(RequestValidationError)
    def _body_error(_request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={
            "code": "validation", "message": "malformed request",
            "detail": {"errors": _jsonable(exc.errors())}})

    guarded = [Depends(require_auth)]

    @app.get("/health")
    def health():
        return {"status": "ok"}

    # -- datasets ---------------------------------------------------------------

    @app.get("/datasets", dependencies=guarded)
    def list_datasets():
        with state.lock:
            return {"datasets": state.store.list()}

    @app.post("/datasets", dependencies=guarded)
    def import_dataset(payload: dict = Body(...)):
        request_id = payload.get("request_id")
        with state.lock:
            replayed = state.replay("datasets", request_id)
            if replayed is not None:
                return replayed
            dataset_id = payload.get("dataset_id")
            if not dataset_id or not isinstance(dataset_id, str):
                raise ValidationError("dataset_id is required")
            rows = payload.get("records")
            if not isinstance(rows, list) or not rows:
                raise ValidationError("records must be a non-empty list")
            records = []
            for i, row in enumerate(rows):
                if not isinstance(row, dict) or "id" not in row or "vec" not in row:
                    raise ValidationError(f"record {i} needs 'id' and 'vec'")
                records.append(EmbeddingRecord(
                    sample_id=str(row["id"]),
                    vector=np.asarray(row["vec"], dtype=np.float32),
                    layout_label=row.get("label"),
                    split_tag=row.get("split"),
                    metadata=dict(row.get("meta", {}))))
            es = EmbeddingSet.from_records(records, dataset_id=dataset_id,
                                           snapshot_version=1)
            ds = state.store.add(Dataset(
                es, provenance=str(payload.get("provenance", "api import"))))
            return state.remember("datasets", request_id, ds.summary())

    @app.get("/datasets/{dataset_id}", dependencies=guarded)
    def get_dataset(dataset_id: str):
        ds = state.store.get(dataset_id)
        with state.lock:
            versions = sorted(state.models.get(dataset_id, {}))
            projections = sorted(state.projections.get(dataset_id, {}))
        return {**ds.summary(), "model_versions": versions,
                "projection_jobs": projections,
                "has_queue": dataset_id in state.queues}

    # -- jobs -------------------------------------------------------------------

    @app.post("/datasets/{dataset_id}/jobs", dependencies=guarded)
    def submit_job(dataset_id: str, payload: dict = Body(...)):
        state.store.get(dataset_id)
        request_id = payload.get("request_id")
        with state.lock:
            replayed = state.replay("jobs", request_id)
            if replayed is not None:
                return replayed
            kind = payload.get("kind")
            if kind not in JOB_KINDS:
                raise ValidationError(
                    f"kind must be one of {sorted(JOB_KINDS)}")
            params = payload.get("params", {})
            if not isinstance(params, dict):
                raise ValidationError("params must be an object")
            job = state.new_job(dataset_id, kind, params)
        thread = threading.Thread(target=_job_thread, args=(state, job),
                                  daemon=True, name=job.job_id)
        thread.start()
        with state.lock:
            return state.remember("jobs", request_id, {"job_id": job.job_id,
                                                       "kind": kind})

    @app.get("/jobs/{job_id}", dependencies=guarded)
    def job_status(job_id: str):
        return state.job_of(job_id).to_json()

    @app.delete("/jobs/{job_id}", dependencies=guarded)
    def cancel_job(job_id: str):
        job = state.job_of(job_id)
        job.cancel_event.set()
        return {"job_id": job.job_id, "state": job.state, "canceling": True}

    # -- clusters ---------------------------------------------------------------

    @app.get("/datasets/{dataset_id}/clusters", dependencies=guarded)
    def cluster_summary(dataset_id: str, model: Optional[int] = Query(None)):
        state.store.get(dataset_id)
        picked = state.model_of(dataset_id, model)
        return _jsonable(picked.summary())

    @app.get("/datasets/{dataset_id}/clusters/{cluster_id}/members",
             dependencies=guarded)
    def cluster_members(dataset_id: str, cluster_id: int,
                        sort: str = Query("id"),
                        limit: Optional[int] = Query(None, ge=1),
                        offset: int = Query(0, ge=0),
                        model: Optional[int] = Query(None)):
        ds = state.store.get(dataset_id)
        picked = state.model_of(dataset_id, model)
        if cluster_id not in picked.centroids:
            raise UnknownCluster(f"no cluster {cluster_id}")
        by_id = {s.sample_id: s for s in zscore_anomalies(picked, ds.current)
                 if s.cluster_id == cluster_id}
        label_of = dict(zip(ds.current.ids, ds.current.labels))
        rows = [{"sample_id": sid, "z": score.z,
                 "centroid_distance": score.centroid_distance,
                 "label": label_of.get(sid)}
                for sid, score in by_id.items()]
        if sort == "z":
            rows.sort(key=lambda r: (-r["z"], r["sample_id"]))
        elif sort == "id":
            rows.sort(key=lambda r: r["sample_id"])
        else:
            raise ValidationError("sort must be 'id' or 'z'")
        return _jsonable(_page(limit, offset, rows))

    @app.post("/datasets/{dataset_id}/refine", dependencies=guarded)
    def refine(dataset_id: str, payload: dict = Body(...)):
        ds = state.store.get(dataset_id)
        request_id = payload.get("request_id")
        with state.lock:
            replayed = state.replay("refine", request_id)
            if replayed is not None:
                return replayed
            ops = payload.get("ops")
            if not isinstance(ops, list):
                raise ValidationError("ops must be a list of operations")
            base = state.model_of(dataset_id, payload.get("model"))
            refined = refine_clusters(base, ds.current, ops)
            refined = state.commit_model(refined)
            applied = list(refined.ops_log[len(base.ops_log):])
            return state.remember("refine", request_id, _jsonable({
                "model_version": refined.version, "base_version": base.version,
                "k": refined.k, "ops_log": applied}))

    # -- projections -----------------------------------------------------------

    @app.get("/datasets/{dataset_id}/projection", dependencies=guarded)
    def projection_rows(dataset_id: str, job: Optional[str] = Query(None),
                        model: Optional[int] = Query(None)):
        ds = state.store.get(dataset_id)
        with state.lock:
            stored = state.projections.get(dataset_id, {})
            if not stored:
                raise UnknownJob(
                    f"dataset {dataset_id!r} has no finished projection")
            key = job if job is not None else sorted(stored)[-1]
            if key not in stored:
                raise UnknownJob(f"no projection for job {key!r}")
            result = stored[key]
        assignments = {}
        if state.models.get(dataset_id):
            assignments = state.model_of(dataset_id, model).assignments
        label_of = dict(zip(ds.current.ids, ds.current.labels))
        rows = [{"sample_id": sid, "x": float(x), "y": float(y),
                 "label": label_of.get(sid),
                 "cluster_id": assignments.get(sid)}
                for sid, (x, y) in zip(result.ids, result.coordinates)]
        return {"job": key, "kl_divergence": result.kl_divergence,
                "params": _jsonable(result.params), "rows": rows}

    # -- discovery -------------------------------------------------------------

    @app.get("/datasets/{dataset_id}/anomalies", dependencies=guarded)
    def anomalies(dataset_id: str, top: int = Query(25, ge=1),
                  model: Optional[int] = Query(None)):
        ds = state.store.get(dataset_id)
        picked = state.model_of(dataset_id, model)
        scores = zscore_anomalies(picked, ds.current)[:top]
        return {"model_version": picked.version,
                "anomalies": [{"sample_id": s.sample_id, "z": s.z,
                               "cluster_id": s.cluster_id,
                               "centroid_distance": s.centroid_distance}
                              for s in scores]}

    @app.post("/datasets/{dataset_id}/expand", dependencies=guarded)
    def expand(dataset_id: str, payload: dict = Body(...)):
        ds = state.store.get(dataset_id)
        request_id = payload.get("request_id")
        with state.lock:
            replayed = state.replay("expand", request_id)
            if replayed is not None:
                return replayed
        seeds = payload.get("seeds") or []
        if not seeds:
            queue = state.queues.get(dataset_id)
            seeds = sorted(queue.seeds) if queue else []
        if not seeds:
            raise ValidationError("no seeds given and none confirmed yet")
        graph = state.graph_for(
            ds.current, int(payload.get("k_neighbors", DEFAULT_K_NEIGHBORS)),
            payload.get("min_similarity"))
        result = expand_from_seeds(
            graph, [str(s) for s in seeds],
            threshold=float(payload.get("threshold", DEFAULT_THRESHOLD)),
            max_hops=int(payload.get("max_hops", DEFAULT_MAX_HOPS)))
        response = _jsonable({
            "seeds": sorted(result.seed_ids),
            "params": result.params,
            "candidates": [{"sample_id": c.sample_id, "score": c.score,
                            "hops": c.hops} for c in result.candidates]})
        with state.lock:
            return state.remember("expand", request_id, response)

    # -- review ------------------------------------------------------------------

    @app.get("/datasets/{dataset_id}/queue", dependencies=guarded)
    def queue_listing(dataset_id: str, limit: Optional[int] = Query(None, ge=1),
                      offset: int = Query(0, ge=0)):
        state.store.get(dataset_id)
        queue = state.queue_for(dataset_id)
        rows = [it.to_json() for it in queue.ordered_items()]
        page = _page(limit, offset, rows)
        page["seeds"] = sorted(queue.seeds)
        page["audit_length"] = len(queue.audit)
        return _jsonable(page)

    @app.post("/verdicts", dependencies=guarded)
    def record_verdict(payload: dict = Body(...)):
        dataset_id = payload.get("dataset_id")
        if not dataset_id:
            raise ValidationError("dataset_id is required")
        state.store.get(dataset_id)
        for key in ("item_id", "verdict", "reviewer"):
            if not payload.get(key):
                raise ValidationError(f"{key} is required")
        request_id = payload.get("request_id")
        with state.lock:
            replayed = state.replay("verdicts", request_id)
            if replayed is not None:
                return replayed
            queue = state.queue_for(dataset_id)
            item = queue.record_verdict(str(payload["item_id"]),
                                        str(payload["verdict"]),
                                        str(payload["reviewer"]))
            response = _jsonable({"item": item.to_json(),
                                  "audit_entry": queue.audit[-1],
                                  "seeds": sorted(queue.seeds)})
            return state.remember("verdicts", request_id, response)

    return app
