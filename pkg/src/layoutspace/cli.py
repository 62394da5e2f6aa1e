"""Command-line front door: one subcommand per pipeline stage.

Every subcommand is a thin wrapper over the library so scripted runs and
direct library calls produce identical artifacts. Results print as small
human-readable tables by default or as stable-ordered JSON with --json.

Exit codes: 0 success, 2 validation error, 3 computation error, 4 I/O error.
"""

import argparse
import json
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .clustering import (
    DistanceMetric,
    clustering_metrics,
    kmeans,
    model_from_json,
    refine_clusters,
    select_k,
)
from .datastore import (
    DataStore,
    Dataset,
    SyntheticSpec,
    export_embeddings,
    import_embeddings,
    synthesize,
)
from .discovery import (
    DEFAULT_DISTANCE_QUANTILE,
    DEFAULT_K_NEIGHBORS,
    DEFAULT_MAX_HOPS,
    DEFAULT_MIN_SIZE,
    DEFAULT_THRESHOLD,
    TriageQueue,
    assemble_triage_queue,
    build_similarity_graph,
    detect_anomalous_clusters,
    expand_from_seeds,
    layout_centroids,
    queue_from_json,
    zscore_anomalies,
)
from .errors import (
    ConfigError,
    IoError,
    LayoutspaceError,
    NoKnownLayouts,
    UnknownCluster,
    ValidationError,
)
from .losses import LossWeights
from .projection import tsne_project
from .report import metrics_table, sample_rows, write_report
from .training import (
    ClassifierConfig,
    TrainConfig,
    train_layout_classifier,
    train_metric_head,
)
from .vectors import EmbeddingRecord, EmbeddingSet
from .nets import classify_layout

DEFAULT_DATA_DIR = "layoutspace-data"


# --- plumbing -----------------------------------------------------------------

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


def load_config(path: str) -> Dict[str, object]:
    """Key/value defaults file: one ``key = value`` per line, # comments."""
    if not os.path.exists(path):
        raise IoError(f"no such config file: {path}")
    out: Dict[str, object] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            key = key.strip().replace("-", "_")
            value = value.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            try:
                out[key] = json.loads(value)
            except json.JSONDecodeError:
                out[key] = value.strip("\"'")
    return out


def _resolve_data_dir(args, config: Dict[str, object]) -> str:
    if getattr(args, "data_dir", None):
        return args.data_dir
    if "data_dir" in config:
        return str(config["data_dir"])
    return os.environ.get("LAYOUTSPACE_DATA_DIR", DEFAULT_DATA_DIR)


def _apply_config(args, config: Dict[str, object]) -> None:
    """Config fills in any option the command line left at None."""
    for key, value in config.items():
        if getattr(args, key, "\0missing") is None:
            setattr(args, key, value)


def _store(args) -> DataStore:
    os.makedirs(args.data_dir, exist_ok=True)
    return DataStore(args.data_dir)


def _dataset(store: DataStore, args) -> Dataset:
    if not getattr(args, "dataset", None):
        raise ValidationError("--dataset is required")
    return store.get(args.dataset)


def _models_dir(store: DataStore, dataset_id: str) -> str:
    path = os.path.join(store.dataset_dir(dataset_id), "models")
    os.makedirs(path, exist_ok=True)
    return path


def _save_model(store: DataStore, model) -> str:
    path = os.path.join(_models_dir(store, model.dataset_id),
                        f"{model.version}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(model.to_json()), fh, sort_keys=True)
    return path


def _load_model(store: DataStore, dataset_id: str, version: Optional[int]):
    models = _models_dir(store, dataset_id)
    versions = sorted(int(os.path.splitext(name)[0])
                      for name in os.listdir(models) if name.endswith(".json"))
    if not versions:
        raise UnknownCluster(f"dataset {dataset_id!r} has no cluster model; "
                             "run `cluster` first")
    pick = version if version is not None else versions[-1]
    path = os.path.join(models, f"{pick}.json")
    if not os.path.exists(path):
        raise UnknownCluster(f"no cluster model version {pick}")
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_json(json.load(fh))


def _queue_paths(store: DataStore, dataset_id: str):
    base = store.dataset_dir(dataset_id)
    return os.path.join(base, "queue.json"), os.path.join(base, "audit.ndjson")


_METRIC_NAMES = {"cosine": DistanceMetric.COSINE,
                 "euclidean": DistanceMetric.EUCLIDEAN}


def _metric(args) -> DistanceMetric:
    try:
        return _METRIC_NAMES[args.metric]
    except KeyError:
        raise ValidationError(
            f"unknown metric {args.metric!r} (choose cosine or euclidean)"
        ) from None


def _seed_list(args) -> List[str]:
    seeds: List[str] = []
    for chunk in args.seeds or []:
        seeds.extend(s for s in chunk.split(",") if s)
    if not seeds:
        raise ValidationError("--seeds is required (comma-separated sample ids)")
    return seeds


def _print(args, payload: dict, human: str = "") -> None:
    if args.json:
        print(json.dumps(_jsonable(payload), sort_keys=True, indent=2))
    elif human:
        print(human)


def _metrics_row(name: str, values) -> str:
    return (f"{name:<24} {values['intra_class']:>12.4f} "
            f"{values['inter_class']:>12.4f} {values['silhouette']:>12.4f} "
            f"{values['dbi']:>12.4f}")


METRICS_HEADER = (f"{'configuration':<24} {'intra-class':>12} {'inter-class':>12} "
                  f"{'silhouette':>12} {'dbi':>12}")


# --- subcommand handlers --------------------------------------------------------

def cmd_import(args) -> int:
    store = _store(args)
    es = import_embeddings(args.file, args.format, dataset_id=args.dataset)
    store.add(Dataset(es, provenance=f"imported from {os.path.basename(args.file)}"))
    store.save(es.dataset_id)
    summary = store.get(es.dataset_id).summary()
    _print(args, summary,
           f"imported {summary['count']} samples into {es.dataset_id!r} "
           f"(dim {summary['dimension']})")
    return 0


def cmd_export(args) -> int:
    store = _store(args)
    ds = _dataset(store, args)
    export_embeddings(ds.current, args.out, args.format)
    _print(args, {"dataset_id": ds.dataset_id, "out": args.out,
                  "format": args.format, "count": len(ds)},
           f"wrote {len(ds)} samples to {args.out}")
    return 0


def cmd_synth(args) -> int:
    store = _store(args)
    with open(args.spec, "r", encoding="utf-8") as fh:
        spec_obj = json.load(fh)
    if args.seed is not None:
        spec_obj["rng_seed"] = args.seed
    spec = SyntheticSpec.from_json(spec_obj)
    es, truth = synthesize(spec, dataset_id=args.dataset or "synthetic")
    store.add(Dataset(es, provenance="synthesized"))
    store.save(es.dataset_id, ground_truth=truth)
    payload = {
        "dataset_id": es.dataset_id,
        "count": len(es),
        "dimension": int(es.matrix.shape[1]),
        "layouts": spec.n_layouts,
        "families": len(truth["families"]),
        "outliers": len(truth["outliers"]),
    }
    _print(args, payload,
           f"synthesized {payload['count']} samples "
           f"({payload['layouts']} layouts, {payload['families']} families, "
           f"{payload['outliers']} outliers) into {es.dataset_id!r}")
    return 0


def cmd_train(args) -> int:
    store = _store(args)
    ds = _dataset(store, args)
    weights = LossWeights(*(args.weights or (1.0, 1.0, 0.003)))
    config = TrainConfig(
        weights=weights,
        scale=args.scale,
        margin=args.margin,
        temperature=args.temperature,
        epochs=args.epochs,
        batch_size=args.batch_size,
        stage_epochs=tuple(args.stage_epochs),
        learning_rates=tuple(args.learning_rates),
        hidden=args.hidden,
        dropout_rate=args.dropout,
        rng_seed=args.seed,
    )
    result = train_metric_head(ds.current.labeled_subset(), config)
    ckpt = args.checkpoint or os.path.join(store.dataset_dir(ds.dataset_id),
                                           "checkpoints", "metric.ckpt")
    os.makedirs(os.path.dirname(ckpt), exist_ok=True)
    save_checkpoint(ckpt, result.model.tensors(), {
        "rng_seed": config.rng_seed,
        "epochs": config.epochs,
        "weights": [weights.arcface, weights.supcon, weights.center],
        "best_epoch": result.best_epoch,
        "class_names": list(result.model.class_names),
        "history": _jsonable(list(result.history)),
    })
    if args.embed_to:
        records = [
            EmbeddingRecord(sample_id=rec.sample_id,
                            vector=emb,
                            layout_label=rec.layout_label,
                            split_tag=rec.split_tag,
                            metadata=dict(rec.metadata))
            for rec, emb in zip(ds.current.to_records(),
                                result.model.embed(ds.current.float64()))
        ]
        embedded = EmbeddingSet.from_records(records, dataset_id=args.embed_to,
                                             snapshot_version=1)
        store.add(Dataset(embedded, provenance=f"embedded from {ds.dataset_id}"))
        store.save(args.embed_to)
    payload = {
        "dataset_id": ds.dataset_id,
        "checkpoint": ckpt,
        "best_epoch": result.best_epoch,
        "history": _jsonable(list(result.history)),
        "embedded_dataset": args.embed_to,
    }
    lines = [f"{'epoch':>5} {'stage':>5} {'loss':>10} {'val sil':>9} {'val dbi':>9}"]
    lines += [f"{h['epoch']:>5} {h['stage']:>5} {h['loss']:>10.4f} "
              f"{h['val_silhouette']:>9.4f} {h['val_dbi']:>9.4f}"
              for h in result.history]
    lines.append(f"best epoch {result.best_epoch}; checkpoint {ckpt}")
    _print(args, payload, "\n".join(lines))
    return 0


def cmd_classify(args) -> int:
    store = _store(args)
    ds = _dataset(store, args)
    config = ClassifierConfig(epochs=args.epochs, learning_rate=args.lr,
                              dropout_rate=args.dropout, rng_seed=args.seed)
    result = train_layout_classifier(ds.current, config)
    if args.checkpoint:
        os.makedirs(os.path.dirname(args.checkpoint) or ".", exist_ok=True)
        save_checkpoint(args.checkpoint, result.classifier.params(), {
            "class_names": list(result.class_names),
            "rng_seed": config.rng_seed,
            "accuracy": result.accuracy,
        })
    predictions = {}
    if args.id:
        row_of = {sid: i for i, sid in enumerate(ds.current.ids)}
        for sid in args.id:
            if sid not in row_of:
                raise ValidationError(f"unknown sample id {sid!r}")
            label, probs = classify_layout(ds.current.matrix[row_of[sid]],
                                           result.classifier)
            predictions[sid] = {"label": label,
                                "probability": float(np.max(probs))}
    payload = {
        "dataset_id": ds.dataset_id,
        "accuracy": result.accuracy,
        "classes": list(result.class_names),
        "excluded_classes": list(result.excluded_classes),
        "holdout_size": len(result.holdout_ids),
        "predictions": predictions,
    }
    human = [f"held-out accuracy {result.accuracy:.4f} over "
             f"{len(result.class_names)} classes "
             f"({len(result.holdout_ids)} holdout samples)"]
    if result.excluded_classes:
        human.append(f"excluded rare classes: {', '.join(result.excluded_classes)}")
    human += [f"{sid}: {p['label']} (p={p['probability']:.3f})"
              for sid, p in predictions.items()]
    _print(args, payload, "\n".join(human))
    return 0


def cmd_metrics(args) -> int:
    store = _store(args)
    ds = _dataset(store, args)
    metric = _metric(args)
    if args.labels == "layout":
        subset = ds.current.labeled_subset()
        if len(subset) == 0:
            raise NoKnownLayouts("dataset has no layout labels")
        name = "layout-labels"
        stats = clustering_metrics(subset.float64(), subset.labels, metric)
    elif args.labels == "cluster":
        model = _load_model(store, ds.dataset_id, args.model)
        labels = [model.assignments[sid] for sid in ds.current.ids
                  if sid in model.assignments]
        rows = [i for i, sid in enumerate(ds.current.ids)
                if sid in model.assignments]
        name = f"cluster-model-v{model.version}"
        stats = clustering_metrics(ds.current.float64()[rows], labels, metric)
    else:
        raise ValidationError("--labels must be 'layout' or 'cluster'")
    values = stats.as_row()
    if args.report:
        os.makedirs(args.report, exist_ok=True)
        metrics_table({name: values},
                      os.path.join(args.report, "metrics.csv"),
                      os.path.join(args.report, "metrics.png"))
    _print(args, {"dataset_id": ds.dataset_id, "metric": metric.value,
                  "configuration": name, **values},
           METRICS_HEADER + "\n" + _metrics_row(name, values))
    return 0


def cmd_cluster(args) -> int:
    store = _store(args)
    ds = _dataset(store, args)
    model = kmeans(ds.current, k=args.k, rng_seed=args.seed,
                   metric=_metric(args), max_iter=args.max_iter)
    models = _models_dir(store, ds.dataset_id)
    for stale in os.listdir(models):
        os.remove(os.path.join(models, stale))
    path = _save_model(store, model)
    summary = model.summary()
    sizes = {c["cluster_id"]: c["size"] for c in summary["clusters"]}
    _print(args, {**summary, "path": path},
           f"k={model.k} inertia={model.inertia:.6f} version={model.version}\n"
           f"cluster sizes: {sizes}\nmodel written to {path}")
    return 0


def cmd_select_k(args) -> int:
    store = _store(args)
    ds = _dataset(store, args)
    if args.k_max < args.k_min:
        raise ValidationError("--k-max must be >= --k-min")
    result = select_k(ds.current, range(args.k_min, args.k_max + 1),
                      rng_seed=args.seed, metric=_metric(args))
    lines = [f"{'k':>4} {'silhouette':>12}"]
    lines += [f"{k:>4} {result['scores'][k]:>12.4f}"
              for k in sorted(result["scores"])]
    lines.append(f"selected k = {result['k']}")
    _print(args, {"dataset_id": ds.dataset_id, "k": result["k"],
                  "scores": {str(k): v for k, v in result["scores"].items()}},
           "\n".join(lines))
    return 0


def cmd_tsne(args) -> int:
    store = _store(args)
    ds = _dataset(store, args)
    result = tsne_project(ds.current, perplexity=args.perplexity,
                          iterations=args.iterations, rng_seed=args.seed)
    out = args.out or os.path.join(store.dataset_dir(ds.dataset_id),
                                   "projections", "tsne.json")
    os.makedirs(os.path.dirname(out), exist_ok=True)
    payload = {
        "dataset_id": ds.dataset_id,
        "snapshot_version": ds.snapshot_version,
        "params": _jsonable(result.params),
        "kl_divergence": result.kl_divergence,
        "points": {sid: [float(x), float(y)]
                   for sid, (x, y) in zip(result.ids, result.coordinates)},
    }
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
    report_paths = {}
    if args.report:
        model = None
        if args.model is not None:
            model = _load_model(store, ds.dataset_id, args.model)
        report_paths = write_report(args.report, ds.current, model=model,
                                    projection=result)
    _print(args, {"out": out, "kl_divergence": result.kl_divergence,
                  "iterations": args.iterations, "report": report_paths},
           f"projected {len(result.ids)} samples "
           f"(KL {result.kl_divergence:.4f}); wrote {out}"
           + (f"\nreport in {args.report}" if args.report else ""))
    return 0


def cmd_refine(args) -> int:
    store = _store(args)
    ds = _dataset(store, args)
    model = _load_model(store, ds.dataset_id, args.model)
    with open(args.ops, "r", encoding="utf-8") as fh:
        ops = json.load(fh)
    if not isinstance(ops, list):
        raise ValidationError("ops file must hold a JSON list of operations")
    refined = refine_clusters(model, ds.current, ops)
    path = _save_model(store, refined)
    applied = [entry for entry in refined.ops_log[len(model.ops_log):]]
    lines = [f"version {model.version} -> {refined.version}; "
             f"k {model.k} -> {refined.k}"]
    lines += [json.dumps(_jsonable(entry), sort_keys=True) for entry in applied]
    _print(args, {"version": refined.version, "k": refined.k,
                  "ops_log": _jsonable(list(applied)), "path": path},
           "\n".join(lines))
    return 0


def cmd_anomalies(args) -> int:
    store = _store(args)
    ds = _dataset(store, args)
    model = _load_model(store, ds.dataset_id, args.model)
    scores = zscore_anomalies(model, ds.current)
    top = scores[:args.top] if args.top else scores
    flagged = []
    if args.flag_clusters:
        centroids = layout_centroids(ds.current, metric=model.metric)
        flagged = detect_anomalous_clusters(
            model, centroids, min_size=args.min_size,
            distance_quantile=args.quantile)
    report_paths = {}
    if args.report:
        report_paths = write_report(args.report, ds.current, model=model,
                                    anomalies=scores)
    payload = {
        "dataset_id": ds.dataset_id,
        "anomalies": [{"sample_id": s.sample_id, "z": s.z,
                       "cluster_id": s.cluster_id,
                       "centroid_distance": s.centroid_distance}
                      for s in top],
        "flagged_clusters": [{"cluster_id": f.cluster_id, "size": f.size,
                              "min_distance_to_known_layout":
                              f.min_distance_to_known_layout}
                             for f in flagged],
        "report": report_paths,
    }
    lines = [f"{'sample':<16} {'cluster':>8} {'z':>9} {'distance':>9}"]
    lines += [f"{s.sample_id:<16} {s.cluster_id:>8} {s.z:>9.3f} "
              f"{s.centroid_distance:>9.4f}" for s in top]
    if args.flag_clusters:
        lines.append(f"flagged clusters: "
                     f"{[f.cluster_id for f in flagged] or 'none'}")
    _print(args, payload, "\n".join(lines))
    return 0


def cmd_graph(args) -> int:
    store = _store(args)
    ds = _dataset(store, args)
    graph = build_similarity_graph(ds.current, k_neighbors=args.k_neighbors,
                                   min_similarity=args.min_similarity)
    payload = {
        "dataset_id": ds.dataset_id,
        "params": _jsonable(graph.params),
        "edge_count": graph.edge_count,
        "nodes": len(graph.ids),
    }
    if args.out:
        edges = sorted(
            (a, b, w)
            for a, neigh in graph.neighbors.items()
            for b, w in neigh if a < b)
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({**payload,
                       "edges": [[a, b, float(w)] for a, b, w in edges]},
                      fh, sort_keys=True)
        payload["out"] = args.out
    _print(args, payload,
           f"{payload['nodes']} nodes, {payload['edge_count']} edges"
           + (f"; wrote {args.out}" if args.out else ""))
    return 0


def cmd_expand(args) -> int:
    store = _store(args)
    ds = _dataset(store, args)
    seeds = _seed_list(args)
    graph = build_similarity_graph(ds.current, k_neighbors=args.k_neighbors,
                                   min_similarity=args.min_similarity)
    result = expand_from_seeds(graph, seeds, threshold=args.threshold,
                               max_hops=args.max_hops)
    payload = {
        "dataset_id": ds.dataset_id,
        "seeds": sorted(result.seed_ids),
        "params": _jsonable(result.params),
        "candidates": [{"sample_id": c.sample_id, "score": c.score,
                        "hops": c.hops} for c in result.candidates],
    }
    lines = [f"{'sample':<16} {'score':>8} {'hops':>5}"]
    lines += [f"{c.sample_id:<16} {c.score:>8.4f} {c.hops:>5}"
              for c in result.candidates]
    if not result.candidates:
        lines = ["no candidates"]
    _print(args, payload, "\n".join(lines))
    return 0


def cmd_queue(args) -> int:
    store = _store(args)
    ds = _dataset(store, args)
    model = _load_model(store, ds.dataset_id, args.model)
    scores = zscore_anomalies(model, ds.current)
    try:
        centroids = layout_centroids(ds.current, metric=model.metric)
        flagged = detect_anomalous_clusters(
            model, centroids, min_size=args.min_size,
            distance_quantile=args.quantile)
    except NoKnownLayouts:
        flagged = []
    expansion = None
    if args.seeds:
        graph = build_similarity_graph(ds.current, k_neighbors=args.k_neighbors)
        expansion = expand_from_seeds(graph, _seed_list(args),
                                      threshold=args.threshold,
                                      max_hops=args.max_hops)
    queue_path, audit_path = _queue_paths(store, ds.dataset_id)
    items = assemble_triage_queue(model, ds.current, anomalies=scores,
                                  flagged=flagged, expansion=expansion)
    queue = TriageQueue(ds.dataset_id, ds.snapshot_version, items,
                        audit_path=audit_path)
    with open(queue_path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(queue.to_json()), fh, sort_keys=True)
    items = queue.ordered_items()
    shown = items[:args.top] if args.top else items
    lines = [f"{'item':<24} {'kind':<8} {'priority':>9} {'provenance':<18}"]
    lines += [f"{it.item_id:<24} {it.kind:<8} {it.priority:>9.4f} "
              f"{it.provenance:<18}" for it in shown]
    lines.append(f"{len(items)} items; queue written to {queue_path}")
    _print(args, {"queue": queue_path, "audit": audit_path,
                  "items": [it.to_json() for it in items]},
           "\n".join(lines))
    return 0


def cmd_verdict(args) -> int:
    store = _store(args)
    ds = _dataset(store, args)
    queue_path, audit_path = _queue_paths(store, ds.dataset_id)
    if not os.path.exists(queue_path):
        raise IoError(f"no queue for dataset {ds.dataset_id!r}; run `queue` first")
    with open(queue_path, "r", encoding="utf-8") as fh:
        queue = queue_from_json(json.load(fh), audit_path=audit_path)
    item = queue.record_verdict(args.item, args.verdict, args.reviewer)
    with open(queue_path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(queue.to_json()), fh, sort_keys=True)
    _print(args, {"item": item.to_json(), "audit": queue.audit[-1]},
           f"{item.item_id}: {item.review_state} by {item.reviewer}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(data_dir=args.data_dir, token=args.token)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_selftest(args) -> int:
    failures = _run_selftest(verbose=not args.json)
    _print(args, {"failures": failures, "ok": not failures},
           "" if failures else "all selftests passed")
    return 0 if not failures else 3


# --- selftest oracles ------------------------------------------------------------

def _brute_silhouette(vectors: np.ndarray, labels: np.ndarray) -> float:
    n = len(vectors)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            dist[i, j] = np.linalg.norm(vectors[i] - vectors[j])
    values = []
    for i in range(n):
        own = [j for j in range(n) if labels[j] == labels[i] and j != i]
        if not own:
            values.append(0.0)
            continue
        a = float(np.mean([dist[i, j] for j in own]))
        b = np.inf
        for other in set(labels.tolist()) - {labels[i]}:
            rows = [j for j in range(n) if labels[j] == other]
            b = min(b, float(np.mean([dist[i, j] for j in rows])))
        denom = max(a, b)
        values.append((b - a) / denom if denom > 0 else 0.0)
    return float(np.mean(values))


def _selftest_cases():
    from .losses import ArcFaceHead, Batch, ClassCenters, SupConConfig, composite_loss

    def silhouette_matches_brute():
        rng = np.random.default_rng(0)
        for _ in range(5):
            vectors = rng.normal(size=(40, 4))
            labels = rng.integers(0, 4, size=40)
            stats = clustering_metrics(vectors, labels, DistanceMetric.EUCLIDEAN)
            brute = _brute_silhouette(vectors, labels)
            assert abs(stats.silhouette_mean - brute) < 1e-9

    def composite_gradient_matches_fd():
        rng = np.random.default_rng(1)
        emb = rng.normal(size=(5, 6))
        labels = rng.integers(0, 3, size=5)
        head = ArcFaceHead(weights=rng.normal(size=(3, 6)), scale=8.0, margin=0.3)
        centers = ClassCenters(centers=rng.normal(size=(3, 6)))
        weights = LossWeights(1.0, 1.0, 0.01)

        def value_of(e):
            return composite_loss(Batch(embeddings=e, labels=labels), head,
                                  SupConConfig(0.2), centers, weights).value

        bundle = composite_loss(Batch(embeddings=emb, labels=labels), head,
                                SupConConfig(0.2), centers, weights)
        step = 1e-5
        for i in range(emb.shape[0]):
            for j in range(emb.shape[1]):
                plus, minus = emb.copy(), emb.copy()
                plus[i, j] += step
                minus[i, j] -= step
                fd = (value_of(plus) - value_of(minus)) / (2 * step)
                assert abs(fd - bundle.grad_embeddings[i, j]) < 1e-6 * max(
                    1.0, abs(fd))

    def formats_round_trip():
        import tempfile

        rng = np.random.default_rng(2)
        records = [EmbeddingRecord(sample_id=f"s{i:03d}",
                                   vector=rng.normal(size=8).astype(np.float32))
                   for i in range(25)]
        es = EmbeddingSet.from_records(records, dataset_id="selftest",
                                       snapshot_version=1)
        with tempfile.TemporaryDirectory() as tmp:
            for fmt in ("jsonl", "packed"):
                path = os.path.join(tmp, f"x.{fmt}")
                export_embeddings(es, path, fmt)
                back = import_embeddings(path, fmt)
                assert back.ids == es.ids
                assert np.array_equal(back.matrix, es.matrix)

    def kmeans_inertia_non_increasing():
        rng = np.random.default_rng(3)
        records = [EmbeddingRecord(sample_id=f"s{i:03d}",
                                   vector=rng.normal(size=5))
                   for i in range(60)]
        es = EmbeddingSet.from_records(records, dataset_id="selftest",
                                       snapshot_version=1)
        model = kmeans(es, k=4, rng_seed=0, metric=DistanceMetric.EUCLIDEAN)
        history = np.array(model.inertia_history)
        assert np.all(np.diff(history) <= 1e-9)

    return [
        ("silhouette vs brute-force", silhouette_matches_brute),
        ("composite gradient vs finite differences", composite_gradient_matches_fd),
        ("format round trips", formats_round_trip),
        ("kmeans inertia non-increasing", kmeans_inertia_non_increasing),
    ]


def _run_selftest(verbose: bool) -> List[str]:
    failures = []
    for name, case in _selftest_cases():
        try:
            case()
        except Exception as exc:  # noqa: BLE001 — report and keep going
            failures.append(name)
            if verbose:
                print(f"FAIL {name}: {exc}")
            continue
        if verbose:
            print(f"PASS {name}")
    return failures


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data-dir", default=None,
                        help="dataset directory (or $LAYOUTSPACE_DATA_DIR)")
    common.add_argument("--config", default=None,
                        help="key = value defaults file")
    common.add_argument("--json", action="store_true",
                        help="machine-readable output with sorted keys")

    parser = argparse.ArgumentParser(
        prog="layoutspace",
        description="Embedding-space toolkit for layout clustering, anomaly "
                    "triage and fraud-campaign discovery.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("import", parents=[common],
                       help="load a dataset file into the data directory")
    p.add_argument("--file", required=True)
    p.add_argument("--format", default="jsonl", choices=("jsonl", "packed"))
    p.add_argument("--dataset", default=None, help="dataset id (default: file stem)")
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("export", parents=[common], help="write a dataset to a file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="jsonl", choices=("jsonl", "packed"))
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic dataset from a spec file")
    p.add_argument("--spec", required=True, help="JSON generator spec")
    p.add_argument("--dataset", default=None)
    p.add_argument("--seed", type=int, default=None, help="override spec rng_seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common],
                       help="train the metric head on train/val splits")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--weights", type=float, nargs=3, default=None,
                   metavar=("ARCFACE", "SUPCON", "CENTER"))
    p.add_argument("--scale", type=float, default=30.0)
    p.add_argument("--margin", type=float, default=0.5)
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--stage-epochs", type=int, nargs=2, default=(4, 4),
                   metavar=("WARMUP", "PARTIAL"))
    p.add_argument("--learning-rates", type=float, nargs=2, default=(5e-4, 1e-5),
                   metavar=("HEADS", "PARTIAL"))
    p.add_argument("--hidden", type=int, default=1024)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--embed-to", default=None,
                   help="also store the embedded dataset under this id")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", parents=[common],
                       help="train the layout classifier and report accuracy")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--id", action="append", default=None,
                   help="classify this sample id (repeatable)")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("metrics", parents=[common],
                       help="separability table (intra, inter, silhouette, DBI)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--labels", default="layout", choices=("layout", "cluster"))
    p.add_argument("--model", type=int, default=None,
                   help="cluster model version (with --labels cluster)")
    p.add_argument("--metric", default="cosine")
    p.add_argument("--report", default=None, help="write metrics.csv/png here")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("cluster", parents=[common], help="k-means over a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--metric", default="cosine")
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("select-k", parents=[common],
                       help="silhouette sweep over candidate cluster counts")
    p.add_argument("--dataset", required=True)
    p.add_argument("--k-min", type=int, default=2)
    p.add_argument("--k-max", type=int, required=True)
    p.add_argument("--metric", default="cosine")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_select_k)

    p = sub.add_parser("tsne", parents=[common],
                       help="2-D projection of a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="projection JSON path")
    p.add_argument("--report", default=None, help="write figures + rows here")
    p.add_argument("--model", type=int, default=None,
                   help="color the report by this cluster model version")
    p.set_defaults(func=cmd_tsne)

    p = sub.add_parser("refine", parents=[common],
                       help="apply split/merge/trim/outlier ops to a model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", type=int, default=None, help="base model version")
    p.add_argument("--ops", required=True, help="JSON list of operations")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("anomalies", parents=[common],
                       help="rank samples by within-cluster z-score")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", type=int, default=None)
    p.add_argument("--top", type=int, default=25)
    p.add_argument("--flag-clusters", action="store_true",
                   help="also flag clusters far from every known layout")
    p.add_argument("--min-size", type=int, default=DEFAULT_MIN_SIZE)
    p.add_argument("--quantile", type=float, default=DEFAULT_DISTANCE_QUANTILE)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_anomalies)

    p = sub.add_parser("graph", parents=[common],
                       help="build the k-NN similarity graph")
    p.add_argument("--dataset", required=True)
    p.add_argument("--k-neighbors", type=int, default=DEFAULT_K_NEIGHBORS)
    p.add_argument("--min-similarity", type=float, default=None)
    p.add_argument("--out", default=None, help="edge list JSON path")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("expand", parents=[common],
                       help="grow a candidate set from confirmed seeds")
    p.add_argument("--dataset", required=True)
    p.add_argument("--seeds", action="append", default=None,
                   help="comma-separated sample ids (repeatable)")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--max-hops", type=int, default=DEFAULT_MAX_HOPS)
    p.add_argument("--k-neighbors", type=int, default=DEFAULT_K_NEIGHBORS)
    p.add_argument("--min-similarity", type=float, default=None)
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("queue", parents=[common],
                       help="assemble the triage queue for review")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", type=int, default=None)
    p.add_argument("--seeds", action="append", default=None)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--max-hops", type=int, default=DEFAULT_MAX_HOPS)
    p.add_argument("--k-neighbors", type=int, default=DEFAULT_K_NEIGHBORS)
    p.add_argument("--min-size", type=int, default=DEFAULT_MIN_SIZE)
    p.add_argument("--quantile", type=float, default=DEFAULT_DISTANCE_QUANTILE)
    p.add_argument("--top", type=int, default=None)
    p.set_defaults(func=cmd_queue)

    p = sub.add_parser("verdict", parents=[common],
                       help="record a review decision on a queue item")
    p.add_argument("--dataset", required=True)
    p.add_argument("--item", required=True, help="queue item id")
    p.add_argument("--verdict", required=True)
    p.add_argument("--reviewer", required=True)
    p.set_defaults(func=cmd_verdict)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8200)
    p.add_argument("--token", default=None, help="require this bearer token")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("selftest", parents=[common],
                       help="compare core results against built-in oracles")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config) if args.config else {}
        _apply_config(args, config)
        args.data_dir = _resolve_data_dir(args, config)
        return args.func(args)
    except LayoutspaceError as err:
        envelope = {"code": err.code, "message": str(err),
                    "detail": _jsonable(err.detail)}
        print(json.dumps(envelope, sort_keys=True), file=sys.stderr)
        return err.exit_code
    except BrokenPipeError:
        # downstream consumer (e.g. `| head`) closed the pipe; not an error
        devnull = os.open(os.devnull, os.O_WRONLY)
        os.dup2(devnull, sys.stdout.fileno())
        return 0


if __name__ == "__main__":
    sys.exit(main())
