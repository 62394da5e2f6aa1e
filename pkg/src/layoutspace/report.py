"""Rendering for analysis runs: delimited per-sample rows plus figures.

Every figure goes through the Agg backend so reports render identically on
headless machines. Rows are plain dicts so the CSV/JSONL writers and the
figures all read from the same merged view of a run.
"""

import csv
import json
import os
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import ValidationError
from .vectors import EmbeddingSet

METRIC_COLUMNS = ("intra_class", "inter_class", "silhouette", "dbi")


def sample_rows(embedding_set: EmbeddingSet, model=None, projection=None,
                anomalies: Sequence = ()) -> List[dict]:
    """Merge everything known about each sample into one row dict.

    Columns appear only when the corresponding artifact is given: cluster_id
    needs a cluster model, x/y need a projection, z and centroid_distance
    need anomaly scores.
    """
    rows = [{"sample_id": sid, "label": embedding_set.labels[i] or ""}
            for i, sid in enumerate(embedding_set.ids)]
    by_id = {row["sample_id"]: row for row in rows}
    if model is not None:
        for sid, cid in model.assignments.items():
            if sid in by_id:
                by_id[sid]["cluster_id"] = cid
    if projection is not None:
        for sid, (x, y) in zip(projection.ids, projection.coordinates):
            if sid in by_id:
                by_id[sid]["x"] = float(x)
                by_id[sid]["y"] = float(y)
    for score in anomalies:
        row = by_id.get(score.sample_id)
        if row is not None:
            row["z"] = score.z
            row["centroid_distance"] = score.centroid_distance
    return rows


def write_rows(rows: List[dict], path: str, fmt: str = "csv") -> None:
    if not rows:
        raise ValidationError("no rows to write")
    if fmt == "csv":
        columns: List[str] = []
        for row in rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns, restval="")
            writer.writeheader()
            writer.writerows(rows)
    elif fmt == "jsonl":
        with open(path, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    else:
        raise ValidationError(f"unknown row format {fmt!r}")


def projection_figure(rows: List[dict], path: str, title: str = "embedding map") -> None:
    """2-D scatter of projected samples, colored by cluster (or label)."""
    points = [row for row in rows if "x" in row and "y" in row]
    if not points:
        raise ValidationError("rows carry no projection coordinates")
    if any("cluster_id" in row for row in points):
        key = lambda row: row.get("cluster_id", -1)  # noqa: E731
    else:
        key = lambda row: row.get("label", "")  # noqa: E731
    groups: Dict = {}
    for row in points:
        groups.setdefault(key(row), []).append(row)
    fig, ax = plt.subplots(figsize=(8, 8))
    cmap = plt.get_cmap("tab20")
    for rank, group in enumerate(sorted(groups, key=str)):
        members = groups[group]
        ax.scatter([r["x"] for r in members], [r["y"] for r in members],
                   s=8, color=cmap(rank % 20), label=str(group), alpha=0.7)
    if len(groups) <= 20:
        ax.legend(loc="best", fontsize="small", markerscale=2)
    ax.set_title(title)
    ax.set_xlabel("dim 1")
    ax.set_ylabel("dim 2")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def zscore_figure(rows: List[dict], path: str) -> None:
    """Histogram of per-sample anomaly z-scores."""
    values = [row["z"] for row in rows if "z" in row]
    if not values:
        raise ValidationError("rows carry no z-scores")
    fig, ax = plt.subplots(figsize=(8, 5))
    ax.hist(values, bins=min(60, max(10, len(values) // 20)), color="#3465a4")
    ax.set_xlabel("z-score within assigned cluster")
    ax.set_ylabel("samples")
    ax.set_title("anomaly score distribution")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def metrics_table(configurations: Dict[str, dict], csv_path: str,
                  figure_path: Optional[str] = None) -> None:
    """Four-column separability table, one row per model/configuration.

    ``configurations`` maps a display name to a dict with intra_class,
    inter_class, silhouette and dbi entries.
    """
    if not configurations:
        raise ValidationError("no configurations to tabulate")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("configuration",) + METRIC_COLUMNS)
        for name in configurations:
            values = configurations[name]
            writer.writerow([name] + [f"{values[c]:.6f}" for c in METRIC_COLUMNS])
    if figure_path is None:
        return
    fig, ax = plt.subplots(figsize=(8, 1.0 + 0.4 * len(configurations)))
    ax.axis("off")
    cells = [[f"{configurations[name][c]:.3f}" for c in METRIC_COLUMNS]
             for name in configurations]
    table = ax.table(cellText=cells, rowLabels=list(configurations),
                     colLabels=METRIC_COLUMNS, loc="center")
    table.scale(1.0, 1.4)
    fig.tight_layout()
    fig.savefig(figure_path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def write_report(out_dir: str, embedding_set: EmbeddingSet, model=None,
                 projection=None, anomalies: Sequence = (),
                 metrics: Optional[Dict[str, dict]] = None) -> Dict[str, str]:
    """Write every artifact the given inputs support; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written: Dict[str, str] = {}
    rows = sample_rows(embedding_set, model=model, projection=projection,
                       anomalies=anomalies)
    rows_path = os.path.join(out_dir, "samples.csv")
    write_rows(rows, rows_path)
    written["rows"] = rows_path
    if projection is not None:
        fig_path = os.path.join(out_dir, "projection.png")
        projection_figure(rows, fig_path)
        written["projection"] = fig_path
    if anomalies:
        fig_path = os.path.join(out_dir, "zscores.png")
        zscore_figure(rows, fig_path)
        written["zscores"] = fig_path
    if metrics:
        csv_path = os.path.join(out_dir, "metrics.csv")
        fig_path = os.path.join(out_dir, "metrics.png")
        metrics_table(metrics, csv_path, fig_path)
        written["metrics"] = csv_path
        written["metrics_figure"] = fig_path
    return written
