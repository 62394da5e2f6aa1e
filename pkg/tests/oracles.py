"""Independent oracles used by the test suite.

Everything here is deliberately naive: central finite differences, per-pair
double loops and direct formula enumeration. Nothing imports the vectorized
implementation paths it is used to check.
"""

from __future__ import annotations

import math

import numpy as np


def finite_difference(func, param: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``func`` w.r.t. ``param``.

    ``func`` takes the perturbed parameter array and returns a float.
    """
    grad = np.zeros_like(param, dtype=np.float64)
    flat = grad.ravel()
    base = param.astype(np.float64).copy()
    for idx in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus.ravel()[idx] += step
        minus.ravel()[idx] -= step
        flat[idx] = (func(plus) - func(minus)) / (2.0 * step)
    return grad


def tensor_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute component difference scaled by the tensors' largest entry."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    diff = float(np.max(np.abs(analytic - numeric), initial=0.0))
    if scale < 1e-10:
        return 0.0
    return diff / max(scale, 1e-6)


def euclid(a, b) -> float:
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def cosine_dist(a, b) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return 1.0 - max(-1.0, min(1.0, dot / (na * nb)))


def _dist(a, b, metric: str) -> float:
    return euclid(a, b) if metric == "euclidean" else cosine_dist(a, b)


def brute_silhouette(vectors, labels, metric: str = "euclidean"):
    """Per-sample silhouette by direct double loops over the definition.

    Singleton-class samples get s(i) = 0.
    """
    n = len(vectors)
    out = []
    for i in range(n):
        same = [j for j in range(n) if j != i and labels[j] == labels[i]]
        if not same:
            out.append(0.0)
            continue
        a_i = sum(_dist(vectors[i], vectors[j], metric) for j in same) / len(same)
        b_i = math.inf
        for other in set(labels) - {labels[i]}:
            members = [j for j in range(n) if labels[j] == other]
            mean = sum(_dist(vectors[i], vectors[j], metric) for j in members) / len(members)
            b_i = min(b_i, mean)
        out.append((b_i - a_i) / max(a_i, b_i))
    return out


def brute_dbi(vectors, labels, metric: str = "euclidean") -> float:
    """Davies-Bouldin index by direct enumeration of every cluster pair."""
    classes = sorted(set(labels))
    cents = {}
    scatters = {}
    for c in classes:
        members = [vectors[j] for j in range(len(vectors)) if labels[j] == c]
        cent = [sum(col) / len(members) for col in zip(*members)]
        cents[c] = cent
        scatters[c] = sum(_dist(m, cent, metric) for m in members) / len(members)
    total = 0.0
    for ci in classes:
        worst = -math.inf
        for cj in classes:
            if cj == ci:
                continue
            m_ij = _dist(cents[ci], cents[cj], metric)
            if m_ij == 0.0:
                raise ZeroDivisionError("coincident centroids")
            worst = max(worst, (scatters[ci] + scatters[cj]) / m_ij)
        total += worst
    return total / len(classes)


def brute_intra_class_mean(vectors, labels, metric: str = "euclidean") -> float:
    """Mean over classes (>= 2 members) of the mean within-class pair distance."""
    per_class = []
    for c in sorted(set(labels)):
        members = [vectors[j] for j in range(len(vectors)) if labels[j] == c]
        if len(members) < 2:
            continue
        dists = [
            _dist(members[i], members[j], metric)
            for i in range(len(members))
            for j in range(i + 1, len(members))
        ]
        per_class.append(sum(dists) / len(dists))
    return sum(per_class) / len(per_class)


def brute_inter_class_mean(vectors, labels, metric: str = "euclidean") -> float:
    """Mean over class pairs of the centroid distance."""
    classes = sorted(set(labels))
    cents = []
    for c in classes:
        members = [vectors[j] for j in range(len(vectors)) if labels[j] == c]
        cents.append([sum(col) / len(members) for col in zip(*members)])
    dists = [
        _dist(cents[i], cents[j], metric)
        for i in range(len(classes))
        for j in range(i + 1, len(classes))
    ]
    return sum(dists) / len(dists)


def brute_supcon(embeddings, labels, temperature: float) -> float:
    """Enumerate every term of the supervised contrastive loss.

    Mean over anchors that have at least one positive; anchors without
    positives contribute nothing.
    """
    mat = np.asarray(embeddings, dtype=np.float64)
    unit = mat / np.linalg.norm(mat, axis=1, keepdims=True)
    n = len(labels)
    per_anchor = []
    for i in range(n):
        positives = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        total = 0.0
        for p in positives:
            denom = sum(
                math.exp(float(np.dot(unit[i], unit[a])) / temperature)
                for a in range(n)
                if a != i
            )
            num = math.exp(float(np.dot(unit[i], unit[p])) / temperature)
            total += -math.log(num / denom)
        per_anchor.append(total / len(positives))
    if not per_anchor:
        return 0.0
    return sum(per_anchor) / len(per_anchor)


def brute_arcface(embeddings, labels, weights, scale: float, margin: float) -> float:
    """Direct evaluation of the margin-softmax loss, sample by sample."""
    emb = np.asarray(embeddings, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    w_unit = w / np.linalg.norm(w, axis=1, keepdims=True)
    total = 0.0
    for i in range(len(labels)):
        cos = [float(np.dot(unit[i], w_unit[j])) for j in range(w.shape[0])]
        target = max(-1.0 + 1e-7, min(1.0 - 1e-7, cos[labels[i]]))
        if target >= math.cos(math.pi - margin):
            phi = target * math.cos(margin) - math.sqrt(1 - target * target) * math.sin(margin)
        else:
            phi = target - margin * math.sin(margin)
        logits = [scale * c for c in cos]
        logits[labels[i]] = scale * phi
        m = max(logits)
        denom = sum(math.exp(l - m) for l in logits)
        total += -(logits[labels[i]] - m - math.log(denom))
    return total / len(labels)
