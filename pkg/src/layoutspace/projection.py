"""2-D t-SNE projection for the investigator map view.

Small and mid-sized collections (N <= 5000) use an exact O(N^2) implementation
with a deterministic PCA initialization, so identical seeds give identical
coordinates and duplicated input rows land on the same output point. The last
10% of iterations use backtracking on the step size, which makes the traced KL
divergence non-increasing over that tail. Larger collections fall back to
scikit-learn's Barnes-Hut implementation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import PerplexityTooLarge, ValidationError
from .vectors import EmbeddingSet

EXACT_LIMIT = 5000
PCA_PREPROCESS_DIMS = 50


@dataclass(frozen=True)
class ProjectionResult:
    coordinates: np.ndarray  # N x 2, centered at the origin
    params: dict
    kl_divergence: float
    kl_history: Tuple[float, ...] = ()
    ids: Tuple[str, ...] = ()

    def rows(self):
        for i, sid in enumerate(self.ids):
            yield {"sample_id": sid,
                   "x": float(self.coordinates[i, 0]),
                   "y": float(self.coordinates[i, 1])}


def _svd_flip(u: np.ndarray, vt: np.ndarray):
    """Fix SVD sign ambiguity: largest |loading| of each component positive."""
    signs = np.sign(vt[np.arange(vt.shape[0]), np.argmax(np.abs(vt), axis=1)])
    signs[signs == 0] = 1.0
    return u * signs[None, :], vt * signs[:, None]


def _pca(x: np.ndarray, n_components: int) -> np.ndarray:
    centered = x - x.mean(axis=0, keepdims=True)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    u, vt = _svd_flip(u, vt)
    return (u * s[None, :])[:, :n_components]


def _conditional_affinities(sq_dist: np.ndarray, perplexity: float) -> np.ndarray:
    """Row-stochastic P with per-row precision found by bisection on entropy."""
    n = sq_dist.shape[0]
    target = np.log(perplexity)
    p = np.zeros_like(sq_dist)
    for i in range(n):
        d = np.delete(sq_dist[i], i)
        beta_lo, beta_hi = 0.0, np.inf
        beta = 1.0
        row = np.zeros(n - 1)
        for _ in range(64):
            row = np.exp(-d * beta)
            total = row.sum()
            if total <= 0:
                entropy = 0.0
                row = np.zeros(n - 1)
            else:
                row = row / total
                nz = row > 0
                entropy = -np.sum(row[nz] * np.log(row[nz]))
            if abs(entropy - target) < 1e-7:
                break
            if entropy > target:
                beta_lo = beta
                beta = beta * 2.0 if beta_hi == np.inf else (beta + beta_hi) / 2.0
            else:
                beta_hi = beta
                beta = (beta_lo + beta) / 2.0
        p[i, :i] = row[:i]
        p[i, i + 1:] = row[i:]
    return p


def _kl(p: np.ndarray, y: np.ndarray) -> float:
    num = _q_numerators(y)
    q = num / num.sum()
    q = np.maximum(q, 1e-12)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def _q_numerators(y: np.ndarray) -> np.ndarray:
    sq = np.sum(y * y, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (y @ y.T)
    num = 1.0 / (1.0 + np.maximum(d2, 0.0))
    np.fill_diagonal(num, 0.0)
    return num


def _gradient(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    num = _q_numerators(y)
    q = np.maximum(num / num.sum(), 1e-12)
    pq = (p - q) * num
    return 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)


def _exact_tsne(x: np.ndarray, perplexity: float, iterations: int,
                exaggeration_iters: int, exaggeration: float, rng_seed: int,
                cancel_check=None):
    n = x.shape[0]
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    cond = _conditional_affinities(d2, perplexity)
    p = (cond + cond.T) / (2.0 * n)
    p = np.maximum(p, 0.0)

    y = _pca(x, 2)
    scale = y.std(axis=0).max()
    y = y * (1e-4 / scale) if scale > 0 else y
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    lr = 200.0
    momentum = 0.5
    tail_start = iterations - max(1, iterations // 10)
    history = []
    last_kl = _kl(p, y)

    for it in range(iterations):
        if cancel_check is not None and it % 50 == 0:
            cancel_check()
        p_eff = p * exaggeration if it < exaggeration_iters else p
        if it == 250:
            momentum = 0.8
        grad = _gradient(p_eff, y)
        flip = np.sign(grad) != np.sign(update)
        gains = np.where(flip, gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, 0.01)
        direction = momentum * update - lr * gains * grad

        if it < tail_start:
            update = direction
            y = y + update
            y = y - y.mean(axis=0, keepdims=True)
            last_kl = _kl(p, y)
        else:
            # backtracking keeps the traced KL non-increasing over the tail;
            # momentum shrinks with the step so small moves stay descent moves
            factor = 1.0
            accepted = False
            for _ in range(24):
                trial = y + factor * direction
                trial = trial - trial.mean(axis=0, keepdims=True)
                kl = _kl(p, trial)
                if kl <= last_kl:
                    update = factor * direction
                    y = trial
                    last_kl = kl
                    accepted = True
                    break
                factor *= 0.5
            if not accepted:
                update[:] = 0.0  # stay put; KL trace stays flat
        history.append(last_kl)
    return y, last_kl, history


def tsne_project(embedding_set: EmbeddingSet, perplexity: float = 30.0,
                 iterations: int = 1000, exaggeration_iters: int = 250,
                 exaggeration: float = 12.0, rng_seed: int = 0,
                 theta: float = 0.5, cancel_check=None) -> ProjectionResult:
    """Project a set to 2-D; deterministic per seed, output centered at origin."""
    n = len(embedding_set)
    if perplexity <= 0:
        raise ValidationError("perplexity must be positive")
    if iterations < 1:
        raise ValidationError("iterations must be >= 1")
    if n < 3 * perplexity:
        raise PerplexityTooLarge(
            f"need at least {int(np.ceil(3 * perplexity))} samples for "
            f"perplexity {perplexity}, got {n}")

    x = embedding_set.float64()
    if x.shape[1] > PCA_PREPROCESS_DIMS:
        x = _pca(x, PCA_PREPROCESS_DIMS)

    if n <= EXACT_LIMIT:
        # duplicate rows are projected once and share the output point, which
        # keeps coincident inputs exactly coincident in the map
        uniq, inverse = np.unique(x, axis=0, return_inverse=True)
        if uniq.shape[0] == 1:
            y = np.zeros((n, 2))
            kl, history = 0.0, [0.0] * iterations
        else:
            eff_perplexity = min(perplexity, max(2.0, (uniq.shape[0] - 1) / 3.0))
            y_uniq, kl, history = _exact_tsne(uniq, eff_perplexity, iterations,
                                              exaggeration_iters, exaggeration,
                                              rng_seed, cancel_check)
            y = y_uniq[inverse]
            y = y - y.mean(axis=0, keepdims=True)
    else:
        from sklearn.manifold import TSNE

        fit = TSNE(n_components=2, perplexity=perplexity, max_iter=iterations,
                   early_exaggeration=exaggeration, init="pca",
                   random_state=rng_seed, method="barnes_hut", angle=theta,
                   n_jobs=1)
        y = np.asarray(fit.fit_transform(x), dtype=np.float64)
        y = y - y.mean(axis=0, keepdims=True)
        kl = float(fit.kl_divergence_)
        history = []

    return ProjectionResult(
        coordinates=y,
        params={"perplexity": perplexity, "iterations": iterations,
                "exaggeration": exaggeration,
                "exaggeration_iters": exaggeration_iters, "rng_seed": rng_seed,
                "theta": theta},
        kl_divergence=kl,
        kl_history=tuple(history),
        ids=embedding_set.ids,
    )
