"""K-Means with k-means++ seeding, silhouette model selection, cluster demand."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import DemandSeries, MeterSeries, check_same_grid

logger = logging.getLogger(__name__)

COLLAPSE_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class ClusterResult:
    k: int
    labels: np.ndarray
    centroids: np.ndarray
    silhouette: float
    seed: int
    inertia: float = float("nan")
    meter_ids: tuple | None = None
    scores: dict = field(default_factory=dict)
    inertia_path: tuple = ()

    @property
    def assignment(self) -> dict:
        ids = self.meter_ids if self.meter_ids is not None else range(len(self.labels))
        return {m: int(c) for m, c in zip(ids, self.labels)}

    def with_ids(self, meter_ids) -> "ClusterResult":
        return ClusterResult(self.k, self.labels, self.centroids, self.silhouette, self.seed,
                             self.inertia, tuple(meter_ids), self.scores, self.inertia_path)


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            i = int(rng.integers(n))
        else:
            i = int(rng.choice(n, p=d2 / total))
        centers.append(X[i])
        d2 = np.minimum(d2, ((X - X[i]) ** 2).sum(1))
    return np.array(centers, dtype=float)


def _lloyd(X, centers, max_iter):
    labels = None
    path = []
    for _ in range(max_iter):
        new = _sq_dists(X, centers).argmin(1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(len(centers)):
            members = X[labels == j]
            if len(members):
                centers[j] = members.mean(0)
        path.append(float(_sq_dists(X, centers)[np.arange(len(X)), labels].sum()))
    return labels, centers, path


def _relabel(labels, centers):
    """Dense labels in order of first appearance, so results compare by value."""
    order = list(dict.fromkeys(labels.tolist()))
    order += [j for j in range(len(centers)) if j not in order]
    remap = np.empty(len(centers), dtype=int)
    remap[order] = np.arange(len(centers))
    return remap[labels], centers[order]


def kmeans(X, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 300) -> ClusterResult:
    """Best-of-restarts Lloyd iterations from k-means++ seeds (lowest WCSS)."""
    X = np.asarray(X, dtype=float)
    n = len(X)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    best = None
    for r in range(restarts):
        centers = kmeans_plusplus(X, k, rng)
        labels, centers, path = _lloyd(X, centers.copy(), max_iter)
        inertia = path[-1] if path else float(_sq_dists(X, centers).min(1).sum())
        # strict '<' keeps the earliest restart on ties
        if best is None or inertia < best[0] - 1e-12:
            best = (inertia, labels, centers, path)
    inertia, labels, centers, path = best
    labels, centers = _relabel(labels, centers)
    sil = silhouette(X, labels) if 1 < len(np.unique(labels)) < n else 0.0
    return ClusterResult(k, labels, centers, sil, seed, inertia, inertia_path=tuple(path))


def silhouette(X, labels) -> float:
    """Mean silhouette, Euclidean; singleton clusters contribute 0."""
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    ks = np.unique(labels)
    if len(ks) < 2:
        raise ValueError("silhouette is undefined for a single cluster")
    D = np.sqrt(np.maximum(_sq_dists(X, X), 0.0))
    s = np.zeros(len(X))
    for i in range(len(X)):
        own = labels == labels[i]
        n_own = own.sum()
        if n_own == 1:
            continue
        a = D[i, own].sum() / (n_own - 1)
        b = min(D[i, labels == c].mean() for c in ks if c != labels[i])
        m = max(a, b)
        s[i] = 0.0 if m == 0 else (b - a) / m
    return float(s.mean())


def select_k(X, k_max: int = 4, seed: int = 0, restarts: int = 10, max_iter: int = 300) -> ClusterResult:
    """k in 2..k_max with the highest silhouette (ties toward smaller k).

    When every embedding lies within COLLAPSE_TOL of the mean, k=1 is reported.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    if np.max(np.linalg.norm(X - X.mean(0), axis=1)) < COLLAPSE_TOL:
        res = kmeans(X, 1, seed, 1, max_iter)
        logger.info("embeddings collapsed; reporting a single cluster")
        return ClusterResult(1, res.labels, res.centroids, 0.0, seed, res.inertia, scores={1: 0.0})
    if n <= k_max:
        raise ValueError(f"select_k needs more than k_max={k_max} points, got {n}")
    best, scores = None, {}
    for k in range(2, k_max + 1):
        res = kmeans(X, k, seed, restarts, max_iter)
        scores[k] = res.silhouette
        if best is None or res.silhouette > best.silhouette:
            best = res
    logger.info("silhouette by k: %s -> k=%d", scores, best.k)
    return ClusterResult(best.k, best.labels, best.centroids, best.silhouette, seed,
                         best.inertia, scores=scores, inertia_path=best.inertia_path)


def cluster_demands(result: ClusterResult, meters) -> list[DemandSeries]:
    """Per-cluster element-wise sum of member meters (NaN hours count as 0)."""
    meters = list(meters)
    check_same_grid(meters)
    assignment = result.assignment
    missing = [m.meter_id for m in meters if m.meter_id not in assignment]
    if missing:
        raise KeyError(f"meters without a cluster assignment: {missing[:5]}")
    out = []
    for c in range(result.k):
        members = [np.nan_to_num(np.asarray(m.values), nan=0.0)
                   for m in meters if assignment[m.meter_id] == c]
        vals = np.sum(members, axis=0) if members else np.zeros(len(meters[0]))
        out.append(DemandSeries(f"cluster-{c}", meters[0].start, vals))
    return out


class SilhouetteKMeans(ClusterMixin, BaseEstimator):
    """K-Means over 2..k_max clusters, keeping the k with the best silhouette."""

    def __init__(self, k_max=4, restarts=10, max_iter=300, random_state=0):
        self.k_max = k_max
        self.restarts = restarts
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        res = select_k(X, self.k_max, self.random_state, self.restarts, self.max_iter)
        self.result_ = res
        self.labels_ = res.labels
        self.cluster_centers_ = res.centroids
        self.n_clusters_ = res.k
        self.silhouette_ = res.silhouette
        self.silhouette_scores_ = res.scores
        self.inertia_ = res.inertia
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=float)
        return _sq_dists(X, self.cluster_centers_).argmin(1)


def meters_by_cluster(result: ClusterResult, meters) -> dict[int, list[MeterSeries]]:
    groups: dict = {c: [] for c in range(result.k)}
    for m in meters:
        groups[result.assignment[m.meter_id]].append(m)
    return groups


def dominant_period(values, min_lag: int = 8, max_lag: int = 120, resolution: int = 24) -> tuple[int, np.ndarray]:
    """Lag (in units of ``resolution`` hours) of the largest autocorrelation in [min_lag, max_lag].

    The hourly series is averaged into blocks of ``resolution`` hours first,
    so the default reports the dominant period in days.
    """
    from statsmodels.tsa.stattools import acf

    x = np.asarray(values, dtype=float)
    n = len(x) // resolution
    if n <= max_lag:
        raise ValueError(f"need more than {max_lag} blocks, got {n}")
    blocks = x[:n * resolution].reshape(n, resolution).mean(1)
    r = acf(blocks, nlags=max_lag, fft=True)
    lag = min_lag + int(np.argmax(r[min_lag:max_lag + 1]))
    return lag, r
