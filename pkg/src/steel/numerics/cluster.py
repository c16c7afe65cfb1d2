"""k-means (Lloyd + k-means++), silhouette score and medoids."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument, NumericError


@dataclass
class Clustering:
    k: int
    assignment: np.ndarray
    centroids: np.ndarray
    sse: float = 0.0
    sse_history: list = field(default_factory=list)
    n_iter: int = 0

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == c)


def _check_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise InvalidArgument("points must be an M x d matrix")
    if not np.all(np.isfinite(x)):
        raise NumericError("points contain non-finite values")
    return x


def sq_distances(x, c):
    """Squared Euclidean distances, shape ``(len(x), len(c))``."""
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def pairwise_distances(points) -> np.ndarray:
    x = _check_points(points)
    d = np.sqrt(sq_distances(x, x))
    np.fill_diagonal(d, 0.0)
    return d


def _kmeanspp(x, k, rng):
    m = len(x)
    chosen = [int(rng.integers(m))]
    d2 = sq_distances(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(m, p=d2 / total))
        else:
            # all remaining points coincide with a chosen center
            rest = np.setdiff1d(np.arange(m), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        d2 = np.minimum(d2, sq_distances(x, x[idx:idx + 1])[:, 0])
    return x[chosen].copy()


def _means(x, assign, k, old):
    counts = np.bincount(assign, minlength=k)
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, assign, x)
    out = old.copy()
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz, None]
    return out, counts


def kmeans_cluster(points, k: int, seed: int = 0, max_iters: int = 100) -> Clustering:
    x = _check_points(points)
    m = len(x)
    if not 1 <= k <= m:
        raise InvalidArgument(f"k={k} must lie in [1, {m}]")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    assign = None
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        d2 = sq_distances(x, centroids)
        new_assign = d2.argmin(1)
        own = d2[np.arange(m), new_assign]
        # repair empty clusters from the point farthest from its centroid
        counts = np.bincount(new_assign, minlength=k)
        for c in np.flatnonzero(counts == 0):
            counts = np.bincount(new_assign, minlength=k)
            movable = counts[new_assign] > 1
            far = int(np.argmax(np.where(movable, own, -1.0)))
            new_assign[far] = c
            own[far] = 0.0
            centroids[c] = x[far]
        history.append(float(own.sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        centroids, _ = _means(x, assign, k, centroids)
    centroids, _ = _means(x, assign, k, centroids)
    sse = float(((x - centroids[assign]) ** 2).sum())
    history.append(sse)
    return Clustering(k, assign, centroids, sse, history, it)


def silhouette_score(points, clustering, distances=None) -> float:
    """Mean silhouette ``(b - a) / max(a, b)`` with Euclidean distance.

    Points in singleton clusters score 0. ``distances`` may pass a
    precomputed pairwise matrix.
    """
    labels = np.asarray(getattr(clustering, "assignment", clustering))
    m = len(labels)
    ks = np.unique(labels)
    if len(ks) < 2:
        raise InvalidArgument("silhouette needs at least two nonempty clusters")
    if m < 3:
        raise InvalidArgument("silhouette needs at least three points")
    dist = pairwise_distances(points) if distances is None else distances
    _, lab = np.unique(labels, return_inverse=True)
    onehot = np.zeros((m, len(ks)))
    onehot[np.arange(m), lab] = 1.0
    sizes = onehot.sum(0)
    sums = dist @ onehot
    own_size = sizes[lab]
    with np.errstate(invalid="ignore", divide="ignore"):
        a = sums[np.arange(m), lab] / (own_size - 1)
        mean_other = sums / sizes[None, :]
    mean_other[np.arange(m), lab] = np.inf
    b = mean_other.min(1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own_size == 1] = 0.0
    return float(np.clip(s.mean(), -1.0, 1.0))


def medoid_of(points, subset) -> int:
    """Member of ``subset`` closest to the subset centroid; lowest index wins ties."""
    x = _check_points(points)
    idx = np.sort(np.asarray(subset, dtype=int).reshape(-1))
    if idx.size == 0:
        raise InvalidArgument("medoid of an empty subset")
    sub = x[idx]
    centroid = sub.mean(0)
    d = np.sqrt(((sub - centroid) ** 2).sum(1))
    return int(idx[int(np.argmin(d))])
