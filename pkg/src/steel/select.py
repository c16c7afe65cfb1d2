"""Gradient-free adaptation: evaluate candidates on the support set and keep
the empirical-risk minimizer, by exhaustive scan or cluster-guided search."""

from __future__ import annotations

import hashlib
import logging
import warnings
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .bounds import LOSS_BOUNDS, per_example_losses
from .errors import InvalidArgument
from .hypothesis import HypothesisSet
from .numerics import kmeans_cluster, medoid_of, pairwise_distances, silhouette_score

log = logging.getLogger(__name__)


@dataclass
class SelectionResult:
    index: int
    theta: np.ndarray
    r: float
    evaluations: int
    method: str
    trace: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["theta"] = [float(v) for v in self.theta]
        return d


def eval_support_loss(theta, x, y, k: int, loss: str = "zero_one") -> float:
    """Mean bounded loss of one adapter on ``(x, y)``."""
    if len(y) == 0:
        raise InvalidArgument("empty support set")
    return float(per_example_losses(theta, x, y, k, loss).mean())


def support_risks(matrix, x, y, k: int, loss: str = "zero_one", chunk: int = 1024) -> np.ndarray:
    """Support risk of every row of ``matrix``."""
    if len(y) == 0:
        raise InvalidArgument("empty support set")
    matrix = np.asarray(matrix, dtype=np.float64)
    out = np.empty(len(matrix))
    for s in range(0, len(matrix), chunk):
        out[s:s + chunk] = per_example_losses(matrix[s:s + chunk], x, y, k, loss).mean(1)
    return out


def _argmin_lowest(values, indices=None) -> int:
    """Position of the minimum; ties go to the lowest row index."""
    values = np.asarray(values)
    best = np.flatnonzero(values == values.min())
    if indices is None:
        return int(best[0])
    indices = np.asarray(indices)
    return int(best[np.argmin(indices[best])])


def exhaustive_select(hyp: HypothesisSet, x, y, k: int, loss: str = "zero_one") -> SelectionResult:
    risks = support_risks(hyp.matrix, x, y, k, loss)
    i = _argmin_lowest(risks)
    return SelectionResult(i, hyp.matrix[i].copy(), float(risks[i]), hyp.M, "exhaustive")


@dataclass(frozen=True)
class HierConfig:
    k_min: int = 2
    k_max: int = 150
    silhouette: str = "max"
    shortlist: int = 15
    depth: int = 1
    full_grid_limit: int = 500
    grid_size: int = 32
    seed: int = 0
    max_iters: int = 100


def k_grid(m: int, cfg: HierConfig) -> list:
    hi = min(cfg.k_max, m - 1)
    lo = max(cfg.k_min, 2)
    if hi < lo:
        return []
    if m <= cfg.full_grid_limit:
        return list(range(lo, hi + 1))
    grid = np.unique(np.round(np.geomspace(lo, hi, cfg.grid_size)).astype(int))
    return [int(g) for g in grid]


def choose_clustering(points, cfg: HierConfig):
    """k-means for each k on the grid; keep the clustering whose silhouette
    is best under the configured objective. Returns ``None`` if no k works."""
    m = len(points)
    n_distinct = len(np.unique(points, axis=0))
    dist = pairwise_distances(points)
    best, best_score = None, None
    scores = {}
    for kk in k_grid(m, cfg):
        if kk > n_distinct:
            continue
        cl = kmeans_cluster(points, kk, seed=cfg.seed, max_iters=cfg.max_iters)
        if len(np.unique(cl.assignment)) < 2:
            continue
        s = silhouette_score(points, cl, distances=dist)
        scores[kk] = s
        better = (best_score is None or
                  (s > best_score if cfg.silhouette == "max" else s < best_score))
        if better:
            best, best_score = cl, s
    return best, scores


_CLUSTER_CACHE: OrderedDict = OrderedDict()
_CLUSTER_CACHE_SIZE = 16


def _cached_clustering(hyp: HypothesisSet, rows, cfg: HierConfig):
    """Clustering depends only on the rows, never on the support set, so it is
    shared across episodes that search the same hypothesis set."""
    key = (hyp.digest(), hashlib.sha256(np.asarray(rows, dtype=np.int64).tobytes()).hexdigest(), cfg)
    hit = _CLUSTER_CACHE.get(key)
    if hit is None:
        hit = choose_clustering(hyp.matrix[rows], cfg)
        _CLUSTER_CACHE[key] = hit
        if len(_CLUSTER_CACHE) > _CLUSTER_CACHE_SIZE:
            _CLUSTER_CACHE.popitem(last=False)
    else:
        _CLUSTER_CACHE.move_to_end(key)
    return hit


def hierarchical_select(hyp: HypothesisSet, x, y, k: int, cfg: HierConfig = HierConfig(),
                        loss: str = "zero_one") -> SelectionResult:
    if cfg.silhouette not in ("max", "min"):
        raise InvalidArgument("silhouette objective must be 'max' or 'min'")
    if hyp.M < 2:
        raise InvalidArgument("hierarchical search needs at least two candidates")
    cache = {}

    def risk_of(rows):
        rows = [int(r) for r in rows]
        todo = [r for r in rows if r not in cache]
        if todo:
            vals = support_risks(hyp.matrix[todo], x, y, k, loss)
            cache.update(zip(todo, vals.tolist()))
        return np.array([cache[r] for r in rows])

    current = np.arange(hyp.M)
    levels = []
    for level in range(cfg.depth):
        if len(current) < 3:
            break
        cl, scores = _cached_clustering(hyp, current, cfg)
        if cl is None:
            warnings.warn("cluster collapse; falling back to exhaustive search", stacklevel=2)
            log.warning("cluster collapse at level %d (%d rows)", level, len(current))
            break
        clusters = [current[cl.members(c)] for c in range(cl.k)]
        clusters = [c for c in clusters if len(c)]
        medoids = np.array([medoid_of(hyp.matrix, c) for c in clusters])
        mrisk = risk_of(medoids)
        pick = _argmin_lowest(mrisk, medoids)
        levels.append({"n_rows": int(len(current)), "k": int(cl.k),
                       "silhouette": float(scores[cl.k]), "medoids": medoids.tolist(),
                       "medoid_risks": mrisk.tolist(), "chosen_cluster": int(pick),
                       "cluster_size": int(len(clusters[pick]))})
        current = np.sort(clusters[pick])
    risks = risk_of(current)
    order = np.lexsort((current, risks))
    shortlist = current[order[: cfg.shortlist]]
    srisk = risk_of(shortlist)
    i = int(shortlist[_argmin_lowest(srisk, shortlist)])
    method = "hierarchical" if levels else "exhaustive"
    trace = {"levels": levels, "final_cluster_size": int(len(current)),
             "shortlist": shortlist.tolist(), "shortlist_risks": srisk.tolist()}
    return SelectionResult(i, hyp.matrix[i].copy(), float(cache[i]), len(cache), method, trace)


def build_hypothesis_set(strategy: str, zoo=None, checkpoint=None, M: int = 2000,
                         seed: int = 0, samples: HypothesisSet | None = None) -> HypothesisSet:
    """``model-zoo`` uses the zoo rows; ``steel`` draws ``M`` diffusion samples;
    ``union`` stacks zoo rows then samples. Pre-drawn ``samples`` may be passed
    in place of a checkpoint."""
    from .diffusion import sample_params

    if strategy not in ("model-zoo", "steel", "union"):
        raise InvalidArgument(f"unknown strategy {strategy!r}")
    if strategy in ("model-zoo", "union") and zoo is None:
        raise InvalidArgument(f"strategy {strategy!r} needs a model zoo")
    if strategy in ("steel", "union") and samples is None:
        if checkpoint is None:
            raise InvalidArgument(f"strategy {strategy!r} needs a diffusion checkpoint")
        samples = sample_params(checkpoint, M, seed)
    zoo_src = {"zoo": zoo.manifest.get("config_hash"), "N": zoo.N} if zoo is not None else {}
    if strategy == "model-zoo":
        return HypothesisSet(zoo.matrix, ("zoo",) * zoo.N, strategy, zoo_src)
    if strategy == "steel":
        return HypothesisSet(samples.matrix, samples.provenance, strategy, dict(samples.source))
    return HypothesisSet(np.vstack([zoo.matrix, samples.matrix]),
                         ("zoo",) * zoo.N + tuple(samples.provenance), strategy,
                         {**zoo_src, **samples.source})


def loss_bound(loss: str) -> float:
    return LOSS_BOUNDS[loss]
