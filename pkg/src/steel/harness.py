"""End-to-end benchmark: zoo -> diffusion -> hypothesis sets -> per-episode
adapt/certify/evaluate -> aggregates and plot-ready CSVs."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .bounds import (LOSS_BOUNDS, GaussianPosterior, finite_hypothesis_certificate,
                     finite_hypothesis_complexity, per_example_losses,
                     quantization_certificate, quantization_complexity,
                     vanilla_pacbayes_certificate)
from .config import BenchConfig, to_dict
from .diffusion import (DiffusionCheckpoint, sample_params,
                        save_checkpoint, train_diffusion)
from .errors import ArtifactError, InvalidArgument, SteelError
from .hypothesis import HypothesisSet
from .seeding import derive_seed
from .select import build_hypothesis_set, exhaustive_select, hierarchical_select, support_risks
from .taskgen import featurize, sample_episode, sample_task
from .zoo import ModelZoo, ZooConfig, build_zoo, head_predict, save_zoo, train_head

log = logging.getLogger(__name__)

SELECTION_METHODS = ("steel", "model-zoo", "union")


@dataclass
class Artifacts:
    zoo: ModelZoo | None = None
    checkpoint: DiffusionCheckpoint | None = None
    hypothesis_sets: dict = field(default_factory=dict)

    def hashes(self) -> dict:
        return {name: h.digest() for name, h in sorted(self.hypothesis_sets.items())}


def prepare_artifacts(config: BenchConfig, zoo: ModelZoo | None = None,
                      checkpoint: DiffusionCheckpoint | None = None,
                      out_dir: str | None = None) -> Artifacts:
    """Build (or reuse) the zoo and checkpoint, then fix every hypothesis set
    before any downstream episode exists."""
    seed = config.master_seed
    needs_zoo = any(m in config.methods for m in ("model-zoo", "union", "steel"))
    needs_ckpt = any(m in config.methods for m in ("steel", "union"))
    if zoo is None and needs_zoo:
        zcfg = ZooConfig(shots=config.zoo_shots, train=config.zoo_train,
                         seed=derive_seed(seed, "zoo"), workers=config.workers)
        t0 = time.time()
        zoo = build_zoo(config.dist, config.zoo_n, zcfg)
        log.info("zoo: N=%d d=%d in %.1fs", zoo.N, zoo.d, time.time() - t0)
    if checkpoint is None and needs_ckpt:
        dcfg = replace(config.diffusion, seed=derive_seed(seed, "diffusion"))
        t0 = time.time()
        checkpoint = train_diffusion(zoo, dcfg)
        log.info("diffusion trained in %.1fs", time.time() - t0)
    arts = Artifacts(zoo, checkpoint)
    samples = None
    if needs_ckpt:
        t0 = time.time()
        samples = sample_params(checkpoint, config.n_samples, derive_seed(seed, "sample"))
        log.info("sampled %d adapters in %.1fs", config.n_samples, time.time() - t0)
    for m in SELECTION_METHODS:
        if m in config.methods:
            arts.hypothesis_sets[m] = build_hypothesis_set(m, zoo=zoo, samples=samples)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if zoo is not None:
            save_zoo(zoo, os.path.join(out_dir, "zoo.stzo"))
        if checkpoint is not None:
            save_checkpoint(checkpoint, os.path.join(out_dir, "diffusion.stdf"))
    return arts


def episode_seed(master: int, shots: int, index: int) -> int:
    return derive_seed(master, "episode", shots, index)


def make_episode(config: BenchConfig, shots: int, index: int):
    seed = episode_seed(config.master_seed, shots, index)
    task = sample_task(config.dist, derive_seed(seed, "task"), task_id=index)
    return sample_episode(config.dist, task, shots, config.query_per_class, seed)


def _query_eval(theta, x, y, k, loss):
    if len(y) == 0:
        return None, None
    risk = float(per_example_losses(theta, x, y, k, loss).mean())
    acc = float((head_predict(theta, x, k) == y).mean())
    return risk, acc


def adapt_and_certify(config: BenchConfig, arts: Artifacts, episode, method: str):
    """Fit and certify ``method`` on the support set only.

    Returns ``(theta_or_posterior, certificate, info, feature_fn)`` where
    ``feature_fn`` maps raw inputs to the features the method's head reads.
    """
    k, n = episode.k, len(episode.support_y)
    loss, C, eps = config.loss, LOSS_BOUNDS[config.loss], config.epsilon
    x, y = episode.support_x, episode.support_y
    std_features = lambda raw: featurize(config.dist, raw)
    if method in SELECTION_METHODS:
        hyp = arts.hypothesis_sets.get(method)
        if hyp is None:
            raise ArtifactError(f"hypothesis set for {method!r} is missing")
        if config.search == "exhaustive":
            sel = exhaustive_select(hyp, x, y, k, loss)
        else:
            sel = hierarchical_select(hyp, x, y, k, replace(config.hier, seed=config.master_seed), loss)
        cert = finite_hypothesis_certificate(sel.r, hyp.M, n, eps, C, loss)
        info = {"index": sel.index, "provenance": hyp.provenance[sel.index],
                "evaluations": sel.evaluations, "search": sel.method,
                "hypothesis_hash": hyp.digest()}
        return sel.theta, cert, info, std_features
    if method == "sgd-baseline":
        wide = config.dist.with_features(config.baseline_d_feat)
        xw = featurize(wide, episode.support_raw)
        theta = train_head(xw, y, k, config.baseline_train)
        r = float(per_example_losses(theta, xw, y, k, loss).mean())
        if config.baseline_bound == "best-case":
            K = theta.size
        else:
            K = quantization_complexity(theta, config.quant_levels)
        cert = quantization_certificate(r, K, n, eps, C, loss)
        info = {"d": int(theta.size), "K": K, "bound_form": config.baseline_bound,
                "d_feat": config.baseline_d_feat}
        return theta, cert, info, lambda raw: featurize(wide, raw)
    if method == "vanilla-pb":
        pb = config.pacbayes
        mu = train_head(x, y, k, config.zoo_train)
        post = GaussianPosterior(mu, np.full(mu.shape, pb.sigma_init), pb.kappa)
        pbc = replace(pb, seed=derive_seed(episode.seed, "vanilla-pb"))
        cert, post = vanilla_pacbayes_certificate(post, x, y, k, eps, pbc, loss=loss)
        info = {"kappa": pb.kappa, "steps": pb.steps, "lr": pb.lr,
                "mean_sigma": float(post.sigma.mean())}
        return post, cert, info, std_features
    raise InvalidArgument(f"unknown method {method!r}")


def _gibbs_query(post, x, y, k, loss, n_samples, seed):
    if len(y) == 0:
        return None, None
    rng = np.random.default_rng(seed)
    thetas = post.mu + post.sigma * rng.standard_normal((n_samples,) + post.mu.shape)
    risk = float(per_example_losses(thetas, x, y, k, loss).mean())
    acc = float((head_predict(thetas, x, k) == y).mean())
    return risk, acc


def run_episode(config: BenchConfig, arts: Artifacts, shots: int, index: int,
                episode=None) -> dict:
    """One episode for every enabled method. Query data is touched only after
    all methods have been adapted and certified."""
    ep = make_episode(config, shots, index) if episode is None else episode
    record = {"episode_id": f"{shots}-{index}", "shots": shots, "index": index, "way": ep.k,
              "n": int(len(ep.support_y)), "n_query": int(len(ep.query_y)), "seed": ep.seed, "task_angle": ep.task.angle,
              "hypothesis_hashes": arts.hashes(), "methods": {}}
    fitted, timings = {}, {}
    for m in config.methods:
        t0 = time.perf_counter()
        fitted[m] = adapt_and_certify(config, arts, ep.without_query(), m)
        timings[m] = time.perf_counter() - t0
    for m, (model, cert, info, feats) in fitted.items():
        xq = feats(ep.query_raw) if len(ep.query_y) else None
        if m == "vanilla-pb":
            qr, qa = _gibbs_query(model, xq, ep.query_y, ep.k, config.loss,
                                  config.pacbayes.eval_mc_samples, derive_seed(ep.seed, "gibbs"))
        else:
            qr, qa = _query_eval(model, xq, ep.query_y, ep.k, config.loss)
        record["methods"][m] = {"certificate": cert.to_dict(), "query_risk": qr,
                                "query_accuracy": qa, "info": info}
    record["_wall_time"] = timings
    return record


def vacuous_threshold(loss: str, k: int) -> float:
    return 1.0 - 1.0 / k if loss == "zero_one" else LOSS_BOUNDS[loss]


def _median(values):
    v = sorted(values)
    n = len(v)
    mid = n // 2
    return v[mid] if n % 2 else 0.5 * (v[mid - 1] + v[mid])


def aggregate(results: list, by_shots: bool = True) -> list:
    """Per (method, shots) summary rows, plus ``shots = 'all'`` rows."""
    if not results:
        raise InvalidArgument("no episode results to aggregate")
    groups = {}
    for rec in results:
        for m, mr in rec["methods"].items():
            keys = [(m, "all")] + ([(m, rec["shots"])] if by_shots else [])
            for key in keys:
                groups.setdefault(key, []).append((rec, mr))
    rows = []
    order = {m: i for i, m in enumerate(dict.fromkeys(m for m, _ in groups))}
    for (m, s), items in sorted(groups.items(),
                                key=lambda kv: (order[kv[0][0]], str(kv[0][1]).zfill(6))):
        bounds = [mr["certificate"]["bound"] for _, mr in items]
        thr = [vacuous_threshold(mr["certificate"]["loss_name"], rec["way"]) for rec, mr in items]
        gaps = [mr["certificate"]["bound"] - mr["query_risk"] for _, mr in items
                if mr["query_risk"] is not None]
        accs = [mr["query_accuracy"] for _, mr in items if mr["query_accuracy"] is not None]
        rows.append({
            "method": m, "shots": s, "episodes": len(items),
            "pct_non_vacuous": 100.0 * sum(b < t for b, t in zip(bounds, thr)) / len(items),
            "median_gap": _median(gaps) if gaps else None,
            "min_bound": min(bounds), "median_bound": _median(bounds), "max_bound": max(bounds),
            "mean_query_accuracy": float(np.mean(accs)) if accs else None,
            "median_complexity": _median([mr["certificate"]["complexity"] for _, mr in items]),
            "mean_support_risk": float(np.mean([mr["certificate"]["r"] for _, mr in items])),
            "mean_query_risk": float(np.mean([mr["query_risk"] for _, mr in items
                                              if mr["query_risk"] is not None])) if gaps else None,
        })
    return rows


def learning_curve(hyp: HypothesisSet, x, y, k: int, eps: float = 0.05, C: float = 1.0,
                   stride: int = 100, loss: str = "zero_one") -> list:
    """``(m, best support risk over the first m rows, complexity(m), bound(m))``."""
    if stride < 1:
        raise InvalidArgument("stride must be at least 1")
    risks = support_risks(hyp.matrix, x, y, k, loss)
    prefix_min = np.minimum.accumulate(risks)
    n = len(y)
    ms = list(range(stride, hyp.M + 1, stride))
    if not ms or ms[-1] != hyp.M:
        ms.append(hyp.M)
    out = []
    for m in ms:
        comp = finite_hypothesis_complexity(m, n, eps, C)
        out.append((m, float(prefix_min[m - 1]), comp, float(prefix_min[m - 1]) + comp))
    return out


# -- result files ------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return "" if v is None else str(v)


def rows_to_csv(rows: list, columns: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


AGG_COLUMNS = ["method", "shots", "episodes", "pct_non_vacuous", "median_gap", "min_bound",
               "median_bound", "max_bound", "mean_query_accuracy", "median_complexity",
               "mean_support_risk", "mean_query_risk"]
CURVE_COLUMNS = ["shots", "method", "min_bound", "median_bound", "max_bound",
                 "support_err", "query_err", "complexity", "log_complexity", "pct_non_vacuous"]


def bound_vs_shots(agg_rows: list) -> list:
    out = []
    for r in agg_rows:
        if r["shots"] == "all":
            continue
        c = r["median_complexity"]
        out.append({"shots": r["shots"], "method": r["method"], "min_bound": r["min_bound"],
                    "median_bound": r["median_bound"], "max_bound": r["max_bound"],
                    "support_err": r["mean_support_risk"], "query_err": r["mean_query_risk"],
                    "complexity": c, "log_complexity": math.log(c) if c > 0 else None,
                    "pct_non_vacuous": r["pct_non_vacuous"]})
    return sorted(out, key=lambda r: (r["method"], r["shots"]))


def episode_line(rec: dict) -> str:
    clean = {k: v for k, v in rec.items() if not k.startswith("_")}
    return json.dumps(clean, sort_keys=True)


def _init_worker(config, arts):
    global _WORKER
    _WORKER = (config, arts)


def _worker_episode(job):
    config, arts = _WORKER
    return run_episode(config, arts, *job)


def run_benchmark(config: BenchConfig, out_dir: str | None = None,
                  artifacts: Artifacts | None = None) -> tuple:
    """Run every (shots, episode) job. Returns ``(aggregate_rows, results)``
    and, with ``out_dir``, writes episodes.jsonl, aggregate.csv,
    bound_vs_shots.csv, timings.csv and manifest.json."""
    arts = artifacts if artifacts is not None else prepare_artifacts(config, out_dir=out_dir)
    pre_hashes = arts.hashes()
    jobs = [(s, i) for s in config.shots for i in range(config.episodes_per_shot)]
    results, failures = [], []
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers, initializer=_init_worker,
                                 initargs=(config, arts)) as pool:
            futures = [pool.submit(_worker_episode, j) for j in jobs]
            outcomes = []
            for j, f in zip(jobs, futures):
                try:
                    outcomes.append(f.result())
                except SteelError as exc:
                    outcomes.append(exc)
    else:
        outcomes = []
        for j in jobs:
            try:
                outcomes.append(run_episode(config, arts, *j))
            except SteelError as exc:
                outcomes.append(exc)
    for j, o in zip(jobs, outcomes):
        if isinstance(o, Exception):
            log.error("episode %s failed: %s", j, o)
            failures.append({"shots": j[0], "index": j[1], "error": str(o)})
        else:
            if o["hypothesis_hashes"] != pre_hashes:
                raise ArtifactError("hypothesis set changed during the benchmark")
            results.append(o)
    rows = aggregate(results)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "episodes.jsonl"), "w") as fh:
            for rec in results:
                fh.write(episode_line(rec) + "\n")
        _write(out_dir, "aggregate.csv", rows_to_csv(rows, AGG_COLUMNS))
        _write(out_dir, "bound_vs_shots.csv", rows_to_csv(bound_vs_shots(rows), CURVE_COLUMNS))
        timing_rows = [{"episode_id": r["episode_id"], "method": m, "seconds": t}
                       for r in results for m, t in r["_wall_time"].items()]
        _write(out_dir, "timings.csv", rows_to_csv(timing_rows, ["episode_id", "method", "seconds"]))
        manifest = {"config": to_dict(config), "hypothesis_hashes": pre_hashes,
                    "completed": len(results), "failed": failures}
        _write(out_dir, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return rows, results


def _write(out_dir, name, text):
    with open(os.path.join(out_dir, name), "w") as fh:
        fh.write(text)


def format_summary(rows: list) -> str:
    lines = [f"{'method':<13}{'shots':>6}{'eps':>5}{'%nonvac':>9}{'min':>8}{'median':>8}"
             f"{'max':>8}{'gap':>8}{'acc':>8}"]
    for r in rows:
        gap = "" if r["median_gap"] is None else f"{r['median_gap']:.3f}"
        acc = "" if r["mean_query_accuracy"] is None else f"{r['mean_query_accuracy']:.3f}"
        lines.append(f"{r['method']:<13}{str(r['shots']):>6}{r['episodes']:>5}"
                     f"{r['pct_non_vacuous']:>9.1f}{r['min_bound']:>8.3f}{r['median_bound']:>8.3f}"
                     f"{r['max_bound']:>8.3f}{gap:>8}{acc:>8}")
    return "\n".join(lines) + "\n"


def report(results_dir: str) -> tuple:
    """Re-derive aggregates and plot CSVs from ``episodes.jsonl``.

    Returns ``(summary_text, n_skipped)``. Output is a pure function of the
    JSONL contents.
    """
    path = os.path.join(results_dir, "episodes.jsonl")
    if not os.path.exists(path):
        raise ArtifactError(f"no results in {results_dir}")
    results, skipped = [], 0
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                for mr in rec["methods"].values():
                    mr["certificate"]["bound"]
                rec["shots"], rec["way"]
                results.append(rec)
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError):
                skipped += 1
    if not results:
        raise ArtifactError(f"no results in {results_dir}")
    rows = aggregate(results)
    _write(results_dir, "aggregate.csv", rows_to_csv(rows, AGG_COLUMNS))
    _write(results_dir, "bound_vs_shots.csv", rows_to_csv(bound_vs_shots(rows), CURVE_COLUMNS))
    summary = format_summary(rows)
    if skipped:
        summary += f"skipped {skipped} malformed record(s)\n"
    _write(results_dir, "summary.txt", summary)
    return summary, skipped
