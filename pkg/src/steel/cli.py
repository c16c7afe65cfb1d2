"""Command-line entry point: ``steel <subcommand> ...``.

Exit codes: 0 ok, 2 config error, 3 artifact error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from . import bounds, harness
from .config import BenchConfig, from_dict, load_config
from .diffusion import load_checkpoint, sample_params, save_checkpoint, train_diffusion
from .errors import (ArtifactError, ConfigError, CorruptionError, FormatError, InvalidArgument,
                     NumericError)
from .hypothesis import load_hypothesis_set, save_hypothesis_set
from .seeding import derive_seed
from .select import HierConfig, exhaustive_select, hierarchical_select
from .taskgen import TaskDistributionConfig, read_episodes, write_episodes
from .zoo import ZooConfig, build_zoo, load_zoo, save_zoo

log = logging.getLogger("steel")

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4


def _bench_config(args) -> BenchConfig:
    cfg = load_config(args.config) if args.config else BenchConfig()
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    return cfg


def _dist_config(path, fallback: BenchConfig) -> TaskDistributionConfig:
    if not path:
        return fallback.dist
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read distribution config {path}: {exc}") from exc
    if "dist" in data:
        return from_dict(BenchConfig, data).dist
    return from_dict(TaskDistributionConfig, data)


def _out(path, args):
    if args.out_dir and not os.path.isabs(path):
        os.makedirs(args.out_dir, exist_ok=True)
        return os.path.join(args.out_dir, path)
    return path


def _read(loader, path):
    if not os.path.exists(path):
        raise ArtifactError(f"missing artifact {path}")
    return loader(path)


def cmd_gen_tasks(args):
    cfg = _bench_config(args)
    dist = _dist_config(args.dist, cfg)
    cfg = replace(cfg, dist=dist, query_per_class=args.query)
    eps = [harness.make_episode(cfg, args.shots, i) for i in range(args.episodes)]
    write_episodes(_out(args.out, args), eps)


def cmd_train_zoo(args):
    cfg = _bench_config(args)
    dist = _dist_config(args.dist, cfg)
    zcfg = ZooConfig(shots=args.shots or cfg.zoo_shots, train=cfg.zoo_train,
                     seed=derive_seed(cfg.master_seed, "zoo"), workers=cfg.workers)
    save_zoo(build_zoo(dist, args.n or cfg.zoo_n, zcfg), _out(args.out, args))


def cmd_train_diffusion(args):
    cfg = _bench_config(args)
    zoo = _read(load_zoo, args.zoo)
    dcfg = replace(cfg.diffusion, seed=derive_seed(cfg.master_seed, "diffusion"))
    if args.epochs is not None:
        dcfg = replace(dcfg, epochs=args.epochs)
    if args.stage2_epochs is not None:
        dcfg = replace(dcfg, stage2_epochs=args.stage2_epochs)
    save_checkpoint(train_diffusion(zoo, dcfg), _out(args.out, args))


def cmd_sample(args):
    ckpt = _read(load_checkpoint, args.ckpt)
    seed = args.seed if args.seed is not None else 0
    save_hypothesis_set(sample_params(ckpt, args.m, seed), _out(args.out, args))


def cmd_adapt(args):
    hyp = _read(load_hypothesis_set, args.hyp)
    episodes = _read(read_episodes, args.episode)
    if not 0 <= args.index < len(episodes):
        raise InvalidArgument(f"episode index {args.index} out of range")
    ep = episodes[args.index]
    if args.search == "exhaustive":
        sel = exhaustive_select(hyp, ep.support_x, ep.support_y, ep.k, args.loss)
    else:
        hcfg = HierConfig(depth=args.depth, silhouette=args.silhouette,
                          seed=args.seed if args.seed is not None else 0)
        sel = hierarchical_select(hyp, ep.support_x, ep.support_y, ep.k, hcfg, args.loss)
    rec = sel.to_dict()
    rec.update({"M": hyp.M, "n": int(len(ep.support_y)), "loss": args.loss,
                "hypothesis_hash": hyp.digest(), "episode_seed": ep.seed})
    with open(_out(args.out, args), "w") as fh:
        json.dump(rec, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_certify(args):
    r, M, n = args.r, args.M, args.n
    if args.selection:
        with open(args.selection) as fh:
            sel = json.load(fh)
        r = sel["r"] if r is None else r
        M = sel["M"] if M is None else M
        n = sel["n"] if n is None else n
    if r is None or n is None:
        raise ConfigError("certify needs --r and --n (or --selection)")
    if args.family == "finite":
        if M is None:
            raise ConfigError("finite-hypothesis certificate needs --M")
        cert = bounds.finite_hypothesis_certificate(r, M, n, args.epsilon, args.C)
    elif args.family == "quantization":
        if args.K is None:
            raise ConfigError("quantization certificate needs --K")
        cert = bounds.quantization_certificate(r, args.K, n, args.epsilon, args.C)
    else:
        if args.KL is None:
            raise ConfigError("vanilla certificate needs --KL")
        cert = bounds.vanilla_certificate(r, args.KL, n, args.epsilon, args.C)
    text = json.dumps(cert.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(_out(args.out, args), "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_bench(args):
    cfg = _bench_config(args)
    out_dir = args.out_dir or "results"
    rows, _ = harness.run_benchmark(cfg, out_dir)
    sys.stdout.write(harness.format_summary(rows))


def cmd_report(args):
    results_dir = args.results_dir or args.out_dir or "results"
    summary, _ = harness.report(results_dir)
    sys.stdout.write(summary)


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags with suppressed defaults so that
    # `steel --seed 3 bench` and `steel bench --seed 3` both work
    none = argparse.SUPPRESS if suppress else None
    flags = argparse.ArgumentParser(add_help=False)
    flags.add_argument("--seed", type=int, default=none, help="master seed")
    flags.add_argument("--config", default=none, help="benchmark config (JSON)")
    flags.add_argument("--out-dir", default=none)
    flags.add_argument("-v", "--verbose", action="store_true",
                       default=argparse.SUPPRESS if suppress else False)
    return flags


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="steel", parents=[_global_flags(suppress=False)])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-tasks", parents=[common], help="sample episodes to JSONL")
    s.add_argument("--dist")
    s.add_argument("--episodes", type=int, default=10)
    s.add_argument("--shots", type=int, default=16)
    s.add_argument("--query", type=int, default=400)
    s.add_argument("--out", default="episodes.jsonl")
    s.set_defaults(func=cmd_gen_tasks)

    s = sub.add_parser("train-zoo", parents=[common], help="train one adapter per task")
    s.add_argument("--dist")
    s.add_argument("--n", type=int)
    s.add_argument("--shots", type=int)
    s.add_argument("--out", default="zoo.stzo")
    s.set_defaults(func=cmd_train_zoo)

    s = sub.add_parser("train-diffusion", parents=[common], help="fit the diffusion model")
    s.add_argument("--zoo", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--stage2-epochs", type=int)
    s.add_argument("--out", default="diffusion.stdf")
    s.set_defaults(func=cmd_train_diffusion)

    s = sub.add_parser("sample", parents=[common], help="draw a hypothesis set")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--m", type=int, default=2000)
    s.add_argument("--out", default="hyp.stzo")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("adapt", parents=[common], help="select an adapter for one episode")
    s.add_argument("--hyp", required=True)
    s.add_argument("--episode", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--search", choices=["exhaustive", "hier"], default="exhaustive")
    s.add_argument("--depth", type=int, default=1)
    s.add_argument("--silhouette", choices=["max", "min"], default="max")
    s.add_argument("--loss", choices=sorted(bounds.LOSS_BOUNDS), default="zero_one")
    s.add_argument("--out", default="sel.json")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("certify", parents=[common], help="compute a risk certificate")
    s.add_argument("--family", choices=["finite", "quantization", "vanilla"], default="finite")
    s.add_argument("--selection", help="selection JSON from `adapt`")
    s.add_argument("--r", type=float)
    s.add_argument("--M", type=int)
    s.add_argument("--K", type=float)
    s.add_argument("--KL", type=float)
    s.add_argument("--n", type=int)
    s.add_argument("--epsilon", type=float, default=0.05)
    s.add_argument("--C", type=float, default=1.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_certify)

    s = sub.add_parser("bench", parents=[common], help="run the full benchmark")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("report", parents=[common], help="summarize a results directory")
    s.add_argument("--results-dir")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, InvalidArgument) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArtifactError, FormatError, CorruptionError, FileNotFoundError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
