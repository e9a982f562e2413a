"""``subsearch`` command line."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import bench
from .config import ConfigError, RunConfig, load_config
from .graph import (
    GraphFormatError,
    SamplingError,
    p_schedule,
    random_walk_sample,
    read_graph,
    serialize_mapping,
    write_graph,
)
from .model import PolicyNet
from .search import SearchBudget, brute_force_oracle, solve

log = logging.getLogger("subsearch")


def _common(p: argparse.ArgumentParser, search: bool = False) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--log-level", default="WARNING")
    if search:
        p.add_argument("--step-limit", type=int, help="search step budget (0 = none)")
        p.add_argument("--time-limit", type=float, help="wall-clock seconds per pair (0 = none)")
        p.add_argument("--max-solutions", type=int, help="stop after this many matches (0 = all)")
        p.add_argument("--no-restarts", action="store_true", help="disable promise-based restarts")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="subsearch", description="Learned-order subgraph matching.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="sample queries from a target by random walk")
    _common(p)
    p.add_argument("--target", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--p", type=float, help="walk parameter (single query)")
    p.add_argument("--count", type=int, help="write COUNT queries with a log-uniform p sweep")
    p.add_argument("--out", help="query file (single) or directory (with --count)")

    p = sub.add_parser("solve", help="find matches of one query")
    _common(p, search=True)
    p.add_argument("--query", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--policy", choices=bench.POLICIES, default="degree")
    p.add_argument("--model")
    p.add_argument("--out", help="write match and stats lines here instead of stdout")

    p = sub.add_parser("train", help="train the policy network on a target graph")
    _common(p)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--iterations", type=int)
    p.add_argument("--log", help="per-iteration CSV log")
    p.add_argument("--exclude-dir", help="held-out queries that training and validation must avoid")
    p.add_argument("--init", help="start from this checkpoint")

    p = sub.add_parser("eval", help="run a policy over a query directory")
    _common(p, search=True)
    p.add_argument("--queries", required=True, help="directory of .graph query files")
    p.add_argument("--target", required=True)
    p.add_argument("--policy", choices=bench.POLICIES, required=True)
    p.add_argument("--model")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="eval CSV path (default stdout)")

    p = sub.add_parser("oracle", help="count matches by exhaustive enumeration")
    p.add_argument("--query", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--log-level", default="WARNING")

    p = sub.add_parser("gradcheck", help="finite-difference check of the training loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--log-level", default="WARNING")

    p = sub.add_parser("curves", help="solved-over-time curve from an eval CSV")
    p.add_argument("--eval", required=True, dest="eval_csv")
    p.add_argument("--bucket", type=float, default=1.0, help="bucket width in seconds")
    p.add_argument("--horizon", type=float)
    p.add_argument("--out")
    p.add_argument("--log-level", default="WARNING")
    return ap


def _resolve(args) -> RunConfig:
    overrides: dict[str, object] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    direct = {
        "seed": getattr(args, "seed", None),
        "step_limit": getattr(args, "step_limit", None),
        "time_limit": getattr(args, "time_limit", None),
        "solution_cap": getattr(args, "max_solutions", None),
        "iterations": getattr(args, "iterations", None),
    }
    overrides.update({k: v for k, v in direct.items() if v is not None})
    if getattr(args, "no_restarts", False):
        overrides["restarts"] = False
    return load_config(args.config, overrides)


def _budget(cfg: RunConfig) -> SearchBudget:
    return SearchBudget(
        time_limit=cfg.time_limit,
        step_limit=cfg.step_limit,
        solution_cap=cfg.solution_cap or None,
        restart_threshold=cfg.restart_threshold,
        restart_budget=cfg.restart_budget,
    )


def cmd_sample(args) -> int:
    cfg = _resolve(args)
    G = read_graph(args.target)
    if args.count is None:
        if args.p is None:
            raise ConfigError("sample needs --p or --count")
        sq = random_walk_sample(G, args.size, args.p, cfg.seed)
        if args.out:
            write_graph(sq.query, args.out)
            Path(args.out).with_suffix(".map").write_text(serialize_mapping(sq.truth_mapping))
        else:
            from .graph import serialize_graph

            sys.stdout.write(serialize_graph(sq.query))
        return 0
    if not args.out:
        raise ConfigError("--count needs --out DIR")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(args.count - 1)))
    for i in range(args.count):
        p = args.p if args.p is not None else (p_schedule(i + 1, args.count) if args.count > 1 else 1.0)
        sq = random_walk_sample(G, args.size, p, cfg.seed * 100_003 + i)
        stem = out / f"q{i:0{width}d}"
        write_graph(sq.query, stem.with_suffix(".graph"))
        stem.with_suffix(".map").write_text(serialize_mapping(sq.truth_mapping))
    return 0


def cmd_solve(args) -> int:
    cfg = _resolve(args)
    q = read_graph(args.query)
    G = read_graph(args.target)
    net = PolicyNet.load(args.model) if args.model else None
    policy = bench.make_policy(args.policy, cfg.seed, net)
    out = solve(q, G, policy, _budget(cfg), restarts=cfg.restarts)
    lines = ["M " + " ".join(f"{u}:{v}" for u, v in enumerate(m)) for m in out.matches]
    if out.solved:
        first = out.first_solution_ms if cfg.time_limit > 0 else out.first_solution_step * bench.VIRTUAL_MS_PER_STEP
        first_s = f"{first:.3f}"
    else:
        first_s = "-"
    lines.append(f"S {out.steps} {first_s} {len(out.matches)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_train(args) -> int:
    from .train import Trainer, make_validation_set

    cfg = _resolve(args)
    G = read_graph(args.target)
    exclude = []
    if args.exclude_dir:
        exclude = [read_graph(p) for p in bench.list_queries(args.exclude_dir)]
    net = PolicyNet.load(args.init) if args.init else PolicyNet(cfg.encoder(), seed=cfg.seed)
    validation = make_validation_set(G, seed=cfg.seed + 1, exclude=exclude) if cfg.val_every else []
    trainer = Trainer(net, G, cfg.trainer(), validation=validation, exclude=exclude)
    trainer.fit(cfg.iterations, log_path=args.log)
    if trainer.best is not None:
        net.params.restore(trainer.best.params)
    net.save(args.out)
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    model_text = None
    if args.policy == "neural":
        if not args.model:
            raise ConfigError("--policy neural needs --model")
        model_text = Path(args.model).read_text()
        PolicyNet.from_text(model_text)  # fail fast on an unloadable model
    queries = bench.list_queries(args.queries)
    records = bench.iter_eval_harness(
        queries,
        args.target,
        args.policy,
        time_limit=cfg.time_limit,
        step_limit=cfg.step_limit,
        solution_cap=cfg.solution_cap or None,
        seed=cfg.seed,
        model_text=model_text,
        restart_threshold=cfg.restart_threshold,
        restart_budget=cfg.restart_budget,
        restarts=cfg.restarts,
        workers=args.workers,
    )
    if args.out:
        with open(args.out, "w", newline="") as fh:
            bench.write_eval_csv(records, fh)
    else:
        bench.write_eval_csv(records, sys.stdout)
    return 0


def cmd_oracle(args) -> int:
    count, _ = brute_force_oracle(read_graph(args.query), read_graph(args.target))
    print(count)
    return 0


def cmd_gradcheck(args) -> int:
    from .train import gradient_check

    res = gradient_check(args.seed, num_coords=args.coords)
    print(f"max_rel_error {res.max_rel_error:.3e}")
    return 0 if res.max_rel_error < 1e-4 else 1


def cmd_curves(args) -> int:
    with open(args.eval_csv, newline="") as fh:
        records = bench.read_eval_csv(fh)
    points = bench.aggregate_curves(records, args.bucket, args.horizon)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            bench.write_curves_csv(points, fh)
    else:
        bench.write_curves_csv(points, sys.stdout)
    return 0


COMMANDS = {
    "sample": cmd_sample,
    "solve": cmd_solve,
    "train": cmd_train,
    "eval": cmd_eval,
    "oracle": cmd_oracle,
    "gradcheck": cmd_gradcheck,
    "curves": cmd_curves,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        parser.error(str(e))  # exits 2
    except (OSError, GraphFormatError, SamplingError, ValueError) as e:
        print(f"subsearch {args.command}: {e}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
