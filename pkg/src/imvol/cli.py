"""Command line entry point: ``imvol train|eval|sweep``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .harness import (ALGORITHMS, RunConfig, emit_metrics, emit_sweep, evaluate, make_policy,
                      sweep_users, train)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imvol", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "sweep"):
        s = sub.add_parser(name)
        s.add_argument("--algo", default="sac",
                       help=f"one of {', '.join(ALGORITHMS)} (sweep: comma-separated list)")
        s.add_argument("--config", type=Path, help="JSON with RunConfig/SystemConfig keys")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", type=Path, required=True)
        s.add_argument("--users", help="user count (sweep: comma-separated list)")
        s.add_argument("--episodes", type=int)
        s.add_argument("--transport", choices=("inproc", "tcp-loopback"))
        s.add_argument("--port", type=int, help="localhost port for tcp-loopback (0 = any)")
        if name == "eval":
            s.add_argument("--checkpoint", type=Path, help="agent checkpoint (sac/ddpg)")
        if name == "sweep":
            s.add_argument("--workers", type=int, default=1)
    return p


def _config(args, algorithm: str) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    changes = {"algorithm": algorithm, "out_dir": str(args.out)}
    for key, attr in (("seed", "seed"), ("episodes", "episodes"), ("transport", "transport"),
                      ("port", "port")):
        value = getattr(args, attr)
        if value is not None:
            changes[key] = value
    if args.users and args.command != "sweep":
        changes["system"] = cfg.system.replace(num_users=int(args.users))
    return cfg.replace(**changes)


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "sweep":
        algos = [a.strip() for a in args.algo.split(",")]
        base = _config(args, algos[0])
        counts = [int(u) for u in args.users.split(",")] if args.users else [2, 4, 8, 16]
        rows = sweep_users(base, counts, algos, workers=args.workers)
        emit_sweep(rows, base, args.out)
        return 0
    cfg = _config(args, args.algo)
    if args.command == "train":
        result = train(cfg)
        emit_metrics(result, args.out)
        if result.agent is not None:
            result.agent.save(Path(args.out) / "checkpoint.json")
        return 0
    policy = make_policy(cfg, getattr(args, "checkpoint", None))
    emit_metrics(evaluate(policy, cfg), args.out)
    return 0


def main() -> None:
    try:
        code = run()
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"imvol: error: {exc}", file=sys.stderr)
        code = 1
    sys.exit(code)


if __name__ == "__main__":
    main()
