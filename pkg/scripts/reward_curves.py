"""Train every algorithm at U=8 and write reward curves plus evaluation metrics.

    python scripts/reward_curves.py --out runs/curves --seeds 0 1 2 3 4

Each (algorithm, seed) gets ``<out>/<algo>/seed<k>/{train,eval}/`` with the
usual episodes.csv / per_user.csv / run.json, and ``<out>/summary.csv`` holds
one evaluated row per cell.
"""

import argparse
import csv
import logging
from pathlib import Path

import numpy as np

from imvol.harness import ALGORITHMS, RunConfig, emit_metrics, evaluate, train
from imvol.policies import BASELINES

log = logging.getLogger("reward_curves")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("runs/curves"))
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--algos", nargs="+", default=list(ALGORITHMS), choices=ALGORITHMS)
    p.add_argument("--users", type=int, default=8)
    p.add_argument("--episodes", type=int, default=200)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    rows = []
    for algo in args.algos:
        for seed in args.seeds:
            cfg = RunConfig(algorithm=algo, seed=seed, episodes=args.episodes)
            cfg = cfg.replace(system=cfg.system.replace(num_users=args.users))
            cell = args.out / algo / f"seed{seed}"
            res = train(cfg)
            emit_metrics(res, cell / "train")
            if res.agent is not None:
                res.agent.save(cell / "checkpoint.json")
            policy = res.agent if res.agent is not None else BASELINES[algo]()
            ev = evaluate(policy, cfg)
            emit_metrics(ev, cell / "eval")
            rewards = [e.reward for e in res.episodes]
            rows.append([algo, seed, np.mean(rewards[:20]), np.mean(rewards[-20:]),
                         ev.mean_reward, ev.mean_latency, ev.success_rate, ev.mean_hit_ratio])
            log.info("%s seed %d: eval reward %.3f latency %.3f success %.2f",
                     algo, seed, ev.mean_reward, ev.mean_latency, ev.success_rate)

    args.out.mkdir(parents=True, exist_ok=True)
    with (args.out / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["algorithm", "seed", "first20_reward", "last20_reward", "eval_reward",
                    "eval_latency", "eval_success_rate", "eval_hit_ratio"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
