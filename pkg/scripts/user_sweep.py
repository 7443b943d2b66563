"""Success rate and reward versus number of users for every algorithm.

    python scripts/user_sweep.py --out runs/sweep --seeds 0 1 2 --workers 1
"""

import argparse
import logging
from pathlib import Path

from imvol.harness import ALGORITHMS, RunConfig, emit_sweep, sweep_users


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("runs/sweep"))
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--users", type=int, nargs="+", default=[2, 4, 8, 16])
    p.add_argument("--algos", nargs="+", default=list(ALGORITHMS), choices=ALGORITHMS)
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for seed in args.seeds:
        base = RunConfig(seed=seed)
        rows = sweep_users(base, args.users, args.algos, workers=args.workers)
        emit_sweep(rows, base, args.out / f"seed{seed}")
        for r in rows:
            logging.info("seed %d %s U=%d success %.3f reward %.2f", seed, r["algorithm"],
                         r["users"], r["success_rate"], r["mean_reward"])


if __name__ == "__main__":
    main()
