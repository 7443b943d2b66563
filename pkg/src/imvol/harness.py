"""Training / evaluation driver and metric files.

Every environment interaction goes through :class:`imvol.e2.E2Session`, so
policies only ever see states decoded from report indications.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .agents import AGENTS, DdpgAgent, SacAgent
from .e2 import E2Session
from .env import RenderingSite, SystemConfig, state_vector
from .nn import ReplayBuffer, UsageError
from .policies import BASELINES

log = logging.getLogger(__name__)

ALGORITHMS = ("sac", "ddpg", "avg", "cloud-avg")
EPISODE_FIELDS = ("episode", "reward", "mean_qoe", "mean_latency", "mean_hit_ratio",
                  "success_rate")
USER_FIELDS = ("user", "tier", "mean_qoe", "mean_latency", "mean_hit_ratio", "success_rate")
SWEEP_FIELDS = ("algorithm", "users", "seed", "success_rate", "mean_reward", "mean_latency",
                "mean_qoe", "mean_hit_ratio")


@dataclass(frozen=True)
class RunConfig:
    algorithm: str = "sac"
    episodes: int = 200
    steps_per_episode: int = 20
    updates_per_env_step: int = 10
    seed: int = 0
    eval_episodes: int = 20
    out_dir: str = "runs/default"
    system: SystemConfig = field(default_factory=SystemConfig)
    transport: str = "inproc"
    port: int = 0
    batch_size: int = 128
    buffer_capacity: int = 10_000
    report_period: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise UsageError(f"unknown algorithm {self.algorithm!r}; pick one of {ALGORITHMS}")
        for name in ("episodes", "steps_per_episode", "updates_per_env_step", "eval_episodes",
                     "batch_size", "buffer_capacity", "report_period"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be positive")
        if self.transport not in ("inproc", "tcp-loopback"):
            raise UsageError(f"unknown transport {self.transport!r}")

    @property
    def learning(self) -> bool:
        return self.algorithm in AGENTS

    def resolved_system(self) -> SystemConfig:
        site = RenderingSite.CLOUD if self.algorithm == "cloud-avg" else RenderingSite.OCLOUD
        return self.system.replace(steps_per_episode=self.steps_per_episode, rendering_site=site)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["system"] = self.resolved_system().to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        run_keys = {f.name for f in dataclasses.fields(cls)} - {"system"}
        sys_keys = {f.name for f in dataclasses.fields(SystemConfig)}
        run_args, sys_args = {}, dict(data.get("system", {}))
        for key, value in data.items():
            if key == "system":
                continue
            if key in run_keys:
                run_args[key] = value
            elif key in sys_keys:
                sys_args[key] = value
            else:
                raise UsageError(f"unknown config key {key!r}")
        sys_args.pop("rendering_site", None)  # implied by the algorithm
        if "steps_per_episode" in sys_args and "steps_per_episode" not in run_args:
            run_args["steps_per_episode"] = sys_args["steps_per_episode"]
        return cls(system=SystemConfig.from_dict(sys_args), **run_args)

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None


@dataclass
class EpisodeRecord:
    episode: int
    reward: float
    mean_qoe: float
    mean_latency: float
    mean_hit_ratio: float
    success_rate: float
    wall_clock: float = 0.0

    def row(self) -> list:
        return [getattr(self, k) for k in EPISODE_FIELDS]


@dataclass
class UserRecord:
    user: int
    tier: int
    mean_qoe: float
    mean_latency: float
    mean_hit_ratio: float
    success_rate: float

    def row(self) -> list:
        return [getattr(self, k) for k in USER_FIELDS]


class _UserStats:
    def __init__(self, n: int):
        self.qoe = np.zeros(n)
        self.latency = np.zeros(n)
        self.phi = np.zeros(n)
        self.success = np.zeros(n)
        self.count = 0

    def add(self, outcome) -> None:
        self.qoe += outcome.qoe
        self.latency += outcome.t_total
        self.phi += outcome.phi
        self.success += outcome.success
        self.count += 1

    def records(self, tiers: Sequence[int]) -> list[UserRecord]:
        c = max(self.count, 1)
        return [UserRecord(u, int(tiers[u]), float(self.qoe[u] / c), float(self.latency[u] / c),
                           float(self.phi[u] / c), float(self.success[u] / c))
                for u in range(len(tiers))]


@dataclass
class RunResult:
    config: RunConfig
    episodes: list[EpisodeRecord]
    per_user: list[UserRecord]
    agent: SacAgent | DdpgAgent | None = None
    losses: list[dict] = field(default_factory=list)

    @property
    def mean_reward(self) -> float:
        return float(np.mean([e.reward for e in self.episodes]))

    @property
    def mean_latency(self) -> float:
        return float(np.mean([e.mean_latency for e in self.episodes]))

    @property
    def success_rate(self) -> float:
        return float(np.mean([e.success_rate for e in self.episodes]))

    @property
    def mean_qoe(self) -> float:
        return float(np.mean([e.mean_qoe for e in self.episodes]))

    @property
    def mean_hit_ratio(self) -> float:
        return float(np.mean([e.mean_hit_ratio for e in self.episodes]))


def make_agent(cfg: RunConfig) -> SacAgent | DdpgAgent:
    system = cfg.resolved_system()
    return AGENTS[cfg.algorithm](system.state_dim, system.action_dim, batch_size=cfg.batch_size,
                                 iterations=cfg.updates_per_env_step, seed=cfg.seed,
                                 dtype=np.dtype(cfg.dtype))


def make_policy(cfg: RunConfig, checkpoint: str | Path | None = None):
    if not cfg.learning:
        return BASELINES[cfg.algorithm]()
    if checkpoint is None:
        raise UsageError(f"evaluating {cfg.algorithm} needs a checkpoint")
    return AGENTS[cfg.algorithm].load(checkpoint, seed=cfg.seed)


def _run(policy, cfg: RunConfig, episodes: int, env_seed, explore: bool,
         agent=None, buffer: ReplayBuffer | None = None) -> RunResult:
    system = cfg.resolved_system()
    stats = _UserStats(system.num_users)
    records: list[EpisodeRecord] = []
    losses: list[dict] = []
    with E2Session(policy, system, env_seed, cfg.transport, cfg.port,
                   cfg.report_period) as session:
        tiers = [s.tier for s in session.reset()]
        for ep in range(episodes):
            if ep:
                session.reset()
            start = time.perf_counter()
            ep_reward, ep_qoe, ep_lat, ep_phi, ep_succ = 0.0, 0.0, 0.0, 0.0, 0.0
            for _ in range(system.steps_per_episode):
                rec = session.run_slot(explore=explore)
                out = rec.outcome
                if out is None:
                    raise RuntimeError("control request rejected by the E2 node")
                stats.add(out)
                ep_reward += out.reward
                ep_qoe += float(np.mean(out.qoe))
                ep_lat += float(np.mean(out.t_total))
                ep_phi += float(np.mean(out.phi))
                ep_succ += float(np.mean(out.success))
                if buffer is not None and rec.raw_action is not None:
                    buffer.push(state_vector(rec.states), rec.raw_action, out.reward,
                                state_vector(rec.next_states))
                    # warmup: no update until a full batch is stored
                    if len(buffer) >= cfg.batch_size:
                        losses.append(agent.update(buffer).as_dict())
            n = system.steps_per_episode
            records.append(EpisodeRecord(ep, ep_reward, ep_qoe / n, ep_lat / n, ep_phi / n,
                                         ep_succ / n, time.perf_counter() - start))
            log.debug("%s episode %d reward %.4f", cfg.algorithm, ep, ep_reward)
    return RunResult(cfg, records, stats.records(tiers), agent, losses)


def train(cfg: RunConfig) -> RunResult:
    """Train a learning agent (explore on) for ``cfg.episodes``.

    Baselines have nothing to learn; they are simply rolled out on the same
    schedule so their reward curves line up with the learners'.
    """
    if not cfg.learning:
        return _run(BASELINES[cfg.algorithm](), cfg, cfg.episodes, cfg.seed, explore=False)
    agent = make_agent(cfg)
    system = cfg.resolved_system()
    buffer = ReplayBuffer(system.state_dim, system.action_dim, cfg.buffer_capacity)
    return _run(agent, cfg, cfg.episodes, cfg.seed, explore=True, agent=agent, buffer=buffer)


def eval_seed(seed: int) -> list[int]:
    # channel stream for evaluation, disjoint from the training stream
    return [seed, 7]


def evaluate(policy, cfg: RunConfig) -> RunResult:
    """Deterministic roll-out of ``policy`` for ``cfg.eval_episodes`` episodes."""
    return _run(policy, cfg, cfg.eval_episodes, eval_seed(cfg.seed), explore=False)


def cell_seed(base_seed: int, algorithm: str, users: int) -> int:
    return base_seed + 1000 * ALGORITHMS.index(algorithm) + users


def _sweep_cell(args: tuple[RunConfig, str, int]) -> dict:
    base, algorithm, users = args
    seed = cell_seed(base.seed, algorithm, users)
    cfg = base.replace(algorithm=algorithm, seed=seed,
                       system=base.system.replace(num_users=users))
    policy = train(cfg).agent if cfg.learning else BASELINES[algorithm]()
    res = evaluate(policy, cfg)
    return {"algorithm": algorithm, "users": users, "seed": seed,
            "success_rate": res.success_rate, "mean_reward": res.mean_reward,
            "mean_latency": res.mean_latency, "mean_qoe": res.mean_qoe,
            "mean_hit_ratio": res.mean_hit_ratio}


def sweep_users(base: RunConfig, user_counts: Sequence[int],
                algorithms: Sequence[str] = ALGORITHMS, workers: int = 1) -> list[dict]:
    """Train (when learning) and evaluate every (algorithm, U) cell."""
    cells = [(base, a, u) for a in algorithms for u in user_counts]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_cell, cells))
    return [_sweep_cell(c) for c in cells]


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in row])


def _prepare(out_dir: str | Path) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    return out


def emit_metrics(result: RunResult, out_dir: str | Path) -> list[Path]:
    """Write ``episodes.csv``, ``per_user.csv`` and ``run.json`` into ``out_dir``."""
    out = _prepare(out_dir)
    paths = [out / "episodes.csv", out / "per_user.csv", out / "run.json"]
    _write_csv(paths[0], EPISODE_FIELDS, [e.row() for e in result.episodes])
    _write_csv(paths[1], USER_FIELDS, [u.row() for u in result.per_user])
    paths[2].write_text(json.dumps(result.config.to_dict(), indent=2, sort_keys=True) + "\n")
    return paths


def emit_sweep(rows: Sequence[dict], base: RunConfig, out_dir: str | Path) -> list[Path]:
    out = _prepare(out_dir)
    table, run_json = out / "sweep.csv", out / "run.json"
    _write_csv(table, SWEEP_FIELDS, [[r[k] for k in SWEEP_FIELDS] for r in rows])
    run_json.write_text(json.dumps(base.to_dict(), indent=2, sort_keys=True) + "\n")
    return [table, run_json]


def read_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
