"""System model and slot dynamics for multiuser volumetric video playback.

One gNB serves ``U`` head-mounted displays. Every slot each user uploads a
pose update, the O-Cloud (or a remote cloud) renders a fraction ``phi`` of the
frame's pixels, and the rendered frame is delivered on the downlink. Units are
abstract but internally consistent (demands 10-40, budgets 40/10/10, noise 1).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

# Compute and download demand per resolution tier (480P, 720P, 1080P, 2K).
TIER_DEMANDS = (10.0, 20.0, 30.0, 40.0)
TIER_NAMES = ("480P", "720P", "1080P", "2K")
COV_EPS = 1e-8
SHARE_EPS = 1e-8
GROUPS = ("b_ul", "f", "b_dl", "p_dl", "phi")


class DomainError(ValueError):
    """An input lies outside the domain of a model function."""


class RenderingSite(str, Enum):
    OCLOUD = "OCloud"
    CLOUD = "Cloud"


@dataclass(frozen=True)
class SystemConfig:
    num_users: int = 8
    b_max_dl: float = 40.0
    b_max_ul: float = 40.0
    f_max: float = 10.0
    p_max: float = 10.0
    sigma2: float = 1.0
    t_th: float = 5.0
    beta1: float = 0.5
    # one-way RAN <-> cloud latency, paid twice per frame under cloud rendering
    backhaul_latency: float = 0.005
    gain_range: tuple[float, float] = (0.5, 2.0)
    upload_power: float = 1.0
    pose_payload: float = 0.1
    qoe_floor: float = -1.0
    steps_per_episode: int = 20
    rendering_site: RenderingSite = RenderingSite.OCLOUD

    def __post_init__(self):
        object.__setattr__(self, "rendering_site", RenderingSite(self.rendering_site))
        object.__setattr__(self, "gain_range", tuple(float(g) for g in self.gain_range))
        if self.num_users < 1:
            raise DomainError(f"num_users must be positive, got {self.num_users}")
        for name in ("b_max_dl", "b_max_ul", "f_max", "p_max", "sigma2", "t_th"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise DomainError(f"{name} must be finite and > 0, got {value}")
        lo, hi = self.gain_range
        if len(self.gain_range) != 2 or not (0 < lo <= hi):
            raise DomainError(f"gain_range must satisfy 0 < lo <= hi, got {self.gain_range}")
        if self.backhaul_latency < 0:
            raise DomainError("backhaul_latency must be non-negative")
        if self.upload_power <= 0 or self.pose_payload <= 0:
            raise DomainError("upload_power and pose_payload must be > 0")
        if self.steps_per_episode < 1:
            raise DomainError("steps_per_episode must be positive")

    @property
    def state_dim(self) -> int:
        return 5 * self.num_users

    @property
    def action_dim(self) -> int:
        return 5 * self.num_users

    def budgets(self) -> dict[str, float]:
        return {"b_ul": self.b_max_ul, "f": self.f_max, "b_dl": self.b_max_dl, "p_dl": self.p_max}

    def replace(self, **changes) -> "SystemConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["rendering_site"] = self.rendering_site.value
        d["gain_range"] = list(self.gain_range)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SystemConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DomainError(f"unknown SystemConfig keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "SystemConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class UserState:
    gain: float
    a_ul: float
    a_comp: float
    a_dl: float
    p_ul: float
    tier: int

    def as_vector(self) -> list[float]:
        return [self.gain, self.a_ul, self.a_comp, self.a_dl, self.p_ul]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "UserState":
        return cls(
            gain=float(data["gain"]),
            a_ul=float(data["a_ul"]),
            a_comp=float(data["a_comp"]),
            a_dl=float(data["a_dl"]),
            p_ul=float(data["p_ul"]),
            tier=int(data["tier"]),
        )


def state_vector(states: Sequence[UserState]) -> np.ndarray:
    """Flatten per-user observations into the RL state ``[g, A^U, A^C, A^D, p^U] * U``."""
    return np.array([v for s in states for v in s.as_vector()], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class AllocationAction:
    b_ul: np.ndarray
    f: np.ndarray
    b_dl: np.ndarray
    p_dl: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        for name in GROUPS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        sizes = {getattr(self, name).shape for name in GROUPS}
        if len(sizes) != 1 or len(sizes.pop()) != 1:
            raise DomainError("allocation groups must be 1-D and equally sized")

    def __eq__(self, other) -> bool:
        if not isinstance(other, AllocationAction):
            return NotImplemented
        return all(np.array_equal(getattr(self, g), getattr(other, g)) for g in GROUPS)

    __hash__ = None

    @property
    def num_users(self) -> int:
        return self.phi.shape[0]

    def user(self, u: int) -> tuple[float, float, float, float, float]:
        return (float(self.b_ul[u]), float(self.f[u]), float(self.b_dl[u]),
                float(self.p_dl[u]), float(self.phi[u]))

    def violations(self, config: SystemConfig, rtol: float = 1e-9) -> list[str]:
        """Return human-readable reasons this action breaks the budget constraints."""
        reasons = []
        if any(not np.all(np.isfinite(getattr(self, g))) for g in GROUPS):
            reasons.append("non-finite allocation")
            return reasons
        if self.num_users != config.num_users:
            reasons.append("user count mismatch")
        if any(np.any(getattr(self, g) < 0) for g in GROUPS):
            reasons.append("negative allocation")
        labels = {"b_ul": "upload bandwidth", "f": "compute", "b_dl": "download bandwidth",
                  "p_dl": "power"}
        for group, budget in config.budgets().items():
            if float(np.sum(getattr(self, group))) > budget * (1 + rtol):
                reasons.append(f"{labels[group]} budget exceeded")
        if np.any(self.phi > 1) or np.any(self.phi < 0):
            reasons.append("hit ratio out of range")
        return reasons

    def to_dict(self) -> dict:
        return {g: [float(v) for v in getattr(self, g)] for g in GROUPS}

    @classmethod
    def from_dict(cls, data: dict) -> "AllocationAction":
        return cls(**{g: [float(v) for v in data[g]] for g in GROUPS})


@dataclass(frozen=True)
class StepOutcome:
    t_ul: np.ndarray
    t_comp: np.ndarray
    t_dl: np.ndarray
    t_total: np.ndarray
    qoe: np.ndarray
    success: np.ndarray
    phi: np.ndarray
    reward: float

    def equals(self, other: "StepOutcome") -> bool:
        """Bitwise equality of every field."""
        return all(
            np.array_equal(getattr(self, f.name), getattr(other, f.name))
            for f in dataclasses.fields(self)
        )


def _check_nonneg(**values: float) -> None:
    for name, v in values.items():
        if not math.isfinite(v) or v < 0:
            raise DomainError(f"{name} must be finite and >= 0, got {v}")


def _shannon(bandwidth: float, power: float, gain: float, sigma2: float) -> float:
    _check_nonneg(bandwidth=bandwidth, power=power)
    if not (math.isfinite(gain) and gain > 0):
        raise DomainError(f"gain must be finite and > 0, got {gain}")
    if not (math.isfinite(sigma2) and sigma2 > 0):
        raise DomainError(f"sigma2 must be finite and > 0, got {sigma2}")
    if bandwidth == 0 or power == 0:
        return 0.0
    return bandwidth * math.log2(1.0 + power * gain / sigma2)


def download_rate(b_dl: float, p_dl: float, gain: float, sigma2: float) -> float:
    """gNB to user rate ``b * log2(1 + p g / sigma2)``."""
    return _shannon(b_dl, p_dl, gain, sigma2)


def upload_rate(b_ul: float, p_ul: float, gain: float, sigma2: float) -> float:
    """User to gNB rate, same Shannon form with the user's fixed upload power."""
    return _shannon(b_ul, p_ul, gain, sigma2)


def frame_latency(user: UserState, b_ul: float, f: float, b_dl: float, p_dl: float,
                  phi: float, config: SystemConfig) -> tuple[float, float, float, float]:
    """Upload, render and download delay of one frame plus their total.

    A zero rate or zero compute on a non-empty transfer makes the slot
    infeasible; the affected component and the total become ``inf``.
    """
    _check_nonneg(f=f, phi=phi)
    r_ul = upload_rate(b_ul, user.p_ul, user.gain, config.sigma2)
    r_dl = download_rate(b_dl, p_dl, user.gain, config.sigma2)
    t_ul = user.a_ul / r_ul if r_ul > 0 else math.inf
    if phi == 0:
        t_comp = t_dl = 0.0
    else:
        t_comp = user.a_comp * phi / f if f > 0 else math.inf
        t_dl = user.a_dl * phi / r_dl if r_dl > 0 else math.inf
    t_total = t_ul + t_comp + t_dl
    if config.rendering_site is RenderingSite.CLOUD:
        t_total += 2.0 * config.backhaul_latency
    return t_ul, t_comp, t_dl, t_total


def qoe(t_total: float, phi: float, t_th: float, floor: float = -1.0) -> float:
    """Weber-Fechner QoE ``(1 - T/T_th) ln(1 + phi)``; ``floor`` for infeasible slots."""
    if not (0.0 <= phi <= 1.0):
        raise DomainError(f"phi must lie in [0, 1], got {phi}")
    if not t_th > 0:
        raise DomainError(f"t_th must be > 0, got {t_th}")
    if math.isinf(t_total):
        return floor
    return (1.0 - t_total / t_th) * math.log1p(phi)


def cov(values: Sequence[float]) -> float:
    """Coefficient of variation with population std and an ``|mean| + 1e-8`` denominator."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise DomainError("cov of an empty list")
    if arr.size == 1:
        return 0.0
    return float(np.std(arr) / (abs(np.mean(arr)) + COV_EPS))


def reward(qoes: Sequence[float], beta1: float) -> float:
    """System reward: sum of QoE minus the fairness penalty ``beta1 * CoV``."""
    c = cov(qoes)
    return float(np.sum(np.asarray(qoes, dtype=np.float64))) - beta1 * c


def normalize_action(raw: Sequence[float], config: SystemConfig) -> AllocationAction:
    """Map a raw policy vector in ``[0, 1]^{5U}`` onto the budget constraints.

    Layout is group-major: ``[b_ul * U, f * U, b_dl * U, p_dl * U, phi * U]``.
    Each resource group is split in proportion to ``raw_u + eps``, so every
    budget is spent in full and an all-zero group becomes equal shares.
    """
    arr = np.asarray(raw, dtype=np.float64)
    n = config.num_users
    if arr.shape != (5 * n,):
        raise DomainError(f"raw action must have length {5 * n}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("raw action contains non-finite entries")
    arr = np.clip(arr, 0.0, 1.0)
    groups = arr.reshape(5, n)
    out = {}
    for i, (name, budget) in enumerate(config.budgets().items()):
        w = groups[i] + SHARE_EPS
        out[name] = budget * w / np.sum(w)
    out["phi"] = groups[4].copy()
    return AllocationAction(**out)


def sample_gains(config: SystemConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi = config.gain_range
    return rng.uniform(lo, hi, size=config.num_users)


def reset(config: SystemConfig, seed: int | np.random.Generator) -> list[UserState]:
    """Initial per-user states; user ``u`` plays resolution tier ``u mod 4``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    gains = sample_gains(config, rng)
    states = []
    for u in range(config.num_users):
        tier = u % len(TIER_DEMANDS)
        demand = TIER_DEMANDS[tier]
        states.append(UserState(gain=float(gains[u]), a_ul=config.pose_payload, a_comp=demand,
                                a_dl=demand, p_ul=config.upload_power, tier=tier))
    return states


def evaluate_slot(states: Sequence[UserState], action: AllocationAction,
                  config: SystemConfig) -> StepOutcome:
    """Latency, QoE and reward for one slot, without advancing the channel."""
    n = len(states)
    if action.num_users != n:
        raise DomainError(f"action covers {action.num_users} users, state has {n}")
    cols = np.empty((4, n))
    q = np.empty(n)
    for u, s in enumerate(states):
        b_ul, f, b_dl, p_dl, phi = action.user(u)
        cols[:, u] = frame_latency(s, b_ul, f, b_dl, p_dl, phi, config)
        q[u] = qoe(cols[3, u], phi, config.t_th, config.qoe_floor)
    success = cols[3] <= config.t_th
    return StepOutcome(t_ul=cols[0], t_comp=cols[1], t_dl=cols[2], t_total=cols[3], qoe=q,
                       success=success, phi=action.phi.copy(), reward=reward(q, config.beta1))


def step(states: Sequence[UserState], action: AllocationAction, config: SystemConfig,
         rng: np.random.Generator) -> tuple[list[UserState], StepOutcome]:
    outcome = evaluate_slot(states, action, config)
    gains = sample_gains(config, rng)
    next_states = [dataclasses.replace(s, gain=float(g)) for s, g in zip(states, gains)]
    return next_states, outcome


@dataclass
class VolumetricEnv:
    """Stateful wrapper owning the channel generator; ``reset``/``step`` in the gym style."""

    config: SystemConfig
    seed: int | Sequence[int] = 0
    states: list[UserState] = field(init=False, default_factory=list)
    t: int = field(init=False, default=0)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def reset(self) -> list[UserState]:
        self.states = reset(self.config, self.rng)
        self.t = 0
        return list(self.states)

    def observe(self) -> np.ndarray:
        return state_vector(self.states)

    def step(self, action: AllocationAction) -> tuple[list[UserState], StepOutcome, bool]:
        self.states, outcome = step(self.states, action, self.config, self.rng)
        self.t += 1
        return list(self.states), outcome, self.t >= self.config.steps_per_episode
