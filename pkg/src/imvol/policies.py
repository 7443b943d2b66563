"""Policy interface and the uniform-allocation baselines."""

from __future__ import annotations

from typing import Protocol, Sequence

import numpy as np

from .env import RenderingSite, SystemConfig, UserState


class Policy(Protocol):
    name: str
    rendering_site: RenderingSite

    def act(self, states: Sequence[UserState], config: SystemConfig,
            explore: bool = False) -> np.ndarray:
        """Raw action vector in ``[0, 1]^{5U}`` (group-major)."""
        ...


def avg_policy(states: Sequence[UserState], config: SystemConfig) -> np.ndarray:
    # equal raw weights -> budget/U per user after normalization; render every pixel
    return np.ones(5 * config.num_users)


def cloud_avg_policy(states: Sequence[UserState], config: SystemConfig) -> np.ndarray:
    return avg_policy(states, config)


class AvgPolicy:
    name = "avg"
    rendering_site = RenderingSite.OCLOUD

    def act(self, states, config, explore=False):
        return avg_policy(states, config)


class CloudAvgPolicy:
    """Same allocation as :class:`AvgPolicy`; the harness renders in the remote cloud."""

    name = "cloud-avg"
    rendering_site = RenderingSite.CLOUD

    def act(self, states, config, explore=False):
        return cloud_avg_policy(states, config)


BASELINES = {"avg": AvgPolicy, "cloud-avg": CloudAvgPolicy}
