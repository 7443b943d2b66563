"""SAC and DDPG agents built on :mod:`imvol.nn`.

Both agents emit raw actions in ``[0, 1]^{5U}`` that
:func:`imvol.env.normalize_action` maps onto the resource budgets, so they
satisfy the :class:`imvol.policies.Policy` protocol.

Each gradient iteration computes every loss from one parameter snapshot
and then steps all optimizers, followed by a soft target update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import RenderingSite, SystemConfig, UserState, state_vector
from .nn import (AdamState, Batch, Mlp, ReplayBuffer, UsageError, adam_step, clip_grad_norm,
                 gaussian_tanh_sample, load_checkpoint, save_checkpoint)


def soft_update(target: list[np.ndarray], online: list[np.ndarray],
                tau: float = 0.005) -> list[np.ndarray]:
    """Polyak averaging ``target <- (1 - tau) target + tau online``, in place."""
    if len(target) != len(online):
        raise ValueError("parameter lists differ in length")
    for t, o in zip(target, online):
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch {t.shape} vs {o.shape}")
        t *= 1.0 - tau
        t += tau * o
    return target


@dataclass
class LossReport:
    critic1: float
    critic2: float
    actor: float
    alpha: float = 0.0
    iterations: int = 1

    def as_dict(self) -> dict:
        return {"critic1": self.critic1, "critic2": self.critic2, "actor": self.actor,
                "alpha": self.alpha}


def _mean_reports(reports: list[LossReport]) -> LossReport:
    n = len(reports)
    return LossReport(critic1=sum(r.critic1 for r in reports) / n,
                      critic2=sum(r.critic2 for r in reports) / n,
                      actor=sum(r.actor for r in reports) / n,
                      alpha=sum(r.alpha for r in reports) / n, iterations=n)


class _Agent:
    name = "agent"
    rendering_site = RenderingSite.OCLOUD

    gamma: float
    tau: float
    batch_size: int
    iterations: int
    max_grad_norm: float
    dtype: np.dtype
    rng: np.random.Generator

    def _check_state(self, state) -> np.ndarray:
        s = np.asarray(state, dtype=self.dtype)
        if s.shape[-1] != self.state_dim:
            raise ValueError(f"state dimension {s.shape[-1]} != {self.state_dim}")
        return s

    def _step(self, net: Mlp, grads: list[np.ndarray], opt: AdamState) -> None:
        grads, _ = clip_grad_norm(grads, self.max_grad_norm)
        adam_step(net.params, grads, opt)

    def act(self, states: Sequence[UserState], config: SystemConfig,
            explore: bool = False) -> np.ndarray:
        return self.select_action(state_vector(states), explore=explore).astype(np.float64)

    def update(self, buffer: ReplayBuffer, rng: np.random.Generator | None = None,
               iterations: int | None = None) -> LossReport:
        """Run ``iterations`` gradient steps, each on a freshly sampled batch."""
        rng = rng if rng is not None else self.rng
        n = self.iterations if iterations is None else iterations
        reports = []
        for _ in range(n):
            batch = buffer.sample_batch(self.batch_size, rng)
            reports.append(self.update_on_batch(batch, rng))
        return _mean_reports(reports)

    def _assign(self, nets: dict[str, Mlp]) -> None:
        # copy in place so optimizer moment lists stay aligned with the parameters
        for name, net in self.networks().items():
            for dst, src in zip(net.params, nets[name].params):
                dst[...] = src

    @staticmethod
    def _unpack(batch: Batch):
        if len(batch) == 0:
            raise UsageError("empty batch")
        return batch


class SacAgent(_Agent):
    """Soft actor-critic with twin critics and an auto-tuned temperature."""

    name = "sac"

    def __init__(self, state_dim: int, action_dim: int, hidden: Sequence[int] = (256, 256),
                 lr: float = 3e-4, gamma: float = 0.99, tau: float = 0.005,
                 alpha_init: float = 0.2, auto_alpha: bool = True, batch_size: int = 128,
                 iterations: int = 10, max_grad_norm: float = 1.0, seed: int = 0,
                 dtype=np.float64):
        self.state_dim, self.action_dim = state_dim, action_dim
        self.gamma, self.tau = gamma, tau
        self.batch_size, self.iterations = batch_size, iterations
        self.max_grad_norm = max_grad_norm
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng([seed, 2])  # disjoint from the env stream
        init_rng = np.random.default_rng([seed, 1])
        hidden = list(hidden)
        self.actor = Mlp([state_dim, *hidden, 2 * action_dim], head="gaussian", rng=init_rng,
                         dtype=dtype)
        self.q1 = Mlp([state_dim + action_dim, *hidden, 1], rng=init_rng, dtype=dtype)
        self.q2 = Mlp([state_dim + action_dim, *hidden, 1], rng=init_rng, dtype=dtype)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        if alpha_init < 0 or (alpha_init == 0 and auto_alpha):
            raise ValueError("alpha_init must be > 0 (or 0 with auto_alpha=False)")
        with np.errstate(divide="ignore"):
            self.log_alpha = np.log(np.array([alpha_init], dtype=np.float64))
        self.auto_alpha = auto_alpha
        self.target_entropy = -float(action_dim)
        self.actor_opt = AdamState(self.actor.params, lr=lr)
        self.q1_opt = AdamState(self.q1.params, lr=lr)
        self.q2_opt = AdamState(self.q2.params, lr=lr)
        self.alpha_opt = AdamState([self.log_alpha], lr=lr)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    def policy_sample(self, states, rng=None, deterministic=False, noise=None):
        out = self.actor(self._check_state(states))
        mean, log_std = Mlp.split_gaussian(out)
        return gaussian_tanh_sample(mean, log_std, rng, deterministic=deterministic, noise=noise)

    def select_action(self, state, explore: bool = False,
                      rng: np.random.Generator | None = None) -> np.ndarray:
        rng = rng if rng is not None else self.rng
        return self.policy_sample(state, rng, deterministic=not explore).action

    def td_target(self, batch: Batch, rng: np.random.Generator) -> np.ndarray:
        s2 = batch.next_states.astype(self.dtype, copy=False)
        nxt = self.policy_sample(s2, rng)
        sa2 = np.concatenate([s2, nxt.action], axis=1)
        q_next = np.minimum(self.q1_target(sa2)[:, 0], self.q2_target(sa2)[:, 0])
        return batch.rewards + self.gamma * (q_next - self.alpha * nxt.log_prob)

    def update_on_batch(self, batch: Batch, rng: np.random.Generator | None = None) -> LossReport:
        """One gradient iteration on all four losses; ``self.last_target`` keeps ``y``."""
        batch = self._unpack(batch)
        rng = rng if rng is not None else self.rng
        n = len(batch)
        alpha = self.alpha
        s = batch.states.astype(self.dtype, copy=False)
        a = batch.actions.astype(self.dtype, copy=False)

        y = self.td_target(batch, rng)
        sa = np.concatenate([s, a], axis=1)
        critic_losses, critic_grads = [], []
        for q in (self.q1, self.q2):
            qv, cache = q.forward(sa)
            diff = qv[:, 0] - y
            critic_losses.append(float(np.mean(diff ** 2)))
            grads, _ = q.backward((2.0 * diff / n)[:, None], cache, need_input=False)
            critic_grads.append(grads)

        out, actor_cache = self.actor.forward(s)
        mean, log_std = Mlp.split_gaussian(out)
        smp = gaussian_tanh_sample(mean, log_std, rng)
        sa_new = np.concatenate([s, smp.action], axis=1)
        q1v, c1 = self.q1.forward(sa_new)
        q2v, c2 = self.q2.forward(sa_new)
        pick1 = q1v[:, 0] <= q2v[:, 0]
        q_min = np.where(pick1, q1v[:, 0], q2v[:, 0])
        actor_loss = float(np.mean(alpha * smp.log_prob - q_min))
        w1 = pick1.astype(self.dtype)[:, None]
        _, gin1 = self.q1.backward(-w1 / n, c1, need_params=False)
        _, gin2 = self.q2.backward(-(1.0 - w1) / n, c2, need_params=False)
        grad_action = (gin1 + gin2)[:, self.state_dim:]
        grad_x = alpha * smp.dlogp_dx() / n + grad_action * smp.daction_dx()
        g_mean, g_log_std = smp.backprop(grad_x, grad_log_std_direct=-alpha / n)
        actor_grads, _ = self.actor.backward(np.concatenate([g_mean, g_log_std], axis=1),
                                             actor_cache, need_input=False)

        entropy_gap = float(np.mean(smp.log_prob + self.target_entropy))
        alpha_loss = -alpha * entropy_gap

        self._step(self.q1, critic_grads[0], self.q1_opt)
        self._step(self.q2, critic_grads[1], self.q2_opt)
        self._step(self.actor, actor_grads, self.actor_opt)
        if self.auto_alpha:
            # d(alpha_loss)/d(log alpha) = -alpha * E[log pi + H_target]
            grads, _ = clip_grad_norm([np.array([alpha_loss])], self.max_grad_norm)
            adam_step([self.log_alpha], grads, self.alpha_opt)
        soft_update(self.q1_target.params, self.q1.params, self.tau)
        soft_update(self.q2_target.params, self.q2.params, self.tau)

        self.last_target = y
        return LossReport(critic1=critic_losses[0], critic2=critic_losses[1], actor=actor_loss,
                          alpha=alpha_loss)

    def networks(self) -> dict[str, Mlp]:
        return {"actor": self.actor, "q1": self.q1, "q2": self.q2,
                "q1_target": self.q1_target, "q2_target": self.q2_target}

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.networks(), {"algorithm": self.name,
                                                "log_alpha": float(self.log_alpha[0])})

    @classmethod
    def load(cls, path: str | Path, seed: int = 0) -> "SacAgent":
        nets, extra = load_checkpoint(path)
        if extra.get("algorithm") != cls.name:
            raise UsageError(f"{path} is not a {cls.name} checkpoint")
        actor = nets["actor"]
        state_dim = actor.sizes[0]
        action_dim = actor.sizes[-1] // 2
        agent = cls(state_dim, action_dim, hidden=actor.sizes[1:-1], seed=seed,
                    alpha_init=math.exp(extra["log_alpha"]), dtype=actor.dtype)
        agent._assign(nets)
        return agent


class DdpgAgent(_Agent):
    """Deterministic policy gradient with target actor and critic."""

    name = "ddpg"

    def __init__(self, state_dim: int, action_dim: int, hidden: Sequence[int] = (400, 300),
                 critic_hidden: Sequence[int] | None = None, lr: float = 3e-4,
                 gamma: float = 0.99, tau: float = 0.005, noise_std: float = 0.1,
                 batch_size: int = 128, iterations: int = 10, max_grad_norm: float = 1.0,
                 seed: int = 0, dtype=np.float64):
        self.state_dim, self.action_dim = state_dim, action_dim
        self.gamma, self.tau = gamma, tau
        self.noise_std = noise_std
        self.batch_size, self.iterations = batch_size, iterations
        self.max_grad_norm = max_grad_norm
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng([seed, 2])  # disjoint from the env stream
        init_rng = np.random.default_rng([seed, 1])
        critic_hidden = list(hidden if critic_hidden is None else critic_hidden)
        self.actor = Mlp([state_dim, *hidden, action_dim], head="tanh", rng=init_rng, dtype=dtype)
        self.critic = Mlp([state_dim + action_dim, *critic_hidden, 1], rng=init_rng, dtype=dtype)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = AdamState(self.actor.params, lr=lr)
        self.critic_opt = AdamState(self.critic.params, lr=lr)

    def select_action(self, state, explore: bool = False,
                      rng: np.random.Generator | None = None) -> np.ndarray:
        rng = rng if rng is not None else self.rng
        a = (self.actor(self._check_state(state)) + 1.0) / 2.0
        if explore:
            a = np.clip(a + rng.normal(0.0, self.noise_std, a.shape), 0.0, 1.0)
        return a

    def td_target(self, batch: Batch) -> np.ndarray:
        s2 = batch.next_states.astype(self.dtype, copy=False)
        a2 = (self.actor_target(s2) + 1.0) / 2.0
        q_next = self.critic_target(np.concatenate([s2, a2], axis=1))[:, 0]
        return batch.rewards + self.gamma * q_next

    def update_on_batch(self, batch: Batch, rng: np.random.Generator | None = None) -> LossReport:
        batch = self._unpack(batch)
        n = len(batch)
        s = batch.states.astype(self.dtype, copy=False)
        a = batch.actions.astype(self.dtype, copy=False)

        y = self.td_target(batch)
        qv, cache = self.critic.forward(np.concatenate([s, a], axis=1))
        diff = qv[:, 0] - y
        critic_loss = float(np.mean(diff ** 2))
        critic_grads, _ = self.critic.backward((2.0 * diff / n)[:, None], cache,
                                              need_input=False)

        out, actor_cache = self.actor.forward(s)
        q_pi, c_pi = self.critic.forward(np.concatenate([s, (out + 1.0) / 2.0], axis=1))
        actor_loss = -float(np.mean(q_pi))
        _, gin = self.critic.backward(np.full((n, 1), -1.0 / n, dtype=self.dtype), c_pi,
                                      need_params=False)
        actor_grads, _ = self.actor.backward(0.5 * gin[:, self.state_dim:], actor_cache,
                                             need_input=False)

        self._step(self.critic, critic_grads, self.critic_opt)
        self._step(self.actor, actor_grads, self.actor_opt)
        soft_update(self.critic_target.params, self.critic.params, self.tau)
        soft_update(self.actor_target.params, self.actor.params, self.tau)

        self.last_target = y
        return LossReport(critic1=critic_loss, critic2=critic_loss, actor=actor_loss)

    def networks(self) -> dict[str, Mlp]:
        return {"actor": self.actor, "critic": self.critic, "actor_target": self.actor_target,
                "critic_target": self.critic_target}

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.networks(), {"algorithm": self.name,
                                                "noise_std": self.noise_std})

    @classmethod
    def load(cls, path: str | Path, seed: int = 0) -> "DdpgAgent":
        nets, extra = load_checkpoint(path)
        if extra.get("algorithm") != cls.name:
            raise UsageError(f"{path} is not a {cls.name} checkpoint")
        actor, critic = nets["actor"], nets["critic"]
        agent = cls(actor.sizes[0], actor.sizes[-1], hidden=actor.sizes[1:-1],
                    critic_hidden=critic.sizes[1:-1], noise_std=extra["noise_std"], seed=seed,
                    dtype=actor.dtype)
        agent._assign(nets)
        return agent


AGENTS = {"sac": SacAgent, "ddpg": DdpgAgent}
