"""Minimal numpy learning substrate: MLPs with exact backprop, Adam, replay.

Everything here works on batches (rows are samples). Parameters of a network
are a flat list ``[W0, b0, W1, b1, ...]`` with ``W`` shaped ``(n_in, n_out)``
so a layer computes ``x @ W + b``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
TANH_EPS = 1e-6
HEADS = ("linear", "tanh", "gaussian")


class UsageError(RuntimeError):
    pass


class MlpCache(NamedTuple):
    inputs: list[np.ndarray]  # input of every layer
    pre: list[np.ndarray]  # pre-activation of every layer
    out: np.ndarray
    squeeze: bool


class Mlp:
    """Dense ReLU network with a linear, tanh or Gaussian-parameter head.

    The ``gaussian`` head is linear with ``2 * n`` outputs; use
    :meth:`split_gaussian` to get ``(mean, log_std)``.
    """

    def __init__(self, sizes: Sequence[int], head: str = "linear",
                 rng: np.random.Generator | None = None, dtype=np.float64):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = [int(s) for s in sizes]
        self.head = head
        self.dtype = np.dtype(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: list[np.ndarray] = []
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / math.sqrt(n_in)
            self.params.append(rng.uniform(-bound, bound, (n_in, n_out)).astype(self.dtype))
            self.params.append(rng.uniform(-bound, bound, n_out).astype(self.dtype))
        self._last: MlpCache | None = None

    @property
    def num_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def weights(self, i: int) -> np.ndarray:
        return self.params[2 * i]

    def bias(self, i: int) -> np.ndarray:
        return self.params[2 * i + 1]

    def zero_output_layer(self) -> None:
        self.params[-2][...] = 0
        self.params[-1][...] = 0

    def _prep(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=self.dtype)
        squeeze = x.ndim == 1
        x = np.atleast_2d(x)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ValueError(f"expected input width {self.sizes[0]}, got shape {x.shape}")
        return x, squeeze

    def forward(self, x) -> tuple[np.ndarray, MlpCache]:
        h, squeeze = self._prep(x)
        inputs, pre = [], []
        last = self.num_layers - 1
        for i in range(self.num_layers):
            inputs.append(h)
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            pre.append(z)
            if i < last:
                h = np.maximum(z, 0)
            elif self.head == "tanh":
                h = np.tanh(z)
            else:
                h = z
        cache = MlpCache(inputs, pre, h, squeeze)
        self._last = cache
        return (h[0] if squeeze else h), cache

    def __call__(self, x) -> np.ndarray:
        h, squeeze = self._prep(x)
        last = self.num_layers - 1
        for i in range(self.num_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < last:
                h = np.maximum(h, 0)
            elif self.head == "tanh":
                h = np.tanh(h)
        return h[0] if squeeze else h

    def backward(self, grad_out, cache: MlpCache | None = None, need_params: bool = True,
                 need_input: bool = True) -> tuple[list[np.ndarray] | None, np.ndarray | None]:
        """Gradients of a scalar loss given ``dL/d(output)``.

        Returns ``(param_grads, input_grad)``; either is ``None`` when the
        matching ``need_*`` flag is false.
        """
        cache = cache if cache is not None else self._last
        if cache is None:
            raise UsageError("backward called without a forward cache")
        g = np.atleast_2d(np.asarray(grad_out, dtype=self.dtype))
        if g.shape != cache.out.shape:
            raise ValueError(f"upstream gradient shape {g.shape} != output {cache.out.shape}")
        if self.head == "tanh":
            g = g * (1.0 - cache.out ** 2)
        grads: list[np.ndarray] = [None] * len(self.params) if need_params else None
        for i in reversed(range(self.num_layers)):
            if i < self.num_layers - 1:
                g = g * (cache.pre[i] > 0)
            if need_params:
                grads[2 * i] = cache.inputs[i].T @ g
                grads[2 * i + 1] = g.sum(axis=0)
            if i == 0 and not need_input:
                return grads, None
            g = g @ self.params[2 * i].T
        return grads, (g[0] if cache.squeeze else g)

    @staticmethod
    def split_gaussian(out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = out.shape[-1] // 2
        return out[..., :n], out[..., n:]

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.sizes = list(self.sizes)
        clone.head = self.head
        clone.dtype = self.dtype
        clone.params = [p.copy() for p in self.params]
        clone._last = None
        return clone

    def to_dict(self) -> dict:
        layers = []
        for i in range(self.num_layers):
            w, b = self.weights(i), self.bias(i)
            layers.append({"shape": list(w.shape), "weights": w.ravel().tolist(),
                           "bias": b.tolist()})
        return {"head": self.head, "dtype": self.dtype.name, "layers": layers}

    @classmethod
    def from_dict(cls, data: dict) -> "Mlp":
        layers = data["layers"]
        sizes = [layers[0]["shape"][0]] + [layer["shape"][1] for layer in layers]
        net = cls(sizes, head=data["head"], dtype=np.dtype(data.get("dtype", "float64")))
        for i, layer in enumerate(layers):
            n_in, n_out = layer["shape"]
            if n_in != sizes[i]:
                raise ValueError(f"layer {i} input width {n_in} does not chain")
            net.params[2 * i] = np.array(layer["weights"], dtype=net.dtype).reshape(n_in, n_out)
            net.params[2 * i + 1] = np.array(layer["bias"], dtype=net.dtype).reshape(n_out)
        return net


@dataclass
class AdamState:
    params_like: list[np.ndarray] = field(repr=False)
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    def __post_init__(self):
        self.m = [np.zeros_like(p) for p in self.params_like]
        self.v = [np.zeros_like(p) for p in self.params_like]
        del self.params_like


def adam_step(params: list[np.ndarray], grads: list[np.ndarray],
              opt: AdamState) -> list[np.ndarray]:
    """Bias-corrected Adam update, applied in place."""
    if len(params) != len(grads) or len(params) != len(opt.m):
        raise ValueError("params, grads and optimizer moments differ in length")
    opt.t += 1
    c1 = 1.0 - opt.beta1 ** opt.t
    c2 = 1.0 - opt.beta2 ** opt.t
    step = opt.lr / c1
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * np.square(g)
        denom = np.sqrt(v / c2)
        denom += opt.eps
        p -= step * m / denom
    return params


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float = 1.0) -> tuple[list[np.ndarray], float]:
    """Scale ``grads`` so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


@dataclass
class SquashedSample:
    """Reparameterized draw from a tanh-squashed Gaussian mapped onto ``(0, 1)``."""

    action: np.ndarray
    log_prob: np.ndarray
    mean: np.ndarray
    log_std: np.ndarray
    std: np.ndarray
    noise: np.ndarray
    squashed: np.ndarray
    clamp_mask: np.ndarray

    def dlogp_dx(self) -> np.ndarray:
        """Derivative of ``log_prob`` w.r.t. the pre-tanh sample (per entry)."""
        u = self.squashed
        return 2.0 * u * (1.0 - u * u) / (1.0 - u * u + TANH_EPS)

    def daction_dx(self) -> np.ndarray:
        return 0.5 * (1.0 - self.squashed ** 2)

    def backprop(self, grad_x: np.ndarray, grad_log_std_direct: np.ndarray | float = 0.0):
        """Push ``dL/dx`` (and any direct ``dL/dlog_std``) back to the raw head outputs."""
        g_mean = grad_x
        g_log_std = (grad_x * self.std * self.noise + grad_log_std_direct) * self.clamp_mask
        return g_mean, g_log_std


def gaussian_tanh_sample(mean, log_std, rng: np.random.Generator | None = None,
                         deterministic: bool = False,
                         noise: np.ndarray | None = None) -> SquashedSample:
    """Sample ``a = (tanh(mean + std * eps) + 1) / 2`` and its log-density on ``(0, 1)^n``.

    ``log_std`` is clamped to ``[-20, 2]``. The density includes the tanh
    Jacobian (with a ``1e-6`` guard) and the ``+n ln 2`` of the affine map.
    Works on a single vector or a batch of rows.
    """
    mean = np.asarray(mean)
    raw_log_std = np.asarray(log_std)
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    clamp_mask = ((raw_log_std >= LOG_STD_MIN) & (raw_log_std <= LOG_STD_MAX)).astype(mean.dtype)
    std = np.exp(log_std)
    if deterministic:
        eps = np.zeros_like(mean)
    elif noise is not None:
        eps = np.asarray(noise, dtype=mean.dtype)
    else:
        if rng is None:
            raise UsageError("stochastic sampling needs an rng")
        eps = rng.standard_normal(mean.shape).astype(mean.dtype, copy=False)
    x = mean + std * eps
    u = np.tanh(x)
    n = mean.shape[-1]
    log_prob = (np.sum(-0.5 * eps ** 2 - log_std - 0.5 * math.log(2 * math.pi)
                       - np.log(1.0 - u ** 2 + TANH_EPS), axis=-1)
                + n * math.log(2.0))
    return SquashedSample(action=(u + 1.0) / 2.0, log_prob=log_prob, mean=mean,
                          log_std=log_std, std=std, noise=eps, squashed=u,
                          clamp_mask=clamp_mask)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    def __len__(self) -> int:
        return self.rewards.shape[0]


class BufferTooSmall(UsageError):
    pass


class ReplayBuffer:
    """Fixed-capacity ring buffer; sampling is uniform with replacement."""

    def __init__(self, state_dim: int, action_dim: int, capacity: int = 10_000,
                 dtype=np.float64):
        self.capacity = int(capacity)
        self.states = np.zeros((capacity, state_dim), dtype=dtype)
        self.actions = np.zeros((capacity, action_dim), dtype=dtype)
        self.rewards = np.zeros(capacity, dtype=dtype)
        self.next_states = np.zeros((capacity, state_dim), dtype=dtype)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, state, action, reward: float, next_state) -> None:
        i = self._next
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def get(self, index: int) -> Transition:
        """Transition by age, ``0`` being the oldest still stored."""
        if not 0 <= index < self._size:
            raise IndexError(index)
        start = self._next if self._size == self.capacity else 0
        i = (start + index) % self.capacity
        return Transition(self.states[i].copy(), self.actions[i].copy(),
                          float(self.rewards[i]), self.next_states[i].copy())

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self._size < batch_size:
            raise BufferTooSmall(f"buffer holds {self._size} < batch size {batch_size}")
        idx = rng.integers(0, self._size, size=batch_size)
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx])


def save_checkpoint(path: str | Path, networks: dict[str, Mlp], extra: dict | None = None) -> None:
    doc = {"networks": {k: v.to_dict() for k, v in networks.items()}, "extra": extra or {}}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict[str, Mlp], dict]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    doc = json.loads(path.read_text())
    return {k: Mlp.from_dict(v) for k, v in doc["networks"].items()}, doc.get("extra", {})
