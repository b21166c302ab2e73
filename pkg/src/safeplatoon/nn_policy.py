"""Actor-critic networks and PPO with gradients through the safety layer.

Everything is plain numpy with hand-written backward passes. The actor is a
Gaussian policy with a state-independent log standard deviation; its sample
``u_rl`` is what the PPO ratio is evaluated on. When a safety layer sits
between the policy and the plant, each stored transition also carries the
filter Jacobians ``du_final/du_rl`` and ``du_final/dk``:

* the clipped surrogate of every sample is weighted by ``du_final/du_rl`` so
  samples whose action was overridden by the filter do not move the policy;
* the barrier coefficients ``k`` receive the pathwise gradient
  ``A * du_final/du_rl * (u_rl - mu) / std**2 * du_final/dk``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .safety_layer import SafetyParams

LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
_LOG_2PI = math.log(2.0 * math.pi)


class Mlp:
    """Fully connected tanh network with a linear output layer."""

    def __init__(self, sizes, rng=None, out_gain: float = 1.0):
        rng = np.random.default_rng(rng)
        self.sizes = tuple(int(s) for s in sizes)
        self.W: list[np.ndarray] = []
        self.b: list[np.ndarray] = []
        for k, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            gain = out_gain if k == len(self.sizes) - 2 else 1.0
            self.W.append(rng.normal(0.0, gain / math.sqrt(n_in), size=(n_in, n_out)))
            self.b.append(np.zeros(n_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.W, self.b):
            out += [W, b]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.size}")
        k = 0
        for p in self.params:
            p[...] = flat[k : k + p.size].reshape(p.shape)
            k += p.size

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.sizes = self.sizes
        other.W = [W.copy() for W in self.W]
        other.b = [b.copy() for b in self.b]
        return other

    def forward(self, x):
        """Return ``(y, cache)`` for a batch ``x`` of shape ``(B, in)``."""
        a = np.atleast_2d(np.asarray(x, dtype=float))
        acts = [a]
        last = len(self.W) - 1
        for k, (W, b) in enumerate(zip(self.W, self.b)):
            z = a @ W + b
            a = z if k == last else np.tanh(z)
            acts.append(a)
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite network activation")
        return a, acts

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, dy) -> list[np.ndarray]:
        """Gradients of ``sum(dy * y)`` in the order of ``params``."""
        acts = cache
        delta = np.atleast_2d(dy)
        grads = [None] * (2 * len(self.W))
        for k in range(len(self.W) - 1, -1, -1):
            grads[2 * k] = acts[k].T @ delta
            grads[2 * k + 1] = delta.sum(axis=0)
            if k:
                delta = (delta @ self.W[k].T) * (1.0 - acts[k] ** 2)
        return grads


class Adam:
    """Adam over a fixed list of parameter arrays (updated in place)."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class PpoHyper:
    lr: float = 3e-4
    clip: float = 0.2
    epochs: int = 10
    batch_size: int = 2048
    minibatch_size: int = 256
    gamma: float = 0.99
    lam: float = 0.95
    path_coef: float = 1.0
    max_grad_norm: float = 0.5


@dataclass
class PolicyBundle:
    actor: Mlp
    critic: Mlp
    log_std: np.ndarray
    safety: Optional[SafetyParams] = None
    _opt: dict = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, obs_dim: int, hidden=(64, 64), log_std=-0.5, safety=None, seed=0):
        rng = np.random.default_rng(seed)
        actor = Mlp((obs_dim, *hidden, 1), rng, out_gain=0.01)
        critic = Mlp((obs_dim, *hidden, 1), rng, out_gain=1.0)
        return cls(actor, critic, np.array([float(log_std)]), safety)

    @property
    def obs_dim(self) -> int:
        return self.actor.sizes[0]

    def optimizers(self, lr: float) -> dict:
        if not self._opt:
            self._opt["actor"] = Adam(self.actor.params + [self.log_std], lr)
            self._opt["critic"] = Adam(self.critic.params, lr)
            if self.safety is not None:
                self._opt["theta_k"] = self.safety.trainables
                self._opt["safety"] = Adam([self._opt["theta_k"]], lr)
        return self._opt

    def clamp(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)
        if self.safety is not None:
            self.safety.set_trainables(self.safety.trainables)


def policy_forward(bundle: PolicyBundle, obs) -> tuple[np.ndarray, float]:
    """Deterministic policy mean (one per row of ``obs``) and log std."""
    mean = bundle.actor(obs)[:, 0]
    return mean, float(np.clip(bundle.log_std[0], LOG_STD_MIN, LOG_STD_MAX))


def sample_action(bundle: PolicyBundle, obs, rng) -> tuple[float, float, float]:
    """Sample ``u_rl`` for a single observation; returns ``(u_rl, mean, log_prob)``."""
    mean, log_std = policy_forward(bundle, obs)
    std = math.exp(log_std)
    u = float(mean[0] + std * rng.standard_normal())
    return u, float(mean[0]), float(gaussian_log_prob(u, mean[0], log_std))


def gaussian_log_prob(u, mean, log_std):
    z = (np.asarray(u) - mean) * np.exp(-log_std)
    return -0.5 * z * z - log_std - 0.5 * _LOG_2PI


class RolloutBuffer:
    """Transitions of one or more episodes plus computed advantages."""

    FIELDS = (
        "obs", "u_rl", "u_final", "mean", "log_prob", "reward", "value",
        "du_final_du_rl", "du_final_dk",
    )

    def __init__(self):
        self.data = {name: [] for name in self.FIELDS}
        self.ends: list[bool] = []
        self.end_values: list[float] = []
        self.advantages: Optional[np.ndarray] = None
        self.returns: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.data["reward"])

    def add(self, obs, u_rl, u_final, mean, log_prob, reward, value, du_final_du_rl=1.0, du_final_dk=None):
        d = self.data
        d["obs"].append(np.asarray(obs, dtype=float))
        d["u_rl"].append(float(u_rl))
        d["u_final"].append(float(u_final))
        d["mean"].append(float(mean))
        d["log_prob"].append(float(log_prob))
        d["reward"].append(float(reward))
        d["value"].append(float(value))
        d["du_final_du_rl"].append(float(du_final_du_rl))
        d["du_final_dk"].append(np.zeros(0) if du_final_dk is None else np.asarray(du_final_dk, dtype=float))
        self.ends.append(False)
        self.end_values.append(0.0)

    def end_episode(self, last_value: float = 0.0, terminal: bool = True) -> None:
        """Close the current episode; ``last_value`` bootstraps a truncated one."""
        if not self.ends:
            raise ValueError("no transitions to close")
        self.ends[-1] = True
        self.end_values[-1] = 0.0 if terminal else float(last_value)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: np.asarray(v) for k, v in self.data.items() if k not in ("obs", "du_final_dk")}
        out["obs"] = np.vstack(self.data["obs"])
        out["du_final_dk"] = np.vstack(self.data["du_final_dk"])
        return out


def gae_and_returns(buffer: RolloutBuffer, gamma: float = 0.99, lam: float = 0.95) -> RolloutBuffer:
    """Generalized advantage estimation; ``returns = advantages + values``."""
    n = len(buffer)
    if n == 0:
        raise ValueError("empty buffer")
    if not buffer.ends[-1]:
        raise ValueError("last episode is still open; call end_episode first")
    r = np.asarray(buffer.data["reward"])
    v = np.asarray(buffer.data["value"])
    adv = np.zeros(n)
    next_adv = 0.0
    for t in range(n - 1, -1, -1):
        if buffer.ends[t]:
            next_value, next_adv = buffer.end_values[t], 0.0
        else:
            next_value = v[t + 1]
        delta = r[t] + gamma * next_value - v[t]
        adv[t] = next_adv = delta + gamma * lam * next_adv
    buffer.advantages = adv
    buffer.returns = adv + v
    return buffer


def clipped_surrogate(ratio, adv, clip):
    """Per-sample PPO objective ``min(r A, clip(r, 1-e, 1+e) A)``."""
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)


def actor_objective(bundle: PolicyBundle, batch: dict, clip: float, path_coef: float = 1.0):
    """Actor objective (to maximise) and its gradients.

    Returns ``(objective, grads_actor_params, grad_log_std, grad_theta_k)``;
    ``grad_theta_k`` is ``None`` without a safety layer. ``clip=inf``
    gives the unclipped policy-gradient objective.
    """
    obs, u, adv = batch["obs"], batch["u_rl"], batch["adv"]
    weight = batch["du_final_du_rl"]
    B = len(u)
    mean_out, cache = bundle.actor.forward(obs)
    mean = mean_out[:, 0]
    log_std = bundle.log_std[0]
    std2 = math.exp(2.0 * log_std)
    logp = gaussian_log_prob(u, mean, log_std)
    ratio = np.exp(logp - batch["log_prob"])
    if not np.all(np.isfinite(ratio)):
        raise FloatingPointError("non-finite probability ratio")
    surr = weight * clipped_surrogate(ratio, adv, clip)
    objective = float(surr.mean())

    unclipped = (ratio * adv <= np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv) | (
        (ratio >= 1.0 - clip) & (ratio <= 1.0 + clip)
    )
    d_logp = weight * adv * ratio * unclipped / B
    d_mean = d_logp * (u - mean) / std2
    d_log_std = float(np.sum(d_logp * ((u - mean) ** 2 / std2 - 1.0)))
    grads = bundle.actor.backward(cache, d_mean[:, None])

    grad_k = None
    if bundle.safety is not None:
        # pathwise signal through the filter; the old mean fixes the direction
        g = adv * weight * (u - batch["mean"]) / std2
        grad_k = path_coef * (g[:, None] * batch["du_final_dk"]).mean(axis=0)
        objective += float(grad_k @ bundle.safety.trainables)
    return objective, grads, d_log_std, grad_k


def critic_loss(bundle: PolicyBundle, obs, returns):
    """Mean squared error between V(obs) and the return targets, with gradients."""
    v, cache = bundle.critic.forward(obs)
    err = v[:, 0] - returns
    loss = float(np.mean(err**2))
    grads = bundle.critic.backward(cache, (2.0 * err / len(err))[:, None])
    return loss, grads


def _clip_norm(grads, max_norm):
    if not max_norm or not np.isfinite(max_norm):
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        return [g * (max_norm / norm) for g in grads]
    return grads


def ppo_update(bundle: PolicyBundle, buffer: RolloutBuffer, hyper: PpoHyper, rng=None, progress: float = 0.0) -> dict:
    """Run ``hyper.epochs`` of minibatch PPO on ``buffer`` (after GAE).

    ``progress`` in [0, 1] drives the linear learning-rate decay.
    """
    if buffer.advantages is None:
        gae_and_returns(buffer, hyper.gamma, hyper.lam)
    rng = np.random.default_rng(rng)
    data = buffer.arrays()
    adv = buffer.advantages
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    returns = buffer.returns
    lr = hyper.lr * max(1.0 - progress, 0.0)
    opts = bundle.optimizers(hyper.lr)
    n = len(buffer)
    mb = min(hyper.minibatch_size, n)
    stats = {"actor_loss": [], "critic_loss": [], "skipped": 0}
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start : start + mb]
            batch = {k: data[k][idx] for k in ("obs", "u_rl", "mean", "log_prob", "du_final_du_rl", "du_final_dk")}
            batch["adv"] = adv[idx]
            try:
                obj, g_actor, g_log_std, g_k = actor_objective(bundle, batch, hyper.clip, hyper.path_coef)
            except FloatingPointError:
                stats["skipped"] += 1
                continue
            grads = _clip_norm([-g for g in g_actor] + [np.array([-g_log_std])], hyper.max_grad_norm)
            opts["actor"].step(grads, lr)
            c_loss, g_critic = critic_loss(bundle, batch["obs"], returns[idx])
            opts["critic"].step(_clip_norm(g_critic, hyper.max_grad_norm), lr)
            if g_k is not None and "safety" in opts:
                theta = opts["theta_k"]
                theta[...] = bundle.safety.trainables
                opts["safety"].step([-g_k], lr)
                bundle.safety.set_trainables(theta)
                theta[...] = bundle.safety.trainables
            bundle.clamp()
            stats["actor_loss"].append(-obj)
            stats["critic_loss"].append(c_loss)
    return {
        "actor_loss": float(np.mean(stats["actor_loss"])) if stats["actor_loss"] else float("nan"),
        "critic_loss": float(np.mean(stats["critic_loss"])) if stats["critic_loss"] else float("nan"),
        "skipped": stats["skipped"],
        "lr": lr,
    }
