"""PPO training on random head-vehicle disturbances."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..nn_policy import PolicyBundle, RolloutBuffer, gae_and_returns, ppo_update, sample_action
from ..vehicle_dynamics import DisturbanceProfile, head_velocity_sequence
from . import persistence
from .config import RunConfig
from .env import HdvModels, PlatoonEnv

log = logging.getLogger(__name__)

LOG_HEADER = ("episode", "mean_reward", "actor_loss", "critic_loss", "mean_u_safe", "collisions", "k_values")


class NumericalError(RuntimeError):
    """Training produced non-finite numbers (CLI exit status 3)."""


@dataclass
class TrainResult:
    bundle: PolicyBundle
    models: HdvModels
    log_rows: list[dict] = field(default_factory=list)
    counters: dict = field(default_factory=dict)

    def checkpoint(self, meta: Optional[dict] = None) -> persistence.Checkpoint:
        est = self.models.estimates if self.models.mode == "on" else None
        return persistence.Checkpoint(self.bundle, est, meta)

    def rewards(self) -> np.ndarray:
        return np.array([r["mean_reward"] for r in self.log_rows])

    def collisions(self) -> int:
        return int(sum(r["collisions"] for r in self.log_rows))


def episode_seed(seed: int, episode: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(episode)])


def train(cfg: RunConfig, on_episode: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run ``cfg.train.episodes`` episodes of PPO (optionally with the safety filter).

    ``mean_reward`` in the log is the episode's reward sum, including the
    collision penalty, divided by the configured episode length, so an
    early termination never looks better than surviving.
    """
    tc, hyper, pc = cfg.train, cfg.ppo, cfg.platoon
    obs_dim = 2 * pc.n_vehicles + 1
    safety = cfg.safety.copy() if cfg.safety_enabled else None
    bundle = PolicyBundle.create(obs_dim, tc.hidden, tc.log_std_init, safety, seed=cfg.seed)
    # without the filter nothing consumes HDV estimates, so do not learn them
    env = PlatoonEnv(cfg if cfg.safety_enabled else cfg.with_sysid("off"), safety_params=safety)
    act_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919]))
    upd_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 104729]))
    profile = DisturbanceProfile("gaussian_random", std=tc.disturbance_std)

    total = tc.episodes * tc.episode_steps
    done_steps = 0
    buf = RolloutBuffer()
    last_stats = {"actor_loss": math.nan, "critic_loss": math.nan}
    result = TrainResult(bundle, env.models)

    def close(last_obs, terminal):
        last_v = 0.0 if terminal else float(bundle.critic(last_obs[None])[0, 0])
        buf.end_episode(last_v, terminal)

    def update():
        nonlocal buf, last_stats
        gae_and_returns(buf, hyper.gamma, hyper.lam)
        stats = ppo_update(bundle, buf, hyper, upd_rng, progress=done_steps / total)
        if not (math.isfinite(stats["actor_loss"]) and math.isfinite(stats["critic_loss"])):
            raise NumericalError(f"non-finite PPO loss: {stats}")
        last_stats = stats
        buf = RolloutBuffer()

    for ep in range(tc.episodes):
        heads = head_velocity_sequence(profile, episode_seed(cfg.seed, ep), tc.episode_steps, pc)
        obs = env.reset()
        ep_reward = 0.0
        u_safe_abs = 0.0
        collided = False
        n = 0
        for t in range(tc.episode_steps):
            u_rl, mean, logp = sample_action(bundle, obs[None], act_rng)
            value = float(bundle.critic(obs[None])[0, 0])
            nxt, parts, collided, info = env.step(u_rl, heads[t])
            r = parts.total - (cfg.reward.collision_penalty if collided else 0.0)
            ep_reward += r
            u_safe_abs += abs(info.u_safe)
            n += 1
            buf.add(obs, u_rl, info.u_final, mean, logp, r * tc.reward_scale, value,
                    info.du_final_du_rl, info.du_final_dk)
            done_steps += 1
            obs = nxt
            if collided:
                break
            if len(buf) >= hyper.batch_size and t + 1 < tc.episode_steps:
                # cut mid-episode; the remainder continues in the next batch
                close(obs, terminal=False)
                update()
        if len(buf):
            close(obs, terminal=collided)
        if collided:
            # steps lost to a collision still count towards the lr schedule
            done_steps += tc.episode_steps - n
        if len(buf) >= hyper.batch_size:
            update()

        row = {
            "episode": ep,
            "mean_reward": ep_reward / tc.episode_steps,
            "actor_loss": last_stats["actor_loss"],
            "critic_loss": last_stats["critic_loss"],
            "mean_u_safe": u_safe_abs / max(n, 1),
            "collisions": int(collided),
            "k_values": ";".join(f"{k:.6g}" for k in bundle.safety.trainables) if bundle.safety else "",
        }
        result.log_rows.append(row)
        if on_episode:
            on_episode(row)
        log.debug("episode %d reward %.3f", ep, row["mean_reward"])
    result.counters = dict(env.counters)
    return result


def write_log(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([
                r["episode"], f"{r['mean_reward']:.6g}", f"{r['actor_loss']:.6g}", f"{r['critic_loss']:.6g}",
                f"{r['mean_u_safe']:.6g}", r["collisions"], r["k_values"],
            ])
    return path


def run_training(cfg: RunConfig, out_dir) -> TrainResult:
    """Train and write ``checkpoint.json``, ``training_log.csv`` and ``train_summary.json``."""
    out = Path(out_dir)
    rows: list[dict] = []
    try:
        res = train(cfg, on_episode=rows.append)
    except (NumericalError, FloatingPointError) as exc:
        write_log(rows, out / "training_log.csv")
        diag = {"error": str(exc), "episodes_completed": len(rows), "config": cfg.to_dict()}
        (out / "diagnostic.json").write_text(json.dumps(diag, indent=1, sort_keys=True))
        log.error("training aborted after %d episodes: %s", len(rows), exc)
        raise
    persistence.save(res.checkpoint({"config": cfg.to_dict()}), out / "checkpoint.json")
    write_log(res.log_rows, out / "training_log.csv")
    summary = {
        "episodes": len(res.log_rows),
        "collisions": res.collisions(),
        "first50_mean_reward": float(np.mean(res.rewards()[:50])),
        "last50_mean_reward": float(np.mean(res.rewards()[-50:])),
        "counters": res.counters,
    }
    (out / "train_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return res
