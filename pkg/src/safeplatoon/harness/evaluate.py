"""Deterministic evaluation on held-out random-disturbance episodes."""
from __future__ import annotations

import copy

import numpy as np

from ..vehicle_dynamics import DisturbanceProfile, head_velocity_sequence
from .config import RunConfig
from .env import HdvModels, PlatoonEnv
from .scenarios import Controller
from .train import episode_seed

# evaluation episodes draw from a seed stream disjoint from training
EVAL_OFFSET = 1_000_000


def evaluate(ctrl: Controller, cfg: RunConfig, episodes: int = 10) -> dict:
    pc, tc = cfg.platoon, cfg.train
    run_cfg = cfg.with_safety(ctrl.safety).with_sysid(ctrl.sysid_mode)
    est = copy.deepcopy(ctrl.estimates) if ctrl.estimates is not None else None
    models = HdvModels(pc, run_cfg.sysid, ctrl.sysid_mode, est)
    safety = ctrl.bundle.safety.copy() if ctrl.safety else None
    env = PlatoonEnv(run_cfg, safety_params=safety, models=models)
    prof = DisturbanceProfile("gaussian_random", std=tc.disturbance_std)
    rewards, collisions, u_safe = [], 0, []
    for ep in range(episodes):
        heads = head_velocity_sequence(prof, episode_seed(cfg.seed, EVAL_OFFSET + ep), tc.episode_steps, pc)
        env.reset()
        total = 0.0
        for t in range(tc.episode_steps):
            _, parts, collided, info = env.step(ctrl.action(env), heads[t])
            total += parts.total
            u_safe.append(abs(info.u_safe))
            if collided:
                total -= cfg.reward.collision_penalty
                collisions += 1
                break
        rewards.append(total / tc.episode_steps)
    return {
        "controller": ctrl.name,
        "sysid": ctrl.sysid_mode,
        "episodes": episodes,
        "mean_reward": float(np.mean(rewards)),
        "episode_rewards": [float(r) for r in rewards],
        "collisions": collisions,
        "mean_abs_u_safe": float(np.mean(u_safe)) if u_safe else 0.0,
        "qp_infeasible": int(env.counters["qp_infeasible"]),
        "qp_degenerate": int(env.counters["qp_degenerate"]),
    }
