"""Safety-critical case studies: pulse disturbances under a chosen controller."""
from __future__ import annotations

import copy
import csv
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from ..nn_policy import PolicyBundle, policy_forward
from ..vehicle_dynamics import DisturbanceProfile, PlatoonState, disturbance_sequence, ovm_accel
from .config import RunConfig
from .env import HdvModels, PlatoonEnv
from .persistence import Checkpoint

CONTROLLERS = ("pure_hdv", "ppo", "ppo_safety", "ppo_safety_sysid")
# which training run each controller takes its policy from
CHECKPOINT_FOR = {"ppo": "ppo", "ppo_safety": "ppo_safety", "ppo_safety_sysid": "ppo_safety"}


class MissingCheckpointError(LookupError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    disturbance: DisturbanceProfile
    controller: str = "ppo_safety"
    horizon: float = 40.0
    warmup: float = 5.0

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ValueError(f"unknown controller {self.controller!r}; expected one of {CONTROLLERS}")
        if self.horizon <= 0 or self.warmup < 0:
            raise ValueError("horizon must be positive and warmup non-negative")
        if self.disturbance.kind != "pulse":
            raise ValueError("scenarios use pulse disturbances")


def scenario_spec(name: str, cfg: RunConfig, controller: str = "ppo_safety", **pulse) -> ScenarioSpec:
    """``s1``: head-vehicle braking pulse; ``s2``: follower acceleration pulse.

    Keyword arguments override the pulse fields (``accel``,
    ``active_duration``, ``hold_duration``, ``target``).
    """
    sc = cfg.scenario
    if name == "s1":
        prof = DisturbanceProfile("pulse", accel=sc.s1_accel, active_duration=sc.s1_duration,
                                  hold_duration=sc.s1_hold, recovery_rate=sc.recovery_rate, target=0)
    elif name == "s2":
        prof = DisturbanceProfile("pulse", accel=sc.s2_accel, active_duration=sc.s2_duration,
                                  hold_duration=sc.s2_hold, recovery_rate=sc.recovery_rate, target=sc.s2_target)
    else:
        raise ValueError(f"unknown scenario {name!r}; expected 's1' or 's2'")
    if pulse:
        prof = replace(prof, **pulse)
    if prof.target != 0 and prof.target not in cfg.platoon.hdv_indices:
        raise ValueError(f"pulse target {prof.target} is not an HDV")
    return ScenarioSpec(name, prof, controller, sc.horizon, sc.warmup)


@dataclass
class Controller:
    """A CAV driver: nominal OVM (``bundle is None``) or a policy, filtered or not."""

    name: str
    bundle: Optional[PolicyBundle] = None
    safety: bool = False
    sysid_mode: str = "off"
    estimates: Optional[dict] = None

    def action(self, env: PlatoonEnv) -> float:
        st, pc = env.state, env.pcfg
        if self.bundle is None:
            i = pc.cav_index
            a = ovm_accel(pc.hdv_params[0], st.spacing(i), st.velocity(i), st.velocity(i - 1))
            return min(max(float(a), pc.a_min), pc.a_max)
        mean, _ = policy_forward(self.bundle, env.observe()[None])
        return float(mean[0])


def resolve_controller(name: str, checkpoints: Mapping[str, Checkpoint], cfg: RunConfig,
                       sysid: Optional[str] = None) -> Controller:
    """Build a controller from the trained checkpoints.

    ``sysid`` overrides the estimator mode of the filtered controllers
    (``"oracle"`` feeds the true car-following law to the safety layer).
    """
    if name not in CONTROLLERS:
        raise ValueError(f"unknown controller {name!r}")
    if name == "pure_hdv":
        return Controller(name)
    key = CHECKPOINT_FOR[name]
    if checkpoints.get(key) is None:
        raise MissingCheckpointError(f"controller {name!r} needs the {key!r} checkpoint")
    ck = checkpoints[key]
    if name == "ppo":
        return Controller(name, ck.bundle)
    if ck.bundle.safety is None:
        raise MissingCheckpointError(f"checkpoint {key!r} was trained without the safety layer")
    mode = sysid or ("on" if name == "ppo_safety_sysid" else "off")
    est = ck.estimates if mode == "on" else None
    if mode == "on" and est is None:
        est = warmup_estimates(cfg, seed=cfg.seed)
    return Controller(name, ck.bundle, True, mode, est)


def warmup_estimates(cfg: RunConfig, seed: int = 0, steps: Optional[int] = None) -> dict:
    """Train HDV estimators on a random-disturbance rollout with the nominal CAV law."""
    from .sysid_bench import collect_estimates  # local import keeps module graph acyclic

    return collect_estimates(cfg, seed, steps if steps is not None else cfg.sysid.warmup_steps)


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    rows: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    counters: Counter = field(default_factory=Counter)

    @property
    def collided(self) -> bool:
        return bool(self.metrics.get("collided"))


def run_scenario(spec: ScenarioSpec, controller: Controller, cfg: RunConfig, record: bool = True) -> ScenarioResult:
    """Warm up at equilibrium, apply the pulse at ``t = 0`` and simulate ``horizon`` seconds.

    The run stops at the first collision anywhere in the platoon. Time in
    the result is relative to the pulse onset.
    """
    if controller.name != spec.controller:
        raise ValueError(f"spec wants {spec.controller!r}, got controller {controller.name!r}")
    pc = cfg.platoon
    run_cfg = cfg.with_safety(controller.safety).with_sysid(controller.sysid_mode)
    estimates = copy.deepcopy(controller.estimates) if controller.estimates is not None else None
    models = HdvModels(pc, run_cfg.sysid, controller.sysid_mode, estimates)
    safety = controller.bundle.safety if controller.safety else None
    env = PlatoonEnv(run_cfg, safety_params=safety.copy() if safety is not None else None, models=models)
    env.reset()

    dt = pc.dt
    n_warm = int(round(spec.warmup / dt))
    n_run = int(round(spec.horizon / dt))
    prof = spec.disturbance
    seq = disturbance_sequence(prof, None, n_run, dt)
    n_forced = int(round(prof.active_duration / dt)) + int(round(prof.hold_duration / dt))
    res = ScenarioResult(spec)
    followers = pc.follower_indices
    tau = env.safety_params.tau

    min_s = np.full(pc.n_vehicles, np.inf)
    min_h_cav, min_h_f = math.inf, np.full(len(followers), np.inf)
    below = np.zeros(pc.n_vehicles)
    u_lo, u_hi = math.inf, -math.inf
    collided_at = None
    for k in range(-n_warm, n_run):
        head, overrides = 0.0, None
        if k >= 0:
            if prof.target == 0:
                if k < n_forced:
                    head = float(seq[k])
                else:
                    # recover to the equilibrium speed from wherever the head actually is
                    head = float(np.clip((pc.v_eq - env.state.v_head) / dt, -prof.recovery_rate, prof.recovery_rate))
            elif not math.isnan(seq[k]):
                overrides = {prof.target: float(seq[k])}
        u_rl = controller.action(env)
        _, _, collided, info = env.step(u_rl, head, overrides)
        st = env.state
        h_cav, h_f = env.barrier_values()
        min_s = np.minimum(min_s, st.s)
        min_h_cav = min(min_h_cav, h_cav)
        min_h_f = np.minimum(min_h_f, h_f)
        below += (st.s < tau * st.v) * dt
        u_lo, u_hi = min(u_lo, info.u_final), max(u_hi, info.u_final)
        if record:
            row = {"t": st.t - spec.warmup, "v_head": st.v_head}
            for j in range(1, pc.n_vehicles + 1):
                row[f"s_{j}"] = st.s[j - 1]
                row[f"v_{j}"] = st.v[j - 1]
            row.update(u_rl=info.u_rl, u_safe=info.u_safe, collision=int(collided),
                       u_final=info.u_final, h_cav=h_cav)
            for m, j in enumerate(followers):
                row[f"h_{j}"] = h_f[m]
            row["active_mask"] = info.active_mask
            for m, j in enumerate(followers):
                row[f"slack_{j}"] = float(info.slacks[m]) if info.slacks.size else 0.0
            res.rows.append(row)
        if collided:
            collided_at = st.t - spec.warmup
            break

    res.counters = env.counters
    res.metrics = {
        "scenario": spec.name,
        "controller": controller.name,
        "sysid": controller.sysid_mode,
        "collided": collided_at is not None,
        "collision_time": collided_at,
        "min_spacing": {str(j): float(min_s[j - 1]) for j in range(1, pc.n_vehicles + 1)},
        "min_h_cav": float(min_h_cav),
        "min_h_followers": {str(j): float(min_h_f[m]) for m, j in enumerate(followers)},
        "time_below_headway": {str(j): float(below[j - 1]) for j in range(1, pc.n_vehicles + 1)},
        "u_final_range": [float(u_lo), float(u_hi)],
        "qp_infeasible": int(env.counters["qp_infeasible"]),
        "qp_degenerate": int(env.counters["qp_degenerate"]),
        "actuator_violation": int(env.counters["actuator_violation"]),
    }
    return res


def trajectory_header(cfg: RunConfig) -> list[str]:
    pc = cfg.platoon
    cols = ["t", "v_head"]
    for j in range(1, pc.n_vehicles + 1):
        cols += [f"s_{j}", f"v_{j}"]
    cols += ["u_rl", "u_safe", "collision", "u_final", "h_cav"]
    cols += [f"h_{j}" for j in pc.follower_indices]
    cols += ["active_mask"] + [f"slack_{j}" for j in pc.follower_indices]
    return cols


def write_trajectory(res: ScenarioResult, cfg: RunConfig, path) -> Path:
    """CSV at 6 significant digits; integer columns stay integers."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = trajectory_header(cfg)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in res.rows:
            w.writerow([row[c] if isinstance(row[c], int) else f"{row[c]:.6g}" for c in header])
    return path
