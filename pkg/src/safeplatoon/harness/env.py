"""Platoon MDP: observation, filtered action, reward and HDV estimators."""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .. import sysid
from ..safety_layer import SafeActionResult, SafetyParams, cbf_values, safe_action
from ..vehicle_dynamics import PlatoonConfig, PlatoonState, hdv_accelerations, step
from .config import RewardConfig, RunConfig, SysidConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RewardParts:
    stability: float
    efficiency: float
    safety: float

    @property
    def total(self) -> float:
        return self.stability + self.efficiency + self.safety


def reward(state: PlatoonState, state_next: PlatoonState, pcfg: PlatoonConfig, rcfg: RewardConfig) -> RewardParts:
    """Per-step reward of the CAV, evaluated on the state reached after the step.

    ``state`` is accepted for interface symmetry; every term only depends on
    where the platoon ends up.
    """
    x = state_next
    i = pcfg.cav_index
    v_pred = x.velocity(i - 1)
    v_i = x.velocity(i)
    stab = -((v_i - v_pred) ** 2)
    for kappa, j in zip(rcfg.kappa, pcfg.follower_indices):
        stab -= kappa * (x.velocity(j) - v_pred) ** 2

    s_i = x.spacing(i)
    headway = s_i / v_i if v_i > 0 else math.inf
    eff = -1.0 if headway >= rcfg.headway_threshold else 0.0

    safe = 0.0
    closing = v_i - v_pred
    if closing > 0:
        ttc = s_i / closing
        if 0 <= ttc <= rcfg.ttc_threshold:
            safe = math.log(max(ttc, rcfg.ttc_floor) / rcfg.ttc_threshold)
    return RewardParts(stab, eff, safe)


def observation(state: PlatoonState, pcfg: PlatoonConfig, s_scale=10.0, v_scale=5.0) -> np.ndarray:
    """Scaled error coordinates ``(s_j - s_eq, v_j - v_eq)`` for all vehicles plus the head speed."""
    ds = (state.s - pcfg.s_eq) / s_scale
    dv = (state.v - pcfg.v_eq) / v_scale
    return np.concatenate((np.column_stack((ds, dv)).ravel(), [(state.v_head - pcfg.v_eq) / v_scale]))


class HdvModels:
    """Acceleration estimates fed to the safety layer.

    ``mode`` is ``"on"`` (learned, updated online), ``"off"`` (followers
    frozen at zero) or ``"oracle"`` (true car-following law). Whatever the
    mode, a head-vehicle predecessor is estimated by finite differences, and
    so is the predecessor in ``"off"`` mode.
    """

    def __init__(self, pcfg: PlatoonConfig, scfg: SysidConfig, mode: Optional[str] = None,
                 estimates: Optional[Mapping[int, sysid.HdvEstimate]] = None, learn: bool = True):
        self.pcfg = pcfg
        self.mode = mode or scfg.mode
        self.learn = learn
        pred = pcfg.predecessor_index
        self.modelled = tuple(([pred] if pred >= 1 else []) + list(pcfg.follower_indices))
        if estimates is not None:
            self.estimates = {j: estimates[j] for j in self.modelled}
        else:
            self.estimates = {
                j: sysid.HdvEstimate.zero(
                    pcfg.s_eq, pcfg.v_eq, lr=scfg.lr, replay=scfg.replay, window=scfg.window,
                    in_scale=np.array(scfg.in_scale), a_clip=pcfg.a_max, replay_seed=j,
                )
                for j in self.modelled
            }

    def f_hat(self, state: PlatoonState, prev: Optional[PlatoonState]) -> dict[int, float]:
        pc = self.pcfg
        pred = pc.predecessor_index
        out: dict[int, float] = {}
        if self.mode == "oracle":
            truth = hdv_accelerations(state, pc)
            out.update({j: truth[j] for j in pc.follower_indices})
            if pred >= 1:
                out[pred] = truth[pred]
        elif self.mode == "on":
            vp = state.predecessor_velocities()
            for j in self.modelled:
                out[j] = self.estimates[j].predict(state.s[j - 1], state.v[j - 1], vp[j - 1])
        else:
            out.update({j: 0.0 for j in pc.follower_indices})
        if pred not in out:
            out[pred] = self._finite_difference(pred, state, prev)
        return out

    def _finite_difference(self, j: int, state: PlatoonState, prev: Optional[PlatoonState]) -> float:
        if prev is None:
            return 0.0
        return (state.velocity(j) - prev.velocity(j)) / self.pcfg.dt

    def observe(self, state: PlatoonState, nxt: PlatoonState) -> None:
        """Online update from one observed transition (``"on"`` mode only)."""
        if self.mode != "on" or not self.learn:
            return
        vp = state.predecessor_velocities()
        dt = self.pcfg.dt
        for j in self.modelled:
            a_obs = (nxt.v[j - 1] - state.v[j - 1]) / dt
            self.estimates[j].update(state.s[j - 1], state.v[j - 1], vp[j - 1], a_obs)


@dataclass
class StepInfo:
    u_rl: float
    u_final: float
    u_safe: float
    du_final_du_rl: float
    du_final_dk: np.ndarray
    qp_status: str
    active_mask: int
    slacks: np.ndarray
    reward: RewardParts
    collided: bool


@dataclass
class PlatoonEnv:
    """One platoon with an optional safety filter between policy and plant."""

    cfg: RunConfig
    safety_params: Optional[SafetyParams] = None
    models: Optional[HdvModels] = None
    state: Optional[PlatoonState] = None
    prev: Optional[PlatoonState] = None
    counters: Counter = field(default_factory=Counter)

    def __post_init__(self):
        if self.safety_params is None:
            self.safety_params = self.cfg.safety.copy()
        if self.models is None:
            self.models = HdvModels(self.cfg.platoon, self.cfg.sysid)

    @property
    def pcfg(self) -> PlatoonConfig:
        return self.cfg.platoon

    @property
    def obs_dim(self) -> int:
        return 2 * self.pcfg.n_vehicles + 1

    def reset(self, state: Optional[PlatoonState] = None) -> np.ndarray:
        self.state = state if state is not None else PlatoonState.equilibrium(self.pcfg)
        self.prev = None
        return self.observe()

    def observe(self) -> np.ndarray:
        t = self.cfg.train
        return observation(self.state, self.pcfg, t.obs_scale_s, t.obs_scale_v)

    def filter(self, u_rl: float) -> SafeActionResult:
        """Map the learned action to the applied one (safety layer or clamp)."""
        pc = self.pcfg
        n_f = len(pc.follower_indices)
        if not self.cfg.safety_enabled:
            u = min(max(u_rl, pc.a_min), pc.a_max)
            inside = pc.a_min < u_rl < pc.a_max
            return SafeActionResult(u, u - u_rl, np.zeros(n_f), 1.0 if inside else 0.0,
                                    np.zeros(n_f + 2), "off", ())
        f_hat = self.models.f_hat(self.state, self.prev)
        res = safe_action(self.state, pc, u_rl, self.safety_params, f_hat)
        if res.qp_status != "optimal":
            self.counters["qp_infeasible"] += 1
        if res.degenerate:
            self.counters["qp_degenerate"] += 1
        return res

    def step(self, u_rl: float, head_accel: float = 0.0,
             overrides: Optional[Mapping[int, float]] = None) -> tuple[np.ndarray, RewardParts, bool, StepInfo]:
        if self.state is None:
            raise RuntimeError("call reset() first")
        if not math.isfinite(u_rl):
            raise FloatingPointError("non-finite action")
        res = self.filter(float(u_rl))
        pc = self.pcfg
        if not pc.a_min <= res.u_final <= pc.a_max:
            self.counters["actuator_violation"] += 1
        nxt = step(self.state, pc, res.u_final, head_accel, overrides)
        self.models.observe(self.state, nxt)
        parts = reward(self.state, nxt, pc, self.cfg.reward)
        if not math.isfinite(parts.total):
            raise FloatingPointError(f"non-finite reward at t={nxt.t:.2f}")
        info = StepInfo(
            float(u_rl), res.u_final, res.u_safe, res.du_final_du_rl, res.du_final_dk,
            res.qp_status, res.active_mask, res.slacks, parts, nxt.collided,
        )
        self.prev, self.state = self.state, nxt
        if nxt.collided:
            self.counters["collisions"] += 1
        return self.observe(), parts, nxt.collided, info

    def barrier_values(self) -> tuple[float, np.ndarray]:
        return cbf_values(self.state, self.pcfg, self.safety_params.tau)
