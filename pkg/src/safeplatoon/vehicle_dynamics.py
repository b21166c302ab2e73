"""Longitudinal dynamics of a mixed-autonomy platoon.

Vehicle 0 is the head vehicle, vehicles ``1..n`` follow it. Exactly one of
the followers is a connected automated vehicle (CAV) driven by an external
acceleration command; the rest are human-driven vehicles (HDVs) following the
optimal velocity model (OVM). Spacing ``s_i`` is measured from vehicle ``i`` to
vehicle ``i - 1``.

Integration is explicit forward Euler. All functions are pure: a state plus a
config is a value and every ``step`` returns a new state.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class OvmParams:
    """Optimal-velocity car-following parameters of one human driver."""

    alpha: float = 0.6
    beta: float = 0.9
    s_st: float = 5.0
    s_go: float = 35.0
    v_max: float = 30.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta >= 0):
            raise ValueError(f"OVM gains must be positive, got alpha={self.alpha}, beta={self.beta}")
        if not (0 < self.s_st < self.s_go):
            raise ValueError(f"need 0 < s_st < s_go, got s_st={self.s_st}, s_go={self.s_go}")
        if not self.v_max > 0:
            raise ValueError(f"v_max must be positive, got {self.v_max}")


def optimal_velocity(p: OvmParams, s):
    """Spacing-dependent desired velocity V(s).

    Zero below ``s_st``, ``v_max`` above ``s_go`` and a half-cosine ramp in
    between. Accepts scalars or arrays.
    """
    s = np.asarray(s, dtype=float)
    ramp = 0.5 * p.v_max * (1.0 - np.cos(np.pi * (s - p.s_st) / (p.s_go - p.s_st)))
    out = np.where(s <= p.s_st, 0.0, np.where(s >= p.s_go, p.v_max, ramp))
    return float(out) if out.ndim == 0 else out


def optimal_velocity_slope(p: OvmParams, s):
    """Derivative dV/ds (zero on both flat branches)."""
    s = np.asarray(s, dtype=float)
    width = p.s_go - p.s_st
    ramp = 0.5 * p.v_max * np.pi / width * np.sin(np.pi * (s - p.s_st) / width)
    out = np.where((s > p.s_st) & (s < p.s_go), ramp, 0.0)
    return float(out) if out.ndim == 0 else out


def ovm_accel(p: OvmParams, s, v, v_prev):
    """Unclamped OVM acceleration alpha*(V(s) - v) + beta*(v_prev - v)."""
    return p.alpha * (optimal_velocity(p, s) - v) + p.beta * (v_prev - v)


def linearized_hdv_coeffs(p: OvmParams, s_eq: float, v_eq: float) -> tuple[float, float, float]:
    """First-order Taylor coefficients of the OVM around ``(s_eq, v_eq)``.

    Returns ``(a1, a2, a3)`` so that the acceleration deviation is
    ``a1*ds - a2*dv + a3*dv_prev``.
    """
    if not (p.s_st < s_eq < p.s_go):
        warnings.warn(
            f"s_eq={s_eq} lies on a flat branch of V(s); spacing coefficient is zero",
            RuntimeWarning,
            stacklevel=2,
        )
    return p.alpha * optimal_velocity_slope(p, s_eq), p.alpha + p.beta, p.beta


@dataclass(frozen=True)
class PlatoonConfig:
    """Static description of the platoon.

    ``hdv_params`` holds one entry per HDV slot, ordered by vehicle index and
    skipping the CAV.
    """

    n_vehicles: int = 5
    cav_index: int = 3
    hdv_params: tuple[OvmParams, ...] = field(default_factory=lambda: (OvmParams(),) * 4)
    dt: float = 0.1
    s_eq: float = 20.0
    v_eq: float = 15.0
    a_min: float = -5.0
    a_max: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "hdv_params", tuple(self.hdv_params))
        if not 1 <= self.cav_index <= self.n_vehicles:
            raise ValueError(f"cav_index {self.cav_index} outside 1..{self.n_vehicles}")
        if len(self.hdv_params) != self.n_vehicles - 1:
            raise ValueError(
                f"expected {self.n_vehicles - 1} HDV parameter sets, got {len(self.hdv_params)}"
            )
        if not (self.a_min < 0 < self.a_max):
            raise ValueError("actuator bounds must satisfy a_min < 0 < a_max")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        for p in self.hdv_params:
            if not math.isclose(optimal_velocity(p, self.s_eq), self.v_eq, rel_tol=1e-9, abs_tol=1e-9):
                raise ValueError(
                    f"(s_eq={self.s_eq}, v_eq={self.v_eq}) is not an OVM equilibrium for {p}"
                )

    @property
    def hdv_indices(self) -> tuple[int, ...]:
        return tuple(j for j in range(1, self.n_vehicles + 1) if j != self.cav_index)

    @property
    def follower_indices(self) -> tuple[int, ...]:
        return tuple(range(self.cav_index + 1, self.n_vehicles + 1))

    @property
    def predecessor_index(self) -> int:
        return self.cav_index - 1

    def params_for(self, j: int) -> OvmParams:
        if j == self.cav_index or not 1 <= j <= self.n_vehicles:
            raise KeyError(f"vehicle {j} is not an HDV")
        return self.hdv_params[j - 1 if j < self.cav_index else j - 2]


@dataclass(frozen=True)
class PlatoonState:
    """Spacings and velocities of vehicles ``1..n`` plus the head velocity.

    Arrays are 0-based: ``s[j - 1]`` is the spacing of vehicle ``j``.
    """

    t: float
    v_head: float
    s: np.ndarray
    v: np.ndarray
    collided: bool = False

    @classmethod
    def equilibrium(cls, cfg: PlatoonConfig, t: float = 0.0) -> "PlatoonState":
        n = cfg.n_vehicles
        return cls(t, cfg.v_eq, np.full(n, cfg.s_eq), np.full(n, cfg.v_eq))

    def velocity(self, j: int) -> float:
        """Velocity of vehicle ``j`` (``j = 0`` is the head)."""
        return float(self.v_head) if j == 0 else float(self.v[j - 1])

    def spacing(self, j: int) -> float:
        return float(self.s[j - 1])

    def predecessor_velocities(self) -> np.ndarray:
        return np.concatenate(([self.v_head], self.v[:-1]))

    def as_vector(self) -> np.ndarray:
        """Stacked ``[s_1, v_1, ..., s_n, v_n]``."""
        return np.column_stack((self.s, self.v)).ravel()


def hdv_accelerations(state: PlatoonState, cfg: PlatoonConfig) -> dict[int, float]:
    """Clamped OVM acceleration of every HDV at ``state``."""
    v_prev = state.predecessor_velocities()
    out = {}
    for j in cfg.hdv_indices:
        a = ovm_accel(cfg.params_for(j), state.s[j - 1], state.v[j - 1], v_prev[j - 1])
        out[j] = min(max(a, cfg.a_min), cfg.a_max)
    return out


def step(
    state: PlatoonState,
    cfg: PlatoonConfig,
    u_cav: float,
    head_accel: float,
    overrides: Optional[Mapping[int, float]] = None,
) -> PlatoonState:
    """Advance the platoon by one Euler step of length ``cfg.dt``.

    ``overrides`` maps an HDV index to an acceleration that replaces its
    car-following law for this step (follower disturbances).
    """
    if not cfg.a_min <= u_cav <= cfg.a_max:
        raise ValueError(f"u_cav={u_cav} outside [{cfg.a_min}, {cfg.a_max}]")
    accel = np.empty(cfg.n_vehicles)
    for j, a in hdv_accelerations(state, cfg).items():
        accel[j - 1] = a
    accel[cfg.cav_index - 1] = u_cav
    if overrides:
        for j, a in overrides.items():
            if j == cfg.cav_index:
                raise ValueError("the CAV cannot be overridden by a disturbance")
            accel[j - 1] = a

    dt = cfg.dt
    s_next = state.s + dt * (state.predecessor_velocities() - state.v)
    v_next = np.maximum(state.v + dt * accel, 0.0)
    v_head = max(state.v_head + dt * head_accel, 0.0)
    collided = state.collided or bool(np.any(s_next <= 0.0))
    return PlatoonState(state.t + dt, v_head, s_next, v_next, collided)


@dataclass(frozen=True)
class DisturbanceProfile:
    """Head-vehicle or follower disturbance.

    ``gaussian_random`` draws an i.i.d. velocity increment ``N(0, std) * dt``
    for the head vehicle at every step. ``pulse`` applies ``accel`` for
    ``active_duration``, holds the reached velocity for ``hold_duration`` and
    then returns at ``recovery_rate`` until the velocity change is undone.
    ``target`` is 0 for the head vehicle or an HDV index.
    """

    kind: str = "gaussian_random"
    std: float = 2.0
    accel: float = -4.0
    active_duration: float = 2.5
    hold_duration: float = 2.5
    recovery_rate: float = 1.0
    target: int = 0
    onset: float = 0.0

    def __post_init__(self):
        if self.kind not in ("gaussian_random", "pulse"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if self.kind == "gaussian_random" and self.target != 0:
            raise ValueError("gaussian_random disturbances act on the head vehicle only")
        if self.kind == "pulse" and self.recovery_rate <= 0 and self.accel != 0:
            raise ValueError("recovery_rate must be positive")


def disturbance_sequence(
    profile: DisturbanceProfile, rng_seed, horizon: int, dt: float
) -> np.ndarray:
    """Per-step accelerations of the disturbed vehicle.

    Entries are NaN where the profile does not act (before onset and after
    recovery of a pulse); for a follower this means "use the car-following
    law".
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if profile.kind == "gaussian_random":
        rng = np.random.default_rng(rng_seed)
        return rng.normal(0.0, profile.std, size=horizon) if profile.std > 0 else np.zeros(horizon)

    out = np.full(horizon, np.nan)
    k = int(round(profile.onset / dt))
    n_active = int(round(profile.active_duration / dt))
    n_hold = int(round(profile.hold_duration / dt))
    delta_v = profile.accel * n_active * dt
    schedule = [profile.accel] * n_active + [0.0] * n_hold
    remaining = abs(delta_v)
    back = -math.copysign(profile.recovery_rate, delta_v) if delta_v else 0.0
    while remaining > 1e-12:
        dv = min(profile.recovery_rate * dt, remaining)
        schedule.append(math.copysign(dv / dt, back))
        remaining -= dv
    for a in schedule:
        if k >= horizon:
            break
        if k >= 0:
            out[k] = a
        k += 1
    return out


def head_velocity_sequence(
    profile: DisturbanceProfile, rng_seed, horizon: int, cfg: PlatoonConfig
) -> np.ndarray:
    """Head-vehicle accelerations for ``horizon`` steps (zero when idle)."""
    if profile.target != 0:
        return np.zeros(horizon)
    return np.nan_to_num(disturbance_sequence(profile, rng_seed, horizon, cfg.dt), nan=0.0)


def rollout(
    cfg: PlatoonConfig,
    state: PlatoonState,
    head_accels: Sequence[float],
    u_cav=0.0,
) -> list[PlatoonState]:
    """Open-loop rollout with a constant or per-step CAV command."""
    u = np.broadcast_to(np.asarray(u_cav, dtype=float), (len(head_accels),))
    states = [state]
    for a_head, u_k in zip(head_accels, u):
        states.append(step(states[-1], cfg, float(u_k), float(a_head)))
    return states
