"""Run configuration: one TOML file, every constant has a default here."""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from ..nn_policy import PpoHyper
from ..safety_layer import SafetyParams
from ..vehicle_dynamics import OvmParams, PlatoonConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

SYSID_MODES = ("on", "off", "oracle")


class ConfigError(ValueError):
    """Bad or inconsistent configuration (CLI exit status 2)."""


@dataclass(frozen=True)
class RewardConfig:
    kappa: tuple[float, ...] = (1.0, 1.0)
    headway_threshold: float = 2.5
    ttc_threshold: float = 4.0
    ttc_floor: float = 0.01
    collision_penalty: float = 1e4

    def __post_init__(self):
        object.__setattr__(self, "kappa", tuple(float(k) for k in self.kappa))
        if not all(0 < k <= 1 for k in self.kappa):
            raise ConfigError(f"kappa must lie in (0, 1], got {self.kappa}")
        if self.headway_threshold <= 0 or self.ttc_threshold <= 0:
            raise ConfigError("reward thresholds must be positive")
        if not 0 < self.ttc_floor < self.ttc_threshold:
            raise ConfigError("ttc_floor must lie in (0, ttc_threshold)")
        if self.collision_penalty < 0:
            raise ConfigError("collision_penalty is a magnitude and must be >= 0")


@dataclass(frozen=True)
class SysidConfig:
    mode: str = "on"
    lr: float = 1e-4
    replay: int = 0
    window: int = 256
    in_scale: tuple[float, float, float] = (10.0, 5.0, 5.0)
    warmup_steps: int = 2000

    def __post_init__(self):
        if self.mode not in SYSID_MODES:
            raise ConfigError(f"sysid mode must be one of {SYSID_MODES}, got {self.mode!r}")
        if self.lr <= 0 or self.replay < 0 or self.window <= 0 or self.warmup_steps < 0:
            raise ConfigError("invalid sysid settings")


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 500
    episode_steps: int = 600
    disturbance_std: float = 2.0
    hidden: tuple[int, ...] = (64, 64)
    log_std_init: float = -0.5
    obs_scale_s: float = 10.0
    obs_scale_v: float = 5.0
    reward_scale: float = 0.01

    def __post_init__(self):
        if self.episodes <= 0 or self.episode_steps <= 0:
            raise ConfigError("episodes and episode_steps must be positive")
        if self.disturbance_std < 0 or self.reward_scale <= 0:
            raise ConfigError("invalid training settings")


@dataclass(frozen=True)
class ScenarioConfig:
    warmup: float = 5.0
    horizon: float = 40.0
    s1_accel: float = -4.0
    s1_duration: float = 2.5
    s1_hold: float = 2.5
    s2_accel: float = 1.0
    s2_duration: float = 4.0
    s2_hold: float = 4.0
    s2_target: int = 5
    recovery_rate: float = 1.0


@dataclass(frozen=True)
class RegionConfig:
    s1_magnitudes: tuple[float, ...] = tuple(np.round(np.linspace(-1.0, -5.0, 10), 6))
    s1_durations: tuple[float, ...] = tuple(np.round(np.linspace(0.5, 5.0, 10), 6))
    s2_magnitudes: tuple[float, ...] = tuple(np.round(np.linspace(0.25, 2.0, 10), 6))
    s2_durations: tuple[float, ...] = tuple(np.round(np.linspace(1.0, 8.0, 10), 6))
    s2_target: int = 4


@dataclass(frozen=True)
class RunConfig:
    platoon: PlatoonConfig = field(default_factory=PlatoonConfig)
    safety_enabled: bool = True
    safety: SafetyParams = field(default_factory=SafetyParams)
    sysid: SysidConfig = field(default_factory=SysidConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    ppo: PpoHyper = field(default_factory=PpoHyper)
    train: TrainConfig = field(default_factory=TrainConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    region: RegionConfig = field(default_factory=RegionConfig)
    seed: int = 0

    def __post_init__(self):
        n_f = len(self.platoon.follower_indices)
        if len(self.reward.kappa) != n_f:
            raise ConfigError(f"{len(self.reward.kappa)} kappa values for {n_f} followers")
        if self.safety.b.size != n_f:
            raise ConfigError(f"{self.safety.b.size} slack penalties for {n_f} followers")
        if self.ppo.minibatch_size > self.ppo.batch_size:
            raise ConfigError("minibatch_size exceeds batch_size")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_safety(self, enabled: bool) -> "RunConfig":
        return self.replace(safety_enabled=enabled)

    def with_sysid(self, mode: str) -> "RunConfig":
        return self.replace(sysid=dataclasses.replace(self.sysid, mode=mode))

    def to_dict(self) -> dict:
        p = self.platoon
        return {
            "seed": self.seed,
            "platoon": {
                "n_vehicles": p.n_vehicles, "cav_index": p.cav_index, "dt": p.dt,
                "s_eq": p.s_eq, "v_eq": p.v_eq, "a_min": p.a_min, "a_max": p.a_max,
            },
            "ovm": [dataclasses.asdict(h) for h in p.hdv_params],
            "safety": {
                "enabled": self.safety_enabled, "tau": self.safety.tau,
                "k": self.safety.k.tolist(), "k_f": self.safety.k_f, "b": self.safety.b.tolist(),
            },
            "sysid": _plain(dataclasses.asdict(self.sysid)),
            "reward": _plain(dataclasses.asdict(self.reward)),
            "ppo": _plain(dataclasses.asdict(self.ppo)),
            "train": _plain(dataclasses.asdict(self.train)),
            "scenario": _plain(dataclasses.asdict(self.scenario)),
            "region": _plain(dataclasses.asdict(self.region)),
        }


def _plain(d):
    if isinstance(d, dict):
        return {k: _plain(v) for k, v in d.items()}
    if isinstance(d, (tuple, list)):
        return [_plain(v) for v in d]
    if isinstance(d, np.generic):
        return d.item()
    return d


def _section(raw: dict, name: str, cls, tuple_keys=()) -> Any:
    sec = dict(raw.get(name, {}))
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    for k in tuple_keys:
        if k in sec:
            sec[k] = tuple(sec[k])
    try:
        return cls(**sec)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def from_dict(raw: dict) -> RunConfig:
    """Build a RunConfig from parsed TOML; missing keys take defaults."""
    allowed = {"seed", "platoon", "ovm", "safety", "sysid", "reward", "ppo", "train", "scenario", "region"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    try:
        pl = dict(raw.get("platoon", {}))
        ovm = raw.get("ovm", {})
        n = int(pl.get("n_vehicles", 5))
        if isinstance(ovm, list):
            hdv = tuple(OvmParams(**o) for o in ovm)
        else:
            hdv = (OvmParams(**ovm),) * (n - 1)
        platoon = PlatoonConfig(hdv_params=hdv, **pl)
        sf = dict(raw.get("safety", {}))
        enabled = bool(sf.pop("enabled", True))
        n_f = len(platoon.follower_indices)
        k = sf.pop("k", 1.0)
        b = sf.pop("b", 1.0)
        safety = SafetyParams(
            tau=float(sf.pop("tau", 0.3)),
            k=np.broadcast_to(np.asarray(k, dtype=float), (n_f + 1,)),
            k_f=float(sf.pop("k_f", 10.0)),
            b=np.broadcast_to(np.asarray(b, dtype=float), (n_f,)),
        )
        if sf:
            raise ConfigError(f"unknown keys in [safety]: {sorted(sf)}")
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    reward = _section(raw, "reward", RewardConfig, ("kappa",))
    if "kappa" not in raw.get("reward", {}):
        reward = dataclasses.replace(reward, kappa=(1.0,) * n_f)
    return RunConfig(
        platoon=platoon,
        safety_enabled=enabled,
        safety=safety,
        sysid=_section(raw, "sysid", SysidConfig, ("in_scale",)),
        reward=reward,
        ppo=_section(raw, "ppo", PpoHyper),
        train=_section(raw, "train", TrainConfig, ("hidden",)),
        scenario=_section(raw, "scenario", ScenarioConfig),
        region=_section(
            raw, "region", RegionConfig, ("s1_magnitudes", "s1_durations", "s2_magnitudes", "s2_durations")
        ),
        seed=int(raw.get("seed", 0)),
    )


def load(path: Optional[str | Path]) -> RunConfig:
    """Read a TOML config; ``None`` gives the defaults."""
    if path is None:
        return from_dict({})
    path = Path(path)
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(raw)
