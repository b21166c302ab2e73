"""Safe/unsafe maps over pulse magnitude and duration."""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .config import RunConfig
from .scenarios import Controller, ScenarioResult, run_scenario, scenario_spec


@dataclass
class SafetyRegionGrid:
    """``safe[name][a, d]`` is the verdict for ``magnitudes[a]`` and ``durations[d]``."""

    scenario: str
    magnitudes: np.ndarray
    durations: np.ndarray
    safe: dict[str, np.ndarray]
    min_spacing: dict[str, np.ndarray]
    counters: Counter = field(default_factory=Counter)

    def safe_count(self, name: str) -> int:
        return int(self.safe[name].sum())

    def expansion_ratio(self, with_layer="ppo_safety", without="ppo") -> float:
        base = self.safe_count(without)
        gain = self.safe_count(with_layer) - base
        if base == 0:
            return math.inf if gain > 0 else 0.0
        return gain / base

    def safe_duration(self, name: str) -> np.ndarray:
        """Per magnitude, the longest duration up to which every cell is safe (0 if none)."""
        out = np.zeros(len(self.magnitudes))
        for a, row in enumerate(self.safe[name]):
            bad = np.flatnonzero(~row)
            n_ok = bad[0] if bad.size else row.size
            out[a] = self.durations[n_ok - 1] if n_ok else 0.0
        return out

    def mean_duration_gain(self, with_layer="ppo_safety", without="ppo") -> float:
        return float(np.mean(self.safe_duration(with_layer) - self.safe_duration(without)))

    def monotone(self, name: str) -> bool:
        """Unsafe at some duration implies unsafe at every longer one."""
        m = self.safe[name]
        return bool(np.all(m[:, 1:] <= m[:, :-1]))

    def stats(self) -> dict:
        out = {
            "safe_counts": {k: self.safe_count(k) for k in self.safe},
            "monotone": {k: self.monotone(k) for k in self.safe},
            "qp_infeasible": int(self.counters["qp_infeasible"]),
            "actuator_violation": int(self.counters["actuator_violation"]),
        }
        if "ppo" in self.safe and "ppo_safety" in self.safe:
            ratio = self.expansion_ratio()
            out["expansion_ratio"] = ratio if math.isfinite(ratio) else None
            out["mean_safe_duration_gain"] = self.mean_duration_gain()
        return out

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "axes": {"magnitude": self.magnitudes.tolist(), "duration": self.durations.tolist()},
            "matrices": {k: v.astype(int).tolist() for k, v in self.safe.items()},
            "stats": self.stats(),
        }


def run_cell(scenario: str, magnitude: float, duration: float, controller: Controller, cfg: RunConfig,
             target=None) -> ScenarioResult:
    """One grid cell; the pulse holds for the scenario's configured hold time."""
    extra = {"accel": float(magnitude), "active_duration": float(duration)}
    if target is not None:
        extra["target"] = int(target)
    spec = scenario_spec(scenario, cfg, controller.name, **extra)
    return run_scenario(spec, controller, cfg, record=False)


def safety_region_sweep(scenario: str, magnitudes: Sequence[float], durations: Sequence[float],
                        controllers: Mapping[str, Controller], cfg: RunConfig, target=None) -> SafetyRegionGrid:
    """Exhaustive sweep: one simulation per cell and controller."""
    mags = np.asarray(magnitudes, dtype=float)
    durs = np.asarray(durations, dtype=float)
    if mags.size == 0 or durs.size == 0:
        raise ValueError("empty grid axis")
    grid = SafetyRegionGrid(scenario, mags, durs, {}, {})
    for name, ctrl in controllers.items():
        safe = np.zeros((mags.size, durs.size), dtype=bool)
        min_s = np.zeros_like(safe, dtype=float)
        for a, m in enumerate(mags):
            for d, dur in enumerate(durs):
                res = run_cell(scenario, m, dur, ctrl, cfg, target)
                safe[a, d] = not res.collided
                min_s[a, d] = min(res.metrics["min_spacing"].values())
                grid.counters.update(res.counters)
        grid.safe[name] = safe
        grid.min_spacing[name] = min_s
    return grid


def default_grids(cfg: RunConfig, coarse: bool = True) -> dict[str, tuple]:
    """Scenario-1 and scenario-2 axes; ``coarse=False`` doubles the resolution."""
    rc = cfg.region
    grids = {
        "s1": (np.array(rc.s1_magnitudes), np.array(rc.s1_durations), None),
        "s2": (np.array(rc.s2_magnitudes), np.array(rc.s2_durations), rc.s2_target),
    }
    if not coarse:
        grids = {k: (_refine(m), _refine(d), t) for k, (m, d, t) in grids.items()}
    return grids


def _refine(axis: np.ndarray) -> np.ndarray:
    return np.round(np.linspace(axis[0], axis[-1], 2 * axis.size - 1), 6)


def write_region(grids: Mapping[str, SafetyRegionGrid], out_dir) -> tuple[Path, Path]:
    """Write ``region.json`` and the per-cell ``region_cells.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    js = out / "region.json"
    js.write_text(json.dumps({k: g.to_dict() for k, g in grids.items()}, indent=1, sort_keys=True))
    cells = out / "region_cells.csv"
    with cells.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("scenario", "controller", "magnitude", "duration", "safe", "min_spacing"))
        for key, g in grids.items():
            for name, m in g.safe.items():
                for a, mag in enumerate(g.magnitudes):
                    for d, dur in enumerate(g.durations):
                        w.writerow((key, name, f"{mag:.6g}", f"{dur:.6g}", int(m[a, d]),
                                    f"{g.min_spacing[name][a, d]:.6g}"))
    return js, cells
