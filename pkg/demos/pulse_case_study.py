"""Pulse case studies for the controllers, side by side.

With ``--checkpoints DIR`` (holding ``ppo/`` and ``ppo_safety/`` from
``safeplatoon train``) all four controllers run. Without it, a short
training pass is done in a temporary directory first, so the numbers
only illustrate the pipeline.

    python3 demos/pulse_case_study.py [--checkpoints runs] [--episodes 40]
"""
import argparse
import dataclasses
import tempfile
from pathlib import Path

from safeplatoon.harness import persistence
from safeplatoon.harness.config import RunConfig
from safeplatoon.harness.scenarios import CONTROLLERS, resolve_controller, run_scenario, scenario_spec
from safeplatoon.harness.train import run_training


def load_or_train(cfg, root, episodes):
    if root is not None:
        return {k: persistence.load(Path(root) / k / "checkpoint.json") for k in ("ppo", "ppo_safety")}
    tmp = Path(tempfile.mkdtemp(prefix="safeplatoon-demo-"))
    quick = cfg.replace(train=dataclasses.replace(cfg.train, episodes=episodes))
    out = {}
    for name, safe in (("ppo", False), ("ppo_safety", True)):
        print(f"training {name} for {episodes} episodes ...")
        run_training(quick.with_safety(safe), tmp / name)
        out[name] = persistence.load(tmp / name / "checkpoint.json")
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoints")
    ap.add_argument("--episodes", type=int, default=40)
    args = ap.parse_args()
    cfg = RunConfig()
    ckpts = load_or_train(cfg, args.checkpoints, args.episodes)
    cases = (("s1", {}), ("s2", {"target": 4}), ("s2", {"target": 5}))
    for sc, kw in cases:
        print(f"\nscenario {sc} {kw or ''}")
        for name in CONTROLLERS:
            ctrl = resolve_controller(name, ckpts, cfg)
            m = run_scenario(scenario_spec(sc, cfg, name, **kw), ctrl, cfg, record=False).metrics
            gaps = " ".join(f"{float(s):5.1f}" for s in m["min_spacing"].values())
            end = f"collision at {m['collision_time']:.1f} s" if m["collided"] else "ok"
            print(f"  {name:17s} min gaps [{gaps}]  {end}")


if __name__ == "__main__":
    main()
