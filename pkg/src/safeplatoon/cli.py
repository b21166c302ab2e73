"""Command line entry point: ``safeplatoon {train,eval,scenario,region,sysid-bench}``.

Exit status: 0 success, 2 configuration or usage error (including a missing
checkpoint), 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .harness import persistence
from .harness.config import SYSID_MODES, ConfigError, RunConfig, load
from .harness.persistence import CheckpointError
from .harness.region import default_grids, safety_region_sweep, write_region
from .harness.scenarios import (
    CHECKPOINT_FOR, CONTROLLERS, MissingCheckpointError, resolve_controller, run_scenario,
    scenario_spec, write_trajectory,
)
from .harness.sysid_bench import run_benchmark, write_curve
from .harness.train import NumericalError, run_training
from .qp_core import QpIterationError

log = logging.getLogger("safeplatoon")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="TOML config file (defaults are used when omitted)")
    p.add_argument("--seed", type=int, help="overrides the config seed and $PLATOON_SEED")
    p.add_argument("--out-dir", default="runs", help="artifact directory (default: runs)")
    p.add_argument("--safety", choices=("on", "off"), help="safety layer for training")
    p.add_argument("--sysid", choices=SYSID_MODES, help="HDV estimates fed to the safety layer")
    p.add_argument("--checkpoints", help="directory holding ppo/ and ppo_safety/ (default: --out-dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="safeplatoon", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train PPO (with or without the safety layer)")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a controller on random disturbances")
    ev.add_argument("--controller", choices=CONTROLLERS, default="ppo_safety")
    ev.add_argument("--episodes", type=int, default=10)

    sc = sub.add_parser("scenario", parents=[common], help="run one pulse case study")
    sc.add_argument("--name", choices=("s1", "s2"), required=True)
    sc.add_argument("--controller", choices=CONTROLLERS, default="ppo_safety")
    sc.add_argument("--accel", type=float, help="pulse magnitude (m/s^2)")
    sc.add_argument("--duration", type=float, help="pulse duration (s)")
    sc.add_argument("--target", type=int, help="disturbed HDV for s2")

    rg = sub.add_parser("region", parents=[common], help="safety-region sweeps of both scenarios")
    rg.add_argument("--grid", choices=("coarse", "fine"), default="coarse")
    rg.add_argument("--controllers", nargs="+", choices=CONTROLLERS, default=["ppo", "ppo_safety"])

    sb = sub.add_parser("sysid-bench", parents=[common], help="learned identification vs RLS")
    sb.add_argument("--steps", type=int, default=5000)
    sb.add_argument("--vehicle", type=int, help="HDV to identify (default: first follower)")
    return ap


def resolve_seed(arg: Optional[int], cfg_seed: int) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("PLATOON_SEED")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"PLATOON_SEED must be an integer, got {env!r}") from exc
    return cfg_seed


def _config(args) -> RunConfig:
    cfg = load(args.config)
    cfg = cfg.replace(seed=resolve_seed(args.seed, cfg.seed))
    if args.safety is not None:
        cfg = cfg.with_safety(args.safety == "on")
    if args.sysid is not None and args.command == "train":
        cfg = cfg.with_sysid(args.sysid)
    return cfg


def _checkpoints(args) -> dict:
    root = Path(args.checkpoints or args.out_dir)
    out = {}
    for key in set(CHECKPOINT_FOR.values()):
        path = root / key / "checkpoint.json"
        out[key] = persistence.load(path) if path.is_file() else None
    return out


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def cmd_train(args, cfg: RunConfig) -> None:
    variant = "ppo_safety" if cfg.safety_enabled else "ppo"
    out = Path(args.out_dir) / variant
    res = run_training(cfg, out)
    print(f"{variant}: {len(res.log_rows)} episodes, {res.collisions()} collisions -> {out}")


def cmd_eval(args, cfg: RunConfig) -> None:
    from .harness.evaluate import evaluate

    ctrl = resolve_controller(args.controller, _checkpoints(args), cfg, args.sysid)
    summary = evaluate(ctrl, cfg, args.episodes)
    path = Path(args.out_dir) / f"eval_{args.controller}.json"
    _dump(summary, path)
    print(f"{args.controller}: mean reward {summary['mean_reward']:.4g}, "
          f"{summary['collisions']} collisions -> {path}")


def cmd_scenario(args, cfg: RunConfig) -> None:
    extra = {}
    if args.accel is not None:
        extra["accel"] = args.accel
    if args.duration is not None:
        extra["active_duration"] = args.duration
    if args.target is not None:
        extra["target"] = args.target
    try:
        spec = scenario_spec(args.name, cfg, args.controller, **extra)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ctrl = resolve_controller(args.controller, _checkpoints(args), cfg, args.sysid)
    res = run_scenario(spec, ctrl, cfg)
    stem = f"{args.name}_{args.controller}"
    out = Path(args.out_dir)
    write_trajectory(res, cfg, out / f"{stem}.csv")
    _dump(res.metrics, out / f"{stem}_metrics.json")
    verdict = "collision" if res.collided else "no collision"
    print(f"{stem}: {verdict}, min CAV h {res.metrics['min_h_cav']:.4g} -> {out / (stem + '.csv')}")


def cmd_region(args, cfg: RunConfig) -> None:
    ckpts = _checkpoints(args)
    ctrls = {n: resolve_controller(n, ckpts, cfg, args.sysid) for n in args.controllers}
    grids = {}
    for key, (mags, durs, target) in default_grids(cfg, coarse=args.grid == "coarse").items():
        grids[key] = safety_region_sweep(key, mags, durs, ctrls, cfg, target)
        print(f"{key}: {grids[key].stats()['safe_counts']}")
    js, cells = write_region(grids, args.out_dir)
    print(f"-> {js}, {cells}")


def cmd_sysid_bench(args, cfg: RunConfig) -> None:
    res = run_benchmark(cfg, seed=cfg.seed, steps=args.steps, vehicle=args.vehicle)
    out = Path(args.out_dir)
    write_curve(res, out / "sysid_bench.csv")
    summary = {
        "vehicle": res.vehicle, "steps": res.steps, "holdout_start": res.holdout_start,
        "mse_combined": res.mse_combined, "mse_linear": res.mse_linear, "mse_rls": res.mse_rls,
        "a_hat": res.estimate.a_hat.tolist(), "rls_theta": res.rls.theta.tolist(),
    }
    _dump(summary, out / "sysid_bench.json")
    print(f"held-out MSE: combined {res.mse_combined:.4g}, linear {res.mse_linear:.4g}, RLS {res.mse_rls:.4g}")


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "scenario": cmd_scenario,
    "region": cmd_region, "sysid-bench": cmd_sysid_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, MissingCheckpointError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError, QpIterationError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
