"""Held-out prediction error of the HDV estimators across learning rates.

RLS does not depend on the learning rate and serves as the reference.

    python3 demos/sysid_learning_rates.py [--steps 5000]
"""
import argparse
import dataclasses

from safeplatoon.harness.config import RunConfig
from safeplatoon.harness.sysid_bench import run_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=5000)
    args = ap.parse_args()
    base = RunConfig()
    print(f"{'lr':>8} {'replay':>6} {'combined':>10} {'linear':>10} {'rls':>10}")
    for lr, replay in ((1e-4, 0), (1e-3, 0), (1e-3, 8), (1e-2, 8)):
        cfg = base.replace(sysid=dataclasses.replace(base.sysid, lr=lr, replay=replay))
        r = run_benchmark(cfg, seed=cfg.seed, steps=args.steps)
        print(f"{lr:8.0e} {replay:6d} {r.mse_combined:10.3e} {r.mse_linear:10.3e} {r.mse_rls:10.3e}")


if __name__ == "__main__":
    main()
