"""JSON checkpoints with a format version tag."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..nn_policy import Mlp, PolicyBundle
from ..safety_layer import SafetyParams
from ..sysid import HdvEstimate

FORMAT = "safeplatoon-checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    bundle: PolicyBundle
    estimates: Optional[dict[int, HdvEstimate]] = None
    meta: Optional[dict] = None


def _mlp(net: Mlp) -> dict:
    return {"sizes": list(net.sizes), "flat": net.get_flat().tolist()}


def _mlp_from(d: dict) -> Mlp:
    net = Mlp(d["sizes"], rng=0)
    net.set_flat(np.asarray(d["flat"], dtype=float))
    return net


def to_dict(ckpt: Checkpoint) -> dict:
    b = ckpt.bundle
    out = {
        "format": FORMAT,
        "version": VERSION,
        "actor": _mlp(b.actor),
        "critic": _mlp(b.critic),
        "log_std": float(b.log_std[0]),
        "safety": None,
        "sysid": None,
        "meta": ckpt.meta or {},
    }
    if b.safety is not None:
        s = b.safety
        out["safety"] = {"tau": s.tau, "k": s.k.tolist(), "k_f": s.k_f, "b": s.b.tolist()}
    if ckpt.estimates is not None:
        out["sysid"] = {str(j): e.to_dict() for j, e in ckpt.estimates.items()}
    return out


def from_dict(d: dict) -> Checkpoint:
    if d.get("format") != FORMAT:
        raise CheckpointError("not a safeplatoon checkpoint")
    if d.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {d.get('version')}")
    safety = None
    if d["safety"] is not None:
        s = d["safety"]
        safety = SafetyParams(s["tau"], np.array(s["k"]), s["k_f"], np.array(s["b"]))
    bundle = PolicyBundle(_mlp_from(d["actor"]), _mlp_from(d["critic"]), np.array([d["log_std"]]), safety)
    est = None
    if d["sysid"] is not None:
        est = {int(j): HdvEstimate.from_dict(e) for j, e in d["sysid"].items()}
    return Checkpoint(bundle, est, d.get("meta", {}))


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # repr-exact floats keep a reload bitwise identical
    path.write_text(json.dumps(to_dict(ckpt), indent=1, sort_keys=True))
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        return from_dict(json.loads(path.read_text()))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
