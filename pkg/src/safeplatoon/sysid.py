"""Online identification of human car-following behaviour.

Each HDV gets its own estimator ``F_hat = eta + zeta``:

* ``eta`` is a linear physics graph ``a1*ds - a2*dv + a3*dv_prev`` in error
  coordinates around the configured equilibrium, whose weights are the
  linearized car-following coefficients;
* ``zeta`` is a small tanh network that models what the linear part misses.

The two parts are trained separately: one SGD step fits ``eta`` to the
observed acceleration, then ``zeta`` is fitted to the remaining residual with
``eta`` frozen. A recursive-least-squares estimator over the same features is
provided as the classical baseline.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .nn_policy import Mlp

log = logging.getLogger(__name__)


@dataclass
class HdvEstimate:
    """Learned acceleration model of one human driver.

    ``in_scale`` divides the error features before they enter the residual
    network and ``out_scale`` multiplies its output. ``replay`` is the number
    of extra SGD steps per observed transition, each on a transition drawn
    uniformly from the last ``window`` ones (seeded by ``replay_seed``).
    """

    s_eq: float = 20.0
    v_eq: float = 15.0
    a_hat: np.ndarray = field(default_factory=lambda: np.zeros(3))
    residual: Optional[Mlp] = None
    in_scale: np.ndarray = field(default_factory=lambda: np.array([10.0, 5.0, 5.0]))
    out_scale: float = 1.0
    a_clip: float = 5.0
    lr: float = 1e-4
    replay: int = 0
    window: int = 256
    replay_seed: int = 0
    n_updates: int = 0
    n_skipped: int = 0
    _history: list = field(default_factory=list, repr=False)
    _rng: Optional[np.random.Generator] = field(default=None, repr=False)

    def __post_init__(self):
        self.a_hat = np.asarray(self.a_hat, dtype=float).copy()
        self.in_scale = np.asarray(self.in_scale, dtype=float)
        if self.residual is None:
            self.residual = Mlp((3, 16, 16, 1), rng=0, out_gain=0.0)
        self._rng = np.random.default_rng(self.replay_seed)

    @classmethod
    def zero(cls, s_eq=20.0, v_eq=15.0, **kw) -> "HdvEstimate":
        """Estimator whose prediction is identically zero until trained."""
        return cls(s_eq, v_eq, **kw)

    def features(self, s, v, v_prev) -> np.ndarray:
        """Error coordinates ``(ds, -dv, dv_prev)`` (rows for array input)."""
        s, v, v_prev = np.broadcast_arrays(
            np.asarray(s, dtype=float), np.asarray(v, dtype=float), np.asarray(v_prev, dtype=float)
        )
        return np.stack((s - self.s_eq, -(v - self.v_eq), v_prev - self.v_eq), axis=-1)

    def linear(self, s, v, v_prev):
        return self.features(s, v, v_prev) @ self.a_hat

    def nonlinear(self, s, v, v_prev):
        x = np.atleast_2d(self.features(s, v, v_prev)) / self.in_scale
        out = np.clip(self.residual(x)[:, 0] * self.out_scale, -self.a_clip, self.a_clip)
        return out if np.ndim(s) else float(out[0])

    def predict(self, s, v, v_prev):
        """Estimated acceleration, clamped to ``[-a_clip, a_clip]``."""
        total = np.clip(self.linear(s, v, v_prev) + self.nonlinear(s, v, v_prev), -self.a_clip, self.a_clip)
        return float(total) if np.ndim(total) == 0 else total

    def _sgd(self, phi: np.ndarray, target: float) -> bool:
        """One two-phase step; returns False when the gradient is not finite."""
        err_lin = float(phi @ self.a_hat) - target
        g_lin = err_lin * phi
        if not np.all(np.isfinite(g_lin)):
            return False
        a_new = self.a_hat - self.lr * g_lin

        x = (phi / self.in_scale)[None, :]
        y, cache = self.residual.forward(x)
        resid_target = target - float(phi @ a_new)
        err_res = float(y[0, 0]) * self.out_scale - resid_target
        grads = self.residual.backward(cache, np.array([[err_res * self.out_scale]]))
        if not all(np.all(np.isfinite(g)) for g in grads):
            return False
        self.a_hat = a_new
        for p, g in zip(self.residual.params, grads):
            p -= self.lr * g
        return True

    def update(self, s, v, v_prev, observed_accel) -> "HdvEstimate":
        """Learn from one transition (plus ``replay`` passes over the window)."""
        phi = self.features(s, v, v_prev)
        target = float(observed_accel)
        if not (np.all(np.isfinite(phi)) and math.isfinite(target)):
            self.n_skipped += 1
            return self
        if self._sgd(phi, target):
            self.n_updates += 1
        else:
            self.n_skipped += 1
            log.debug("skipped non-finite sysid gradient")
            return self
        if self.replay:
            self._history.append((phi, target))
            if len(self._history) > self.window:
                del self._history[0]
            for k in self._rng.integers(0, len(self._history), self.replay):
                self._sgd(*self._history[k])
        return self

    def to_dict(self) -> dict:
        return {
            "s_eq": self.s_eq,
            "v_eq": self.v_eq,
            "a_hat": self.a_hat.tolist(),
            "residual": self.residual.get_flat().tolist(),
            "residual_sizes": list(self.residual.sizes),
            "in_scale": self.in_scale.tolist(),
            "out_scale": self.out_scale,
            "a_clip": self.a_clip,
            "lr": self.lr,
            "replay": self.replay,
            "window": self.window,
            "replay_seed": self.replay_seed,
            "n_updates": self.n_updates,
            "n_skipped": self.n_skipped,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HdvEstimate":
        net = Mlp(d["residual_sizes"], rng=0)
        net.set_flat(d["residual"])
        return cls(
            d["s_eq"], d["v_eq"], np.array(d["a_hat"]), net, np.array(d["in_scale"]),
            d["out_scale"], d["a_clip"], d["lr"], d["replay"], d["window"],
            d.get("replay_seed", 0), d["n_updates"], d["n_skipped"],
        )


def predict(est: HdvEstimate, s, v, v_prev):
    return est.predict(s, v, v_prev)


def update(est: HdvEstimate, transition) -> HdvEstimate:
    """``transition = (s, v, v_prev, observed_accel)``."""
    return est.update(*transition)


@dataclass(frozen=True)
class RlsState:
    theta: np.ndarray
    P: np.ndarray
    forgetting: float = 0.999

    @classmethod
    def initial(cls, n: int = 3, p0: float = 100.0, forgetting: float = 0.999) -> "RlsState":
        return cls(np.zeros(n), p0 * np.eye(n), forgetting)

    def predict(self, phi) -> float:
        return float(np.asarray(phi) @ self.theta)


def rls_update(rls: RlsState, phi, target, p0: float = 100.0) -> RlsState:
    """Exponentially weighted recursive least squares step.

    The covariance is re-symmetrized every step and reset to ``p0 * I`` when
    its condition number exceeds 1e12.
    """
    phi = np.asarray(phi, dtype=float)
    if not np.any(phi):
        return rls
    lam = rls.forgetting
    P = rls.P
    Pphi = P @ phi
    gain = Pphi / (lam + phi @ Pphi)
    theta = rls.theta + gain * (float(target) - phi @ rls.theta)
    P = (P - np.outer(gain, Pphi)) / lam
    P = 0.5 * (P + P.T)
    if np.linalg.cond(P) > 1e12 or not np.all(np.isfinite(P)):
        log.debug("RLS covariance reset")
        P = p0 * np.eye(phi.size)
    return RlsState(theta, P, lam)
