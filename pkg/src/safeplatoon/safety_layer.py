"""CBF-QP safety filter for the CAV and its followers.

Barrier candidates (``i`` is the CAV, ``j`` a follower)::

    h_i = s_i - tau * v_i
    h_j = s_j - s_i - tau * (v_j - v_i)

Both have relative degree one in the CAV acceleration, so a single QP over
``w = (u_safe, sigma_{i+1}, ..., sigma_n)`` filters the learned action. The
follower rows are softened by the slacks, the CAV row is hard, and a
feasibility row keeps the CAV row compatible with the braking limit.

All parameters that can be trained (``k`` per barrier and ``k_f``) and the
learned action enter only through the right-hand side ``q`` of ``G w <= q``,
so ``qp_core.kkt_sensitivity`` yields their gradients directly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import qp_core
from .qp_core import QpProblem
from .vehicle_dynamics import PlatoonConfig, PlatoonState

log = logging.getLogger(__name__)

K_LOWER, K_UPPER = 1e-3, 1e3


class QpInfeasibleError(RuntimeError):
    pass


@dataclass
class SafetyParams:
    """Barrier coefficients.

    ``k[0]`` belongs to the CAV barrier and ``k[1:]`` to the followers in
    vehicle order; ``b`` are the slack penalties.
    """

    tau: float = 0.3
    k: np.ndarray = field(default_factory=lambda: np.ones(3))
    k_f: float = 10.0
    b: np.ndarray = field(default_factory=lambda: np.ones(2))

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=float).copy()
        self.b = np.asarray(self.b, dtype=float).copy()
        self.k_f = float(self.k_f)
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if np.any(self.k <= 0) or self.k_f <= 0:
            raise ValueError("barrier coefficients must be positive")
        if np.any(self.b <= 0):
            raise ValueError("slack penalties must be positive")
        if self.k.size != self.b.size + 1:
            raise ValueError(f"{self.k.size} barrier coefficients for {self.b.size} followers")

    @classmethod
    def for_config(cls, cfg: PlatoonConfig, tau=0.3, k=1.0, k_f=10.0, b=1.0) -> "SafetyParams":
        n_f = len(cfg.follower_indices)
        return cls(tau, np.full(n_f + 1, float(k)), k_f, np.full(n_f, float(b)))

    @property
    def trainables(self) -> np.ndarray:
        return np.append(self.k, self.k_f)

    def set_trainables(self, theta) -> None:
        """Assign ``[k..., k_f]`` after projecting onto ``[1e-3, 1e3]``."""
        theta = np.clip(np.asarray(theta, dtype=float), K_LOWER, K_UPPER)
        self.k = theta[:-1].copy()
        self.k_f = float(theta[-1])

    def copy(self) -> "SafetyParams":
        return SafetyParams(self.tau, self.k, self.k_f, self.b)


@dataclass(frozen=True)
class LieDerivatives:
    Lf_cav: float
    Lg_cav: float
    Lf_followers: np.ndarray
    Lg_followers: np.ndarray


@dataclass(frozen=True)
class CbfQp:
    problem: QpProblem
    dq_du_rl: np.ndarray
    dq_dk: np.ndarray  # columns: k_i, k_{i+1..n}, k_f
    rows: tuple[str, ...]


@dataclass(frozen=True)
class SafeActionResult:
    u_final: float
    u_safe: float
    slacks: np.ndarray
    du_final_du_rl: float
    du_final_dk: np.ndarray
    qp_status: str
    active_constraints: tuple[int, ...]
    degenerate: bool = False

    @property
    def active_mask(self) -> int:
        return sum(1 << k for k in self.active_constraints)


def cbf_values(state: PlatoonState, cfg: PlatoonConfig, tau: float) -> tuple[float, np.ndarray]:
    """CAV barrier value and follower barrier values (vehicle order)."""
    i = cfg.cav_index
    s_i, v_i = state.spacing(i), state.velocity(i)
    h_i = s_i - tau * v_i
    h_f = np.array([state.spacing(j) - s_i - tau * (state.velocity(j) - v_i) for j in cfg.follower_indices])
    return h_i, h_f


def lie_derivatives(
    state: PlatoonState, cfg: PlatoonConfig, tau: float, f_hat: Mapping[int, float]
) -> LieDerivatives:
    """Lie derivatives along the estimated drift and the CAV input channel.

    ``f_hat`` maps follower indices to their estimated accelerations.
    """
    i = cfg.cav_index
    v = state.velocity
    missing = [j for j in cfg.follower_indices if j not in f_hat]
    if missing:
        raise KeyError(f"no acceleration estimate for followers {missing}")
    Lf_f = np.array(
        [v(i) - v(i - 1) - v(j) + v(j - 1) - tau * float(f_hat[j]) for j in cfg.follower_indices]
    )
    n_f = len(cfg.follower_indices)
    return LieDerivatives(v(i - 1) - v(i), -tau, Lf_f, np.full(n_f, tau))


def assemble_cbf_qp(
    state: PlatoonState,
    cfg: PlatoonConfig,
    u_rl: float,
    params: SafetyParams,
    f_hat: Mapping[int, float],
) -> CbfQp:
    """Build the CBF-QP in ``G w <= q`` form.

    Row order: CAV barrier, follower barriers, feasibility, upper actuator
    bound, lower actuator bound. ``f_hat`` must also hold the predecessor's
    estimated acceleration under ``cfg.predecessor_index``.
    """
    followers = cfg.follower_indices
    n_f = len(followers)
    if params.b.size != n_f:
        raise ValueError(f"{params.b.size} slack penalties for {n_f} followers")
    pred = cfg.predecessor_index
    if pred not in f_hat:
        raise KeyError(f"no acceleration estimate for predecessor {pred}")
    tau = params.tau
    h_i, h_f = cbf_values(state, cfg, tau)
    lie = lie_derivatives(state, cfg, tau, f_hat)
    if lie.Lg_cav == 0 or np.any(lie.Lg_followers == 0):
        raise AssertionError("barrier has relative degree above one")

    d, c = 1 + n_f, n_f + 4
    n_k = n_f + 2
    G = np.zeros((c, d))
    q = np.zeros(c)
    dq_du = np.zeros(c)
    dq_dk = np.zeros((c, n_k))

    # Lf + Lg (u_safe + u_rl) + k h (+ sigma) >= 0  ->  -Lg u_safe (- sigma) <= Lf + Lg u_rl + k h
    G[0, 0] = -lie.Lg_cav
    q[0] = lie.Lf_cav + lie.Lg_cav * u_rl + params.k[0] * h_i
    dq_du[0] = lie.Lg_cav
    dq_dk[0, 0] = h_i
    for m in range(n_f):
        r = 1 + m
        G[r, 0] = -lie.Lg_followers[m]
        G[r, 1 + m] = -1.0
        q[r] = lie.Lf_followers[m] + lie.Lg_followers[m] * u_rl + params.k[1 + m] * h_f[m]
        dq_du[r] = lie.Lg_followers[m]
        dq_dk[r, 1 + m] = h_f[m]

    v_rel = state.velocity(pred) - state.velocity(cfg.cav_index)
    feas_margin = v_rel - tau * cfg.a_min
    r = n_f + 1
    G[r, 0] = 1.0
    q[r] = float(f_hat[pred]) + params.k_f * feas_margin - u_rl
    dq_du[r] = -1.0
    dq_dk[r, n_k - 1] = feas_margin

    G[r + 1, 0] = 1.0
    q[r + 1] = cfg.a_max - u_rl
    dq_du[r + 1] = -1.0
    G[r + 2, 0] = -1.0
    q[r + 2] = u_rl - cfg.a_min
    dq_du[r + 2] = 1.0

    Q = 2.0 * np.diag(np.concatenate(([1.0], params.b)))
    prob = QpProblem(Q, G, q)
    if not prob.is_diagonal_positive():
        raise AssertionError("CBF-QP objective must be diagonal positive")
    rows = ("cbf_cav",) + tuple(f"cbf_{j}" for j in followers) + ("feasibility", "a_max", "a_min")
    return CbfQp(prob, dq_du, dq_dk, rows)


def _exact_in_bounds(u_rl: float, u_safe: float, lo: float, hi: float) -> tuple[float, float]:
    """Return ``(u_final, u_safe)`` with ``u_final == u_rl + u_safe`` inside ``[lo, hi]``."""
    u_final = u_rl + u_safe
    if u_final > hi:
        u_safe = hi - u_rl
        while u_rl + u_safe > hi:
            u_safe = np.nextafter(u_safe, -np.inf)
    elif u_final < lo:
        u_safe = lo - u_rl
        while u_rl + u_safe < lo:
            u_safe = np.nextafter(u_safe, np.inf)
    return u_rl + u_safe, float(u_safe)


def safe_action(
    state: PlatoonState,
    cfg: PlatoonConfig,
    u_rl: float,
    params: SafetyParams,
    f_hat: Mapping[int, float],
    strict: bool = False,
) -> SafeActionResult:
    """Filter ``u_rl`` through the CBF-QP and differentiate the result.

    With ``strict=True`` an infeasible QP raises ``QpInfeasibleError``;
    otherwise the CAV falls back to full braking and the result carries
    ``qp_status == "infeasible"``.
    """
    u_rl = float(u_rl)
    qp = assemble_cbf_qp(state, cfg, u_rl, params, f_hat)
    sol = qp_core.solve(qp.problem)
    n_f = len(cfg.follower_indices)
    if sol.status != "optimal":
        if strict:
            raise QpInfeasibleError(f"CBF-QP infeasible at t={state.t:.2f}")
        log.warning("CBF-QP infeasible at t=%.2f; braking at a_min", state.t)
        u_final, u_safe = _exact_in_bounds(u_rl, cfg.a_min - u_rl, cfg.a_min, cfg.a_max)
        return SafeActionResult(
            u_final, u_safe, np.zeros(n_f), 0.0, np.zeros(n_f + 2), sol.status, ()
        )

    sens = qp_core.kkt_sensitivity(qp.problem, sol)
    du_rl = 1.0 + float(qp_core.chain_to_scalar_params(sens, qp.dq_du_rl)[0, 0])
    du_dk = qp_core.chain_to_scalar_params(sens, qp.dq_dk)[0]
    u_final, u_safe = _exact_in_bounds(u_rl, float(sol.w_star[0]), cfg.a_min, cfg.a_max)
    return SafeActionResult(
        u_final,
        u_safe,
        sol.w_star[1:].copy(),
        du_rl,
        du_dk,
        sol.status,
        sol.active_set,
        sens.degenerate,
    )
