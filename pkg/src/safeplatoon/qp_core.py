"""Small dense convex QPs and their KKT sensitivities.

Problems have the form::

    minimize    0.5 * w' Q w + p' w
    subject to  G w <= q

with ``Q`` positive definite (diagonal in the safety layer). The solver is the
dual active-set method of Goldfarb and Idnani: it starts at the unconstrained
minimizer, adds one violated constraint at a time and never needs a feasible
starting point, which also gives an infeasibility certificate for free. The
final working set is exact, so the KKT system can be differentiated directly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

FEAS_TOL = 1e-8
ACTIVE_DUAL_TOL = 1e-9
ACTIVE_SLACK_TOL = 1e-8
SINGULAR_COND = 1e12


class QpIterationError(RuntimeError):
    """Raised when the active-set loop exceeds its iteration budget."""


@dataclass(frozen=True)
class QpProblem:
    Q: np.ndarray
    G: np.ndarray
    q: np.ndarray
    p: Optional[np.ndarray] = None

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        d = Q.shape[0]
        p = np.zeros(d) if self.p is None else np.atleast_1d(np.asarray(self.p, dtype=float))
        if Q.shape != (d, d):
            raise ValueError(f"Q must be square, got {Q.shape}")
        if G.shape != (q.size, d):
            raise ValueError(f"G has shape {G.shape}, expected ({q.size}, {d})")
        if p.shape != (d,):
            raise ValueError(f"p has shape {p.shape}, expected ({d},)")
        diag = np.diag(Q)
        if np.count_nonzero(Q - np.diag(diag)) == 0:
            # diagonal fast path (every safety-layer instance)
            if diag.size and diag.min() < -1e-10:
                raise ValueError("Q must be positive semidefinite")
        else:
            if not np.allclose(Q, Q.T, rtol=0, atol=1e-12):
                raise ValueError("Q must be symmetric")
            if np.linalg.eigvalsh(Q)[0] < -1e-10:
                raise ValueError("Q must be positive semidefinite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def n_vars(self) -> int:
        return self.Q.shape[0]

    @property
    def n_cons(self) -> int:
        return self.q.size

    def is_diagonal_positive(self) -> bool:
        return bool(np.all(self.Q == np.diag(np.diag(self.Q))) and np.all(np.diag(self.Q) > 0))


@dataclass(frozen=True)
class QpSolution:
    w_star: np.ndarray
    lambda_star: np.ndarray
    active_set: tuple[int, ...]
    status: str
    iterations: int = 0
    certificate: Optional[np.ndarray] = None

    def residuals(self, prob: QpProblem) -> dict[str, float]:
        """Stationarity, feasibility and complementarity residuals."""
        slack = prob.G @ self.w_star - prob.q
        return {
            "stationarity": float(np.max(np.abs(prob.Q @ self.w_star + prob.p + prob.G.T @ self.lambda_star))),
            "feasibility": float(max(np.max(slack), 0.0)) if slack.size else 0.0,
            "complementarity": float(np.max(np.abs(self.lambda_star * slack))) if slack.size else 0.0,
        }


@dataclass(frozen=True)
class QpSensitivity:
    dw_dq: np.ndarray
    dlambda_dq: np.ndarray
    degenerate: bool = False


def _equality_kkt(Q, p, GA, qA):
    """Solve min 0.5 w'Qw + p'w s.t. GA w = qA; returns (w, lambda_A)."""
    d, m = Q.shape[0], GA.shape[0]
    K = np.zeros((d + m, d + m))
    K[:d, :d] = Q
    K[:d, d:] = GA.T
    K[d:, :d] = GA
    sol = np.linalg.solve(K, np.concatenate((-p, qA)))
    return sol[:d], sol[d:]


def solve(prob: QpProblem, max_iter: Optional[int] = None) -> QpSolution:
    """Solve a strictly convex QP.

    Returns a solution with ``status`` ``"optimal"`` or ``"infeasible"``; in
    the latter case ``certificate`` holds ``y >= 0`` with ``G' y = 0`` and
    ``q' y < 0``. Ties are broken by lowest constraint index so results are
    deterministic.
    """
    Q, G, q, p = prob.Q, prob.G, prob.q, prob.p
    d, c = prob.n_vars, prob.n_cons
    diag = np.diag(Q)
    if np.count_nonzero(Q - np.diag(diag)) == 0:
        if np.any(diag <= 0):
            raise ValueError("solve requires a positive definite Q")
        H = np.diag(1.0 / diag)
    else:
        try:
            L = np.linalg.cholesky(Q)
        except np.linalg.LinAlgError as exc:
            raise ValueError("solve requires a positive definite Q") from exc
        Linv = np.linalg.inv(L)
        H = Linv.T @ Linv
    max_iter = max_iter if max_iter is not None else 50 * (c + d) + 50

    # constraints as n_k' w >= b_k
    N = -G.T
    b = -q
    x = -H @ p
    active: list[int] = []
    u = np.zeros(0)
    it = 0
    while True:
        slack = N.T @ x - b
        mask = slack < -FEAS_TOL * 1e-3 * (1.0 + np.abs(b))
        mask[active] = False
        if not mask.any():
            break
        k_new = int(np.argmax(mask))
        n_p = N[:, k_new]
        u_plus = np.append(u, 0.0)
        while True:
            it += 1
            if it > max_iter:
                raise QpIterationError(f"active-set solver exceeded {max_iter} iterations")
            if active:
                NA = N[:, active]
                r = np.linalg.solve(NA.T @ H @ NA, NA.T @ H @ n_p)
                z = H @ n_p - H @ NA @ r
            else:
                r = np.zeros(0)
                z = H @ n_p
            t1, drop = np.inf, None
            for idx in range(len(active)):
                if r[idx] > 1e-14:
                    ratio = u_plus[idx] / r[idx]
                    if ratio < t1:
                        t1, drop = ratio, idx
            zn = float(z @ n_p)
            if zn > 1e-14 * max(1.0, float(n_p @ H @ n_p)):
                t2 = -(float(n_p @ x) - b[k_new]) / zn
            else:
                t2 = np.inf
            t = min(t1, t2)
            if not np.isfinite(t):
                y = np.zeros(c)
                y[active] = -r
                y[k_new] = 1.0
                return QpSolution(x, np.zeros(c), tuple(sorted(active)), "infeasible", it, y)
            u_plus[:-1] -= t * r
            u_plus[-1] += t
            if np.isfinite(t2):
                x = x + t * z
            if t2 <= t1:
                active.append(k_new)
                u = u_plus
                break
            del active[drop]
            u_plus = np.delete(u_plus, drop)

    # polish on the final working set
    order = sorted(range(len(active)), key=lambda i: active[i])
    active = [active[i] for i in order]
    lam = np.zeros(c)
    if active:
        w, lam_a = _equality_kkt(Q, p, G[active], q[active])
        lam[active] = np.maximum(lam_a, 0.0)
    else:
        w = -H @ p
    return QpSolution(w, lam, tuple(active), "optimal", it)


def strict_active_set(prob: QpProblem, sol: QpSolution) -> tuple[list[int], list[int]]:
    """Split constraints into strictly active and weakly active index lists."""
    slack = np.abs(prob.G @ sol.w_star - prob.q)
    strict, weak = [], []
    for k in range(prob.n_cons):
        on_boundary = slack[k] < ACTIVE_SLACK_TOL
        if sol.lambda_star[k] > ACTIVE_DUAL_TOL and on_boundary:
            strict.append(k)
        elif on_boundary:
            weak.append(k)
    return strict, weak


def kkt_matrix(prob: QpProblem, sol: QpSolution) -> np.ndarray:
    """Full KKT Jacobian [[Q, G'], [D(lambda) G, D(G w - q)]]."""
    d, c = prob.n_vars, prob.n_cons
    K = np.zeros((d + c, d + c))
    K[:d, :d] = prob.Q
    K[:d, d:] = prob.G.T
    K[d:, :d] = sol.lambda_star[:, None] * prob.G
    K[d:, d:] = np.diag(prob.G @ sol.w_star - prob.q)
    return K


def kkt_sensitivity(prob: QpProblem, sol: QpSolution) -> QpSensitivity:
    """Jacobians of the primal and dual solution with respect to ``q``.

    Differentiates the KKT system restricted to the strictly active set, which
    coincides with inverting the full KKT matrix whenever that matrix is
    nonsingular. Weakly active constraints or a singular reduced system make
    the point non-differentiable; a zero sensitivity flagged ``degenerate`` is
    returned then.
    """
    if sol.status != "optimal":
        raise ValueError(f"cannot differentiate a solution with status {sol.status!r}")
    d, c = prob.n_vars, prob.n_cons
    zero = QpSensitivity(np.zeros((d, c)), np.zeros((c, c)), degenerate=True)
    strict, weak = strict_active_set(prob, sol)
    if weak:
        return zero
    dw = np.zeros((d, c))
    dlam = np.zeros((c, c))
    if not strict:
        return QpSensitivity(dw, dlam)
    m = len(strict)
    GA = prob.G[strict]
    K = np.zeros((d + m, d + m))
    K[:d, :d] = prob.Q
    K[:d, d:] = GA.T
    K[d:, :d] = GA
    if np.linalg.cond(K) > SINGULAR_COND:
        return zero
    rhs = np.zeros((d + m, m))
    rhs[d:] = np.eye(m)
    X = np.linalg.solve(K, rhs)
    dw[:, strict] = X[:d]
    dlam[np.ix_(strict, strict)] = X[d:]
    return QpSensitivity(dw, dlam)


def chain_to_scalar_params(sens: QpSensitivity, dq_dtheta) -> np.ndarray:
    """Compose ``dw/dq`` with ``dq/dtheta`` for parameters entering through ``q``."""
    dq_dtheta = np.asarray(dq_dtheta, dtype=float)
    if dq_dtheta.ndim == 1:
        dq_dtheta = dq_dtheta[:, None]
    if dq_dtheta.shape[0] != sens.dw_dq.shape[1]:
        raise ValueError(
            f"dq_dtheta has {dq_dtheta.shape[0]} rows, expected {sens.dw_dq.shape[1]}"
        )
    return sens.dw_dq @ dq_dtheta
