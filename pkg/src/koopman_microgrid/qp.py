"""Dense convex QP: ``min 1/2 x'Hx + g'x  s.t.  A x <= b`` by a primal active-set method.

Sized for MPC problems with a few dozen variables. A feasible start comes
from the warm start when it is feasible, otherwise from a phase-one problem
that minimises the worst constraint violation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["QpError", "InfeasibleQP", "QpProblem", "QpSolution", "solve_qp", "kkt_residuals"]

FEAS_TOL = 1e-9


class QpError(ArithmeticError):
    """Numerical failure inside the QP solver."""


class InfeasibleQP(QpError):
    """The inequality constraints admit no point."""


@dataclass
class QpProblem:
    hessian: np.ndarray
    gradient: np.ndarray
    a_ineq: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    b_ineq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    constant: float = 0.0
    meta: dict = field(default_factory=dict)
    # Reusable KKT factors keyed by working set. Only valid while hessian and
    # a_ineq stay the same across solves (fixed-structure MPC).
    kkt_cache: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        self.hessian = np.atleast_2d(np.asarray(self.hessian, dtype=float))
        self.gradient = np.asarray(self.gradient, dtype=float).ravel()
        n = self.gradient.size
        a = np.asarray(self.a_ineq, dtype=float)
        self.a_ineq = a.reshape(-1, n) if a.size else np.zeros((0, n))
        self.b_ineq = np.asarray(self.b_ineq, dtype=float).ravel()
        if self.hessian.shape != (n, n) or self.b_ineq.size != self.a_ineq.shape[0]:
            raise ValueError("inconsistent QP dimensions")

    @property
    def n(self) -> int:
        return self.gradient.size

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.hessian @ x + self.gradient @ x + self.constant)


@dataclass
class QpSolution:
    x: np.ndarray
    multipliers: np.ndarray
    active: tuple
    iterations: int
    objective: float
    stationarity: float
    primal_infeasibility: float
    complementarity: float

    @property
    def kkt_residual(self) -> float:
        return max(self.stationarity, self.primal_infeasibility, self.complementarity)


def kkt_residuals(qp: QpProblem, x, lam) -> tuple[float, float, float]:
    """Stationarity, primal infeasibility and complementarity (all >= 0)."""
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    stat = qp.hessian @ x + qp.gradient + qp.a_ineq.T @ lam
    slack = qp.a_ineq @ x - qp.b_ineq
    primal = float(np.max(slack, initial=0.0))
    dual = float(np.max(-lam, initial=0.0))
    comp = float(np.max(np.abs(lam * slack), initial=0.0))
    return float(np.max(np.abs(stat), initial=0.0)), max(primal, 0.0), max(comp, dual)


def _kkt_matrix(h, a_w):
    n, m = h.shape[0], a_w.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = h
    kkt[:n, n:] = a_w.T
    kkt[n:, :n] = a_w
    return kkt


def _eqp_step(h, grad, a_w, cache=None, key=None):
    """Solve the working-set equality QP for the step ``p`` and multipliers."""
    n = h.shape[0]
    m = a_w.shape[0]
    if cache is not None:
        # columns of the KKT inverse acting on [-grad; 0]
        op = cache.get(key)
        if op is None:
            op = -np.linalg.pinv(_kkt_matrix(h, a_w))[:, :n]
            cache[key] = op
        sol = op @ grad
        return sol[:n], sol[n:]
    if m == 0:
        return np.linalg.solve(h, -grad), np.zeros(0)
    rhs = np.concatenate([-grad, np.zeros(m)])
    kkt = _kkt_matrix(h, a_w)
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _phase_one(qp: QpProblem, x0):
    """Find a feasible point or raise :class:`InfeasibleQP`."""
    n, m = qp.n, qp.a_ineq.shape[0]
    viol = float(np.max(qp.a_ineq @ x0 - qp.b_ineq))
    # variables (x, t): min t + eps/2 |x - x0|^2 + eps/2 t^2,  A x - t <= b,  -t <= 1
    eps = 1e-8
    h = eps * np.eye(n + 1)
    g = np.concatenate([-eps * x0, [1.0]])
    a = np.zeros((m + 1, n + 1))
    a[:m, :n] = qp.a_ineq
    a[:m, n] = -1.0
    a[m, n] = -1.0
    b = np.concatenate([qp.b_ineq, [1.0]])
    aux = QpProblem(h, g, a, b)
    sol = _active_set(aux, np.concatenate([x0, [max(viol, 0.0) + 1.0]]), max_iter=50 * (n + m + 2))
    if sol.x[-1] > FEAS_TOL:
        raise InfeasibleQP(f"constraints infeasible (minimal violation {sol.x[-1]:.3g})")
    return sol.x[:n]


def _active_set(qp: QpProblem, x, max_iter: int, working=None) -> QpSolution:
    h, a, b = qp.hessian, qp.a_ineq, qp.b_ineq
    m = a.shape[0]
    working = [] if working is None else list(working)
    lam_w = np.zeros(0)
    degenerate = False
    for it in range(1, max_iter + 1):
        grad = h @ x + qp.gradient
        a_w = a[working] if working else np.zeros((0, qp.n))
        p, lam_w = _eqp_step(h, grad, a_w, qp.kkt_cache, tuple(working))
        if len(working) == qp.n:
            p = np.zeros(qp.n)  # vertex: working constraints pin x
        # KKT round-off grows with the gradient scale (large soft penalties)
        if np.max(np.abs(p)) <= 1e-12 * max(1.0, np.max(np.abs(x)), np.max(np.abs(grad))):
            if lam_w.size == 0 or lam_w.min() >= -1e-12:
                break
            if degenerate:
                # Bland's rule on degenerate vertices: drop the lowest-index offender
                drop = min((c for c, lw in zip(working, lam_w) if lw < -1e-12))
                working.remove(drop)
            else:
                working.pop(int(np.argmin(lam_w)))
            continue
        alpha, blocking = 1.0, None
        ap = a @ p
        cand = ap > 1e-14
        cand[working] = False
        if cand.any():
            idx = np.flatnonzero(cand)
            steps = np.maximum((b[idx] - a[idx] @ x) / ap[idx], 0.0)
            j = int(np.argmin(steps))  # first minimiser, i.e. lowest index on ties
            if steps[j] < alpha - 1e-14:
                alpha, blocking = float(steps[j]), int(idx[j])
        x = x + alpha * p
        degenerate = alpha <= 1e-14
        if blocking is not None:
            working.append(blocking)
    else:
        raise QpError(f"active-set method hit the iteration limit ({max_iter})")
    lam = np.zeros(m)
    lam[working] = lam_w
    stat, primal, comp = kkt_residuals(qp, x, lam)
    return QpSolution(x, lam, tuple(sorted(working)), it, qp.objective(x), stat, primal, comp)


def solve_qp(qp: QpProblem, warm_start=None, max_iter: int | None = None) -> QpSolution:
    """Solve ``qp``; ``warm_start`` seeds the primal iterate when feasible.

    Raises
    ------
    InfeasibleQP
        The constraint set is empty.
    QpError
        The Hessian is not positive definite or the iteration stalls.
    """
    cache = qp.kkt_cache
    if cache is None or "checked" not in cache:
        h = 0.5 * (qp.hessian + qp.hessian.T)
        try:
            np.linalg.cholesky(h)
        except np.linalg.LinAlgError as exc:
            raise QpError("hessian is not positive definite") from exc
        qp.hessian = h
        if cache is not None:
            cache["checked"] = True
    n, m = qp.n, qp.a_ineq.shape[0]
    x0 = np.zeros(n) if warm_start is None else np.asarray(warm_start, dtype=float).ravel().copy()
    if x0.size != n or not np.all(np.isfinite(x0)):
        x0 = np.zeros(n)
    if max_iter is None:
        max_iter = 20 * (n + m + 1)
    if m:
        if np.max(qp.a_ineq @ x0 - qp.b_ineq) > FEAS_TOL:
            x0 = _phase_one(qp, x0)
        working = []
    else:
        working = []
    sol = _active_set(qp, x0, max_iter, working)
    if not np.all(np.isfinite(sol.x)):
        raise QpError("non-finite QP solution")
    return sol
