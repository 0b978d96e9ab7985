"""Secondary voltage control: distributed Koopman MPC, nonlinear MPC baseline,
steady-state inversion and the Riccati-based stability certificate."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .graph import CommGraph, SwitchSchedule, active_graph
from .grid import ControlAction, GridState, MicrogridModel, reactive_power_simplified
from .koopman import LIFT_DIM, LiftedPredictor, lift, lift_jacobian, neighbor_aggregate
from .numerics import RiccatiError, care_residual, eigenvalues, least_squares, solve_care
from .qp import QpError, QpProblem, QpSolution, solve_qp

__all__ = [
    "MpcWeights",
    "SCENARIO_WEIGHTS",
    "TIMING_WEIGHTS",
    "AgentController",
    "build_qp",
    "solve_agent",
    "condensed_qp",
    "control_step",
    "DistributedKoopmanMPC",
    "NonlinearAgent",
    "nonlinear_mpc_step",
    "NonlinearMPC",
    "SteadyStateError",
    "steady_state_input",
    "StabilityCertificate",
    "stability_certificate",
    "continuous_lifted_model",
    "predictor_certificate",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MpcWeights:
    q: float = 1.0
    r: float = 5.0
    s: float = 0.2
    horizon: int = 3
    sample_time: float = 0.1
    v_min: float = 165.0
    v_max: float = 175.0
    soft_penalty: float = 1e4

    def __post_init__(self):
        if self.q < 0 or self.r <= 0 or self.s < 0:
            raise ValueError("weights need q >= 0, r > 0, s >= 0")
        if self.horizon < 1 or self.sample_time <= 0:
            raise ValueError("horizon must be >= 1 and sample_time > 0")
        if not self.v_min < self.v_max:
            raise ValueError("v_min must be below v_max")


SCENARIO_WEIGHTS = MpcWeights()
TIMING_WEIGHTS = MpcWeights(q=1.0, r=1.0, s=0.0, horizon=10, sample_time=0.01, v_min=170.0, v_max=171.0)


def condensed_qp(f, g, weights: MpcWeights, v_ref: float, soft: bool = False, hess=None) -> QpProblem:
    """QP over the input sequence for outputs ``y = f + g @ u``.

    Cost ``1/2 sum q (y_k - v_ref)^2 + r u_k^2`` with box ``v_min <= y_k <= v_max``.
    With ``soft`` a single slack ``s >= 0`` relaxes every bound at linear
    price ``soft_penalty`` (plus a unit quadratic term keeping the Hessian
    definite).
    """
    h_p = g.shape[1]
    err = f - v_ref
    if hess is None:
        hess = weights.q * g.T @ g + weights.r * np.eye(h_p)
    grad = weights.q * g.T @ err
    const = 0.5 * weights.q * float(err @ err)
    a = np.vstack([g, -g])
    b = np.concatenate([weights.v_max - f, f - weights.v_min])
    if soft:
        n = h_p + 1
        hess_s = np.zeros((n, n))
        hess_s[:h_p, :h_p] = hess
        hess_s[h_p, h_p] = 1.0
        grad = np.append(grad, weights.soft_penalty)
        a_s = np.zeros((2 * h_p + 1, n))
        a_s[: 2 * h_p, :h_p] = a
        a_s[: 2 * h_p, h_p] = -1.0
        a_s[2 * h_p, h_p] = -1.0
        return QpProblem(hess_s, grad, a_s, np.append(b, 0.0), const, {"f": f, "g": g, "soft": True})
    return QpProblem(hess, grad, a, b, const, {"f": f, "g": g, "soft": False})


def _affine_prediction(a, b, c, x0, offset, horizon):
    """Outputs ``y_k = C x_k`` for k=1..H of ``x+ = A x + B u + offset`` as ``F + G u``."""
    n = a.shape[0]
    f = np.empty(horizon)
    g = np.zeros((horizon, horizon))
    x = np.asarray(x0, dtype=float)
    # impulse responses C A^k B
    markov = np.empty(horizon)
    ak_b = b.reshape(n)
    for k in range(horizon):
        x = a @ x + offset
        f[k] = c @ x
        markov[k] = c @ ak_b
        ak_b = a @ ak_b
    for k in range(horizon):
        g[k, : k + 1] = markov[k::-1]
    return f, g


@dataclass
class AgentController:
    """Per-inverter Koopman MPC state.

    ``predictor`` is the identified (base-rate) model; it is resampled to the
    controller sample time on construction.
    """

    index: int
    predictor: LiftedPredictor
    weights: MpcWeights = SCENARIO_WEIGHTS
    v_ref: float = 169.7
    aggregate: str = "mean"
    last_solution: np.ndarray | None = None
    last_input: float = 0.0
    last_measurements: np.ndarray | None = None
    stale: bool = False
    model: LiftedPredictor = field(init=False)

    def __post_init__(self):
        ratio = self.weights.sample_time / self.predictor.sample_dt
        steps = int(round(ratio))
        if steps < 1 or abs(ratio - steps) > 1e-6:
            raise ValueError("controller sample time must be a multiple of the predictor sample time")
        self.model = self.predictor.resample(steps)
        # the lifted model is fixed, so the condensed prediction matrices are too
        a, b, c = self.model.a, self.model.b[:, 0], self.model.c[0]
        h_p = self.weights.horizon
        self._free = np.empty((h_p, LIFT_DIM))  # rows C A^k, k = 1..H
        self._drift = np.empty((h_p, LIFT_DIM))  # rows C (I + A + ... + A^(k-1))
        _, self._g = _affine_prediction(a, b, c, np.zeros(LIFT_DIM), np.zeros(LIFT_DIM), h_p)
        ak = np.eye(LIFT_DIM)
        acc = np.zeros((LIFT_DIM, LIFT_DIM))
        for k in range(h_p):
            acc = acc + ak
            ak = a @ ak
            self._free[k] = c @ ak
            self._drift[k] = c @ acc
        self._hess = self.weights.q * self._g.T @ self._g + self.weights.r * np.eye(h_p)
        self._kkt = {False: {}, True: {}}  # factor caches for the hard and softened QP

    def predict_outputs(self, psi0, offset):
        """Free response ``F`` and input matrix ``G`` of the horizon outputs."""
        return self._free @ psi0 + self._drift @ offset, self._g

    def laplacian_row(self, graph: CommGraph) -> np.ndarray:
        return graph.laplacian[self.index]


def build_qp(agent: AgentController, graph: CommGraph, neighbor_v) -> QpProblem:
    """Condensed QP of one agent from the latest (possibly partial) voltage vector.

    Missing neighbour readings (NaN) fall back to the last received value and
    mark the agent stale.
    """
    v = np.asarray(neighbor_v, dtype=float).copy()
    missing = ~np.isfinite(v)
    agent.stale = bool(missing.any())
    if agent.stale:
        if agent.last_measurements is None:
            raise ValueError("missing measurement with no previous value to fall back on")
        v[missing] = agent.last_measurements[missing]
    agent.last_measurements = v.copy()
    i = agent.index
    v_i = v[i]
    v_j = neighbor_aggregate(v, i, graph, agent.aggregate)
    psi0 = lift(v_i, v_j)
    d = agent.weights.s * float(agent.laplacian_row(graph) @ v)
    offset = lift_jacobian(v_i, v_j) * d
    f, g = agent.predict_outputs(psi0, offset)
    soft = not (agent.weights.v_min <= v_i <= agent.weights.v_max)
    qp = condensed_qp(f, g, agent.weights, agent.v_ref, soft, agent._hess)
    qp.kkt_cache = agent._kkt[soft]
    qp.meta.update(psi0=psi0, consensus=d, offset=offset)
    return qp


def _feasible_start(qp: QpProblem, u) -> np.ndarray:
    """Repair a warm start so the QP needs no phase-one solve.

    A softened QP gets the smallest slack covering the violation. For hard
    box constraints the lower-triangular ``G`` lets each ``u_k`` pull ``y_k``
    back onto the violated bound in one forward pass.
    """
    u = np.asarray(u, dtype=float).copy()
    g = qp.meta["g"]
    h_p = g.shape[1]
    b = qp.b_ineq
    if qp.meta.get("soft"):
        viol = np.concatenate([g @ u, -(g @ u)]) - b[: 2 * h_p]
        return np.append(u, max(0.0, float(viol.max())))
    for k in range(h_p):
        if abs(g[k, k]) < 1e-12:
            continue
        y = g[k, : k + 1] @ u[: k + 1]
        if y > b[k]:
            u[k] -= (y - b[k]) / g[k, k]
        elif -y > b[h_p + k]:
            u[k] += (-y - b[h_p + k]) / g[k, k]
    return u


def _warm(qp: QpProblem, agent_solution, h_p):
    u = np.zeros(h_p) if agent_solution is None else np.asarray(agent_solution, dtype=float)[:h_p]
    shifted = np.append(u[1:], u[-1]) if u.size == h_p else np.zeros(h_p)
    return _feasible_start(qp, shifted)


def solve_agent(agent: AgentController, graph: CommGraph, v) -> tuple[float, QpSolution | None, float]:
    """Build and solve one agent's QP; returns ``(u0, solution, wall_ms)``.

    A failed solve holds the previous input.
    """
    t0 = time.perf_counter()
    sol = None
    try:
        qp = build_qp(agent, graph, v)
        sol = solve_qp(qp, _warm(qp, agent.last_solution, agent.weights.horizon))
        agent.last_solution = sol.x[: agent.weights.horizon].copy()
        agent.last_input = float(sol.x[0])
    except (QpError, ValueError) as exc:
        log.warning("agent %d solve failed (%s); holding previous input", agent.index + 1, exc)
    return agent.last_input, sol, 1e3 * (time.perf_counter() - t0)


def control_step(agents, state: GridState, graph: CommGraph) -> ControlAction:
    """One synchronous round: every agent solves on the same measurement snapshot."""
    v = np.asarray(state.v, dtype=float).copy()
    n = len(agents)
    u = np.zeros(n)
    ms = np.zeros(n)
    its = np.zeros(n)
    kkt = np.zeros(n)
    for k, agent in enumerate(agents):
        u[k], sol, ms[k] = solve_agent(agent, graph, v)
        if sol is not None:
            its[k] = sol.iterations
            kkt[k] = sol.kkt_residual
    return ControlAction(u, ms, its, kkt)


class DistributedKoopmanMPC:
    """Simulation callback running all Koopman agents under a graph schedule."""

    def __init__(self, agents, schedule: SwitchSchedule):
        self.agents = list(agents)
        self.schedule = schedule
        self.sample_time = self.agents[0].weights.sample_time

    def __call__(self, t, state, model=None):
        return control_step(self.agents, state, active_graph(self.schedule, t))


# ---------------------------------------------------------------- nonlinear baseline


@dataclass
class NonlinearAgent:
    index: int
    weights: MpcWeights = TIMING_WEIGHTS
    tol: float = 1e-6
    max_iter: int = 50
    integration_dt: float | None = 1e-3  # Euler step of the internal model; None: one step per sample
    last_solution: np.ndarray | None = None
    last_input: float = 0.0
    converged: bool = True
    iterations: int = 0


def _nonlinear_rollout(u, v0, v_nbr, b_row, tau, v_ref, nq, q_ref, q_load, dt, substeps=1):
    """Euler rollout of one inverter with neighbours frozen; returns V_1..V_H and dV/du.

    Each control interval ``dt`` is integrated in ``substeps`` Euler steps
    with the input held.
    """
    h_p = u.size
    b_sum = b_row.sum()
    b_v = b_row @ v_nbr
    v = np.empty(h_p)
    sens = np.zeros((h_p, h_p))
    cur = v0
    cur_sens = np.zeros(h_p)
    k = dt / (substeps * tau)
    for j in range(h_p):
        gain = 1.0  # d cur / d cur at the interval start
        lift_u = 0.0  # d cur / d u_j within the interval
        for _ in range(substeps):
            flow = cur * cur * b_sum - cur * b_v
            dfdv = -1.0 - nq * (2.0 * cur * b_sum - b_v)
            cur = cur + k * (-cur + v_ref + u[j] - nq * (q_load + flow - q_ref))
            gain *= 1.0 + k * dfdv
            lift_u = (1.0 + k * dfdv) * lift_u + k
        cur_sens = gain * cur_sens
        cur_sens[j] += lift_u
        v[j] = cur
        sens[j] = cur_sens
    return v, sens


def nonlinear_mpc_step(agent: NonlinearAgent, state: GridState, model: MicrogridModel, q_load) -> tuple[float, float]:
    """Sequential-QP solve of the horizon problem on the discretised nonlinear plant.

    Returns ``(u0, wall_ms)``. Non-convergence keeps the best iterate and
    clears ``agent.converged``.
    """
    t0 = time.perf_counter()
    i = agent.index
    w = agent.weights
    v = np.asarray(state.v, dtype=float)
    inv = model.inverters[i]
    b_row = model.susceptance[i].copy()
    v_nbr = v.copy()
    sub = 1 if agent.integration_dt is None else max(1, int(round(w.sample_time / agent.integration_dt)))
    args = (v[i], v_nbr, b_row, inv.tau, inv.v_ref, inv.nq, inv.q_ref, float(np.asarray(q_load)[i]), w.sample_time,
            sub)
    soft = not (w.v_min <= v[i] <= w.v_max)
    u = np.zeros(w.horizon) if agent.last_solution is None else np.append(agent.last_solution[1:], agent.last_solution[-1])
    best = None
    agent.converged = False
    it = 0
    for it in range(1, agent.max_iter + 1):
        traj, sens = _nonlinear_rollout(u, *args)
        f = traj - sens @ u
        qp = condensed_qp(f, sens, w, inv.v_ref, soft)
        try:
            sol = solve_qp(qp, _feasible_start(qp, u))
        except QpError as exc:
            log.warning("nonlinear agent %d QP failed (%s)", i + 1, exc)
            break
        u_new = sol.x[: w.horizon]
        step = float(np.max(np.abs(u_new - u)))
        u = u_new
        best = u
        if step <= agent.tol:
            agent.converged = True
            break
    agent.iterations = it
    if best is not None:
        agent.last_solution = best.copy()
        agent.last_input = float(best[0])
    return agent.last_input, 1e3 * (time.perf_counter() - t0)


class NonlinearMPC:
    """Simulation callback running one nonlinear MPC per inverter."""

    def __init__(self, agents, loads):
        self.agents = list(agents)
        self.loads = loads
        self.sample_time = self.agents[0].weights.sample_time

    def __call__(self, t, state, model):
        q_load = model.inverter_loads(self.loads.active(t))
        n = len(self.agents)
        u = np.zeros(n)
        ms = np.zeros(n)
        its = np.zeros(n)
        for k, agent in enumerate(self.agents):
            u[k], ms[k] = nonlinear_mpc_step(agent, state, model, q_load)
            its[k] = agent.iterations
        return ControlAction(u, ms, its, np.zeros(n))


# ---------------------------------------------------------------- steady state


class SteadyStateError(ArithmeticError):
    def __init__(self, gap):
        super().__init__(f"(I - A) is singular: an eigenvalue of A lies within {gap:.3g} of 1")
        self.gap = gap


def steady_state_input(a, b, x_star, tol: float = 1e-3) -> np.ndarray:
    """Input ``u`` with ``x* = (I - A)^-1 B u`` in the least-squares sense.

    Raises :class:`SteadyStateError` when ``A`` has an eigenvalue within
    ``tol`` of 1.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float).reshape(a.shape[0], -1)
    x_star = np.asarray(x_star, dtype=float).reshape(a.shape[0], 1)
    gap = float(np.min(np.abs(eigenvalues(a).values - 1.0)))
    if gap < tol:
        raise SteadyStateError(gap)
    return least_squares(b, (np.eye(a.shape[0]) - a) @ x_star).ravel()


# ---------------------------------------------------------------- stability certificate


@dataclass(frozen=True)
class StabilityCertificate:
    p: np.ndarray
    k_gain: np.ndarray
    riccati_residual: float
    min_eig_p: float
    lyapunov_decrease_margin: float

    @property
    def valid(self) -> bool:
        return self.min_eig_p > 0 and self.riccati_residual < 1e-6

    def closed_loop(self, a, b, laplacian=None) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=float))
        drift = a if laplacian is None else a + np.atleast_2d(laplacian)
        return drift - np.asarray(b, dtype=float).reshape(a.shape[0], -1) @ self.k_gain


def stability_certificate(a_cont, b, q, r, laplacian=None) -> StabilityCertificate:
    """Solve the Laplacian-augmented Riccati equation and report Lyapunov data.

    The gain is ``K = R^-1 B' P`` (input ``u = -K x``); the decrease margin is
    the smallest eigenvalue of ``Q + P B R^-1 B' P``.
    """
    a = np.atleast_2d(np.asarray(a_cont, dtype=float))
    n = a.shape[0]
    b = np.asarray(b, dtype=float).reshape(n, -1)
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    lap = None if laplacian is None else np.atleast_2d(np.asarray(laplacian, dtype=float))
    p = solve_care(a, b, q, r, lap)
    k = np.linalg.solve(r, b.T @ p)
    res = float(np.linalg.norm(care_residual(a, b, q, r, p, lap)))
    min_eig = float(np.linalg.eigvalsh(p).min())
    margin = float(np.linalg.eigvalsh(q + p @ b @ k).min())
    return StabilityCertificate(p, k, res, min_eig, margin)


def continuous_lifted_model(predictor: LiftedPredictor, zero_tol: float = 1e-2):
    """Continuous-time ``(A_c, B_c, basis)`` on the subspace without near-zero modes.

    ``basis`` (4 x r, orthonormal columns) spans the retained invariant
    subspace of the discrete matrix. Raises ``ArithmeticError`` when the
    retained block has an eigenvalue on the closed negative real axis.
    """
    a_d = predictor.a
    t_s, z, sdim = scipy.linalg.schur(a_d, output="real", sort=lambda re, im: np.hypot(re, im) > zero_tol)
    basis = z[:, :sdim]
    a_r = basis.T @ a_d @ basis
    b_r = basis.T @ predictor.b
    lam = np.linalg.eigvals(a_r)
    if np.any((np.abs(lam.imag) < 1e-12) & (lam.real <= 0)):
        raise ArithmeticError("matrix logarithm undefined: eigenvalue on the negative real axis")
    dt = predictor.sample_dt
    a_c = np.real(scipy.linalg.logm(a_r)) / dt
    # B_d = (int_0^dt e^{A_c s} ds) B_c
    r_dim = a_r.shape[0]
    aug = np.zeros((2 * r_dim, 2 * r_dim))
    aug[:r_dim, :r_dim] = a_c * dt
    aug[:r_dim, r_dim:] = np.eye(r_dim) * dt
    integral = scipy.linalg.expm(aug)[:r_dim, r_dim:]
    b_c = np.linalg.solve(integral, b_r)
    return a_c, b_c, basis


def predictor_certificate(
    predictor: LiftedPredictor,
    weights: MpcWeights,
    laplacian,
    index: int,
    zero_tol: float = 1e-2,
) -> tuple[StabilityCertificate, np.ndarray, np.ndarray, np.ndarray]:
    """Certificate for agent ``index`` on its identified model.

    The state weight is ``q * I`` on the retained lifted coordinates; the
    consensus coupling is ``s * L_ii`` along the direction in which the
    agent's own voltage enters the lift. Returns ``(cert, A_c, B_c, L_c)``.
    """
    a_c, b_c, basis = continuous_lifted_model(predictor, zero_tol)
    dim = a_c.shape[0]
    e = basis.T @ np.array([1.0, 0.0, 1.0, 0.0])
    e = e / np.linalg.norm(e)
    lap = np.asarray(laplacian, dtype=float)
    l_c = weights.s * lap[index, index] * np.outer(e, e)
    cert = stability_certificate(a_c, b_c, weights.q * np.eye(dim), np.array([[weights.r]]), l_c)
    return cert, a_c, b_c, l_c
