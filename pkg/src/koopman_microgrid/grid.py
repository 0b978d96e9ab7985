"""Inverter-based microgrid: droop-controlled voltage dynamics and simulation.

Voltages are peak per-phase volts. Lines are purely inductive, so each branch
contributes a susceptance ``1 / (omega * L)`` at nominal frequency. Networks
with passive (load-only) nodes are Kron-reduced onto the inverter nodes.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "NOMINAL_OMEGA",
    "SimulationError",
    "InverterParams",
    "Line",
    "Network",
    "NetworkTopology",
    "MicrogridModel",
    "LoadEvent",
    "LineEvent",
    "LoadSchedule",
    "GridState",
    "ControlAction",
    "ScenarioResult",
    "reactive_power_simplified",
    "power_flow_full",
    "voltage_derivative",
    "step",
    "simulate",
    "ieee14_network",
]

NOMINAL_OMEGA = 2.0 * math.pi * 60.0


class SimulationError(RuntimeError):
    """Plant integration produced a non-finite state."""

    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} (t={t:.6f} s)")
        self.t = t


@dataclass(frozen=True)
class InverterParams:
    v_ref: float = 169.7
    q_ref: float = 5000.0
    p_ref: float = 10000.0
    nq: float = 1e-4
    mp: float = 1e-4  # stored only, no frequency loop
    tau: float = 0.1

    def __post_init__(self):
        if not (self.tau > 0 and self.nq > 0 and self.v_ref > 0):
            raise ValueError("InverterParams requires tau > 0, nq > 0, v_ref > 0")


@dataclass(frozen=True)
class Line:
    name: str
    a: int
    b: int
    inductance: float  # henries

    @property
    def susceptance(self) -> float:
        return 1.0 / (NOMINAL_OMEGA * self.inductance)


@dataclass(frozen=True)
class Network:
    """Physical network: node ids, branches and which nodes host inverters."""

    nodes: tuple
    lines: tuple
    inverter_nodes: tuple

    def line(self, name: str) -> Line:
        for ln in self.lines:
            if ln.name == name:
                return ln
        raise KeyError(f"unknown line {name!r}")

    def laplacian(self, open_lines=frozenset()) -> np.ndarray:
        index = {node: k for k, node in enumerate(self.nodes)}
        lap = np.zeros((len(self.nodes), len(self.nodes)))
        for ln in self.lines:
            if ln.name in open_lines:
                continue
            i, j, b = index[ln.a], index[ln.b], ln.susceptance
            lap[i, i] += b
            lap[j, j] += b
            lap[i, j] -= b
            lap[j, i] -= b
        return lap

    def reduce(self, open_lines=frozenset(), strategy: str = "kron"):
        """Kron-reduce onto inverter nodes.

        Returns ``(susceptance, distribution)``: the inverter-to-inverter
        susceptance magnitudes and the matrix mapping node loads (columns, in
        ``self.nodes`` order) onto inverters (rows). ``strategy="nearest"``
        assigns each passive node's load wholly to its electrically closest
        inverter instead of splitting it.
        """
        lap = self.laplacian(open_lines)
        index = {node: k for k, node in enumerate(self.nodes)}
        act = [index[n] for n in self.inverter_nodes]
        pas = [k for k in range(len(self.nodes)) if k not in act]
        dist = np.zeros((len(act), len(self.nodes)))
        dist[np.arange(len(act)), act] = 1.0
        if pas:
            l_bb = lap[np.ix_(pas, pas)]
            l_ab = lap[np.ix_(act, pas)]
            try:
                factors = -np.linalg.solve(l_bb.T, l_ab.T).T
            except np.linalg.LinAlgError as exc:
                raise ValueError("passive nodes are islanded from every inverter") from exc
            red = lap[np.ix_(act, act)] - l_ab @ np.linalg.solve(l_bb, lap[np.ix_(pas, act)])
            if strategy == "nearest":
                hard = np.zeros_like(factors)
                hard[np.argmax(factors, axis=0), np.arange(len(pas))] = 1.0
                factors = hard
            elif strategy != "kron":
                raise ValueError(f"unknown load mapping strategy {strategy!r}")
            dist[:, pas] = factors
        else:
            red = lap
        sus = -red.copy()
        np.fill_diagonal(sus, 0.0)
        sus = np.clip(0.5 * (sus + sus.T), 0.0, None)
        return sus, dist


@dataclass(frozen=True)
class NetworkTopology:
    n: int
    susceptance: np.ndarray
    line_inductances: Mapping = field(default_factory=dict)

    def __post_init__(self):
        b = np.asarray(self.susceptance, dtype=float)
        if b.shape != (self.n, self.n):
            raise ValueError("susceptance must be n x n")
        if not np.allclose(b, b.T) or np.any(b < 0) or np.any(np.diag(b) != 0):
            raise ValueError("susceptance must be symmetric, non-negative, zero-diagonal")


@dataclass(frozen=True)
class MicrogridModel:
    """Inverter parameters plus the (reduced) coupling seen by the voltage loop."""

    inverters: tuple
    topology: NetworkTopology
    load_nodes: tuple  # node ids, order of load_distribution columns
    load_distribution: np.ndarray
    network: Network | None = None
    open_lines: frozenset = frozenset()
    load_mapping: str = "kron"

    @property
    def n(self) -> int:
        return len(self.inverters)

    @property
    def susceptance(self) -> np.ndarray:
        return self.topology.susceptance

    def param(self, name: str) -> np.ndarray:
        # read-only per-inverter vector, cached since the model is immutable
        cache = self.__dict__.setdefault("_params", {})
        if name not in cache:
            arr = np.array([getattr(inv, name) for inv in self.inverters], dtype=float)
            arr.flags.writeable = False
            cache[name] = arr
        return cache[name]

    @classmethod
    def from_susceptance(cls, inverters: Sequence[InverterParams], susceptance) -> "MicrogridModel":
        n = len(inverters)
        topo = NetworkTopology(n, np.asarray(susceptance, dtype=float))
        return cls(tuple(inverters), topo, tuple(range(1, n + 1)), np.eye(n))

    @classmethod
    def from_network(cls, inverters, network: Network, open_lines=(), load_mapping="kron") -> "MicrogridModel":
        if len(inverters) != len(network.inverter_nodes):
            raise ValueError("one InverterParams per inverter node required")
        open_lines = frozenset(open_lines)
        sus, dist = network.reduce(open_lines, load_mapping)
        inductances = {ln.name: ln.inductance for ln in network.lines if ln.name not in open_lines}
        topo = NetworkTopology(len(inverters), sus, inductances)
        return cls(tuple(inverters), topo, tuple(network.nodes), dist, network, open_lines, load_mapping)

    def with_line(self, name: str, closed: bool) -> "MicrogridModel":
        if self.network is None:
            raise ValueError("line switching needs a physical network")
        self.network.line(name)
        open_lines = self.open_lines - {name} if closed else self.open_lines | {name}
        return MicrogridModel.from_network(self.inverters, self.network, open_lines, self.load_mapping)

    def inverter_loads(self, node_q: Mapping) -> np.ndarray:
        """Aggregate node reactive loads ``{node: var}`` onto inverters."""
        q = np.zeros(len(self.load_nodes))
        pos = {node: k for k, node in enumerate(self.load_nodes)}
        for node, value in node_q.items():
            q[pos[node]] += value
        return self.load_distribution @ q


@dataclass(frozen=True)
class LoadEvent:
    time: float
    node: int
    p_load: float
    q_load: float


@dataclass(frozen=True)
class LineEvent:
    time: float
    line: str
    closed: bool


@dataclass(frozen=True)
class LoadSchedule:
    """Step changes of node loads; a node keeps its last set value."""

    events: tuple = ()

    def __post_init__(self):
        times = [e.time for e in self.events]
        if times != sorted(times):
            raise ValueError("load events must be time-sorted")

    def active(self, t: float) -> dict:
        q = {}
        for ev in self.events:
            if ev.time <= t:
                q[ev.node] = ev.q_load
        return q

    @property
    def change_times(self) -> list:
        return sorted({e.time for e in self.events})


@dataclass(frozen=True)
class GridState:
    t: float
    v: np.ndarray
    q_mean: np.ndarray | None = None
    delta: np.ndarray | None = None


@dataclass
class ControlAction:
    """Secondary inputs plus optional per-agent solver telemetry."""

    u: np.ndarray
    solve_ms: np.ndarray | None = None
    iterations: np.ndarray | None = None
    kkt_residual: np.ndarray | None = None


def reactive_power_simplified(v, susceptance, i=None):
    """Decoupled reactive injection ``sum_j |B_ij| V_i (V_i - V_j)``.

    Returns all nodes when ``i`` is None.
    """
    v = np.asarray(v, dtype=float)
    b = np.asarray(getattr(susceptance, "susceptance", susceptance), dtype=float)
    q = v * (b.sum(axis=1) * v - b @ v)
    return q if i is None else float(q[i])


def power_flow_full(v, delta, y_mag, theta, i):
    """Active and reactive injection at node ``i`` from the full line-flow equations.

    ``y_mag`` and ``theta`` are n x n line admittance magnitudes and angles
    (diagonals ignored). Each line contributes
    ``|Y| (V_i^2 cos th - V_i V_j cos(th + d_j - d_i))`` to P and the same with
    ``sin`` to Q, so ``th = pi/2`` with equal angles gives exactly
    :func:`reactive_power_simplified`.
    """
    v = np.asarray(v, dtype=float)
    delta = np.asarray(delta, dtype=float)
    y_mag = np.asarray(y_mag, dtype=float)
    theta = np.asarray(theta, dtype=float)
    mask = np.ones(len(v), dtype=bool)
    mask[i] = False
    y, th = y_mag[i, mask], theta[i, mask]
    angle = th + delta[mask] - delta[i]
    p = np.sum(y * (v[i] ** 2 * np.cos(th) - v[i] * v[mask] * np.cos(angle)))
    q = np.sum(y * (v[i] ** 2 * np.sin(th) - v[i] * v[mask] * np.sin(angle)))
    return float(p), float(q)


def voltage_derivative(state, u, model: MicrogridModel, q_load) -> np.ndarray:
    """dV/dt of every inverter under droop control with secondary input ``u``.

    ``q_load`` is the per-inverter reactive load (var), already aggregated.
    """
    v = np.asarray(getattr(state, "v", state), dtype=float)
    q_line = reactive_power_simplified(v, model.susceptance)
    return (
        -v + model.param("v_ref") + np.asarray(u, dtype=float)
        - model.param("nq") * (np.asarray(q_load, dtype=float) + q_line - model.param("q_ref"))
    ) / model.param("tau")


def filtered_reactive_power(v, u, model: MicrogridModel) -> np.ndarray:
    # droop relation V = V_ref + u - nq (Q_m - Q_ref) solved for Q_m
    return model.param("q_ref") + (model.param("v_ref") + u - v) / model.param("nq")


def step(state: GridState, u, dt: float, model: MicrogridModel, q_load) -> GridState:
    """One forward-Euler step of the voltage dynamics."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    v = state.v + dt * voltage_derivative(state, u, model, q_load)
    t = state.t + dt
    if not np.all(np.isfinite(v)):
        raise SimulationError("non-finite voltage", t)
    return GridState(t, v, filtered_reactive_power(v, np.asarray(u, dtype=float), model), state.delta)


@dataclass
class ScenarioResult:
    t: np.ndarray
    v: np.ndarray
    u: np.ndarray
    q: np.ndarray
    solve_ms: np.ndarray
    iterations: np.ndarray | None = None
    kkt_residual: np.ndarray | None = None
    events: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.v.shape[1]

    def columns(self):
        n = self.n
        cols = ["t"]
        blocks = [self.t[:, None]]
        for name, data in (("v", self.v), ("u", self.u), ("q", self.q), ("solve_ms", self.solve_ms),
                           ("iterations", self.iterations), ("kkt", self.kkt_residual)):
            if data is None:
                continue
            cols += [f"{name}_{k + 1}" for k in range(n)]
            blocks.append(data)
        return cols, np.hstack(blocks)

    def to_csv(self, path=None) -> str:
        cols, data = self.columns()
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        for row in data:
            buf.write(",".join(repr(float(x)) for x in row) + "\n")
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


Controller = Callable[[float, GridState, MicrogridModel], object]


def simulate(
    model: MicrogridModel,
    loads: LoadSchedule,
    controller: Controller | None,
    t_end: float,
    dt: float = 1e-3,
    initial: GridState | None = None,
    control_period: float | None = None,
    line_events: Sequence[LineEvent] = (),
    record: bool = True,
) -> ScenarioResult:
    """Closed-loop simulation with zero-order-hold secondary control.

    ``controller(t, state, model)`` is called every ``control_period`` seconds
    and returns either an input vector or a :class:`ControlAction`.
    """
    n = model.n
    steps = int(round(t_end / dt))
    if steps <= 0:
        raise ValueError("t_end must exceed dt")
    if control_period is None:
        control_period = dt
    ratio = control_period / dt
    hold = int(round(ratio))
    if hold < 1 or abs(ratio - hold) > 1e-9:
        raise ValueError("dt must divide the controller sample time")

    state = initial if initial is not None else GridState(0.0, model.param("v_ref").copy())
    state = GridState(state.t, np.asarray(state.v, dtype=float).copy(), state.q_mean, state.delta)
    t0 = state.t
    line_events = sorted(line_events, key=lambda e: e.time)
    load_times = loads.change_times

    t_log = t0 + dt * np.arange(steps + 1)
    v_log = np.empty((steps + 1, n))
    u_log = np.zeros((steps + 1, n))
    q_log = np.empty((steps + 1, n))
    ms_log = np.zeros((steps + 1, n))
    it_log = np.zeros((steps + 1, n))
    kkt_log = np.zeros((steps + 1, n))
    events = []

    u = np.zeros(n)
    q_load = model.inverter_loads(loads.active(t0))
    li = 0
    for k in range(steps + 1):
        t = t_log[k]
        refresh = k == 0
        # events take effect at their time stamp (left-closed)
        while li < len(line_events) and line_events[li].time <= t + 0.5 * dt:
            ev = line_events[li]
            model = model.with_line(ev.line, ev.closed)
            events.append((t, f"line {ev.line} {'closed' if ev.closed else 'opened'}"))
            li += 1
            refresh = True
        if refresh or any(abs(t - lt) < 0.5 * dt for lt in load_times):
            q_load = model.inverter_loads(loads.active(t + 0.5 * dt))
        if controller is not None and k % hold == 0 and k < steps:
            action = controller(t, state, model)
            if isinstance(action, ControlAction):
                u = np.asarray(action.u, dtype=float)
                if action.solve_ms is not None:
                    ms_log[k] = action.solve_ms
                if action.iterations is not None:
                    it_log[k] = action.iterations
                if action.kkt_residual is not None:
                    kkt_log[k] = action.kkt_residual
            else:
                u = np.asarray(action, dtype=float)
            if u.shape != (n,) or not np.all(np.isfinite(u)):
                raise SimulationError("controller returned an invalid input", t)
        v_log[k] = state.v
        u_log[k] = u
        q_log[k] = q_load + reactive_power_simplified(state.v, model.susceptance)
        if k < steps:
            state = replace(step(state, u, dt, model, q_load), t=t_log[k + 1])
    return ScenarioResult(t_log, v_log, u_log, q_log, ms_log, it_log, kkt_log, events)


# Standard IEEE 14-bus branch order; B1..B20 follow it.
IEEE14_BRANCHES = (
    (1, 2), (1, 5), (2, 3), (2, 4), (2, 5), (3, 4), (4, 5), (4, 7), (4, 9), (5, 6),
    (6, 11), (6, 12), (6, 13), (7, 8), (7, 9), (9, 10), (9, 14), (10, 11), (12, 13), (13, 14),
)
TABLE2_INDUCTANCE_MH = (
    0.83, 3.13, 2.78, 2.47, 2.44, 2.40, 0.59, 2.90, 7.80, 3.54,
    2.79, 3.59, 1.82, 2.47, 1.54, 1.18, 3.79, 2.69, 2.80, 4.88,
)
IEEE14_INVERTER_NODES = (1, 2, 3, 6, 8)
IEEE14_LOAD_NODES = (2, 3, 4, 5, 6, 9, 10, 11, 12, 13, 14)


def ieee14_network(inductances_mh=TABLE2_INDUCTANCE_MH, inverter_nodes=IEEE14_INVERTER_NODES) -> Network:
    lines = tuple(
        Line(f"B{k + 1}", a, b, l_mh * 1e-3)
        for k, ((a, b), l_mh) in enumerate(zip(IEEE14_BRANCHES, inductances_mh))
    )
    return Network(tuple(range(1, 15)), lines, tuple(inverter_nodes))
