"""Koopman lifted linear predictors identified by EDMD with inputs.

Each inverter gets its own predictor over the pairwise dictionary
``[V_i, V_j, V_i - V_j, (V_i - V_j)^2]`` where ``V_j`` aggregates the
communication neighbours of inverter ``i``.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .grid import ControlAction, GridState, LoadEvent, LoadSchedule, MicrogridModel, simulate
from .graph import CommGraph
from .numerics import DEFAULT_RCOND, EigenSet, eigenvalues, least_squares, pseudo_inverse, read_matrix_csv

__all__ = [
    "BASIS_TAG",
    "LIFT_DIM",
    "lift",
    "lift_jacobian",
    "PairwiseLift",
    "neighbor_aggregate",
    "SnapshotSet",
    "generate_excitation",
    "EDMDc",
    "LiftedPredictor",
    "FitReport",
    "fit_edmd",
    "fit_edmd_gram",
    "predict",
    "ErrorCurve",
    "prediction_error",
    "reference_predictor",
]

BASIS_TAG = "pairwise-quadratic-v1"
LIFT_DIM = 4


def lift(v_i, v_j) -> np.ndarray:
    """Observables ``[v_i, v_j, v_i - v_j, (v_i - v_j)**2]``; broadcasts over arrays."""
    v_i = np.asarray(v_i, dtype=float)
    v_j = np.asarray(v_j, dtype=float)
    d = v_i - v_j
    return np.stack([v_i, v_j, d, d * d], axis=-1)


def lift_jacobian(v_i: float, v_j: float) -> np.ndarray:
    """Derivative of the lift with respect to ``v_i``."""
    return np.array([1.0, 0.0, 1.0, 2.0 * (v_i - v_j)])


class PairwiseLift(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping ``(v_i, v_j)`` columns to lifted observables."""

    def fit(self, X, y=None):
        X = check_array(X)
        if X.shape[1] != 2:
            raise ValueError(f"expected 2 columns (v_i, v_j), got {X.shape[1]}")
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X)
        if X.shape[1] != 2:
            raise ValueError(f"expected 2 columns (v_i, v_j), got {X.shape[1]}")
        return lift(X[:, 0], X[:, 1])

    def get_feature_names_out(self, input_features=None):
        return np.array(["v_i", "v_j", "v_i-v_j", "(v_i-v_j)^2"], dtype=object)


def neighbor_aggregate(v, i: int, graph: CommGraph, strategy: str = "mean", susceptance=None) -> float:
    """Scalar ``V_j`` seen by 0-based agent ``i``.

    ``mean`` averages the communication neighbours; ``susceptance`` weights
    them by line susceptance; ``strongest`` takes the neighbour with the
    largest susceptance to ``i``.
    """
    v = np.asarray(v, dtype=float)
    nbrs = graph.neighbors(i)
    if nbrs.size == 0:
        raise ValueError(f"agent {i + 1} has no neighbours in the communication graph")
    if strategy == "mean":
        return float(v[nbrs].mean())
    if susceptance is None:
        raise ValueError(f"strategy {strategy!r} needs the susceptance matrix")
    w = np.asarray(susceptance, dtype=float)[i, nbrs]
    if strategy == "susceptance":
        if w.sum() <= 0:
            return float(v[nbrs].mean())
        return float(w @ v[nbrs] / w.sum())
    if strategy == "strongest":
        return float(v[nbrs[np.argmax(w)]])
    raise ValueError(f"unknown aggregation strategy {strategy!r}")


@dataclass(frozen=True)
class SnapshotSet:
    """Aligned snapshot pairs for one agent.

    ``raw_x``/``raw_y`` hold physical ``(v_i, v_j)`` pairs; ``x``/``y`` are
    their lifts. ``episode`` labels the source trajectory of every row so
    that rollouts never cross trajectory boundaries.
    """

    raw_x: np.ndarray
    raw_y: np.ndarray
    u: np.ndarray
    sample_dt: float
    episode: np.ndarray | None = None

    def __post_init__(self):
        m = self.raw_x.shape[0]
        if self.raw_y.shape[0] != m or self.u.shape[0] != m:
            raise ValueError("snapshot arrays must have equal row counts")
        if self.episode is None:
            object.__setattr__(self, "episode", np.zeros(m, dtype=int))

    @property
    def x(self) -> np.ndarray:
        return lift(self.raw_x[:, 0], self.raw_x[:, 1])

    @property
    def y(self) -> np.ndarray:
        return lift(self.raw_y[:, 0], self.raw_y[:, 1])

    def __len__(self):
        return self.raw_x.shape[0]

    def subset(self, mask) -> "SnapshotSet":
        return SnapshotSet(self.raw_x[mask], self.raw_y[mask], self.u[mask], self.sample_dt, self.episode[mask])

    def split(self, fraction: float = 0.8) -> tuple["SnapshotSet", "SnapshotSet"]:
        """Chronological split inside every episode: first ``fraction`` fits, rest validates."""
        fit = np.zeros(len(self), dtype=bool)
        for ep in np.unique(self.episode):
            idx = np.flatnonzero(self.episode == ep)
            fit[idx[: int(round(fraction * idx.size))]] = True
        return self.subset(fit), self.subset(~fit)

    @classmethod
    def concatenate(cls, parts) -> "SnapshotSet":
        parts = list(parts)
        offset, eps = 0, []
        for p in parts:
            _, local = np.unique(p.episode, return_inverse=True)
            eps.append(local.ravel() + offset)
            offset += int(local.max()) + 1 if len(p) else 0
        return cls(
            np.vstack([p.raw_x for p in parts]),
            np.vstack([p.raw_y for p in parts]),
            np.concatenate([p.u for p in parts]).reshape(-1, 1),
            parts[0].sample_dt,
            np.concatenate(eps),
        )

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write("v_i,v_j,u,v_i_next,v_j_next\n")
        for (xi, xj), uu, (yi, yj) in zip(self.raw_x, self.u[:, 0], self.raw_y):
            buf.write(",".join(repr(float(x)) for x in (xi, xj, uu, yi, yj)) + "\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source, sample_dt: float) -> "SnapshotSet":
        text = Path(source).read_text() if isinstance(source, Path) or "\n" not in str(source) else str(source)
        data = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0:2].copy(), data[:, 3:5].copy(), data[:, 2:3].copy(), sample_dt)


def generate_excitation(
    model: MicrogridModel,
    agent: int,
    graph: CommGraph,
    window: float = 10.0,
    dwell: float = 1.7,
    amplitude: float = 1.0,
    seed: int = 0,
    n_trajectories: int = 10,
    dt: float = 1e-3,
    aggregate: str = "mean",
    max_node_load: float = 1000.0,
    load_nodes=None,
    randomize: str = "agent",
) -> SnapshotSet:
    """Simulate the plant under piecewise-constant random input on ``agent``.

    Every trajectory starts from voltages drawn uniformly on ``[0, V_ref]``
    and holds a random constant reactive load in ``[0, max_node_load]`` at
    each load node. The input of ``agent`` is redrawn on
    ``[-amplitude, amplitude]`` every ``dwell`` seconds; other agents get zero.
    """
    rng = np.random.default_rng(seed)
    v_ref = model.param("v_ref")
    samples = int(round(window / dt))
    if load_nodes is None:
        load_nodes = model.load_nodes if model.network is not None else ()
    parts = []
    for traj in range(n_trajectories):
        draw = rng.uniform(0.0, 1.0, model.n) * v_ref
        if randomize == "all":
            v0 = draw
        elif randomize == "agent":
            v0 = v_ref.copy()
            v0[agent] = draw[agent]
        else:
            raise ValueError(f"unknown initial-condition mode {randomize!r}")
        q_nodes = rng.uniform(0.0, max_node_load, len(load_nodes))
        loads = LoadSchedule(tuple(LoadEvent(0.0, nd, 0.0, float(q)) for nd, q in zip(load_nodes, q_nodes)))
        levels = rng.uniform(-amplitude, amplitude, int(np.ceil(window / dwell)) + 1)

        def excite(t, state, mdl, levels=levels):
            u = np.zeros(model.n)
            u[agent] = levels[int(np.floor(t / dwell + 1e-9))]
            return ControlAction(u)

        hold = dwell if abs(dwell / dt - round(dwell / dt)) < 1e-9 else dt
        res = simulate(model, loads, excite, (samples - 1) * dt, dt, GridState(0.0, v0), control_period=hold)
        v = res.v[:samples]
        vj = np.array([neighbor_aggregate(row, agent, graph, aggregate, model.susceptance) for row in v])
        raw = np.column_stack([v[:, agent], vj])
        parts.append(SnapshotSet(raw[:-1], raw[1:], res.u[: samples - 1, agent : agent + 1], dt,
                                 np.full(samples - 1, traj)))
    return SnapshotSet.concatenate(parts)


@dataclass(frozen=True)
class FitReport:
    residual: float  # Frobenius norm of Psi(Y) - A Psi(X) - B U
    rank: int
    rank_deficient: bool
    projection_residual: float
    n_samples: int


class EDMDc(RegressorMixin, BaseEstimator):
    """EDMD with inputs over the pairwise dictionary.

    ``fit(X, y)`` takes ``X`` with columns ``(v_i, v_j, u)`` and ``y`` with the
    successor ``(v_i, v_j)``; ``predict(X)`` returns the one-step-ahead
    ``v_i``.

    Attributes
    ----------
    state_matrix_ : ndarray of shape (4, 4)
    input_matrix_ : ndarray of shape (4, 1)
    projection_matrix_ : ndarray of shape (1, 4)
    report_ : FitReport
    """

    def __init__(self, rcond: float = DEFAULT_RCOND):
        self.rcond = rcond

    def fit(self, X, y):
        X = check_array(X, ensure_min_samples=LIFT_DIM + 1)
        y = check_array(y)
        if X.shape[1] != 3 or y.shape != (X.shape[0], 2):
            raise ValueError("X must be (M, 3) [v_i, v_j, u] and y (M, 2) [v_i, v_j] successors")
        psi_x = lift(X[:, 0], X[:, 1])
        psi_y = lift(y[:, 0], y[:, 1])
        z = np.hstack([psi_x, X[:, 2:3]])
        coef = least_squares(z, psi_y, self.rcond)  # (5, 4): psi_y ~ z @ coef
        self.state_matrix_ = coef[:LIFT_DIM].T.copy()
        self.input_matrix_ = coef[LIFT_DIM:].T.copy()
        self.projection_matrix_ = least_squares(psi_x, X[:, 0:1], self.rcond).T
        s = np.linalg.svd(z, compute_uv=False)
        rank = int(np.sum(s > self.rcond * s[0]))
        self.report_ = FitReport(
            residual=float(np.linalg.norm(psi_y - z @ coef)),
            rank=rank,
            rank_deficient=rank < z.shape[1],
            projection_residual=float(np.linalg.norm(X[:, 0:1] - psi_x @ self.projection_matrix_.T)),
            n_samples=X.shape[0],
        )
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        check_is_fitted(self, "state_matrix_")
        X = check_array(X)
        psi = lift(X[:, 0], X[:, 1])
        nxt = psi @ self.state_matrix_.T + X[:, 2:3] @ self.input_matrix_.T
        return nxt @ self.projection_matrix_[0]

    def to_predictor(self, sample_dt: float) -> "LiftedPredictor":
        check_is_fitted(self, "state_matrix_")
        return LiftedPredictor(self.state_matrix_, self.input_matrix_, self.projection_matrix_, sample_dt)


@dataclass(frozen=True, eq=False)
class LiftedPredictor:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    sample_dt: float
    basis: str = BASIS_TAG
    report: FitReport | None = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("a", "b", "c"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"predictor matrix {name} is not finite")
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float).reshape(LIFT_DIM, LIFT_DIM))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(LIFT_DIM, 1))
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float).reshape(1, LIFT_DIM))

    def __eq__(self, other):
        if not isinstance(other, LiftedPredictor):
            return NotImplemented
        return (self.basis == other.basis and self.sample_dt == other.sample_dt
                and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in "abc"))

    __hash__ = None

    def eigenvalues(self) -> EigenSet:
        return eigenvalues(self.a)

    @property
    def spectral_radius(self) -> float:
        return self.eigenvalues().spectral_radius

    def resample(self, steps: int) -> "LiftedPredictor":
        """Predictor over ``steps`` base samples with the input held constant."""
        a_k = np.eye(LIFT_DIM)
        b_k = np.zeros((LIFT_DIM, 1))
        for _ in range(steps):
            b_k = self.a @ b_k + self.b
            a_k = self.a @ a_k
        return LiftedPredictor(a_k, b_k, self.c, self.sample_dt * steps, self.basis)

    def to_dict(self) -> dict:
        return {
            "basis": self.basis,
            "sample_dt": self.sample_dt,
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "c": self.c.tolist(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, d: dict) -> "LiftedPredictor":
        if d.get("basis", BASIS_TAG) != BASIS_TAG:
            raise ValueError(f"unsupported basis {d['basis']!r}")
        return cls(np.array(d["a"]), np.array(d["b"]), np.array(d["c"]), float(d["sample_dt"]), d.get("basis", BASIS_TAG))

    @classmethod
    def load(cls, path) -> "LiftedPredictor":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_edmd(data: SnapshotSet, rcond: float = DEFAULT_RCOND) -> LiftedPredictor:
    """Fit ``(A, B, C)`` by least squares on the stacked ``[Psi(X), U]`` regressors."""
    est = EDMDc(rcond=rcond).fit(np.hstack([data.raw_x, data.u]), data.raw_y)
    return LiftedPredictor(est.state_matrix_, est.input_matrix_, est.projection_matrix_, data.sample_dt,
                           report=est.report_)


def fit_edmd_gram(data: SnapshotSet, rcond: float = DEFAULT_RCOND) -> tuple[np.ndarray, np.ndarray]:
    """Same regression through the Gram form ``K = G^+ A`` (cross-check on small sets)."""
    z = np.hstack([data.x, data.u])
    m = z.shape[0]
    gram = z.T @ z / m
    cross = z.T @ data.y / m
    k = pseudo_inverse(gram, rcond) @ cross
    return k[:LIFT_DIM].T, k[LIFT_DIM:].T


def predict(p: LiftedPredictor, psi0, u_seq) -> np.ndarray:
    """Roll ``psi <- A psi + B u`` and return ``C psi`` after every input."""
    psi = np.asarray(psi0, dtype=float).reshape(LIFT_DIM)
    out = np.empty(len(u_seq))
    b = p.b[:, 0]
    c = p.c[0]
    for k, u in enumerate(np.asarray(u_seq, dtype=float).ravel()):
        psi = p.a @ psi + b * u
        out[k] = c @ psi
    return out


@dataclass(frozen=True)
class ErrorCurve:
    """Relative error per prediction step (1..horizon) over all rollout windows."""

    max: np.ndarray
    mean: np.ndarray
    windows: int

    @property
    def horizon(self) -> int:
        return self.max.size


def prediction_error(p: LiftedPredictor, validation: SnapshotSet, horizon: int, v_ref: float) -> ErrorCurve:
    """Open-loop rollouts restarted at consecutive windows of each validation episode."""
    if horizon < 1:
        raise ValueError("horizon must be positive")
    errs = []
    for ep in np.unique(validation.episode):
        idx = np.flatnonzero(validation.episode == ep)
        for start in range(0, idx.size - horizon + 1, horizon):
            rows = idx[start : start + horizon]
            psi0 = lift(*validation.raw_x[rows[0]])
            v_hat = predict(p, psi0, validation.u[rows, 0])
            errs.append(np.abs(v_hat - validation.raw_y[rows, 0]) / v_ref)
    if not errs:
        raise ValueError("horizon exceeds every validation episode")
    errs = np.array(errs)
    return ErrorCurve(errs.max(axis=0), errs.mean(axis=0), errs.shape[0])


def reference_predictor() -> LiftedPredictor:
    """Published inverter-1 predictor shipped as CSV fixtures (1 ms sampling)."""
    data = resources.files("koopman_microgrid") / "data"
    a, b, c = (read_matrix_csv(io.StringIO((data / f"{name}1.csv").read_text())) for name in "ABC")
    return LiftedPredictor(a, b, c, 1e-3)
