"""Experiment pipelines: identification, closed-loop scenarios, the
Koopman/nonlinear timing comparison, the horizon sweep and CSV emission."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ScenarioConfig
from .control import (AgentController, DistributedKoopmanMPC, NonlinearAgent, NonlinearMPC, nonlinear_mpc_step,
                      solve_agent)
from .grid import GridState, LoadSchedule, MicrogridModel, ScenarioResult, simulate
from .koopman import LiftedPredictor, fit_edmd, generate_excitation, prediction_error

__all__ = [
    "IdentificationError",
    "IdentificationResult",
    "RunReport",
    "ComparisonReport",
    "SweepReport",
    "run_identification",
    "load_predictors",
    "predictors_for",
    "run_scenario",
    "run_comparison",
    "run_horizon_sweep",
    "settling_time",
    "linear_limit_gap",
    "emit_plot_data",
]

log = logging.getLogger(__name__)

SETTLE_FRACTION = 0.01
BAND = (0.95, 1.05)

_PREDICTOR_CACHE: dict = {}  # identification results per model/settings/seed


class IdentificationError(ArithmeticError):
    """A fitted predictor failed the configured quality ceiling."""


# ---------------------------------------------------------------- identification


@dataclass
class IdentificationResult:
    predictors: list
    errors: list  # ErrorCurve per inverter
    rms_residuals: np.ndarray
    seed: int

    @property
    def max_error(self) -> np.ndarray:
        return np.array([e.max.max() for e in self.errors])

    def eigenvalue_rows(self):
        rows = []
        for k, p in enumerate(self.predictors):
            for j, lam in enumerate(p.eigenvalues().values):
                rows.append((k + 1, j + 1, lam.real, lam.imag, abs(lam)))
        return rows

    def save(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for k, p in enumerate(self.predictors):
            path = out / f"predictor_{k + 1}.json"
            p.save(path)
            written.append(path)
        written.append(_write_csv(out / "eigenvalues.csv", ["inverter", "index", "real", "imag", "modulus"],
                                  self.eigenvalue_rows()))
        written.append(_write_error_curve(out / "error_curve.csv", self.errors, self.predictors[0].sample_dt))
        report = {
            "seed": self.seed,
            "max_relative_error": self.max_error.tolist(),
            "rms_residual": self.rms_residuals.tolist(),
            "spectral_radius": [p.spectral_radius for p in self.predictors],
        }
        path = out / "identification.json"
        path.write_text(json.dumps(report, indent=2) + "\n")
        written.append(path)
        return written


def _identification_model(cfg: ScenarioConfig) -> MicrogridModel:
    m = cfg.model
    if m.network is None:
        return m
    # fit on the nominal network, with every breaker closed
    return MicrogridModel.from_network(m.inverters, m.network, (), m.load_mapping)


def run_identification(cfg: ScenarioConfig, seed: int | None = None) -> IdentificationResult:
    """Excite each inverter, fit its lifted predictor and score held-out rollouts.

    Raises
    ------
    IdentificationError
        A fit's RMS one-step residual exceeds ``identification.residual_ceiling``.
    """
    s = cfg.identification
    seed = cfg.seed if seed is None else seed
    model = _identification_model(cfg)
    graph = cfg.schedule.events[0][1]
    horizon = int(round(s.horizon / cfg.dt))
    v_ref = float(model.param("v_ref")[0])
    preds, curves, rms = [], [], []
    for i in range(model.n):
        data = generate_excitation(model, i, graph, s.window, s.dwell, s.amplitude, seed=seed + 1000 * i,
                                   n_trajectories=s.n_trajectories, dt=cfg.dt, aggregate=s.aggregate,
                                   max_node_load=s.max_node_load, randomize=s.randomize)
        fit, val = data.split(s.split)
        p = fit_edmd(fit)
        r = p.report.residual / np.sqrt(p.report.n_samples * p.a.shape[0])
        if not r <= s.residual_ceiling:
            raise IdentificationError(f"inverter {i + 1}: RMS fit residual {r:.3g} above ceiling "
                                      f"{s.residual_ceiling:.3g}")
        preds.append(p)
        curves.append(prediction_error(p, val, horizon, v_ref))
        rms.append(r)
        log.info("inverter %d: rms residual %.3g, max 0.5 s error %.3g%%", i + 1, r, 100 * curves[-1].max.max())
    _PREDICTOR_CACHE[_cache_key(cfg, seed)] = preds
    return IdentificationResult(preds, curves, np.array(rms), seed)


def load_predictors(path, n: int) -> list[LiftedPredictor]:
    d = Path(path)
    files = [d / f"predictor_{k + 1}.json" for k in range(n)]
    missing = [str(f) for f in files if not f.is_file()]
    if missing:
        raise ConfigError(f"missing predictor files: {', '.join(missing)}")
    return [LiftedPredictor.load(f) for f in files]


def predictors_for(cfg: ScenarioConfig, seed: int | None = None) -> list[LiftedPredictor]:
    """Predictors named by the config, or identified on demand (cached per process)."""
    if cfg.predictors is not None:
        return load_predictors(cfg.predictors, cfg.model.n)
    seed = cfg.seed if seed is None else seed
    key = _cache_key(cfg, seed)
    if key not in _PREDICTOR_CACHE:
        run_identification(cfg, seed)
    return _PREDICTOR_CACHE[key]


def _cache_key(cfg: ScenarioConfig, seed: int) -> str:
    m = _identification_model(cfg)
    return json.dumps([repr(m.inverters), m.susceptance.tolist(), m.load_distribution.tolist(),
                       repr(cfg.identification), repr(cfg.schedule.events[0][1].edges), cfg.dt, seed])


# ---------------------------------------------------------------- scenarios


def settling_time(t, v, v_ref, after: float, fraction: float = SETTLE_FRACTION) -> np.ndarray:
    """Per-inverter time from ``after`` until ``|V - V_ref|`` stays inside ``fraction * V_ref``.

    ``inf`` marks an inverter still outside the band at the end of the run.
    """
    t = np.asarray(t)
    v = np.atleast_2d(np.asarray(v))
    mask = t >= after - 1e-12
    tt, vv = t[mask], v[mask]
    out = np.empty(vv.shape[1])
    for k in range(vv.shape[1]):
        outside = np.flatnonzero(np.abs(vv[:, k] - v_ref) >= fraction * v_ref)
        if outside.size == 0:
            out[k] = 0.0
        elif outside[-1] == tt.size - 1:
            out[k] = np.inf
        else:
            out[k] = tt[outside[-1] + 1] - after
    return out


@dataclass
class RunReport:
    name: str
    result: ScenarioResult
    v_ref: float
    last_disturbance: float
    settling_time: np.ndarray
    band_violation: float  # volts outside [0.95, 1.05] V_ref, worst case
    solve_ms_mean: np.ndarray
    solve_ms_max: np.ndarray
    identification: IdentificationResult | None = None
    extra: dict = field(default_factory=dict)

    def post_event_deviation(self, start: float, end: float | None = None) -> float:
        """Largest ``|V - V_ref|`` over ``(start, end]`` in volts."""
        t = self.result.t
        mask = (t > start + 1e-12) & (t <= (t[-1] if end is None else end) + 1e-12)
        return float(np.max(np.abs(self.result.v[mask] - self.v_ref)))

    def summary(self, timing: bool = True) -> dict:
        d = {
            "name": self.name,
            "v_ref": self.v_ref,
            "last_disturbance": self.last_disturbance,
            "settling_time": [None if not np.isfinite(x) else float(x) for x in self.settling_time],
            "band_violation": self.band_violation,
            "final_voltage": self.result.v[-1].tolist(),
            "extra": self.extra,
        }
        if timing:
            d["solve_ms_mean"] = self.solve_ms_mean.tolist()
            d["solve_ms_max"] = self.solve_ms_max.tolist()
        return d

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.summary(timing), indent=2, sort_keys=True) + "\n"


def _initial_state(cfg: ScenarioConfig) -> GridState:
    v_ref = cfg.model.param("v_ref")
    v0 = v_ref.copy() if cfg.initial_voltage is None else np.full(cfg.model.n, cfg.initial_voltage)
    return GridState(0.0, v0)


def _controller(cfg: ScenarioConfig, weights=None, predictors=None):
    w = cfg.weights if weights is None else weights
    if cfg.controller == "droop-only":
        return None, None
    if cfg.controller == "nonlinear-mpc":
        return NonlinearMPC([NonlinearAgent(i, w) for i in range(cfg.model.n)], cfg.loads), w.sample_time
    preds = predictors_for(cfg) if predictors is None else predictors
    v_ref = cfg.model.param("v_ref")
    agents = [AgentController(i, preds[i], w, float(v_ref[i]), cfg.identification.aggregate)
              for i in range(cfg.model.n)]
    return DistributedKoopmanMPC(agents, cfg.schedule), w.sample_time


def _disturbance_times(cfg: ScenarioConfig) -> list:
    times = [e.time for e in cfg.loads.events if e.time > 0]
    times += [e.time for e in cfg.line_events if e.time > 0]
    times += [t for t, _ in cfg.schedule.events if t > 0]
    return sorted(times)


def _report(cfg: ScenarioConfig, res: ScenarioResult, name=None) -> RunReport:
    v_ref = cfg.v_ref
    times = _disturbance_times(cfg)
    last = times[-1] if times else 0.0
    lo, hi = BAND[0] * v_ref, BAND[1] * v_ref
    viol = float(np.max(np.maximum(res.v - hi, lo - res.v), initial=0.0))
    ms = res.solve_ms
    active = ms > 0
    mean = np.array([ms[active[:, k], k].mean() if active[:, k].any() else 0.0 for k in range(res.n)])
    return RunReport(
        name or cfg.name, res, v_ref, last, settling_time(res.t, res.v, v_ref, last), max(viol, 0.0),
        mean, ms.max(axis=0),
    )


def run_scenario(cfg: ScenarioConfig, predictors=None, weights=None) -> RunReport:
    """Closed-loop run of one scenario with its load, line and graph events."""
    ctl, period = _controller(cfg, weights, predictors)
    res = simulate(cfg.model, cfg.loads, ctl, cfg.duration, cfg.dt, _initial_state(cfg),
                   control_period=period, line_events=cfg.line_events)
    rep = _report(cfg, res)
    if cfg.line_events:
        t_sw = cfg.line_events[0].time
        k_before = int(np.searchsorted(res.t, t_sw - 1e-9)) - 1
        q_before, q_after = res.q[k_before], res.q[-1]
        rep.extra["q_before_switch"] = q_before.tolist()
        rep.extra["q_after_switch"] = q_after.tolist()
        rep.extra["q_relative_change"] = (np.abs(q_after - q_before) / np.abs(q_before)).tolist()
    return rep


# ---------------------------------------------------------------- comparison


@dataclass
class ComparisonReport:
    koopman: RunReport
    nonlinear: RunReport
    cycles: int
    koopman_cycle_ms: float  # mean wall time of one control round (all agents)
    nonlinear_cycle_ms: float
    koopman_steady_v: np.ndarray
    nonlinear_steady_v: np.ndarray
    linear_limit_gap: float | None = None

    @property
    def ratio(self) -> float:
        return self.nonlinear_cycle_ms / self.koopman_cycle_ms

    def table(self) -> str:
        lines = [
            "controller,mean_cycle_ms,steady_v_min,steady_v_max",
            f"koopman,{self.koopman_cycle_ms:.4f},{self.koopman_steady_v.min():.4f},{self.koopman_steady_v.max():.4f}",
            f"nonlinear,{self.nonlinear_cycle_ms:.4f},{self.nonlinear_steady_v.min():.4f},"
            f"{self.nonlinear_steady_v.max():.4f}",
        ]
        return "\n".join(lines) + "\n"


def _cycle_ms(res: ScenarioResult, period_steps: int) -> np.ndarray:
    rows = res.solve_ms[:-1:period_steps]
    return rows.sum(axis=1)


def _steady(res: ScenarioResult, tail: float = 0.1) -> np.ndarray:
    k = max(1, int(tail * res.t.size))
    return res.v[-k:].mean(axis=0)


def linear_limit_gap(cfg: ScenarioConfig, duration: float = 0.5) -> float:
    """Largest input difference between the two controllers on an uncoupled plant.

    Inverter 1 is driven by each controller in turn while the others rest at
    ``V_ref`` without input. Without line coupling and with ``q_ref = 0`` the
    plant is linear and first order and the neighbour aggregate stays at
    ``V_ref``, so the lifted predictor is exact and both controllers solve
    the same QP.
    """
    inv = replace(cfg.model.inverters[0], q_ref=0.0)
    n = cfg.model.n
    plant = MicrogridModel.from_susceptance([inv] * n, np.zeros((n, n)))
    w = cfg.weights
    graph = cfg.schedule.events[0][1]
    data = generate_excitation(plant, 0, graph, window=2.0, dwell=0.1, seed=cfg.seed, n_trajectories=2,
                               dt=cfg.dt, max_node_load=0.0)
    koop = AgentController(0, fit_edmd(data), w, inv.v_ref)
    nonlin = NonlinearAgent(0, w)
    no_load = np.zeros(n)

    def koopman_ctl(t, state, model):
        u = np.zeros(n)
        u[0] = solve_agent(koop, graph, state.v)[0]
        return u

    def nonlinear_ctl(t, state, model):
        u = np.zeros(n)
        u[0] = nonlinear_mpc_step(nonlin, state, model, no_load)[0]
        return u

    v0 = np.full(n, inv.v_ref)
    v0[0] = inv.v_ref - 1.0
    runs = [simulate(plant, LoadSchedule(), ctl, duration, cfg.dt, GridState(0.0, v0), control_period=w.sample_time)
            for ctl in (koopman_ctl, nonlinear_ctl)]
    return float(np.max(np.abs(runs[0].u - runs[1].u)))


def run_comparison(cfg: ScenarioConfig, predictors=None, linear_check: bool = True) -> ComparisonReport:
    """Run both controllers on the same plant and compare per-cycle solve time."""
    w = cfg.weights
    steps = int(round(w.sample_time / cfg.dt))
    cycles = int(round(cfg.duration / w.sample_time))
    if cycles < cfg.min_cycles:
        raise ConfigError(f"comparison needs at least {cfg.min_cycles} cycles, duration gives {cycles}")
    preds = predictors_for(cfg) if predictors is None else predictors
    rk = run_scenario(replace(cfg, controller="koopman-dmpc"), preds)
    rn = run_scenario(replace(cfg, controller="nonlinear-mpc"), preds)
    gap = linear_limit_gap(cfg) if linear_check else None
    return ComparisonReport(
        rk, rn, cycles,
        float(_cycle_ms(rk.result, steps).mean()), float(_cycle_ms(rn.result, steps).mean()),
        _steady(rk.result), _steady(rn.result), gap,
    )


# ---------------------------------------------------------------- horizon sweep


@dataclass
class SweepReport:
    horizons: tuple
    iae: np.ndarray  # integral of |V_1 - V_ref| dt, volt-seconds
    traces: dict  # horizon -> inverter-1 voltage trace
    t: np.ndarray

    def table(self) -> str:
        return "horizon,iae_v1\n" + "".join(f"{h},{e:.6f}\n" for h, e in zip(self.horizons, self.iae))


def run_horizon_sweep(cfg: ScenarioConfig, predictors=None, horizons=None) -> SweepReport:
    """Closed loop for each prediction horizon; tracking error at inverter 1."""
    horizons = tuple(cfg.horizons if horizons is None else horizons)
    preds = predictors_for(cfg) if predictors is None else predictors
    iae, traces, t = [], {}, None
    for h in horizons:
        rep = run_scenario(replace(cfg, controller="koopman-dmpc"), preds, replace(cfg.weights, horizon=h))
        err = np.abs(rep.result.v[:, 0] - rep.v_ref)
        iae.append(float(np.sum(err[:-1]) * cfg.dt))
        traces[h] = rep.result.v[:, 0].copy()
        t = rep.result.t
    return SweepReport(horizons, np.array(iae), traces, t)


# ---------------------------------------------------------------- output files


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(x)) if not isinstance(x, (int, np.integer)) else str(x) for x in row) + "\n")
    return path


def _write_error_curve(path: Path, errors, dt: float) -> Path:
    horizon = errors[0].horizon
    header = ["step", "t"] + [f"max_{k + 1}" for k in range(len(errors))] + [f"mean_{k + 1}" for k in range(len(errors))]
    rows = [
        [j + 1, (j + 1) * dt] + [e.max[j] for e in errors] + [e.mean[j] for e in errors]
        for j in range(horizon)
    ]
    return _write_csv(path, header, rows)


def emit_plot_data(report, out_dir) -> list[Path]:
    """Write figure-ready CSV series for a run, identification, comparison or sweep.

    Raises
    ------
    OSError
        The output directory cannot be created or written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if isinstance(report, IdentificationResult):
        return report.save(out)
    if isinstance(report, ComparisonReport):
        for tag, rep in (("koopman", report.koopman), ("nonlinear", report.nonlinear)):
            written += emit_plot_data(rep, out / tag)
        path = out / "comparison.csv"
        path.write_text(report.table())
        return written + [path]
    if isinstance(report, SweepReport):
        header = ["t"] + [f"v1_hp{h}" for h in report.horizons]
        rows = np.column_stack([report.t] + [report.traces[h] for h in report.horizons])
        written.append(_write_csv(out / "horizon_voltages.csv", header, rows))
        path = out / "horizon_sweep.csv"
        path.write_text(report.table())
        return written + [path]
    res = report.result
    n = res.n
    idx = range(1, n + 1)
    written.append(_write_csv(out / "voltages.csv", ["t"] + [f"v_{k}" for k in idx], np.column_stack([res.t, res.v])))
    written.append(_write_csv(out / "mpc.csv", ["t"] + [f"u_{k}" for k in idx], np.column_stack([res.t, res.u])))
    written.append(_write_csv(out / "reactive.csv", ["t"] + [f"q_{k}" for k in idx], np.column_stack([res.t, res.q])))
    path = out / "trace.csv"
    res.to_csv(path)
    written.append(path)
    path = out / "report.json"
    path.write_text(report.to_json())
    written.append(path)
    if report.identification is not None:
        written += report.identification.save(out)
    return written

