"""Scenario configuration files (YAML) and their validation.

A config describes one run: the plant, load and line events, the
communication graph schedule, the controller and its weights. Unknown keys
are rejected so that typos fail loudly instead of silently using defaults.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import yaml

from .control import MpcWeights
from .graph import GraphError, L1_EDGES, SwitchSchedule, from_edges
from .grid import (
    IEEE14_INVERTER_NODES,
    InverterParams,
    Line,
    LineEvent,
    LoadEvent,
    LoadSchedule,
    MicrogridModel,
    Network,
    ieee14_network,
)

__all__ = ["ConfigError", "ScenarioConfig", "IdentificationSettings", "load_config", "parse_config",
           "builtin_scenarios", "builtin_config"]

CONTROLLERS = ("koopman-dmpc", "nonlinear-mpc", "droop-only")
KINDS = ("scenario", "identification", "comparison", "sweep")


class ConfigError(ValueError):
    """Malformed or inconsistent scenario configuration."""


@dataclass(frozen=True)
class IdentificationSettings:
    window: float = 10.0
    dwell: float = 1.7
    amplitude: float = 1.0
    n_trajectories: int = 10
    split: float = 0.8
    horizon: float = 0.5  # validation rollout length, seconds
    aggregate: str = "mean"
    randomize: str = "agent"
    max_node_load: float = 1000.0
    residual_ceiling: float = 1.0  # RMS one-step residual per lifted coordinate

    def __post_init__(self):
        if self.window <= 0 or self.dwell <= 0 or self.amplitude < 0 or self.n_trajectories < 1:
            raise ConfigError("identification needs window > 0, dwell > 0, amplitude >= 0, n_trajectories >= 1")
        if not 0 < self.split < 1:
            raise ConfigError("identification split must lie in (0, 1)")


@dataclass
class ScenarioConfig:
    name: str
    kind: str = "scenario"
    seed: int = 0
    duration: float = 10.0
    dt: float = 1e-3
    initial_voltage: float | None = None
    model: MicrogridModel | None = None
    loads: LoadSchedule = field(default_factory=LoadSchedule)
    line_events: tuple = ()
    schedule: SwitchSchedule | None = None
    controller: str = "koopman-dmpc"
    weights: MpcWeights = field(default_factory=MpcWeights)
    identification: IdentificationSettings = field(default_factory=IdentificationSettings)
    predictors: str | None = None
    horizons: tuple = (2, 5, 10, 15, 20)
    min_cycles: int = 200
    source: dict = field(default_factory=dict, repr=False)

    @property
    def v_ref(self) -> float:
        return float(self.model.param("v_ref")[0])


def _take(block: dict, allowed, where: str) -> dict:
    if block is None:
        return {}
    if not isinstance(block, dict):
        raise ConfigError(f"{where}: expected a mapping")
    extra = set(block) - set(allowed)
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    return dict(block)


def _dataclass_from(cls, block, where):
    names = [f.name for f in fields(cls)]
    try:
        return cls(**_take(block, names, where))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _network(block) -> Network:
    block = _take(block, ("preset", "inverter_nodes", "lines", "inductance_scale"), "network")
    preset = block.get("preset", "ieee14")
    inverter_nodes = tuple(block.get("inverter_nodes", IEEE14_INVERTER_NODES))
    if "lines" in block:
        lines = []
        for k, ln in enumerate(block["lines"]):
            ln = _take(ln, ("name", "from", "to", "inductance"), f"network.lines[{k}]")
            try:
                lines.append(Line(str(ln.get("name", f"B{k + 1}")), int(ln["from"]), int(ln["to"]),
                                  float(ln["inductance"])))
            except KeyError as exc:
                raise ConfigError(f"network.lines[{k}]: missing {exc}") from exc
        nodes = tuple(sorted({n for ln in lines for n in (ln.a, ln.b)} | set(inverter_nodes)))
        net = Network(nodes, tuple(lines), inverter_nodes)
    elif preset == "ieee14":
        net = ieee14_network(inverter_nodes=inverter_nodes)
    else:
        raise ConfigError(f"network: unknown preset {preset!r}")
    scale = float(block.get("inductance_scale", 1.0))
    if scale != 1.0:
        net = Network(net.nodes, tuple(Line(l.name, l.a, l.b, l.inductance * scale) for l in net.lines),
                      net.inverter_nodes)
    return net


def _inverters(block, n) -> tuple:
    if block is None:
        return (InverterParams(),) * n
    if isinstance(block, dict):
        block = _take(block, ("default", "overrides"), "inverters")
        base = _dataclass_from(InverterParams, block.get("default"), "inverters.default")
        out = [base] * n
        for k, ov in (block.get("overrides") or {}).items():
            idx = int(k) - 1
            if not 0 <= idx < n:
                raise ConfigError(f"inverters.overrides: inverter {k} outside 1..{n}")
            merged = {f.name: getattr(base, f.name) for f in fields(InverterParams)}
            merged.update(_take(ov, merged, f"inverters.overrides.{k}"))
            out[idx] = _dataclass_from(InverterParams, merged, f"inverters.overrides.{k}")
        return tuple(out)
    if isinstance(block, list):
        if len(block) != n:
            raise ConfigError(f"inverters: {len(block)} blocks for {n} inverter nodes")
        return tuple(_dataclass_from(InverterParams, b, f"inverters[{k}]") for k, b in enumerate(block))
    raise ConfigError("inverters: expected a mapping or a list")


def _loads(block, nodes) -> LoadSchedule:
    events = []
    for k, ev in enumerate(block or ()):
        ev = _take(ev, ("time", "node", "nodes", "p", "q"), f"loads[{k}]")
        targets = ev.get("nodes", [ev["node"]] if "node" in ev else None)
        if targets is None or "time" not in ev:
            raise ConfigError(f"loads[{k}]: needs time and node(s)")
        q = float(ev.get("q", 0.0))
        if q < 0:
            raise ConfigError(f"loads[{k}]: negative reactive load")
        for nd in targets:
            if nd not in nodes:
                raise ConfigError(f"loads[{k}]: node {nd} is not in the network")
            events.append(LoadEvent(float(ev["time"]), int(nd), float(ev.get("p", 0.0)), q))
    events.sort(key=lambda e: (e.time, e.node))
    return LoadSchedule(tuple(events))


def _line_events(block, net: Network) -> tuple:
    out = []
    for k, ev in enumerate(block or ()):
        ev = _take(ev, ("time", "line", "lines", "closed"), f"line_events[{k}]")
        names = ev.get("lines", [ev.get("line")])
        for name in names:
            try:
                net.line(str(name))
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"line_events[{k}]: {exc}") from exc
            out.append(LineEvent(float(ev["time"]), str(name), bool(ev.get("closed", True))))
    return tuple(sorted(out, key=lambda e: e.time))


def _schedule(block, n) -> SwitchSchedule:
    block = _take(block, ("edges", "switches"), "graph")
    events = [(0.0, block.get("edges", [list(e) for e in L1_EDGES]))]
    for k, sw in enumerate(block.get("switches") or ()):
        sw = _take(sw, ("time", "edges"), f"graph.switches[{k}]")
        events.append((float(sw["time"]), sw["edges"]))
    try:
        return SwitchSchedule(tuple((t, from_edges(n, [tuple(e) for e in edges])) for t, edges in events))
    except GraphError as exc:
        raise ConfigError(f"graph: {exc}") from exc


TOP_KEYS = ("name", "kind", "seed", "duration", "dt", "initial_voltage", "network", "open_lines", "load_mapping",
            "inverters", "loads", "line_events", "graph", "controller", "identification", "predictors", "sweep",
            "comparison")


def parse_config(data: dict, base_dir: Path | None = None) -> ScenarioConfig:
    """Validate a parsed YAML mapping and build the run objects."""
    data = _take(data, TOP_KEYS, "config")
    if "name" not in data:
        raise ConfigError("config: missing name")
    kind = data.get("kind", "scenario")
    if kind not in KINDS:
        raise ConfigError(f"config: kind must be one of {KINDS}")
    net = _network(data.get("network"))
    inverters = _inverters(data.get("inverters"), len(net.inverter_nodes))
    open_lines = tuple(data.get("open_lines") or ())
    for name in open_lines:
        try:
            net.line(name)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"open_lines: {exc}") from exc
    mapping = data.get("load_mapping", "kron")
    try:
        model = MicrogridModel.from_network(inverters, net, open_lines, mapping)
    except (ValueError, ArithmeticError) as exc:
        raise ConfigError(f"network: {exc}") from exc

    ctl = _take(data.get("controller"), ("type", "weights", "aggregate"), "controller")
    ctype = ctl.get("type", "koopman-dmpc")
    if ctype not in CONTROLLERS:
        raise ConfigError(f"controller.type must be one of {CONTROLLERS}")
    weights = _dataclass_from(MpcWeights, ctl.get("weights"), "controller.weights")
    ident = _dataclass_from(IdentificationSettings, data.get("identification"), "identification")
    if ctl.get("aggregate") and ctl["aggregate"] != ident.aggregate:
        raise ConfigError("controller.aggregate must match identification.aggregate")

    sweep = _take(data.get("sweep"), ("horizons",), "sweep")
    comp = _take(data.get("comparison"), ("min_cycles",), "comparison")
    duration = float(data.get("duration", 10.0))
    dt = float(data.get("dt", 1e-3))
    if duration <= 0 or dt <= 0:
        raise ConfigError("duration and dt must be positive")
    ratio = weights.sample_time / dt
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ConfigError("dt must divide controller.weights.sample_time")
    horizons = tuple(int(h) for h in sweep.get("horizons", (2, 5, 10, 15, 20)))
    if any(h < 1 for h in horizons):
        raise ConfigError("sweep.horizons must be >= 1")
    predictors = data.get("predictors")
    if predictors is not None and base_dir is not None and not Path(predictors).is_absolute():
        predictors = str(base_dir / predictors)
    v0 = data.get("initial_voltage")

    return ScenarioConfig(
        name=str(data["name"]),
        kind=kind,
        seed=int(data.get("seed", 0)),
        duration=duration,
        dt=dt,
        initial_voltage=None if v0 is None else float(v0),
        model=model,
        loads=_loads(data.get("loads"), set(net.nodes)),
        line_events=_line_events(data.get("line_events"), net),
        schedule=_schedule(data.get("graph"), model.n),
        controller=ctype,
        weights=weights,
        identification=ident,
        predictors=predictors,
        horizons=horizons,
        min_cycles=int(comp.get("min_cycles", 200)),
        source=copy.deepcopy(data),
    )


def load_config(path) -> ScenarioConfig:
    """Read and validate a YAML scenario file."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return parse_config(data, path.parent)


def builtin_scenarios() -> list[str]:
    files = resources.files("koopman_microgrid") / "data" / "scenarios"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".yaml"))


def builtin_config(name: str) -> ScenarioConfig:
    """One of the shipped scenarios (``load-step``, ``line-switch``, ...)."""
    ref = resources.files("koopman_microgrid") / "data" / "scenarios" / f"{name}.yaml"
    if not ref.is_file():
        raise ConfigError(f"no built-in scenario {name!r}; available: {', '.join(builtin_scenarios())}")
    return parse_config(yaml.safe_load(ref.read_text()))
