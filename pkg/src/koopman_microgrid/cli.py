"""Command-line entry point.

Usage::

    koopman-microgrid identify [--config FILE] [--out DIR]
    koopman-microgrid run load-step [--out DIR]
    koopman-microgrid compare
    koopman-microgrid sweep
    koopman-microgrid validate-config FILE

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .config import ConfigError, builtin_config, builtin_scenarios, load_config
from .grid import SimulationError
from .numerics import NumericsError, RiccatiError
from .qp import QpError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("koopman_microgrid")


def _config(args, default: str):
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = builtin_config(default)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


def _out(args, default: str) -> Path:
    return Path(args.out) if args.out else Path("out") / default


def cmd_identify(args) -> int:
    cfg = _config(args, "identification")
    res = harness.run_identification(cfg)
    files = res.save(_out(args, "identification"))
    for k, (err, p) in enumerate(zip(res.max_error, res.predictors)):
        _say(args, f"inverter {k + 1}: max {cfg.identification.horizon:g} s rollout error {100 * err:.4f}% "
                   f"spectral radius {p.spectral_radius:.6f}")
    _say(args, f"wrote {len(files)} files to {files[0].parent}")
    return EXIT_OK


def cmd_run(args) -> int:
    if args.config:
        cfg = load_config(args.config)
    elif args.scenario:
        cfg = builtin_config(args.scenario)
    else:
        raise ConfigError("run needs a scenario name or --config")
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if cfg.kind != "scenario":
        raise ConfigError(f"{cfg.name} is a {cfg.kind} config; use the matching verb")
    rep = harness.run_scenario(cfg)
    files = harness.emit_plot_data(rep, _out(args, cfg.name))
    st = ", ".join("never" if not np.isfinite(x) else f"{x:.2f}" for x in rep.settling_time)
    _say(args, f"{cfg.name}: settling after t={rep.last_disturbance:g} s [{st}] s, "
               f"band violation {rep.band_violation:.4f} V, final V {np.round(rep.result.v[-1], 3).tolist()}")
    _say(args, f"wrote {len(files)} files to {files[0].parent}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args, "comparison")
    rep = harness.run_comparison(cfg)
    files = harness.emit_plot_data(rep, _out(args, "comparison"))
    _say(args, rep.table().rstrip())
    _say(args, f"ratio nonlinear/koopman {rep.ratio:.3f} over {rep.cycles} cycles; "
               f"linear-limit input gap {rep.linear_limit_gap:.2e}")
    _say(args, f"wrote {len(files)} files")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args, "horizon-sweep")
    rep = harness.run_horizon_sweep(cfg)
    harness.emit_plot_data(rep, _out(args, "horizon-sweep"))
    _say(args, rep.table().rstrip())
    return EXIT_OK


def cmd_validate(args) -> int:
    path = args.file or args.config
    if path is None:
        raise ConfigError("validate-config needs a file")
    cfg = load_config(path)
    _say(args, f"{path}: ok ({cfg.kind} '{cfg.name}', {cfg.model.n} inverters, "
               f"{len(cfg.loads.events)} load events, {len(cfg.schedule.events)} graph(s))")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario YAML file (defaults to the built-in one)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--quiet", action="store_true", help="suppress console output")

    p = argparse.ArgumentParser(prog="koopman-microgrid", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("identify", parents=[common], help="fit the per-inverter predictors").set_defaults(func=cmd_identify)
    run = sub.add_parser("run", parents=[common], help="closed-loop scenario")
    run.add_argument("scenario", nargs="?", help=f"built-in scenario ({', '.join(builtin_scenarios())})")
    run.set_defaults(func=cmd_run)
    sub.add_parser("compare", parents=[common], help="Koopman vs nonlinear MPC timing").set_defaults(func=cmd_compare)
    sub.add_parser("sweep", parents=[common], help="prediction-horizon sweep").set_defaults(func=cmd_sweep)
    val = sub.add_parser("validate-config", parents=[common], help="check a scenario file")
    val.add_argument("file", nargs="?")
    val.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, QpError, RiccatiError, NumericsError, harness.IdentificationError,
            ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
