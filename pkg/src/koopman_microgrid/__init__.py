"""Koopman-based distributed voltage control for inverter microgrids.

Modules
-------
numerics    small dense linear algebra, Riccati and Lyapunov solvers
grid        droop-controlled voltage dynamics and the IEEE 14-bus network
graph       communication graphs and switching schedules
koopman     pairwise lift, excitation data and EDMD with inputs
qp          active-set solver for the controller QPs
control     distributed Koopman MPC, nonlinear MPC and stability certificate
config      YAML scenario files
harness     experiment pipelines and CSV output
"""

from .control import AgentController, MpcWeights, SCENARIO_WEIGHTS, TIMING_WEIGHTS, stability_certificate
from .graph import CommGraph, SwitchSchedule, from_edges, is_connected
from .grid import GridState, InverterParams, LoadEvent, LoadSchedule, MicrogridModel, ieee14_network, simulate
from .koopman import EDMDc, LiftedPredictor, PairwiseLift, SnapshotSet, fit_edmd, lift
from .numerics import least_squares, pseudo_inverse, solve_care

__version__ = "0.1.0"

__all__ = [
    "AgentController",
    "CommGraph",
    "EDMDc",
    "GridState",
    "InverterParams",
    "LiftedPredictor",
    "LoadEvent",
    "LoadSchedule",
    "MicrogridModel",
    "MpcWeights",
    "PairwiseLift",
    "SnapshotSet",
    "SwitchSchedule",
    "SCENARIO_WEIGHTS",
    "TIMING_WEIGHTS",
    "fit_edmd",
    "from_edges",
    "ieee14_network",
    "is_connected",
    "least_squares",
    "lift",
    "pseudo_inverse",
    "simulate",
    "solve_care",
    "stability_certificate",
]
