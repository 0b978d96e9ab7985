"""Undirected communication graphs, their Laplacians and switching schedules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .numerics import eigenvalues

__all__ = ["GraphError", "CommGraph", "SwitchSchedule", "from_edges", "is_connected", "active_graph",
           "L1_EDGES", "L2_EDGES"]

CONNECTIVITY_TOL = 1e-9

# communication topologies used in the experiments (1-based agent ids)
L1_EDGES = ((1, 2), (2, 3), (3, 4), (3, 5), (1, 4))
L2_EDGES = ((1, 2), (1, 3), (1, 4), (1, 5))


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class CommGraph:
    n: int
    adjacency: np.ndarray
    edges: tuple = ()

    @property
    def laplacian(self) -> np.ndarray:
        return np.diag(self.adjacency.sum(axis=1)) - self.adjacency

    def neighbors(self, i: int) -> np.ndarray:
        """0-based neighbor indices of 0-based agent ``i``."""
        return np.flatnonzero(self.adjacency[i])

    def __eq__(self, other):
        return isinstance(other, CommGraph) and self.n == other.n and np.array_equal(self.adjacency, other.adjacency)

    def __hash__(self):
        return hash((self.n, self.adjacency.tobytes()))


def from_edges(n: int, edges: Iterable[Sequence[int]]) -> CommGraph:
    """Build an unweighted graph from 1-based edge pairs."""
    adj = np.zeros((n, n))
    seen = set()
    canon = []
    for a, b in edges:
        if not (1 <= a <= n and 1 <= b <= n):
            raise GraphError(f"edge ({a}, {b}) references a node outside 1..{n}")
        if a == b:
            raise GraphError(f"self-loop on node {a}")
        key = (min(a, b), max(a, b))
        if key in seen:
            raise GraphError(f"duplicate edge {key}")
        seen.add(key)
        canon.append(key)
        adj[a - 1, b - 1] = adj[b - 1, a - 1] = 1.0
    return CommGraph(n, adj, tuple(sorted(canon)))


def is_connected(g: CommGraph) -> tuple[bool, float]:
    """Connectivity test by algebraic connectivity; returns ``(connected, lambda_2)``."""
    if g.n == 1:
        return True, 0.0
    lam = np.sort(eigenvalues(g.laplacian).values.real)
    lam2 = float(lam[1])
    return lam2 > CONNECTIVITY_TOL, lam2


@dataclass(frozen=True)
class SwitchSchedule:
    """Time-stamped graphs; each graph is active from its time stamp onward."""

    events: tuple

    def __post_init__(self):
        if not self.events:
            raise GraphError("schedule is empty")
        times = [t for t, _ in self.events]
        if times != sorted(times):
            raise GraphError("switch events must be time-sorted")
        for t, g in self.events:
            ok, lam2 = is_connected(g)
            if not ok:
                raise GraphError(f"graph active at t={t} is disconnected (lambda_2={lam2:.3g})")

    @classmethod
    def constant(cls, g: CommGraph) -> "SwitchSchedule":
        return cls(((0.0, g),))


def active_graph(schedule: SwitchSchedule, t: float) -> CommGraph:
    if t < schedule.events[0][0]:
        raise GraphError(f"no graph active before t={schedule.events[0][0]}")
    current = schedule.events[0][1]
    for when, g in schedule.events:
        if when <= t:
            current = g
        else:
            break
    return current
