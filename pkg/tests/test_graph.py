import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from koopman_microgrid.graph import (
    GraphError,
    L1_EDGES,
    L2_EDGES,
    SwitchSchedule,
    active_graph,
    from_edges,
    is_connected,
)

L1_PRINTED = np.array([
    [2, -1, 0, -1, 0],
    [-1, 2, -1, 0, 0],
    [0, -1, 3, -1, -1],
    [-1, 0, -1, 2, 0],
    [0, 0, -1, 0, 1],
], dtype=float)
L2_PRINTED = np.array([
    [4, -1, -1, -1, -1],
    [-1, 1, 0, 0, 0],
    [-1, 0, 1, 0, 0],
    [-1, 0, 0, 1, 0],
    [-1, 0, 0, 0, 1],
], dtype=float)


def test_l1_matches_published_matrix():
    assert np.array_equal(from_edges(5, L1_EDGES).laplacian, L1_PRINTED)


def test_l2_matches_published_matrix():
    assert np.array_equal(from_edges(5, L2_EDGES).laplacian, L2_PRINTED)


def test_single_edge():
    assert np.array_equal(from_edges(2, [(1, 2)]).laplacian, [[1, -1], [-1, 1]])


@pytest.mark.parametrize("edges", [[(1, 1)], [(1, 2), (2, 1)], [(1, 6)], [(0, 2)]])
def test_invalid_edges_rejected(edges):
    with pytest.raises(GraphError):
        from_edges(5, edges)


def test_neighbors_are_zero_based():
    g = from_edges(5, L1_EDGES)
    assert g.neighbors(0).tolist() == [1, 3]
    assert g.neighbors(2).tolist() == [1, 3, 4]


def test_l1_connected():
    ok, lam2 = is_connected(from_edges(5, L1_EDGES))
    assert ok and lam2 > 0


def test_disjoint_edges_disconnected():
    ok, lam2 = is_connected(from_edges(4, [(1, 2), (3, 4)]))
    assert not ok
    assert abs(lam2) < 1e-9


def test_complete_graph_algebraic_connectivity():
    edges = [(a, b) for a in range(1, 6) for b in range(a + 1, 6)]
    ok, lam2 = is_connected(from_edges(5, edges))
    assert ok and lam2 == pytest.approx(5.0, abs=1e-9)


def test_schedule_switch_is_left_closed():
    sched = SwitchSchedule(((0.0, from_edges(5, L1_EDGES)), (5.0, from_edges(5, L2_EDGES))))
    assert active_graph(sched, 4.9) == from_edges(5, L1_EDGES)
    assert active_graph(sched, 5.0) == from_edges(5, L2_EDGES)


def test_single_entry_schedule():
    g = from_edges(5, L2_EDGES)
    sched = SwitchSchedule.constant(g)
    assert all(active_graph(sched, t) == g for t in (0.0, 3.0, 1e6))


def test_query_before_first_event():
    sched = SwitchSchedule(((1.0, from_edges(2, [(1, 2)])),))
    with pytest.raises(GraphError):
        active_graph(sched, 0.5)


def test_schedule_rejects_disconnected_graph():
    with pytest.raises(GraphError):
        SwitchSchedule(((0.0, from_edges(4, [(1, 2), (3, 4)])),))


def test_schedule_rejects_unsorted_events():
    g = from_edges(2, [(1, 2)])
    with pytest.raises(GraphError):
        SwitchSchedule(((5.0, g), (1.0, g)))


@st.composite
def edge_lists(draw):
    n = draw(st.integers(2, 8))
    pairs = [(a, b) for a in range(1, n + 1) for b in range(a + 1, n + 1)]
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True, min_size=1))
    return n, chosen


@settings(max_examples=100, deadline=None)
@given(edge_lists(), st.randoms(use_true_random=False))
def test_laplacian_invariants(case, random):
    n, edges = case
    g = from_edges(n, edges)
    lap = g.laplacian
    assert np.array_equal(lap @ np.ones(n), np.zeros(n))
    assert np.array_equal(lap, lap.T)
    off = lap[~np.eye(n, dtype=bool)]
    assert set(np.unique(off)) <= {0.0, -1.0}
    assert np.linalg.eigvalsh(lap).min() >= -1e-10
    shuffled = [(b, a) if random.random() < 0.5 else (a, b) for a, b in edges]
    random.shuffle(shuffled)
    assert np.array_equal(from_edges(n, shuffled).laplacian, lap)
