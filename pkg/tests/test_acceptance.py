"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see only the verdict lines,
or as part of the full suite. Runtimes are measured inside each test.
"""
import io
import time
from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg

from koopman_microgrid import harness
from koopman_microgrid.config import builtin_config
from koopman_microgrid.control import SCENARIO_WEIGHTS, predictor_certificate
from koopman_microgrid.graph import L1_EDGES, from_edges
from koopman_microgrid.koopman import SnapshotSet, fit_edmd, lift, reference_predictor
from koopman_microgrid.numerics import pseudo_inverse, read_matrix_csv, write_matrix_csv
from koopman_microgrid.qp import InfeasibleQP, QpProblem, solve_qp

V_REF = 169.7
L1 = from_edges(5, L1_EDGES)


@pytest.fixture
def verdict(capsys):
    def report(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})")
        assert ok, detail
    return report


def test_criterion_1_reference_fixture(verdict):
    start = time.perf_counter()
    p = reference_predictor()
    c = read_matrix_csv(io.StringIO(write_matrix_csv(p.c)))
    exact = np.array_equal(c, np.array([[0.6667, 0.3333, 0.3333, 0.0]]))
    mags = np.abs(p.eigenvalues().values)
    near_zero = mags.min() < 0.05
    near_one = np.min(np.abs(p.eigenvalues().values - 1.0)) < 1e-2
    elapsed = time.perf_counter() - start
    verdict(1, "reference fixture regression", exact and near_zero and near_one and elapsed < 1.0,
            f"C bit-exact={exact}, min|lambda|={mags.min():.4f}, "
            f"min|lambda-1|={np.min(np.abs(p.eigenvalues().values - 1.0)):.2e}, {elapsed:.3f} s")


def test_criterion_2_exact_recovery(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    lam, beta = 0.95, 0.5
    m = np.array([[0.3 + lam, 0.7 - lam], [0.3, 0.7]])
    # lifted system acting as zero on [1, -1, -1, 0], which no lift ever reaches
    manifold = np.array([[1, 0, 1, 0], [0, 1, -1, 0], [0, 0, 0, 1.0]]).T
    a_raw = np.zeros((4, 4))
    a_raw[:2, :2] = m
    a_raw[2, 2] = lam
    a_raw[3, 3] = lam**2
    a0 = a_raw @ manifold @ np.linalg.pinv(manifold)
    b0 = np.array([[beta], [beta], [0.0], [0.0]])
    v = np.array([171.0, 168.0])
    xs, ys, us = [], [], []
    for _ in range(500):
        u = rng.uniform(-1, 1)
        nxt = m @ v + beta * u
        assert np.allclose(lift(*nxt), a0 @ lift(*v) + b0[:, 0] * u, atol=1e-9)
        xs.append(v)
        ys.append(nxt)
        us.append(u)
        v = nxt
    p = fit_edmd(SnapshotSet(np.array(xs), np.array(ys), np.array(us)[:, None], 1e-3))
    err = max(np.max(np.abs(p.a - a0)), np.max(np.abs(p.b - b0)))
    elapsed = time.perf_counter() - start
    verdict(2, "EDMD exact recovery", err < 1e-6 and elapsed < 5.0, f"max error {err:.2e}, {elapsed:.2f} s")


def test_criterion_3_prediction_fidelity(verdict):
    start = time.perf_counter()
    res = harness.run_identification(builtin_config("identification"))
    elapsed = time.perf_counter() - start
    ok = len(res.predictors) == 5 and np.all(res.max_error < 0.01) and elapsed < 120
    verdict(3, "0.5 s prediction fidelity", ok,
            f"max error per inverter {np.round(100 * res.max_error, 4).tolist()} % of V_ref, {elapsed:.1f} s")


def test_criterion_4_load_step(predictors, verdict):
    start = time.perf_counter()
    rep = harness.run_scenario(builtin_config("load-step"), predictors)
    elapsed = time.perf_counter() - start
    v = rep.result.v
    in_band = bool(np.all(v >= 0.95 * V_REF) and np.all(v <= 1.05 * V_REF))
    settle = float(np.max(rep.settling_time))
    verdict(4, "load-step regulation", in_band and settle < 7.0 and elapsed < 120,
            f"V in [{v.min():.3f}, {v.max():.3f}], settling {settle:.3f} s, {elapsed:.1f} s")


def test_criterion_5_topology_robustness(predictors, verdict):
    line = harness.run_scenario(builtin_config("line-switch"), predictors)
    graph = harness.run_scenario(builtin_config("graph-switch"), predictors)
    dev_line = line.post_event_deviation(5.0, 10.0) / V_REF
    dev_graph = graph.post_event_deviation(5.0, 10.0) / V_REF
    change = np.array(line.extra["q_relative_change"])
    ok = dev_line < 0.01 and dev_graph < 0.01 and np.all(change > 0)
    verdict(5, "topology robustness", ok,
            f"deviation line {100 * dev_line:.3f} %, graph {100 * dev_graph:.3f} %, "
            f"Q change {np.round(100 * change, 2).tolist()} %")


def test_criterion_6_solver_speed(predictors, verdict):
    start = time.perf_counter()
    rep = harness.run_comparison(builtin_config("comparison"), predictors)
    elapsed = time.perf_counter() - start
    ok = rep.cycles >= 200 and rep.ratio > 1.5 and elapsed < 300
    verdict(6, "solver-speed ordering", ok,
            f"{rep.cycles} cycles, Koopman {rep.koopman_cycle_ms:.3f} ms, nonlinear {rep.nonlinear_cycle_ms:.3f} ms, "
            f"ratio {rep.ratio:.2f}, {elapsed:.1f} s")


def test_criterion_7_stability_certificate(predictors, verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_res, worst_eig, decreasing = 0.0, np.inf, True
    for k, p in enumerate(predictors):
        cert, a_c, b_c, l_c = predictor_certificate(p, SCENARIO_WEIGHTS, L1.laplacian, k)
        worst_res = max(worst_res, cert.riccati_residual)
        worst_eig = min(worst_eig, cert.min_eig_p)
        step = scipy.linalg.expm(cert.closed_loop(a_c, b_c, l_c) * 0.05)
        for _ in range(100):
            x = rng.standard_normal(a_c.shape[0])
            values = []
            for _ in range(60):
                values.append(x @ cert.p @ x)
                x = step @ x
            decreasing &= bool(np.all(np.diff(values) < 0))
    elapsed = time.perf_counter() - start
    ok = worst_eig > 0 and worst_res < 1e-6 and decreasing and elapsed < 30
    verdict(7, "stability certificate", ok,
            f"min eig P {worst_eig:.3e}, residual {worst_res:.2e}, strictly decreasing={decreasing}, {elapsed:.2f} s")


def test_criterion_8_property_suites(verdict):
    rng = np.random.default_rng(99)
    failures = []
    for _ in range(200):
        m = rng.standard_normal((rng.integers(1, 7), rng.integers(1, 7)))
        p = pseudo_inverse(m)
        tol = 1e-9 * max(1.0, np.linalg.norm(p) ** 2)
        if not (np.allclose(m @ p @ m, m, atol=tol) and np.allclose(p @ m @ p, p, atol=tol)
                and np.allclose((m @ p).T, m @ p, atol=tol) and np.allclose((p @ m).T, p @ m, atol=tol)):
            failures.append("penrose")
    for _ in range(200):
        n, k = rng.integers(1, 7), rng.integers(1, 11)
        h = rng.standard_normal((n, n))
        qp = QpProblem(h @ h.T + 0.5 * np.eye(n), 10 * rng.standard_normal(n), rng.standard_normal((k, n)),
                       rng.uniform(-0.5, 1.0, k))
        try:
            sol = solve_qp(qp)
        except InfeasibleQP:
            continue
        if sol.kkt_residual >= 1e-8:
            failures.append("kkt")
    for _ in range(200):
        n = int(rng.integers(2, 9))
        edges = [(i, j) for i in range(1, n + 1) for j in range(i + 1, n + 1) if rng.random() < 0.4]
        lap = from_edges(n, edges).laplacian
        if np.any(lap @ np.ones(n) != 0) or np.linalg.eigvalsh(lap).min() < -1e-12:
            failures.append("laplacian")
    for _ in range(200):
        vi, vj = rng.uniform(100, 250, 2)
        psi = lift(vi, vj)
        if psi[2] != psi[0] - psi[1] or psi[3] != psi[2] * psi[2]:
            failures.append("dictionary")
    cfg = replace(builtin_config("graph-switch"), duration=5.5, controller="droop-only")
    if harness.run_scenario(cfg).to_json(timing=False) != harness.run_scenario(cfg).to_json(timing=False):
        failures.append("determinism")
    small = {"window": 2.0, "n_trajectories": 2, "horizon": 0.1}
    id_cfg = replace(builtin_config("identification"), identification=replace(
        builtin_config("identification").identification, **small))
    first = harness.run_identification(id_cfg).predictors
    second = harness.run_identification(id_cfg).predictors
    if [p.dumps() for p in first] != [p.dumps() for p in second]:
        failures.append("identification determinism")
    verdict(8, "property suites", not failures, "all invariants hold" if not failures else f"failed: {failures}")


def test_criterion_9_horizon_sweep(predictors, verdict):
    start = time.perf_counter()
    rep = harness.run_horizon_sweep(builtin_config("horizon-sweep"), predictors)
    elapsed = time.perf_counter() - start
    iae = dict(zip(rep.horizons, rep.iae))
    ok = rep.horizons == (2, 5, 10, 15, 20) and np.all(np.isfinite(rep.iae)) and iae[10] <= iae[2]
    verdict(9, "horizon sweep", ok,
            "IAE " + ", ".join(f"H{h}={e:.3f}" for h, e in iae.items()) + f" V s, {elapsed:.1f} s")
