"""Reachability tests: vertex-propagation oracles, terminal sets, conformance checks."""

import itertools

import numpy as np
import pytest

from reachsynth.errors import DimensionError, NonConvergenceError
from reachsynth.reach import (
    ReachSequence,
    check_conformance,
    deviation_reach,
    deviation_reach_sequence,
    reach_horizon,
    reach_step,
    reach_to_csv,
    terminal_reach,
)
from reachsynth.sets import Interval, Zonotope, interval_hull, znorm
from reachsynth.systems import LtiSystem, TestCase, TestSuite, nominal_output, simulate


def box(half_widths, center=None):
    half = np.atleast_1d(np.asarray(half_widths, dtype=float))
    c = np.zeros(half.size) if center is None else np.asarray(center, dtype=float)
    return Zonotope(c, np.diag(half))


def scalar_decay(a=0.5, w_half=1.0, dt=0.1):
    return LtiSystem([[a]], E=[[1.0]], W=box([w_half]), dt=dt)


def random_discrete_system(rng, n, m, q, n_w, n_v, dt=0.05):
    a = rng.normal(size=(n, n))
    a *= 0.85 / max(np.max(np.abs(np.linalg.eigvals(a))), 1e-9)
    return LtiSystem(
        a,
        B=rng.normal(size=(n, m)),
        C=rng.normal(size=(q, n)),
        D=rng.normal(size=(q, m)),
        E=rng.normal(size=(n, n_w)),
        F=rng.normal(size=(q, n_v)),
        W=Zonotope(rng.normal(size=n_w) * 0.1, rng.normal(size=(n_w, n_w)) * 0.2),
        V=Zonotope(rng.normal(size=n_v) * 0.1, rng.normal(size=(n_v, n_v)) * 0.2),
        dt=dt,
    )


# ---------------------------------------------------------------------------
# step / horizon recursion


def test_reach_requires_discrete_time():
    sys = LtiSystem([[0.0]], E=[[1.0]], W=box([1.0]))
    with pytest.raises(DimensionError):
        reach_horizon(sys, [0.0], np.zeros((3, 0)))


def test_reach_step_scalar_hand_check():
    # x+ = 0.5 x + w, start {2}: X1 = 0.5*2 + [-1,1] = [0,2]
    sys = scalar_decay()
    x1, r1 = reach_step(sys, Zonotope([2.0]), np.zeros(0))
    hull = interval_hull(x1)
    assert np.allclose([hull.lower[0], hull.upper[0]], [0.0, 2.0])
    assert np.allclose(interval_hull(r1).radius, 1.0)


def test_reach_horizon_point_start_against_vertex_propagation():
    # the hull bounds are linear in the disturbance draws, so exhaustive
    # propagation of vertex sequences gives the exact hull for small k
    rng = np.random.default_rng(7)
    for trial in range(5):
        sys = random_discrete_system(rng, n=2, m=1, q=2, n_w=1, n_v=1)
        k_end = 4
        x0 = rng.normal(size=2)
        u = rng.normal(size=(k_end + 1, 1))
        seq = reach_horizon(sys, x0, u)
        w_verts = [sys.W.center + s * sys.W.generators_effective[:, 0] for s in (-1, 1)]
        v_verts = [sys.V.center + s * sys.V.generators_effective[:, 0] for s in (-1, 1)]
        for k in range(k_end + 1):
            pts = []
            for ws in itertools.product(w_verts, repeat=k):
                x = np.asarray(x0, dtype=float)
                for i in range(k):
                    x = sys.A @ x + sys.B @ u[i] + sys.E @ ws[i]
                base = sys.C @ x + sys.D @ u[k]
                for v in v_verts:
                    pts.append(base + sys.F @ v)
            pts = np.asarray(pts)
            hull = interval_hull(seq.outputs[k])
            assert np.allclose(hull.lower, pts.min(axis=0), atol=1e-10)
            assert np.allclose(hull.upper, pts.max(axis=0), atol=1e-10)


def test_reach_horizon_zonotope_start_contains_samples():
    rng = np.random.default_rng(11)
    sys = random_discrete_system(rng, n=3, m=2, q=2, n_w=2, n_v=1)
    x0 = Zonotope(rng.normal(size=3), rng.normal(size=(3, 4)) * 0.3)
    u = rng.normal(size=(8, 2))
    seq = reach_horizon(sys, x0, u)
    for x in x0.sample(rng, 30, vertex_frac=0.3):
        _, ys = simulate(sys, x, u, sys.W.sample(rng, 8), sys.V.sample(rng, 8))
        for k in (0, 3, 7):
            assert seq.outputs[k].contains_point(ys[k], tol=1e-8)


def test_reach_horizon_input_width_mismatch():
    sys = scalar_decay()
    with pytest.raises(DimensionError):
        reach_horizon(sys, [0.0], np.zeros((3, 2)))


# ---------------------------------------------------------------------------
# deviation reach


def test_deviation_reach_step_zero_is_measurement_set():
    rng = np.random.default_rng(3)
    sys = random_discrete_system(rng, n=2, m=1, q=2, n_w=1, n_v=2)
    r0 = deviation_reach(sys, 0)
    assert np.allclose(r0.center, sys.F @ sys.V.center)
    assert np.allclose(
        np.sort(np.abs(r0.generators_effective).sum(axis=1)),
        np.sort(np.abs(sys.F @ sys.V.generators_effective).sum(axis=1)),
    )


def test_deviation_matches_reach_minus_nominal():
    # from a point start, generator content of R[k] is exactly the deviation
    # set; hulls must agree to machine precision after removing y*[k]
    rng = np.random.default_rng(19)
    sys = random_discrete_system(rng, n=3, m=1, q=2, n_w=2, n_v=1)
    x0 = rng.normal(size=3)
    u = rng.normal(size=(7, 1))
    seq = reach_horizon(sys, x0, u)
    ystar = nominal_output(sys, x0, u)
    devs = deviation_reach_sequence(sys, 6)
    for k in range(7):
        h_r = interval_hull(seq.outputs[k])
        h_d = interval_hull(devs[k])
        assert np.allclose(h_r.lower - ystar[k], h_d.lower, atol=1e-12)
        assert np.allclose(h_r.upper - ystar[k], h_d.upper, atol=1e-12)


def test_deviation_sequence_consistent_with_single_calls():
    rng = np.random.default_rng(23)
    sys = random_discrete_system(rng, n=2, m=1, q=1, n_w=2, n_v=1)
    devs = deviation_reach_sequence(sys, 5)
    for k in (0, 2, 5):
        single = deviation_reach(sys, k)
        assert np.allclose(
            interval_hull(single).radius, interval_hull(devs[k]).radius, atol=1e-13
        )


# ---------------------------------------------------------------------------
# terminal sets


def test_terminal_geometric_series():
    # x+ = 0.5 x + [-1,1]: limit set [-2,2]
    sys = scalar_decay()
    term, k_conv = terminal_reach(sys, [0.0], tol=1e-9)
    hull = interval_hull(term)
    assert abs(hull.lower[0] + 2.0) < 1e-6
    assert abs(hull.upper[0] - 2.0) < 1e-6
    assert abs(znorm(term) - 4.0) < 1e-5
    assert k_conv > 3


def test_terminal_deadbeat_converges_immediately():
    sys = LtiSystem([[0.0]], E=[[1.0]], W=box([0.7]), dt=0.1)
    term, k_conv = terminal_reach(sys, [5.0])
    assert k_conv == 1  # X1 = W already, detected once X2 repeats it
    assert np.allclose(interval_hull(term).radius, 0.7)


def test_terminal_pointwise_noise_free():
    sys = LtiSystem([[0.5]], E=[[1.0]], W=Zonotope([0.0]), dt=0.1)
    term, k_conv = terminal_reach(sys, [0.0])
    assert k_conv == 0
    assert znorm(term) < 1e-12


def test_terminal_unstable_raises():
    sys = LtiSystem([[1.5]], E=[[1.0]], W=box([1.0]), dt=0.1)
    with pytest.raises(NonConvergenceError):
        terminal_reach(sys, [0.0], k_max=200)


def test_terminal_budget_exhausted_raises():
    sys = scalar_decay(a=0.99999)
    with pytest.raises(NonConvergenceError):
        terminal_reach(sys, [0.0], tol=0.0, k_max=50)


def test_terminal_slow_mode_uses_hull_collapse():
    # ~850 steps to settle: exercises the periodic interval-hull collapse,
    # which is lossless in one dimension, so the limit stays exact
    sys = scalar_decay(a=0.99)
    term, k_conv = terminal_reach(sys, [0.0])
    assert k_conv > 500
    hull = interval_hull(term)
    assert abs(hull.upper[0] - 100.0) < 0.1
    assert abs(hull.lower[0] + 100.0) < 0.1


def test_terminal_nesting_from_centered_start():
    # with 0 in W and a point start at the origin, X_k nests upward, so the
    # terminal hull contains every finite-step hull
    rng = np.random.default_rng(31)
    th = 0.4
    a = 0.9 * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    sys = LtiSystem(a, E=np.eye(2), W=box([0.2, 0.1]), dt=0.1)
    term, _ = terminal_reach(sys, np.zeros(2), tol=1e-9)
    term_hull = interval_hull(term)
    u = np.zeros((120, 0))
    seq = reach_horizon(sys, np.zeros(2), u)
    k_hull = interval_hull(seq.outputs[-1])
    assert term_hull.inflate(1e-6).contains_interval(k_hull)
    # and it is not wildly larger than the truncated sum
    assert np.all(term_hull.radius <= k_hull.radius + 1e-3)


def test_terminal_track_callback_sees_every_step():
    sys = scalar_decay()
    seen = []
    _, k_conv = terminal_reach(sys, [0.0], track=lambda k, r: seen.append(k))
    assert seen == list(range(k_conv + 2))


# ---------------------------------------------------------------------------
# conformance checking


def make_suite(sys, rng, n_cases=6, steps=15):
    cases = []
    for i in range(n_cases):
        x0 = rng.normal(size=sys.n_states) * 0.5
        u = rng.normal(size=(steps, sys.n_inputs))
        _, y = simulate(sys, x0, u, sys.W.sample(rng, steps), sys.V.sample(rng, steps))
        cases.append(TestCase(x0, u, y, name="case%d" % i))
    return TestSuite(cases, sys.dt)


def test_conformance_passes_on_in_set_data():
    rng = np.random.default_rng(41)
    sys = random_discrete_system(rng, n=3, m=1, q=2, n_w=2, n_v=2)
    suite = make_suite(sys, rng)
    report = check_conformance(sys, suite)
    assert report.passed
    assert report.max_margin <= 1e-9
    assert report.n_cases == 6
    assert report.k_end == 14


def test_conformance_flags_constructed_violation():
    rng = np.random.default_rng(43)
    sys = random_discrete_system(rng, n=2, m=1, q=2, n_w=1, n_v=1)
    suite = make_suite(sys, rng, n_cases=4, steps=10)
    bad = suite.cases[2]
    bump = np.zeros_like(bad.y)
    bump[7] = 50.0
    suite.cases[2] = TestCase(bad.x0, bad.u, bad.y + bump, name=bad.name)
    report = check_conformance(sys, suite)
    assert not report.passed
    assert any(c == 2 and k == 7 for c, k, _ in report.violations)
    assert all(m > 0 for _, _, m in report.violations)
    assert report.max_margin > 1.0


def test_conformance_margin_magnitude_on_box_deviation():
    # diagonal maps make the deviation set at k=0 an axis box, so the facet
    # margin equals the coordinate excess exactly
    sys = LtiSystem(
        [[0.9]], C=[[1.0]], F=[[1.0]], V=box([0.25]), E=np.zeros((1, 0)), dt=0.1
    )
    y = np.array([[0.25 + 0.4]])
    suite = TestSuite([TestCase([0.0], np.zeros((1, 0)), y)], 0.1)
    report = check_conformance(sys, suite)
    assert not report.passed
    assert abs(report.violations[0][2] - 0.4) < 1e-12


def test_conformance_k_end_truncation():
    rng = np.random.default_rng(47)
    sys = random_discrete_system(rng, n=2, m=1, q=1, n_w=1, n_v=1)
    suite = make_suite(sys, rng, n_cases=3, steps=12)
    report = check_conformance(sys, suite, k_end=5)
    assert report.k_end == 5
    assert report.per_step_max.shape == (6,)


def test_conformance_report_dict_round_trip():
    rng = np.random.default_rng(53)
    sys = random_discrete_system(rng, n=2, m=1, q=1, n_w=1, n_v=1)
    report = check_conformance(sys, make_suite(sys, rng, n_cases=2, steps=6))
    d = report.to_dict()
    assert d["passed"] is True
    assert d["n_cases"] == 2
    assert len(d["per_step_max_margin"]) == 6


# ---------------------------------------------------------------------------
# export


def test_reach_csv_round_trip(tmp_path):
    rng = np.random.default_rng(59)
    sys = random_discrete_system(rng, n=2, m=1, q=2, n_w=1, n_v=1)
    seq = reach_horizon(sys, rng.normal(size=2), rng.normal(size=(5, 1)))
    path = tmp_path / "reach.csv"
    reach_to_csv(seq, path)
    table = np.loadtxt(path, delimiter=",", skiprows=1)
    assert table.shape == (5 * 2, 4)
    assert np.allclose(table, np.asarray(seq.hull_table(), dtype=float))


def test_interval_initial_state_accepted():
    sys = scalar_decay()
    seq = reach_horizon(sys, Interval([-0.5], [0.5]), np.zeros((2, 0)))
    assert isinstance(seq, ReachSequence)
    assert np.allclose(interval_hull(seq.outputs[0]).radius, 0.5)
