"""Solver-layer tests: LP against a vertex-enumeration oracle, DFO contracts."""

import itertools

import numpy as np
import pytest

from reachsynth.errors import (
    ConfigError,
    LpInfeasibleError,
    LpUnboundedError,
    NoFeasiblePointError,
)
from reachsynth.optim import (
    DfoProblem,
    LinearProgram,
    minimize_dfo,
    solve_lp,
)

# ---------------------------------------------------------------------------
# linear programs


def test_lp_single_variable():
    lp = LinearProgram([1.0], [[1.0]], [1.0], bounds=[(0.0, None)])
    sol = solve_lp(lp)
    assert abs(sol.x[0] - 1.0) < 1e-9
    assert abs(sol.cost - 1.0) < 1e-9


def test_lp_two_variables():
    lp = LinearProgram(
        [1.0, 1.0], [[1.0, 0.0], [0.0, 1.0]], [0.5, 0.25]
    )
    sol = solve_lp(lp)
    assert np.allclose(sol.x, [0.5, 0.25], atol=1e-9)
    assert abs(sol.cost - 0.75) < 1e-9


def test_lp_infeasible():
    lp = LinearProgram([1.0], [[1.0], [-1.0]], [2.0, -1.0])  # x >= 2 and x <= 1
    with pytest.raises(LpInfeasibleError):
        solve_lp(lp)


def test_lp_unbounded():
    lp = LinearProgram([-1.0], [[1.0]], [0.0])  # max x, x >= 0
    with pytest.raises(LpUnboundedError):
        solve_lp(lp)


def test_lp_shape_validation():
    with pytest.raises(ConfigError):
        LinearProgram([1.0, 2.0], [[1.0]], [0.0])
    with pytest.raises(ConfigError):
        LinearProgram([1.0], [[1.0]], [0.0, 1.0])


def _vertex_optimum(cost, a, b):
    """Brute-force 2-variable LP oracle: try all constraint-pair intersections."""
    best = np.inf
    for i, j in itertools.combinations(range(a.shape[0]), 2):
        m = a[[i, j]]
        if abs(np.linalg.det(m)) < 1e-10:
            continue
        x = np.linalg.solve(m, b[[i, j]])
        if np.all(a @ x >= b - 1e-9):
            best = min(best, cost @ x)
    return best


def test_lp_matches_vertex_enumeration_oracle():
    rng = np.random.default_rng(101)
    for _ in range(20):
        # constraints built around an interior point so feasibility is certain;
        # an encoded [-10, 10]^2 box keeps the problem bounded
        x_star = rng.uniform(-3.0, 3.0, size=2)
        dirs = rng.normal(size=(6, 2))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        rhs = dirs @ x_star - rng.uniform(0.5, 2.0, size=6)
        box = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        a = np.vstack([dirs, box])
        b = np.concatenate([rhs, [-10.0, -10.0, -10.0, -10.0]])
        cost = rng.normal(size=2)
        sol = solve_lp(LinearProgram(cost, a, b))
        assert np.all(a @ sol.x >= b - 1e-8)
        assert abs(sol.cost - _vertex_optimum(cost, a, b)) < 1e-7


def test_lp_result_never_beats_verified_feasible_points():
    rng = np.random.default_rng(103)
    a = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
    b = np.array([0.0, 0.0, -5.0])
    cost = np.array([1.0, 2.0])
    sol = solve_lp(LinearProgram(cost, a, b))
    for _ in range(50):
        x = rng.uniform(0.0, 2.5, size=2)
        assert cost @ x >= sol.cost - 1e-9


def test_lp_deterministic():
    lp = LinearProgram([1.0, 1.0], [[1.0, 1.0], [1.0, -1.0]], [1.0, 0.0])
    a = solve_lp(lp)
    b = solve_lp(lp)
    assert np.array_equal(a.x, b.x)
    assert a.cost == b.cost


# ---------------------------------------------------------------------------
# derivative-free minimization


def unconstrained(f):
    return lambda theta: (f(theta), True, 0.0)


def test_dfo_quadratic_bowl():
    prob = DfoProblem(
        unconstrained(lambda t: (t[0] - 3.0) ** 2),
        bounds=[[0.0, 10.0]],
        start=[9.0],
        budget=500,
    )
    res = minimize_dfo(prob)
    assert abs(res.theta[0] - 3.0) < 1e-3
    assert res.n_evals <= 500


def test_dfo_constrained_boundary():
    # minimize theta subject to theta >= 2: margin pulls iterates back
    def objective(t):
        margin = max(2.0 - t[0], 0.0)
        return float(t[0]), margin == 0.0, margin

    res = minimize_dfo(DfoProblem(objective, [[0.0, 10.0]], [7.0], budget=800))
    assert abs(res.theta[0] - 2.0) < 1e-3
    assert res.theta[0] >= 2.0  # reported point is feasible


def test_dfo_rosenbrock_bowl():
    def f(t):
        return 100.0 * (t[1] - t[0] ** 2) ** 2 + (1.0 - t[0]) ** 2

    prob = DfoProblem(
        unconstrained(f),
        bounds=[[-2.0, 2.0], [-2.0, 2.0]],
        start=[-1.2, 1.0],
        budget=2000,
    )
    res = minimize_dfo(prob)
    assert res.cost < 1e-4


def test_dfo_never_returns_infeasible():
    # feasible region is a narrow off-center pocket; best point must be in it
    def objective(t):
        feas = 4.0 <= t[0] <= 5.0
        margin = 0.0 if feas else min(abs(t[0] - 4.0), abs(t[0] - 5.0))
        return float((t[0] - 1.0) ** 2), feas, margin

    res = minimize_dfo(
        DfoProblem(objective, [[0.0, 10.0]], [8.0], budget=1500, restarts=3)
    )
    assert 4.0 - 1e-9 <= res.theta[0] <= 5.0 + 1e-9


def test_dfo_no_feasible_point_raises():
    res = DfoProblem(
        lambda t: (1.0, False, 1.0), [[0.0, 1.0]], [0.5], budget=40
    )
    with pytest.raises(NoFeasiblePointError):
        minimize_dfo(res)


def test_dfo_budget_monotone_and_prefix_stable():
    def run(budget):
        return minimize_dfo(
            DfoProblem(
                unconstrained(lambda t: np.sum((t - 0.4) ** 2)),
                bounds=[[-1.0, 1.0], [-1.0, 1.0]],
                start=[0.9, -0.9],
                budget=budget,
                restarts=2,
                seed=5,
            )
        )

    short, long = run(120), run(400)
    assert long.cost <= short.cost + 1e-15
    assert short.history == long.history[: len(short.history)]


def test_dfo_multistart_escapes_poor_start():
    # two-basin objective; the given start sits in the shallow basin and the
    # deep one is found through a seeded restart
    def f(t):
        return min((t[0] - 8.0) ** 2 + 1.0, (t[0] - 2.0) ** 2)

    res = minimize_dfo(
        DfoProblem(unconstrained(f), [[0.0, 10.0]], [8.0], budget=900, restarts=6, seed=3)
    )
    assert res.cost < 0.5


def test_dfo_validation():
    with pytest.raises(ConfigError):
        DfoProblem(lambda t: (0.0, True, 0.0), [[0.0, 1.0]], [2.0])
    with pytest.raises(ConfigError):
        DfoProblem(lambda t: (0.0, True, 0.0), [[1.0, 0.0]], [0.5])
    with pytest.raises(ConfigError):
        DfoProblem(lambda t: (0.0, True, 0.0), [[0.0, 1.0]], [0.5], budget=0)
