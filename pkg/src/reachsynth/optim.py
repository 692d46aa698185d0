"""Solver layer: linear programs and box-constrained derivative-free search.

Identification builds LinearProgram instances (a few variables, possibly very
many rows); synthesis wraps its reachability checks into a DfoProblem whose
objective reports (cost, feasible, margin).  Infeasible evaluations are
penalized by PENALTY_WEIGHT times the constraint margin, and the best
*feasible* point is tracked separately from the search trajectory so an
infeasible iterate can never be returned as the answer.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, minimize

from .errors import ConfigError, LpInfeasibleError, LpUnboundedError, NoFeasiblePointError

# Cost penalty per unit of constraint violation for infeasible DFO evaluations.
PENALTY_WEIGHT = 1e3
# Cost penalty per box-width of parameter overshoot outside the search bounds.
BOUNDARY_WEIGHT = 1e3


@dataclass
class LinearProgram:
    """min cost @ x subject to constraints @ x >= rhs and box bounds.

    bounds is a list of (lower, upper) pairs, None meaning unbounded on that
    side; default is fully free variables.
    """

    cost: np.ndarray
    constraints: np.ndarray
    rhs: np.ndarray
    bounds: list = None

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=float).reshape(-1)
        self.constraints = np.atleast_2d(np.asarray(self.constraints, dtype=float))
        self.rhs = np.asarray(self.rhs, dtype=float).reshape(-1)
        n = self.cost.size
        if self.constraints.size == 0:
            self.constraints = self.constraints.reshape(0, n)
        if self.constraints.shape[1] != n:
            raise ConfigError("constraint matrix width does not match cost vector")
        if self.constraints.shape[0] != self.rhs.size:
            raise ConfigError("constraint rows and right-hand sides disagree")
        if self.bounds is None:
            self.bounds = [(None, None)] * n
        if len(self.bounds) != n:
            raise ConfigError("one bound pair per variable required")

    @property
    def n_vars(self):
        return self.cost.size

    @property
    def n_rows(self):
        return self.constraints.shape[0]


@dataclass
class LpSolution:
    x: np.ndarray
    cost: float
    n_rows: int
    n_vars: int


def solve_lp(lp):
    """Solve the LP; returns LpSolution or raises on infeasible/unbounded."""
    res = linprog(
        lp.cost,
        A_ub=-lp.constraints if lp.n_rows else None,
        b_ub=-lp.rhs if lp.n_rows else None,
        bounds=lp.bounds,
        method="highs",
    )
    if res.status == 2:
        raise LpInfeasibleError("no parameters satisfy the constraints")
    if res.status == 3:
        raise LpUnboundedError("objective unbounded below (missing constraints)")
    if not res.success:
        raise RuntimeError("LP solve failed: %s" % res.message)
    return LpSolution(np.asarray(res.x, dtype=float), float(res.fun), lp.n_rows, lp.n_vars)


@dataclass
class DfoProblem:
    """Box-constrained minimization of a black-box objective.

    objective(theta) must return (cost, feasible, margin): margin is a
    nonnegative measure of constraint violation used for penalty shaping
    (ignored when feasible).  restarts > 0 adds that many uniformly drawn
    extra start points inside the bounds, consuming the shared budget in
    order, so results are reproducible for a fixed seed.
    """

    objective: callable
    bounds: np.ndarray
    start: np.ndarray
    budget: int = 1000
    restarts: int = 0
    seed: int = 0
    xatol: float = 1e-6
    fatol: float = 1e-9

    def __post_init__(self):
        self.bounds = np.atleast_2d(np.asarray(self.bounds, dtype=float))
        self.start = np.asarray(self.start, dtype=float).reshape(-1)
        if self.bounds.shape != (self.start.size, 2):
            raise ConfigError("need one (low, high) bound pair per parameter")
        if np.any(self.bounds[:, 0] > self.bounds[:, 1]):
            raise ConfigError("lower bounds exceed upper bounds")
        if np.any(self.start < self.bounds[:, 0]) or np.any(self.start > self.bounds[:, 1]):
            raise ConfigError("start point outside bounds")
        if self.budget <= 0:
            raise ConfigError("evaluation budget must be positive")


@dataclass
class DfoResult:
    theta: np.ndarray
    cost: float
    n_evals: int
    history: list = field(repr=False, default_factory=list)


class _BudgetExhausted(Exception):
    pass


def minimize_dfo(problem):
    """Penalized simplex-reflection search (Nelder-Mead) with multi-start.

    Returns the best feasible point seen across all evaluations; raises
    NoFeasiblePointError when every evaluated point was infeasible.  history
    holds (evaluation index, best feasible cost so far, candidate cost) rows
    for convergence plots.  Monotone in budget: a longer budget replays the
    same evaluation prefix for the same seed.
    """
    lo, hi = problem.bounds[:, 0], problem.bounds[:, 1]
    rng = np.random.default_rng(problem.seed)
    starts = [problem.start] + [
        rng.uniform(lo, hi) for _ in range(problem.restarts)
    ]
    best_cost = np.inf
    best_theta = None
    used = 0
    history = []

    width = np.where(hi > lo, hi - lo, 1.0)

    def penalized(theta):
        nonlocal used, best_cost, best_theta
        if used >= problem.budget:
            raise _BudgetExhausted
        used += 1
        inside = np.clip(theta, lo, hi)
        # overshoot in box-widths; evaluating at the clipped point while
        # penalizing the excursion keeps the surface increasing outside the
        # box, so a reflection past a bound contracts back instead of
        # flatlining on the boundary
        overshoot = float(np.sum(np.abs(theta - inside) / width))
        cost, feasible, margin = problem.objective(inside)
        value = float(cost) + BOUNDARY_WEIGHT * overshoot
        if feasible:
            if float(cost) < best_cost:
                best_cost, best_theta = float(cost), inside.copy()
        else:
            value += PENALTY_WEIGHT * max(float(margin), 0.0)
        history.append((used, best_cost, value))
        return value

    for start in starts:
        if used >= problem.budget:
            break
        try:
            # budget is enforced solely by the counter above so that the
            # evaluation sequence (hence best-so-far) is a prefix-stable
            # function of the seed, independent of the budget value
            # bounds are enforced by clip-plus-overshoot-penalty in
            # penalized() rather than passed to the solver: hard clipping
            # makes the surface flat outside the box, which lets a large
            # reflection alias to a boundary point and stall the simplex
            # against the box edge
            minimize(
                penalized,
                np.asarray(start, dtype=float),
                method="Nelder-Mead",
                options={
                    "maxfev": 10**9,
                    "maxiter": 10**9,
                    "xatol": problem.xatol,
                    "fatol": problem.fatol,
                },
            )
        except _BudgetExhausted:
            break
    if best_theta is None:
        raise NoFeasiblePointError(
            "no feasible parameters within %d evaluations" % used
        )
    return DfoResult(best_theta, best_cost, used, history)
