"""Reachable-set recursions for discrete-time models with bounded noise.

All computations here are exact in discrete time: states and outputs are
zonotopes, each step Minkowski-adds a fresh disturbance draw, and the output
set at step k is C X[k] + D u[k] + F V.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NonConvergenceError
from .sets import (
    Interval,
    Zonotope,
    interval_hull,
    linear_map,
    minkowski_sum,
    point_margin_batch,
    znorm,
)
from .systems import nominal_output_batch

# Default step limit for terminal-set iteration.
DEFAULT_K_MAX = 5000
# Beyond this step count the state set is collapsed to its interval hull
# every COLLAPSE_EVERY steps to cap generator growth (sound outer bound).
COLLAPSE_AFTER = 500
COLLAPSE_EVERY = 100
# znorm beyond which the iteration is reported as diverging.
DIVERGENCE_LIMIT = 1e12
# Consecutive two-sided hull matches required before "settle" mode concludes
# the tube has stopped changing (guards against transient near-misses when an
# oscillatory mode passes through a node).
SETTLE_RUNS = 3


@dataclass
class ReachSequence:
    """Time-indexed reachable output sets (and optionally state sets)."""

    outputs: list
    dt: float
    states: list = None
    converged_at: int = None

    def __len__(self):
        return len(self.outputs)

    def hull_table(self):
        """Rows (k, dim, lower, upper) over the output interval hulls."""
        rows = []
        for k, z in enumerate(self.outputs):
            hull = interval_hull(z)
            for d in range(hull.dim):
                rows.append((k, d, hull.lower[d], hull.upper[d]))
        return rows


def _as_state_set(sys, x0):
    if isinstance(x0, Zonotope):
        if x0.dim != sys.n_states:
            raise DimensionError("initial set dimension does not match the state")
        return x0
    if isinstance(x0, Interval):
        return x0.to_zonotope()
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != sys.n_states:
        raise DimensionError("initial state dimension mismatch")
    return Zonotope(x0)


def _require_discrete(sys):
    if not sys.is_discrete:
        raise DimensionError("reachability runs on discrete-time systems (discretize first)")


def _state_step(sys, x_set, u_k):
    shift = sys.B @ u_k + sys.E @ sys.W.center
    return Zonotope(
        sys.A @ x_set.center + shift,
        np.hstack([sys.A @ x_set.generators, sys.E @ sys.W.generators]),
        np.concatenate([x_set.scales, sys.W.scales]),
    )


def _output_set(sys, x_set, u_k):
    shift = sys.D @ u_k + sys.F @ sys.V.center
    return Zonotope(
        sys.C @ x_set.center + shift,
        np.hstack([sys.C @ x_set.generators, sys.F @ sys.V.generators]),
        np.concatenate([x_set.scales, sys.V.scales]),
    )


def reach_step(sys, x_set, u_k):
    """One recursion step: returns (next state set, its output set).

    The supplied input is used for both the state update and the D-term of
    the returned output set.
    """
    _require_discrete(sys)
    u_k = np.asarray(u_k, dtype=float).reshape(sys.n_inputs)
    x_next = _state_step(sys, x_set, u_k)
    return x_next, _output_set(sys, x_next, u_k)


def reach_horizon(sys, x0, u):
    """Reachable output sets for steps k = 0..K under the input trajectory u.

    x0 may be a vector (point start) or a zonotope.  u has K+1 rows; the
    output set at step k is C X[k] + D u[k] + F V with X[0] the initial set.
    """
    _require_discrete(sys)
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u.reshape(-1, max(sys.n_inputs, 1))
    if u.shape[1] != sys.n_inputs:
        raise DimensionError("input trajectory has wrong width")
    x_set = _as_state_set(sys, x0)
    states = [x_set]
    outputs = [_output_set(sys, x_set, u[0])]
    for k in range(u.shape[0] - 1):
        x_set = _state_step(sys, x_set, u[k])
        states.append(x_set)
        outputs.append(_output_set(sys, x_set, u[k + 1]))
    return ReachSequence(outputs, sys.dt, states=states)


def deviation_reach(sys, k):
    """Output-deviation reach set at step k (inputs and initial state removed).

    This is the set of y[k] - y*[k]: the Minkowski sum of the first k
    disturbance step responses C A^i E W plus the measurement term F V.  It
    does not depend on the test case, which is what makes conformance
    constraints poolable across recorded trajectories.
    """
    return deviation_reach_sequence(sys, k)[k]


def deviation_reach_sequence(sys, k_end):
    """deviation_reach for every k = 0..k_end, sharing the step-map recursion."""
    _require_discrete(sys)
    q = sys.n_outputs
    f_cols = sys.F @ sys.V.generators
    blocks = []  # templates of C A^i E W contributions, i ascending
    out = []
    acc = sys.E.copy()
    center = sys.F @ sys.V.center
    for k in range(k_end + 1):
        template = np.hstack(blocks + [f_cols]) if blocks or f_cols.size else np.zeros((q, 0))
        scales = np.concatenate([np.tile(sys.W.scales, k), sys.V.scales])
        out.append(Zonotope(center.copy(), template, scales))
        ebar = sys.C @ acc
        blocks.append(ebar @ sys.W.generators)
        center = center + ebar @ sys.W.center
        acc = sys.A @ acc
    return out


def terminal_reach(sys, x0, tol=None, k_max=DEFAULT_K_MAX, track=None, mode="nest"):
    """Iterate the autonomous (zero-input) recursion until the set settles.

    mode="nest" (default): convergence is declared at the first k where the
    interval hull of X[k+1] is contained in the hull of X[k] inflated by tol
    per bound; the converged output set and that k are returned.  This is the
    right notion for a tube growing out of a small start toward its invariant
    set, but it fires immediately on a shrinking tube.

    mode="settle": convergence requires mutual containment (each hull inside
    the other inflated by tol) at SETTLE_RUNS consecutive steps, i.e. the tube
    has stopped changing.  Used for transient-duration measurements starting
    from a large initial set; the returned index is the first step from which
    the tube no longer changes (0 when the start is already stationary).

    tol=None uses 1e-6 times the current set's znorm.  Raises
    NonConvergenceError when k_max steps pass without settling or the set
    diverges.  `track`, if given, is called with (k, output_set) for every
    step including step 0 (for constraint monitoring along the transient).
    """
    _require_discrete(sys)
    if mode not in ("nest", "settle"):
        raise ValueError("mode must be 'nest' or 'settle'")
    x_set = _as_state_set(sys, x0)
    u0 = np.zeros(sys.n_inputs)
    hull = interval_hull(x_set)
    if track is not None:
        track(0, _output_set(sys, x_set, u0))
    run = 0
    first_match = None
    for k in range(k_max):
        x_next = _state_step(sys, x_set, u0)
        if k + 1 > COLLAPSE_AFTER and (k + 1) % COLLAPSE_EVERY == 0:
            x_next = interval_hull(x_next).to_zonotope()
        hull_next = interval_hull(x_next)
        if track is not None:
            track(k + 1, _output_set(sys, x_next, u0))
        tol_eff = tol if tol is not None else 1e-6 * znorm(x_set)
        nested = hull.inflate(tol_eff).contains_interval(hull_next, tol=0.0)
        if mode == "nest":
            if nested:
                return _output_set(sys, x_next, u0), k
        else:
            if nested and hull_next.inflate(tol_eff).contains_interval(hull, tol=0.0):
                if run == 0:
                    first_match = (_output_set(sys, x_next, u0), k)
                run += 1
                if run >= SETTLE_RUNS:
                    return first_match
            else:
                run = 0
                first_match = None
        if znorm(x_next) > DIVERGENCE_LIMIT:
            raise NonConvergenceError(
                "reachable set diverging (znorm above %g at step %d)"
                % (DIVERGENCE_LIMIT, k + 1)
            )
        x_set, hull = x_next, hull_next
    raise NonConvergenceError("no settled reachable set within %d steps" % k_max)


@dataclass
class ConformanceReport:
    """Outcome of checking recorded outputs against the model's reach sets."""

    passed: bool
    max_margin: float
    violations: list
    n_cases: int
    k_end: int
    per_step_max: np.ndarray = field(default=None, repr=False)

    def to_dict(self):
        return {
            "passed": bool(self.passed),
            "max_margin": float(self.max_margin),
            "n_violations": len(self.violations),
            "violations": [
                {"case": int(c), "k": int(k), "margin": float(m)}
                for c, k, m in self.violations[:200]
            ],
            "n_cases": int(self.n_cases),
            "k_end": int(self.k_end),
            "per_step_max_margin": [float(v) for v in self.per_step_max],
        }


def check_conformance(sys, suite, k_end=None, tol=1e-9):
    """Check y_m[k] in R(m)[k] for every case m and step k.

    Equivalent (and implemented as): deviation y_m[k] - y*_m[k] must lie in
    the case-independent deviation reach set at k.  Violations are report
    content, not errors; margins are facet-space distances.
    """
    _require_discrete(sys)
    cases = list(suite.cases)
    if not cases:
        return ConformanceReport(True, -np.inf, [], 0, -1, np.zeros(0))
    max_steps = min(c.n_steps for c in cases)
    if k_end is None:
        k_end = max_steps - 1
    k_end = min(k_end, max_steps - 1)
    m_all = len(cases)
    x0s = np.column_stack([c.x0 for c in cases])
    us = np.stack([c.u[: k_end + 1] for c in cases], axis=2)
    ys = np.stack([c.y[: k_end + 1] for c in cases], axis=2)
    ya = ys - nominal_output_batch(sys, x0s, us)
    rsets = deviation_reach_sequence(sys, k_end)
    violations = []
    per_step = np.empty(k_end + 1)
    for k in range(k_end + 1):
        margins = point_margin_batch(rsets[k], ya[k].T)
        per_step[k] = np.max(margins)
        for idx in np.nonzero(margins > tol)[0]:
            violations.append((int(idx), k, float(margins[idx])))
    max_margin = float(np.max(per_step))
    return ConformanceReport(
        len(violations) == 0, max_margin, violations, m_all, k_end, per_step
    )


def reach_to_csv(seq, path):
    """Write the hull table as CSV rows k, dim, lower, upper."""
    rows = seq.hull_table()
    table = np.array(rows, dtype=float) if rows else np.zeros((0, 4))
    np.savetxt(
        path,
        table,
        delimiter=",",
        header="k,dim,lower,upper",
        comments="",
        fmt=["%d", "%d", "%.17g", "%.17g"],
    )
