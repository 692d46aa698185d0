"""Reachset-conformant identification of disturbance sets.

Given a model with fixed dynamics and fixed generator templates for the
process set W and measurement set V, identification fits the centers and the
nonnegative generator scalings so that every recorded output deviation lies
in its deviation reach set, while minimizing the time-weighted sum of reach
set norms over the horizon.  That problem is a linear program: the cost is
linear in the scalings, and zonotope membership at each step reduces to
facet inequalities of the template matrix, whose normals do not depend on
the unknowns.

Rows are pooled across test cases (only the per-facet maximum of n.y_a[k]
matters, the parameter side being case-independent), and the deviation cloud
at each step is first reduced to its convex hull, so suite size affects only
the ingestion pass, not the LP.
"""

import itertools
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import ConfigError, CoverageError, DimensionError, LpInfeasibleError
from .optim import DfoProblem, LinearProgram, minimize_dfo, solve_lp
from .reach import deviation_reach_sequence
from .sets import Zonotope, cross_nx, point_margin_batch, znorm
from .systems import LtiSystem, disturbance_maps, nominal_output_batch

# Slack granted to constraint rows along directions the templates cannot
# span: data spread beyond this is a coverage failure, below it numerics.
COVERAGE_SLACK = 1e-7
# Deviation clouds larger than this are reduced to convex-hull vertices.
HULL_REDUCE_MIN = 256
# Post-solve conformance self-check tolerance.
SELF_CHECK_TOL = 1e-6

_DIR_DECIMALS = 12
_INGEST_CHUNK = 8192


# ---------------------------------------------------------------------------
# deviation data


@dataclass
class DeviationData:
    """Recorded output deviations y_m[k] - y*_m[k], one column per case."""

    ya: np.ndarray  # (k_end+1, q, n_cases)
    k_end: int
    origins: list  # (case index, start offset) per column
    _extreme: dict = field(default_factory=dict, repr=False)

    @property
    def n_cases(self):
        return self.ya.shape[2]

    @property
    def n_outputs(self):
        return self.ya.shape[1]

    def extreme_points(self, k):
        """Candidate extreme deviations at step k (hull vertices when large)."""
        if k not in self._extreme:
            pts = self.ya[k]
            q, m = pts.shape
            if m > HULL_REDUCE_MIN:
                if q == 1:
                    pts = np.array([[pts.min(), pts.max()]])
                elif q <= 4:
                    try:
                        pts = pts[:, ConvexHull(pts.T).vertices]
                    except QhullError:
                        pass  # flat cloud: keep everything
            self._extreme[k] = pts
        return self._extreme[k]


def _window_list(sys, cases, k_end, expand_windows):
    windows = []
    for i, case in enumerate(cases):
        if case.y.shape[1] != sys.n_outputs or case.u.shape[1] != sys.n_inputs:
            raise DimensionError("case %d does not match the model's channels" % i)
        states = case.extra.get("states") if expand_windows else None
        if states is None:
            if case.n_steps < k_end + 1:
                raise DimensionError(
                    "case %d shorter than the identification horizon" % i
                )
            windows.append((i, 0, case.x0))
        else:
            states = np.asarray(states, dtype=float)
            if states.shape[1] != sys.n_states:
                raise DimensionError("exported states of case %d have wrong width" % i)
            last = case.n_steps - (k_end + 1)
            if last < 0:
                raise DimensionError(
                    "case %d shorter than the identification horizon" % i
                )
            for off in range(last + 1):
                windows.append((i, off, states[off]))
    return windows


def build_deviation_data(sys, suite, k_end, expand_windows=False):
    """Subtract the nominal response from every recorded trajectory.

    With expand_windows, cases carrying an exported state trajectory in
    extra["states"] contribute one window per sample instant (each instant
    treated as the start of a new case), multiplying the effective suite
    size without new experiments.
    """
    if not sys.is_discrete:
        raise DimensionError("identification needs a discrete-time model")
    if k_end < 0:
        raise ConfigError("horizon must be nonnegative")
    cases = list(suite.cases)
    if not cases:
        raise ConfigError("empty test suite")
    windows = _window_list(sys, cases, k_end, expand_windows)
    q = sys.n_outputs
    ya = np.empty((k_end + 1, q, len(windows)))
    for lo in range(0, len(windows), _INGEST_CHUNK):
        part = windows[lo : lo + _INGEST_CHUNK]
        x0s = np.column_stack([w[2] for w in part])
        us = np.stack(
            [cases[i].u[off : off + k_end + 1] for i, off, _ in part], axis=2
        )
        ys = np.stack(
            [cases[i].y[off : off + k_end + 1] for i, off, _ in part], axis=2
        )
        ya[:, :, lo : lo + len(part)] = ys - nominal_output_batch(sys, x0s, us)
    return DeviationData(ya, k_end, [(i, off) for i, off, _ in windows])


# ---------------------------------------------------------------------------
# facet geometry of the deviation templates


def template_matrix(sys, k):
    """Generator template of the deviation reach set at step k (scales = 1)."""
    ebars, _ = disturbance_maps(sys, k)
    blocks = [e @ sys.W.generators for e in ebars] + [sys.F @ sys.V.generators]
    return np.hstack(blocks) if blocks else np.zeros((sys.n_outputs, 0))


def _canonical_rows(dirs):
    """Normalize, fix sign by the first significant component, drop duplicates."""
    norms = np.linalg.norm(dirs, axis=1)
    keep = norms > 1e-12
    dirs = dirs[keep] / norms[keep, None]
    if dirs.shape[0] == 0:
        return dirs
    first = np.argmax(np.abs(dirs) > 1e-9, axis=1)
    signs = np.sign(dirs[np.arange(dirs.shape[0]), first])
    signs[signs == 0] = 1.0
    return np.unique(np.round(dirs * signs[:, None], _DIR_DECIMALS), axis=0)


def _facet_dirs(t):
    """Canonical facet normal directions of a full row-rank template (r x p)."""
    r, p = t.shape
    if r == 1:
        return np.ones((1, 1))
    keep = np.linalg.norm(t, axis=0) > 1e-12
    cols = t[:, keep]
    p = cols.shape[1]
    if p < r - 1:
        raise ConfigError("template has too few directions for facet enumeration")
    if r == 2:
        dirs = np.column_stack([-cols[1], cols[0]])
    else:
        n_combos = 1
        for i in range(r - 1):
            n_combos = n_combos * (p - i) // (i + 1)
        if n_combos > 500_000:
            raise ConfigError(
                "facet enumeration too large (%d column picks); shorten the horizon"
                % n_combos
            )
        dirs = np.array(
            [cross_nx(cols[:, list(c)]) for c in itertools.combinations(range(p), r - 1)]
        )
    return _canonical_rows(dirs)


def facet_directions(sys, k):
    """Facet normals (one per +- pair) used for the step-k constraint rows."""
    return _directions(template_matrix(sys, k))[0]


def _directions(t, return_null=True):
    """Split the template into facet normals and unspanned null directions."""
    q = t.shape[0]
    if q > 4:
        raise ConfigError("facet enumeration supports at most 4 output channels")
    cols = t[:, np.linalg.norm(t, axis=0) > 1e-12] if t.size else t
    if cols.size == 0:
        return np.zeros((0, q)), np.eye(q)
    u, s, _ = np.linalg.svd(cols, full_matrices=True)
    rank = int(np.sum(s > 1e-10 * max(s[0], 1.0)))
    if rank == q:
        return _facet_dirs(cols), np.zeros((0, q))
    basis, null = u[:, :rank], u[:, rank:]
    dirs = _facet_dirs(basis.T @ cols) @ basis.T
    return dirs, null.T


# ---------------------------------------------------------------------------
# LP assembly


def _weight_vector(sys, k_end, weights):
    if weights is None:
        w = np.full(k_end + 1, sys.dt, dtype=float)
    else:
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.size != k_end + 1:
            raise ConfigError("need one weight per step 0..k_end")
    if np.any(w < 0):
        raise ConfigError("weights must be nonnegative")
    return w


def ident_cost(sys, k_end, weights=None):
    """Time-weighted sum of deviation reach set norms, sum_k w[k] znorm(R_a[k])."""
    w = _weight_vector(sys, k_end, weights)
    rsets = deviation_reach_sequence(sys, k_end)
    return float(sum(w[k] * znorm(rsets[k]) for k in range(1, k_end + 1)))


def build_ident_lp(sys, data, weights=None, aggregate=True, coverage_slack=COVERAGE_SLACK):
    """Assemble the identification LP over xi = [c_W, c_V, alpha_W, alpha_V].

    Constraint rows per step k and facet normal n of the deviation template:
    n.center(xi) + sum_i |n.Ebar_i G_W| alpha_W + |n.F G_V| alpha_V >= n.y_a,
    pooled across cases by keeping the per-facet maximum.  Directions the
    template cannot span get two-sided rows with coverage_slack play; data
    spread beyond the slack raises CoverageError with a diagnosis report.
    """
    if not sys.is_discrete:
        raise DimensionError("identification needs a discrete-time model")
    k_end = data.k_end
    if k_end < 1:
        raise ConfigError("identification horizon must be at least 1 step")
    if data.n_outputs != sys.n_outputs:
        raise DimensionError("deviation data does not match the model outputs")
    w = _weight_vector(sys, k_end, weights)
    gw, gv = sys.W.generators, sys.V.generators
    n_w, p_w = gw.shape
    n_v, p_v = gv.shape
    ebars, _ = disturbance_maps(sys, k_end)
    egw = [e @ gw for e in ebars]
    fgv = sys.F @ gv

    # cost: gamma for alpha_W collects the tail-weight of each step response
    tails = np.cumsum(w[1:][::-1])[::-1]
    cost_w = 2.0 * sum(tails[i] * np.abs(egw[i]).sum(axis=0) for i in range(k_end))
    cost_v = 2.0 * w[1:].sum() * np.abs(fgv).sum(axis=0)
    cost = np.concatenate([np.zeros(n_w + n_v), np.atleast_1d(cost_w), cost_v])

    rows, rhs = [], []
    bad_steps = []
    s_k = np.zeros((sys.n_outputs, n_w))  # sum of Ebar_i, i < k
    for k in range(k_end + 1):
        cols = egw[:k] + [fgv]
        t_k = np.hstack(cols)
        dirs, nulls = _directions(t_k)
        pts = data.extreme_points(k) if aggregate else data.ya[k]
        for block, slack in ((dirs, 0.0), (nulls, coverage_slack)):
            if block.shape[0] == 0:
                continue
            for sign in (1.0, -1.0):
                n = sign * block
                a_cw = n @ s_k
                a_cv = n @ sys.F
                a_aw = sum(np.abs(n @ egw[i]) for i in range(k)) if k else np.zeros(
                    (n.shape[0], p_w)
                )
                a_av = np.abs(n @ fgv)
                a = np.hstack([a_cw, a_cv, np.atleast_2d(a_aw), a_av])
                proj = n @ pts
                if aggregate:
                    rows.append(a)
                    rhs.append(proj.max(axis=1) - slack)
                else:
                    for m in range(proj.shape[1]):
                        rows.append(a)
                        rhs.append(proj[:, m] - slack)
        if nulls.shape[0]:
            # feasibility screen: in unspanned directions the free center must
            # explain every case at once, so the spread must sit inside the slack
            proj = nulls @ data.ya[k]
            spread = proj.max(axis=1) - proj.min(axis=1)
            center_free = np.linalg.norm(nulls @ np.hstack([s_k, sys.F]), axis=1) > 1e-10
            level = np.abs(proj).max(axis=1)
            if np.any(spread > 2 * coverage_slack) or np.any(
                ~center_free & (level > coverage_slack)
            ):
                bad_steps.append(k)
        if k < k_end:
            s_k = s_k + ebars[k]
    if bad_steps:
        report = coverage_check(sys, data, threshold=coverage_slack)
        raise CoverageError(
            "deviations at steps %s leave the span of the noise templates; "
            "see the attached coverage report" % bad_steps,
            report=report,
        )
    n_vars = n_w + n_v + p_w + p_v
    bounds = [(None, None)] * (n_w + n_v) + [(0.0, None)] * (p_w + p_v)
    return LinearProgram(
        cost,
        np.vstack(rows) if rows else np.zeros((0, n_vars)),
        np.concatenate(rhs) if rhs else np.zeros(0),
        bounds=bounds,
    )


# ---------------------------------------------------------------------------
# identification drivers


@dataclass
class IdentResult:
    """Identified centers and scalings with the achieved cost."""

    c_w: np.ndarray
    c_v: np.ndarray
    alpha_w: np.ndarray
    alpha_v: np.ndarray
    cost: float
    system: object
    lp_stats: dict
    dfo: object = None

    def to_dict(self):
        return {
            "c_w": self.c_w.tolist(),
            "c_v": self.c_v.tolist(),
            "alpha_w": self.alpha_w.tolist(),
            "alpha_v": self.alpha_v.tolist(),
            "cost": float(self.cost),
            "lp_stats": dict(self.lp_stats),
        }


def _deviation_margin(sys, data, k_end):
    """Largest facet violation of the (reduced) deviation clouds."""
    rsets = deviation_reach_sequence(sys, k_end)
    worst = -np.inf
    for k in range(k_end + 1):
        pts = data.extreme_points(k)
        worst = max(worst, float(np.max(point_margin_batch(rsets[k], pts.T))))
    return worst


def identify_uncertainty(
    sys,
    suite,
    k_end=None,
    weights=None,
    expand_windows=False,
    coverage_slack=COVERAGE_SLACK,
):
    """Fit W and V centers/scalings by LP; returns IdentResult with .system.

    suite may be a TestSuite or a prebuilt DeviationData.  The returned
    system carries the identified sets; a conformance self-check on the
    identifying data runs before returning.
    """
    if isinstance(suite, DeviationData):
        data = suite
        k_end = data.k_end if k_end is None else k_end
        if k_end != data.k_end:
            raise ConfigError("horizon differs from the deviation data horizon")
    else:
        if k_end is None:
            raise ConfigError("k_end is required when passing a raw suite")
        data = build_deviation_data(sys, suite, k_end, expand_windows=expand_windows)
    lp = build_ident_lp(sys, data, weights=weights, coverage_slack=coverage_slack)
    t0 = time.perf_counter()
    try:
        sol = solve_lp(lp)
    except LpInfeasibleError as exc:  # screened above; anything left is internal
        raise RuntimeError(
            "identification LP infeasible despite free centers: %s" % exc
        ) from exc
    solve_seconds = time.perf_counter() - t0
    n_w, n_v = sys.W.dim, sys.V.dim
    p_w, p_v = sys.W.n_generators, sys.V.n_generators
    c_w, c_v = sol.x[:n_w], sol.x[n_w : n_w + n_v]
    alpha_w = np.maximum(sol.x[n_w + n_v : n_w + n_v + p_w], 0.0)
    alpha_v = np.maximum(sol.x[n_w + n_v + p_w :], 0.0)
    new_sys = sys.with_noise(
        W=Zonotope(c_w, sys.W.generators, alpha_w),
        V=Zonotope(c_v, sys.V.generators, alpha_v),
    )
    margin = _deviation_margin(new_sys, data, k_end)
    if margin > SELF_CHECK_TOL:
        raise RuntimeError(
            "identified model fails its own conformance check (margin %.3e)" % margin
        )
    stats = {
        "n_rows": sol.n_rows,
        "n_vars": sol.n_vars,
        "n_cases": data.n_cases,
        "k_end": k_end,
        "max_margin": margin,
        "solve_seconds": solve_seconds,
    }
    return IdentResult(c_w, c_v, alpha_w, alpha_v, sol.cost, new_sys, stats)


_PATCHABLE = ("A", "B", "C", "D", "E", "F", "GW", "GV")
_DATA_MATRICES = ("A", "B", "C", "D")  # changing these invalidates y*


def _patched_system(sys, entries, theta):
    mats = {
        "A": sys.A.copy(),
        "B": sys.B.copy(),
        "C": sys.C.copy(),
        "D": sys.D.copy(),
        "E": sys.E.copy(),
        "F": sys.F.copy(),
        "GW": sys.W.generators.copy(),
        "GV": sys.V.generators.copy(),
    }
    for (name, i, j, _, _hi), value in zip(entries, theta):
        mats[name][i, j] = value
    return LtiSystem(
        mats["A"],
        B=mats["B"],
        C=mats["C"],
        D=mats["D"],
        E=mats["E"],
        F=mats["F"],
        W=Zonotope(sys.W.center, mats["GW"], sys.W.scales),
        V=Zonotope(sys.V.center, mats["GV"], sys.V.scales),
        dt=sys.dt,
        w_labels=sys.w_labels,
        v_labels=sys.v_labels,
    )


def identify_full(
    sys,
    free_entries,
    suite,
    k_end,
    budget=400,
    restarts=0,
    seed=0,
    weights=None,
    expand_windows=False,
):
    """Cascaded identification: outer derivative-free search over designated
    matrix entries, inner LP per evaluation.

    free_entries lists (matrix, i, j, low, high) with matrix one of
    A B C D E F GW GV.  With no free entries this is identify_uncertainty.
    Returns (best system, IdentResult for it).
    """
    entries = list(free_entries)
    for name, *_ in entries:
        if name not in _PATCHABLE:
            raise ConfigError("unknown matrix name %r" % name)
    if not entries:
        res = identify_uncertainty(
            sys, suite, k_end, weights=weights, expand_windows=expand_windows
        )
        return res.system, res
    # deviations depend only on A..D; hoist the data pass when those are fixed
    static_data = None
    if not any(name in _DATA_MATRICES for name, *_ in entries):
        static_data = build_deviation_data(
            sys, suite, k_end, expand_windows=expand_windows
        )

    def objective(theta):
        candidate = _patched_system(sys, entries, theta)
        payload = static_data if static_data is not None else suite
        try:
            res = identify_uncertainty(
                candidate,
                payload,
                k_end,
                weights=weights,
                expand_windows=expand_windows,
            )
        except CoverageError as exc:
            worst = max((f[2] for f in exc.report.flagged), default=1.0)
            return 0.0, False, float(worst)
        except RuntimeError:
            return 0.0, False, 1.0
        return res.cost, True, 0.0

    start = np.array(
        [np.clip(_patched_value(sys, e), e[3], e[4]) for e in entries]
    )
    bounds = np.array([[e[3], e[4]] for e in entries], dtype=float)
    dfo = minimize_dfo(
        DfoProblem(objective, bounds, start, budget=budget, restarts=restarts, seed=seed)
    )
    best_sys = _patched_system(sys, entries, dfo.theta)
    payload = static_data if static_data is not None else suite
    res = identify_uncertainty(
        best_sys, payload, k_end, weights=weights, expand_windows=expand_windows
    )
    res.dfo = dfo
    return res.system, res


def _patched_value(sys, entry):
    name, i, j = entry[0], entry[1], entry[2]
    source = {
        "A": sys.A,
        "B": sys.B,
        "C": sys.C,
        "D": sys.D,
        "E": sys.E,
        "F": sys.F,
        "GW": sys.W.generators,
        "GV": sys.V.generators,
    }[name]
    return float(source[i, j])


# ---------------------------------------------------------------------------
# coverage diagnosis


@dataclass
class CoverageReport:
    """Which recorded deviations the noise channels cannot reproduce."""

    passed: bool
    threshold: float
    steps: list  # dicts: k, rank, n_outputs, max_residual, n_flagged
    flagged: list  # (case, k, residual)

    def to_dict(self):
        return {
            "passed": bool(self.passed),
            "threshold": float(self.threshold),
            "steps": [dict(s) for s in self.steps],
            "flagged": [
                {"case": int(c), "k": int(k), "residual": float(r)}
                for c, k, r in self.flagged[:200]
            ],
        }


def coverage_check(sys, data, k_end=None, threshold=1e-9):
    """Per-step rank test of J_k = [Ebar_0 .. Ebar_{k-1}, F] plus residuals.

    Full row rank means every deviation direction is attributable to the
    noise channels; otherwise each case's off-range residual
    ||y_a[k] - J_k J_k^+ y_a[k]|| is reported and compared to threshold.
    """
    if not isinstance(data, DeviationData):
        data = build_deviation_data(sys, data, k_end if k_end is not None else 0)
    k_end = data.k_end if k_end is None else min(k_end, data.k_end)
    q = sys.n_outputs
    ebars, _ = disturbance_maps(sys, k_end)
    running = [sys.F]
    steps, flagged = [], []
    for k in range(k_end + 1):
        if k > 0:
            running.append(ebars[k - 1])
        jk = np.hstack(running) if running else np.zeros((q, 0))
        if jk.size:
            u, s, _ = np.linalg.svd(jk, full_matrices=True)
            rank = int(np.sum(s > 1e-10 * max(s[0], 1.0)))
        else:
            rank = 0
            u = np.eye(q)
        if rank == q:
            res_norm = np.zeros(data.n_cases)
        else:
            null = u[:, rank:]
            res_norm = np.linalg.norm(null.T @ data.ya[k], axis=0)
        bad = np.nonzero(res_norm > threshold)[0]
        for idx in bad:
            flagged.append((int(idx), k, float(res_norm[idx])))
        steps.append(
            {
                "k": k,
                "rank": rank,
                "n_outputs": q,
                "max_residual": float(res_norm.max()) if res_norm.size else 0.0,
                "n_flagged": int(bad.size),
            }
        )
    return CoverageReport(not flagged, threshold, steps, flagged)
