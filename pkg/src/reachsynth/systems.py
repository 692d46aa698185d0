"""Linear time-invariant models with bounded disturbance channels.

A model is

    x+ (or xdot) = A x + B u + E w,      w in W
    y            = C x + D u + F v,      v in V

with W, V zonotopes over the process-disturbance and measurement-error
channels.  Composition operators keep track of how each noise channel of a
subsystem acts on the composite: a channel that ends up driving downstream
dynamics moves to the composite W stack, one that only appears in the output
stays in the V stack, and a channel that does both is carried in both stacks
(exact for the step recursions used here, because disturbance draws are fresh
at every step, so the direct draw at step k and the dynamics draws at steps
< k involve disjoint time indices).
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import DimensionError
from .sets import Zonotope, cartesian_product

MODEL_SCHEMA_VERSION = 1
SUITE_SCHEMA_VERSION = 1


def _empty_zonotope(dim):
    return Zonotope(np.zeros(dim), np.zeros((dim, 0)))


def _as_matrix(value, rows, cols, name):
    if value is None:
        return np.zeros((rows, cols))
    m = np.atleast_2d(np.asarray(value, dtype=float))
    if m.shape != (rows, cols):
        raise DimensionError("%s must be %dx%d, got %r" % (name, rows, cols, m.shape))
    return m


class LtiSystem:
    """State-space model with zonotopic disturbance and measurement-error sets.

    dt is None for a continuous-time model and the sample time for a
    discrete-time one.
    """

    def __init__(
        self,
        A,
        B=None,
        C=None,
        D=None,
        E=None,
        F=None,
        W=None,
        V=None,
        dt=None,
        w_labels=None,
        v_labels=None,
    ):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise DimensionError("A must be square, got %r" % (self.A.shape,))
        if B is None:
            B = np.zeros((n, 0))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        if self.B.ndim != 2 or self.B.shape[0] != n:
            raise DimensionError("B must have %d rows" % n)
        m = self.B.shape[1]
        if C is None:
            C = np.eye(n)
        self.C = np.atleast_2d(np.asarray(C, dtype=float))
        if self.C.shape[1] != n:
            raise DimensionError("C must have %d columns" % n)
        q = self.C.shape[0]
        self.D = _as_matrix(D, q, m, "D")
        if E is None:
            E = np.zeros((n, 0 if W is None else W.dim))
        self.E = np.atleast_2d(np.asarray(E, dtype=float))
        if self.E.shape[0] != n:
            raise DimensionError("E must have %d rows" % n)
        if F is None:
            F = np.zeros((q, 0 if V is None else V.dim))
        self.F = np.atleast_2d(np.asarray(F, dtype=float))
        if self.F.shape[0] != q:
            raise DimensionError("F must have %d rows" % q)
        self.W = W if W is not None else _empty_zonotope(self.E.shape[1])
        self.V = V if V is not None else _empty_zonotope(self.F.shape[1])
        if self.W.dim != self.E.shape[1]:
            raise DimensionError("W dimension must match E columns")
        if self.V.dim != self.F.shape[1]:
            raise DimensionError("V dimension must match F columns")
        if dt is not None and dt <= 0:
            raise ValueError("sample time must be positive")
        self.dt = dt
        self.w_labels = list(w_labels) if w_labels else ["w%d" % i for i in range(self.W.dim)]
        self.v_labels = list(v_labels) if v_labels else ["v%d" % i for i in range(self.V.dim)]
        if len(self.w_labels) != self.W.dim or len(self.v_labels) != self.V.dim:
            raise DimensionError("one label per noise channel required")

    # -- shape properties ---------------------------------------------------

    @property
    def n_states(self):
        return self.A.shape[0]

    @property
    def n_inputs(self):
        return self.B.shape[1]

    @property
    def n_outputs(self):
        return self.C.shape[0]

    @property
    def n_dist(self):
        return self.E.shape[1]

    @property
    def n_meas(self):
        return self.F.shape[1]

    @property
    def is_discrete(self):
        return self.dt is not None

    def with_noise(self, W=None, V=None):
        """Copy with replaced disturbance/measurement sets (same channel maps)."""
        return LtiSystem(
            self.A,
            self.B,
            self.C,
            self.D,
            self.E,
            self.F,
            W if W is not None else self.W,
            V if V is not None else self.V,
            dt=self.dt,
            w_labels=self.w_labels,
            v_labels=self.v_labels,
        )

    def __repr__(self):
        timing = "continuous" if self.dt is None else "dt=%g" % self.dt
        return "LtiSystem(n=%d, m=%d, q=%d, w=%d, v=%d, %s)" % (
            self.n_states,
            self.n_inputs,
            self.n_outputs,
            self.n_dist,
            self.n_meas,
            timing,
        )


def _require_same_timing(s1, s2, op):
    if s1.is_discrete != s2.is_discrete:
        raise DimensionError("%s requires both systems continuous or both discrete" % op)
    if s1.is_discrete and abs(s1.dt - s2.dt) > 1e-15:
        raise DimensionError("%s requires equal sample times" % op)


def discretize(sys, dt):
    """Exact zero-order-hold discretization.

    Atilde = exp(A dt); Btilde and Etilde are the integrals of exp(A (dt - tau))
    against B and E, obtained in one matrix exponential of the augmented block
    matrix [[A, B, E], [0, 0, 0]] * dt.  C, D, F and the noise sets are
    unchanged.  Exact for inputs and disturbances held constant over each
    sample interval.
    """
    if sys.is_discrete:
        raise DimensionError("system is already discrete")
    if dt <= 0:
        raise ValueError("sample time must be positive")
    n, m, w = sys.n_states, sys.n_inputs, sys.n_dist
    aug = np.zeros((n + m + w, n + m + w))
    aug[:n, :n] = sys.A
    aug[:n, n : n + m] = sys.B
    aug[:n, n + m :] = sys.E
    phi = expm(aug * dt)
    return LtiSystem(
        phi[:n, :n],
        phi[:n, n : n + m],
        sys.C,
        sys.D,
        phi[:n, n + m :],
        sys.F,
        sys.W,
        sys.V,
        dt=dt,
        w_labels=sys.w_labels,
        v_labels=sys.v_labels,
    )


def _route_noise(state_cols, out_cols, labels, noise_set):
    """Split one subsystem noise block into (W-stack, V-stack) contributions.

    Returns (w_entry, v_entry) where each entry is None or a tuple
    (map_matrix, zonotope, labels).  A block whose composite output map is zero
    moves entirely to the W stack and vice versa; a block acting on both is
    carried in both stacks (see module docstring for why that stays exact).
    """
    if noise_set.dim == 0:
        return None, None
    has_state = np.any(np.abs(state_cols) > 0.0)
    has_out = np.any(np.abs(out_cols) > 0.0)
    w_entry = v_entry = None
    if has_state or not has_out:
        w_entry = (state_cols, noise_set, labels)
    if has_out:
        v_entry = (out_cols, noise_set, labels)
    return w_entry, v_entry


def _assemble_noise(entries, rows):
    """Concatenate routed noise entries into one map matrix + product zonotope."""
    maps = [np.zeros((rows, 0))]
    sets = _empty_zonotope(0)
    labels = []
    for entry in entries:
        if entry is None:
            continue
        mat, zset, labs = entry
        maps.append(mat)
        sets = cartesian_product(sets, zset)
        labels.extend(labs)
    return np.hstack(maps), sets, labels


def series(s1, s2):
    """Cascade s1 -> s2 (output of s1 drives input of s2).

    Composite state is [x1; x2].  s1's measurement error rides on the signal
    into s2, so it is routed into the composite noise stacks according to
    where it acts (through B2 into the dynamics, through D2 into the output).
    """
    _require_same_timing(s1, s2, "series")
    if s1.n_outputs != s2.n_inputs:
        raise DimensionError(
            "series: upstream has %d outputs, downstream expects %d inputs"
            % (s1.n_outputs, s2.n_inputs)
        )
    n1, n2 = s1.n_states, s2.n_states
    a = np.block(
        [
            [s1.A, np.zeros((n1, n2))],
            [s2.B @ s1.C, s2.A],
        ]
    )
    b = np.vstack([s1.B, s2.B @ s1.D])
    c = np.hstack([s2.D @ s1.C, s2.C])
    d = s2.D @ s1.D
    w1 = (np.vstack([s1.E, np.zeros((n2, s1.n_dist))]), s1.W, s1.w_labels)
    w2 = (np.vstack([np.zeros((n1, s2.n_dist)), s2.E]), s2.W, s2.w_labels)
    v1_state = np.vstack([np.zeros((n1, s1.n_meas)), s2.B @ s1.F])
    v1_out = s2.D @ s1.F
    v1_w, v1_v = _route_noise(v1_state, v1_out, s1.v_labels, s1.V)
    v2_v = (s2.F, s2.V, s2.v_labels) if s2.n_meas else None
    e, w_set, w_labels = _assemble_noise([w1, w2, v1_w], n1 + n2)
    f, v_set, v_labels = _assemble_noise([v1_v, v2_v], s2.n_outputs)
    return LtiSystem(
        a,
        b,
        c,
        d,
        e,
        f,
        w_set,
        v_set,
        dt=s1.dt,
        w_labels=w_labels,
        v_labels=v_labels,
    )


def feedback(s1, s2):
    """Close the loop: u1 = r + y2, u2 = y1; composite output is y1.

    Any feedback sign lives inside s2.  Raises on an ill-posed algebraic loop
    (I - D1 D2 singular).
    """
    _require_same_timing(s1, s2, "feedback")
    if s1.n_outputs != s2.n_inputs or s2.n_outputs != s1.n_inputs:
        raise DimensionError("feedback requires complementary I/O dimensions")
    n1, n2 = s1.n_states, s2.n_states
    loop = np.eye(s1.n_outputs) - s1.D @ s2.D
    if abs(np.linalg.det(loop)) < 1e-12:
        raise DimensionError("algebraic loop: I - D1 D2 is singular")
    li = np.linalg.inv(loop)
    # y1 = li @ (C1 x1 + D1 C2 x2 + D1 r + F1 v1 + D1 F2 v2)
    y1_x = li @ np.hstack([s1.C, s1.D @ s2.C])
    y1_r = li @ s1.D
    y1_v1 = li @ s1.F
    y1_v2 = li @ s1.D @ s2.F
    bd = s1.B @ s2.D

    def lift(y1_map, direct1=None, direct2=None):
        top = bd @ y1_map
        bot = s2.B @ y1_map
        if direct1 is not None:
            top = top + direct1
        if direct2 is not None:
            bot = bot + direct2
        return np.vstack([top, bot])

    a = lift(y1_x, direct1=np.hstack([s1.A, s1.B @ s2.C]), direct2=np.hstack([np.zeros((n2, n1)), s2.A]))
    b = lift(y1_r, direct1=s1.B)
    w1 = (np.vstack([s1.E, np.zeros((n2, s1.n_dist))]), s1.W, s1.w_labels)
    w2 = (np.vstack([np.zeros((n1, s2.n_dist)), s2.E]), s2.W, s2.w_labels)
    v1_w, v1_v = _route_noise(lift(y1_v1), y1_v1, s1.v_labels, s1.V)
    v2_w, v2_v = _route_noise(
        lift(y1_v2, direct1=s1.B @ s2.F), y1_v2, s2.v_labels, s2.V
    )
    e, w_set, w_labels = _assemble_noise([w1, w2, v1_w, v2_w], n1 + n2)
    f, v_set, v_labels = _assemble_noise([v1_v, v2_v], s1.n_outputs)
    return LtiSystem(
        a,
        b,
        y1_x,
        y1_r,
        e,
        f,
        w_set,
        v_set,
        dt=s1.dt,
        w_labels=w_labels,
        v_labels=v_labels,
    )


# ---------------------------------------------------------------------------
# simulation


def _input_array(sys, u, steps):
    if u is None:
        u = np.zeros((steps, sys.n_inputs))
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u.reshape(-1, 1) if sys.n_inputs == 1 else np.tile(u, (steps, 1))
    if u.shape != (steps, sys.n_inputs):
        raise DimensionError(
            "input trajectory must be %dx%d, got %r" % (steps, sys.n_inputs, u.shape)
        )
    return u


def nominal_output(sys, x0, u):
    """Disturbance-free output trajectory y*[k], k = 0..K.

    u has one row per step (K+1 rows); x[k+1] = A x[k] + B u[k] and
    y[k] = C x[k] + D u[k].  Discrete-time systems only.
    """
    if not sys.is_discrete:
        raise DimensionError("nominal_output needs a discrete-time system (discretize first)")
    x0 = np.asarray(x0, dtype=float).reshape(sys.n_states)
    u = _input_array(sys, u, np.asarray(u).shape[0] if u is not None else 1)
    steps = u.shape[0]
    y = np.empty((steps, sys.n_outputs))
    x = x0.copy()
    for k in range(steps):
        y[k] = sys.C @ x + sys.D @ u[k]
        x = sys.A @ x + sys.B @ u[k]
    return y


def nominal_output_batch(sys, x0_batch, u_batch):
    """Vectorized nominal outputs for many test cases at once.

    x0_batch is (n, M); u_batch is (K+1, m, M).  Returns (K+1, q, M).
    """
    if not sys.is_discrete:
        raise DimensionError("nominal_output_batch needs a discrete-time system")
    steps = u_batch.shape[0]
    m = u_batch.shape[2]
    x = np.asarray(x0_batch, dtype=float).reshape(sys.n_states, m).copy()
    y = np.empty((steps, sys.n_outputs, m))
    for k in range(steps):
        uk = u_batch[k]
        y[k] = sys.C @ x + sys.D @ uk
        x = sys.A @ x + sys.B @ uk
    return y


def simulate(sys, x0, u, w_seq=None, v_seq=None):
    """Simulate a discrete model with explicit disturbance draws.

    w_seq / v_seq have one row per step (defaults: the set centers).  Returns
    (states, outputs) with K+1 rows each.
    """
    if not sys.is_discrete:
        raise DimensionError("simulate needs a discrete-time system")
    x0 = np.asarray(x0, dtype=float).reshape(sys.n_states)
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u.reshape(-1, max(sys.n_inputs, 1))
    steps = u.shape[0]
    u = _input_array(sys, u, steps)
    if w_seq is None:
        w_seq = np.tile(sys.W.center, (steps, 1))
    if v_seq is None:
        v_seq = np.tile(sys.V.center, (steps, 1))
    w_seq = np.asarray(w_seq, dtype=float).reshape(steps, sys.n_dist)
    v_seq = np.asarray(v_seq, dtype=float).reshape(steps, sys.n_meas)
    xs = np.empty((steps + 1, sys.n_states))
    ys = np.empty((steps, sys.n_outputs))
    xs[0] = x0
    for k in range(steps):
        ys[k] = sys.C @ xs[k] + sys.D @ u[k] + sys.F @ v_seq[k]
        xs[k + 1] = sys.A @ xs[k] + sys.B @ u[k] + sys.E @ w_seq[k]
    return xs, ys


def disturbance_maps(sys, k):
    """Step maps from past disturbances to the output deviation at step k.

    Returns (ebars, jk): ebars[i] = C A^i E for i = 0..k-1, and
    jk = [ebars[0], ..., ebars[k-1], F], the matrix whose range must contain
    every measurable output deviation at step k.
    """
    if not sys.is_discrete:
        raise DimensionError("disturbance_maps needs a discrete-time system")
    ebars = []
    acc = sys.E.copy()
    for _ in range(k):
        ebars.append(sys.C @ acc)
        acc = sys.A @ acc
    jk = np.hstack(ebars + [sys.F]) if (ebars or sys.n_meas) else np.zeros(
        (sys.n_outputs, 0)
    )
    return ebars, jk


# ---------------------------------------------------------------------------
# test data containers


@dataclass
class TestCase:
    """One recorded trajectory: initial state, inputs, measured outputs."""

    __test__ = False  # not a pytest class despite the name

    x0: np.ndarray
    u: np.ndarray
    y: np.ndarray
    name: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if self.u.shape[0] == 1 and self.y.shape[0] > 1:
            self.u = self.u.T
        if self.y.shape[0] == 1 and self.u.shape[0] > 1:
            self.y = self.y.T
        if self.u.shape[0] != self.y.shape[0]:
            raise DimensionError("inputs and outputs must cover the same steps")

    @property
    def n_steps(self):
        """Number of recorded samples (k = 0..n_steps-1)."""
        return self.u.shape[0]


@dataclass
class TestSuite:
    """A bag of test cases sharing one sample time."""

    __test__ = False  # not a pytest class despite the name

    cases: list
    dt: float

    def __len__(self):
        return len(self.cases)

    def __iter__(self):
        return iter(self.cases)

    def extend(self, other):
        if abs(other.dt - self.dt) > 1e-15:
            raise DimensionError("cannot merge suites with different sample times")
        return TestSuite(self.cases + list(other.cases), self.dt)


# ---------------------------------------------------------------------------
# file formats


def save_model(sys, path):
    """Write the model as JSON (matrices row-major, zonotopes with effective generators)."""
    data = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "A": sys.A.tolist(),
        "B": sys.B.tolist(),
        "C": sys.C.tolist(),
        "D": sys.D.tolist(),
        "E": sys.E.tolist(),
        "F": sys.F.tolist(),
        "W": sys.W.to_dict(),
        "V": sys.V.to_dict(),
        "timing": "continuous" if sys.dt is None else {"discrete": sys.dt},
        "w_labels": sys.w_labels,
        "v_labels": sys.v_labels,
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)


def load_model(path):
    with open(path) as fh:
        data = json.load(fh)
    timing = data.get("timing", "continuous")
    dt = None if timing == "continuous" else float(timing["discrete"])
    return LtiSystem(
        np.asarray(data["A"], dtype=float),
        np.asarray(data["B"], dtype=float),
        np.asarray(data["C"], dtype=float),
        np.asarray(data["D"], dtype=float),
        np.asarray(data["E"], dtype=float),
        np.asarray(data["F"], dtype=float),
        Zonotope.from_dict(data["W"]),
        Zonotope.from_dict(data["V"]),
        dt=dt,
        w_labels=data.get("w_labels"),
        v_labels=data.get("v_labels"),
    )


def _case_paths(directory, index):
    base = os.path.join(directory, "case_%03d" % index)
    return base + ".csv", base + ".x0.json"


def save_suite(suite, directory):
    """One CSV per case (k, u_1.., y_1..) plus an x0 sidecar JSON."""
    os.makedirs(directory, exist_ok=True)
    for i, case in enumerate(suite.cases):
        csv_path, sidecar_path = _case_paths(directory, i)
        steps = case.n_steps
        table = np.column_stack([np.arange(steps), case.u, case.y])
        m, q = case.u.shape[1], case.y.shape[1]
        header = ",".join(
            ["k"]
            + ["u_%d" % (j + 1) for j in range(m)]
            + ["y_%d" % (j + 1) for j in range(q)]
        )
        np.savetxt(csv_path, table, delimiter=",", header=header, comments="", fmt="%.17g")
        sidecar = {
            "schema_version": SUITE_SCHEMA_VERSION,
            "x0": case.x0.tolist(),
            "name": case.name,
        }
        sidecar.update(case.extra)
        with open(sidecar_path, "w") as fh:
            json.dump(sidecar, fh)
    meta = {"schema_version": SUITE_SCHEMA_VERSION, "dt": suite.dt, "n_cases": len(suite.cases)}
    with open(os.path.join(directory, "suite.json"), "w") as fh:
        json.dump(meta, fh)


def load_suite(directory):
    with open(os.path.join(directory, "suite.json")) as fh:
        meta = json.load(fh)
    cases = []
    for i in range(meta["n_cases"]):
        csv_path, sidecar_path = _case_paths(directory, i)
        with open(csv_path) as fh:
            header = fh.readline().strip().split(",")
        table = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        m = sum(1 for h in header if h.startswith("u_"))
        q = sum(1 for h in header if h.startswith("y_"))
        with open(sidecar_path) as fh:
            sidecar = json.load(fh)
        extra = {
            k: v
            for k, v in sidecar.items()
            if k not in ("schema_version", "x0", "name")
        }
        cases.append(
            TestCase(
                np.asarray(sidecar["x0"], dtype=float),
                table[:, 1 : 1 + m],
                table[:, 1 + m : 1 + m + q],
                name=sidecar.get("name", ""),
                extra=extra,
            )
        )
    return TestSuite(cases, float(meta["dt"]))
