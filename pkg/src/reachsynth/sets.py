"""Zonotope set algebra: Minkowski arithmetic, halfspace conversion, containment.

A zonotope is stored as a template generator matrix together with nonnegative
per-generator scale factors, so that the represented set is

    Z = { c + sum_h beta_h * scales_h * generators[:, h] : |beta_h| <= 1 }.

Keeping the template and the scales separate is what lets identification treat
the scales as decision variables while the facet geometry stays fixed.
"""

import itertools
import json

import numpy as np
from scipy.optimize import linprog

from .errors import DegenerateZonotopeError, DimensionError

DEFAULT_TOL = 1e-9
# Facet candidates whose generalized cross product is shorter than this are
# treated as degenerate selections and skipped.
CROSS_DEGENERACY_TOL = 1e-12

# Above this many basis patterns the exact enumeration solver hands over to
# scipy's LP solver (same program, slower but unconditional).
_ENUM_PATTERN_CAP = 20000


class Interval:
    """Axis-aligned box given by lower/upper bound vectors."""

    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise DimensionError("interval bounds must be vectors of equal length")
        if np.any(self.lower > self.upper + 1e-15):
            raise ValueError("interval lower bound exceeds upper bound")

    @property
    def dim(self):
        return self.lower.size

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def radius(self):
        """Half side lengths."""
        return 0.5 * (self.upper - self.lower)

    def width(self):
        return self.upper - self.lower

    def contains(self, x, tol=DEFAULT_TOL):
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) & np.all(x <= self.upper + tol))

    def contains_interval(self, other, tol=DEFAULT_TOL):
        return bool(
            np.all(other.lower >= self.lower - tol)
            and np.all(other.upper <= self.upper + tol)
        )

    def inflate(self, amount):
        return Interval(self.lower - amount, self.upper + amount)

    def to_zonotope(self):
        return Zonotope(self.center, np.diag(self.radius))

    def __repr__(self):
        return "Interval(%s, %s)" % (self.lower.tolist(), self.upper.tolist())


class Polytope:
    """Halfspace intersection {x : normals @ x <= offsets}."""

    def __init__(self, normals, offsets):
        self.normals = np.atleast_2d(np.asarray(normals, dtype=float))
        self.offsets = np.atleast_1d(np.asarray(offsets, dtype=float))
        if self.normals.shape[0] != self.offsets.size:
            raise DimensionError("one offset per halfspace row required")

    @property
    def dim(self):
        return self.normals.shape[1]

    @property
    def n_halfspaces(self):
        return self.normals.shape[0]

    @classmethod
    def from_box(cls, lower, upper):
        iv = Interval(lower, upper)
        n = iv.dim
        eye = np.eye(n)
        return cls(np.vstack([eye, -eye]), np.concatenate([iv.upper, -iv.lower]))

    def margin(self, x):
        """Largest halfspace violation of x (negative means strictly inside)."""
        return float(np.max(self.normals @ np.asarray(x, dtype=float) - self.offsets))

    def contains(self, x, tol=DEFAULT_TOL):
        return self.margin(x) <= tol

    def __repr__(self):
        return "Polytope(%d halfspaces in R^%d)" % (self.n_halfspaces, self.dim)


class Zonotope:
    def __init__(self, center, generators=None, scales=None):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        if self.center.ndim != 1:
            raise DimensionError("center must be a vector")
        n = self.center.size
        if generators is None:
            generators = np.zeros((n, 0))
        self.generators = np.asarray(generators, dtype=float)
        if self.generators.ndim == 1:
            self.generators = self.generators.reshape(n, -1)
        if self.generators.shape[0] != n:
            raise DimensionError(
                "generator matrix must have %d rows, got %r"
                % (n, self.generators.shape)
            )
        p = self.generators.shape[1]
        if scales is None:
            scales = np.ones(p)
        self.scales = np.atleast_1d(np.asarray(scales, dtype=float))
        if self.scales.shape != (p,):
            raise DimensionError("one scale per generator column required")
        if np.any(self.scales < 0):
            raise ValueError("generator scales must be nonnegative")

    @classmethod
    def from_box(cls, lower, upper):
        return Interval(lower, upper).to_zonotope()

    @classmethod
    def point(cls, center):
        return cls(center)

    @property
    def dim(self):
        return self.center.size

    @property
    def n_generators(self):
        return self.generators.shape[1]

    @property
    def generators_effective(self):
        """Template columns multiplied by their scales."""
        return self.generators * self.scales

    def compact(self, tol=0.0):
        """Drop generator columns with (near) zero effect."""
        g = self.generators_effective
        keep = np.abs(g).sum(axis=0) > tol
        return Zonotope(self.center, self.generators[:, keep], self.scales[keep])

    def __add__(self, other):
        return minkowski_sum(self, other)

    def map(self, matrix):
        return linear_map(matrix, self)

    def interval_hull(self):
        return interval_hull(self)

    def znorm(self):
        return znorm(self)

    def contains_point(self, x, tol=DEFAULT_TOL):
        return contains_point(self, x, tol=tol)

    def sample(self, rng, count, vertex_frac=0.0):
        return sample(self, rng, count, vertex_frac=vertex_frac)

    def to_dict(self):
        return {
            "center": self.center.tolist(),
            "generators": [col.tolist() for col in self.generators_effective.T],
        }

    @classmethod
    def from_dict(cls, data):
        center = np.asarray(data["center"], dtype=float)
        cols = data.get("generators", [])
        if cols:
            g = np.asarray(cols, dtype=float).T
        else:
            g = np.zeros((center.size, 0))
        return cls(center, g)

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def __repr__(self):
        return "Zonotope(dim=%d, generators=%d)" % (self.dim, self.n_generators)


def minkowski_sum(z1, z2):
    """Minkowski sum: centers add, generator lists concatenate."""
    if z1.dim != z2.dim:
        raise DimensionError("Minkowski sum of sets with different dimensions")
    return Zonotope(
        z1.center + z2.center,
        np.hstack([z1.generators, z2.generators]),
        np.concatenate([z1.scales, z2.scales]),
    )


def linear_map(matrix, z):
    """Image of the zonotope under x -> matrix @ x."""
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    if m.shape[1] != z.dim:
        raise DimensionError(
            "matrix with %d columns applied to %d-dim zonotope" % (m.shape[1], z.dim)
        )
    return Zonotope(m @ z.center, m @ z.generators, z.scales.copy())


def cartesian_product(z1, z2):
    """Stack two zonotopes into one on the product space (block-diagonal generators)."""
    g = np.block(
        [
            [z1.generators, np.zeros((z1.dim, z2.n_generators))],
            [np.zeros((z2.dim, z1.n_generators)), z2.generators],
        ]
    )
    return Zonotope(
        np.concatenate([z1.center, z2.center]),
        g,
        np.concatenate([z1.scales, z2.scales]),
    )


def interval_hull(z):
    """Tightest axis-aligned box: center +- sum of |effective generator| columns."""
    dg = np.abs(z.generators_effective).sum(axis=1)
    return Interval(z.center - dg, z.center + dg)


def znorm(z):
    """Sum of the side lengths of the interval hull."""
    return float(2.0 * np.abs(z.generators_effective).sum())


def cross_nx(h):
    """Generalized cross product of the n x (n-1) matrix h.

    Component j is (-1)**(j+1) times the determinant of h with row j removed;
    the result is orthogonal to every column of h.  For n = 1 the (empty)
    matrix maps to [1].
    """
    h = np.asarray(h, dtype=float)
    if h.ndim == 1:
        h = h.reshape(-1, 1)
    n = h.shape[0]
    if h.shape != (n, n - 1):
        raise DimensionError("cross_nx expects an n x (n-1) matrix, got %r" % (h.shape,))
    if n == 1:
        return np.array([1.0])
    if n == 2:
        return np.array([h[1, 0], -h[0, 0]])
    out = np.empty(n)
    rows = np.arange(n)
    for j in range(n):
        out[j] = (-1.0) ** j * np.linalg.det(h[rows != j, :])
    return out


def halfspace_rep(z):
    """Exact halfspace representation of a zonotope.

    Every selection of dim-1 generator columns contributes a facet-normal
    candidate via the generalized cross product, giving the polytope
    N x <= d with the positive and mirrored negative halves stacked.
    Selections with (near) zero cross product are skipped; if no selection
    survives, the zonotope has no full-dimensional description and a
    DegenerateZonotopeError is raised.
    """
    n = z.dim
    g = z.generators_effective
    p = g.shape[1]
    if n == 1:
        # Single choose-nothing selection with normal [1].
        normals_pos = np.ones((1, 1))
    elif n == 2:
        # Normal of column (g1, g2) is (g2, -g1); vectorized over columns.
        cand = np.column_stack([g[1, :], -g[0, :]])
        norms = np.linalg.norm(cand, axis=1)
        keep = norms > CROSS_DEGENERACY_TOL
        if not np.any(keep):
            raise DegenerateZonotopeError(
                "no nondegenerate facet normals (flat or point zonotope)"
            )
        normals_pos = cand[keep] / norms[keep, None]
    else:
        if p < n - 1:
            raise DegenerateZonotopeError(
                "need at least dim-1 generators for a facet description"
            )
        rows = []
        for comb in itertools.combinations(range(p), n - 1):
            v = cross_nx(g[:, comb])
            nv = np.linalg.norm(v)
            if nv <= CROSS_DEGENERACY_TOL:
                continue
            rows.append(v / nv)
        if not rows:
            raise DegenerateZonotopeError(
                "no nondegenerate facet normals (flat or point zonotope)"
            )
        normals_pos = np.vstack(rows)
    dd = np.abs(normals_pos @ g).sum(axis=1)
    nc = normals_pos @ z.center
    normals = np.vstack([normals_pos, -normals_pos])
    offsets = np.concatenate([nc + dd, -nc + dd])
    return Polytope(normals, offsets)


def _min_inf_norm_enum(g, y_batch):
    """Exact min ||beta||_inf with g @ beta = y, per column of y_batch.

    Enumerates the basis patterns of the equivalent linear program (dim-1
    coordinates free, the rest pinned at +-t) and keeps the smallest valid t.
    Returns +inf for unreachable right-hand sides.  Assumes g has full row
    rank; callers reduce rank-deficient instances first.
    """
    n, p = g.shape
    m = y_batch.shape[1]
    best = np.full(m, np.inf)
    if p == 0:
        ok = np.max(np.abs(y_batch), axis=0) <= 1e-12
        best[ok] = 0.0
        return best
    sign_patterns = list(itertools.product((-1.0, 1.0), repeat=p - n + 1))
    for free in itertools.combinations(range(p), n - 1):
        pinned = [j for j in range(p) if j not in free]
        g_free = g[:, free]
        g_pin = g[:, pinned]
        for signs in sign_patterns:
            a = np.column_stack([g_free, g_pin @ np.asarray(signs)])
            if abs(np.linalg.det(a)) < 1e-14:
                continue
            sol = np.linalg.solve(a, y_batch)
            t = sol[-1, :]
            beta_free = sol[:-1, :]
            valid = t >= -1e-12
            if beta_free.size:
                valid &= np.all(
                    np.abs(beta_free) <= t[None, :] * (1 + 1e-10) + 1e-12, axis=0
                )
            better = valid & (t < best)
            best[better] = t[better]
    return np.maximum(best, 0.0)


def _min_inf_norm_lp(g, y):
    """scipy fallback for one right-hand side of the min-infinity-norm program."""
    n, p = g.shape
    # variables [beta (p), t]; minimize t s.t. g beta = y, -t <= beta_i <= t
    c = np.zeros(p + 1)
    c[-1] = 1.0
    a_eq = np.hstack([g, np.zeros((n, 1))])
    a_ub = np.block(
        [
            [np.eye(p), -np.ones((p, 1))],
            [-np.eye(p), -np.ones((p, 1))],
        ]
    )
    b_ub = np.zeros(2 * p)
    res = linprog(
        c,
        A_ub=a_ub,
        b_ub=b_ub,
        A_eq=a_eq,
        b_eq=y,
        bounds=[(None, None)] * p + [(0, None)],
        method="highs",
    )
    if not res.success:
        return np.inf
    return float(res.x[-1])


def beta_margin(z, points):
    """Smallest coefficient bound needed to reach each point.

    Returns, per query point, min ||beta||_inf subject to
    c + G_eff @ beta = point (infinity if the point is outside the generator
    span).  Membership at tolerance tol corresponds to a value <= 1 + tol.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    single = np.asarray(points).ndim == 1
    if pts.shape[1] != z.dim:
        raise DimensionError("query points must have the zonotope dimension")
    zc = z.compact(tol=1e-15)
    g = zc.generators_effective
    y = (pts - zc.center).T  # (n, M)
    n, p = g.shape
    rank = np.linalg.matrix_rank(g) if p else 0
    out = np.full(pts.shape[0], np.inf)
    if p == 0:
        reachable = np.max(np.abs(y), axis=0) <= 1e-12 if n else np.ones(0, bool)
        out[reachable] = 0.0
        return out[0] if single else out
    if rank < n:
        # Work inside the generator span; off-span right-hand sides stay inf.
        u, s, _ = np.linalg.svd(g, full_matrices=True)
        basis = u[:, :rank]
        resid = y - basis @ (basis.T @ y)
        on_span = np.linalg.norm(resid, axis=0) <= 1e-9 * (1 + np.linalg.norm(y, axis=0))
        if np.any(on_span):
            sub = beta_margin(
                Zonotope(np.zeros(rank), basis.T @ g),
                (basis.T @ y[:, on_span]).T,
            )
            out[on_span] = np.atleast_1d(sub)
        return out[0] if single else out
    n_patterns = _pattern_count(p, n)
    if n_patterns <= _ENUM_PATTERN_CAP:
        out = _min_inf_norm_enum(g, y)
        missing = ~np.isfinite(out)
        for idx in np.nonzero(missing)[0]:
            out[idx] = _min_inf_norm_lp(g, y[:, idx])
    else:
        for idx in range(pts.shape[0]):
            out[idx] = _min_inf_norm_lp(g, y[:, idx])
    return out[0] if single else out


def _pattern_count(p, n):
    from math import comb

    return comb(p, n - 1) * 2 ** (p - n + 1)


def contains_point(z, x, tol=DEFAULT_TOL):
    """Membership test with the facet route in low dimension, coefficients otherwise.

    Up to dimension 3 the halfspace representation is used (margin in length
    units); in higher dimension or for flat zonotopes membership is decided by
    the coefficient feasibility value (scale units, threshold 1 + tol).
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (z.dim,):
        raise DimensionError("point/zonotope dimension mismatch")
    if z.dim <= 3:
        try:
            poly = halfspace_rep(z)
        except DegenerateZonotopeError:
            pass
        else:
            return bool(poly.margin(x) <= tol)
    return bool(beta_margin(z, x) <= 1.0 + tol)


def point_margin_batch(z, points):
    """Violation margins of many points against one zonotope (degenerate-safe).

    For full-dimensional zonotopes this is the halfspace margin max(Nx - d),
    vectorized over the query points.  For flat zonotopes the off-span
    residual (infinity norm) is combined with the margin inside the span, so a
    positive value always witnesses non-membership in length units.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != z.dim:
        raise DimensionError("query points must have the zonotope dimension")
    zc = z.compact(tol=1e-15)
    g = zc.generators_effective
    n, p = g.shape
    diff = pts - zc.center
    if p == 0:
        return np.max(np.abs(diff), axis=1) if n else np.zeros(pts.shape[0])
    rank = np.linalg.matrix_rank(g)
    if rank == n:
        poly = halfspace_rep(zc)
        return np.max(pts @ poly.normals.T - poly.offsets, axis=1)
    u = np.linalg.svd(g, full_matrices=True)[0]
    basis, null = u[:, :rank], u[:, rank:]
    off = np.max(np.abs(diff @ null), axis=1)
    inside = point_margin_batch(
        Zonotope(basis.T @ zc.center, basis.T @ g), pts @ basis
    )
    return np.maximum(off, inside)


def point_margin(z, x):
    """Scalar wrapper of point_margin_batch for a single query point."""
    return float(point_margin_batch(z, np.asarray(x, dtype=float)[None, :])[0])


def support_margin(z, poly):
    """max over halfspaces of (support of z in direction n) - offset."""
    if poly.dim != z.dim:
        raise DimensionError("polytope/zonotope dimension mismatch")
    g = z.generators_effective
    vals = poly.normals @ z.center + np.abs(poly.normals @ g).sum(axis=1)
    return float(np.max(vals - poly.offsets))


def zonotope_in_polytope(z, poly, tol=DEFAULT_TOL):
    """Containment via support values: n @ c + sum_h |n @ g_h| <= d per halfspace."""
    return bool(support_margin(z, poly) <= tol)


def sample(z, rng, count, vertex_frac=0.0):
    """Draw member points: uniform coefficient draws, a fraction at +-1 vertices."""
    p = z.n_generators
    beta = rng.uniform(-1.0, 1.0, size=(count, p))
    if vertex_frac > 0 and count:
        n_vertex = int(np.ceil(vertex_frac * count))
        idx = rng.choice(count, size=n_vertex, replace=False)
        beta[idx] = rng.choice([-1.0, 1.0], size=(n_vertex, p))
    return z.center + beta @ z.generators_effective.T
