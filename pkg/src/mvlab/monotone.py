"""Maximal monotone operators with closed-form resolvents.

Operators are built from a small catalogue (zero map, normal cones of convex
sets, subdifferentials of convex functions, monotone 1-D graphs, plus scaling
and translation).  Every entry knows its resolvent ``(I + alpha A)^{-1}``, so the
Yosida approximation ``(x - J^alpha x) / alpha`` and the Moreau envelope follow.

All point arguments are arrays of shape ``(d,)`` or ``(n, d)``; one-dimensional
operators also accept plain scalars.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

EXACT_TOL = 1e-12
ITER_TOL = 1e-10


class DomainError(ValueError):
    """Point lies outside the domain of an operator."""


def _points(x, d: int):
    """Return ``(pts, restore)`` with pts of shape (n, d)."""
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        if d != 1:
            raise ValueError(f"scalar point given to a {d}-dimensional operator")
        return a.reshape(1, 1), lambda r: r.reshape(())
    if a.ndim == 1:
        if a.shape[0] != d:
            raise ValueError(f"point has dimension {a.shape[0]}, expected {d}")
        return a.reshape(1, d), lambda r: r.reshape(d)
    if a.shape[-1] != d:
        raise ValueError(f"points have dimension {a.shape[-1]}, expected {d}")
    return a.reshape(-1, d), lambda r: r.reshape(a.shape)


def _norm(v):
    return np.sqrt(np.sum(v * v, axis=-1))


# ---------------------------------------------------------------- convex sets

class ConvexSet:
    """Closed convex set with nonempty interior."""

    dim: int

    def project(self, pts: np.ndarray) -> np.ndarray:
        """Metric projection of an (n, d) array."""
        raise NotImplementedError

    def witness(self) -> np.ndarray:
        """A point strictly inside the set."""
        raise NotImplementedError

    def translate(self, v) -> "ConvexSet":
        raise NotImplementedError

    def normal_cone_contains(self, x, y, tol=ITER_TOL) -> np.ndarray:
        """Decide ``y in N_C(x)`` row-wise, assuming ``x in C``."""
        raise NotImplementedError

    def distance(self, pts) -> np.ndarray:
        p = np.atleast_2d(np.asarray(pts, dtype=float))
        return _norm(p - self.project(p))

    def contains(self, pts, tol: float = 0.0) -> np.ndarray:
        return self.distance(pts) <= tol

    def is_interior(self, pt, margin: float = 1e-9) -> bool:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class HalfSpace(ConvexSet):
    """``{x : <normal, x> <= offset}``."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.atleast_1d(np.asarray(self.normal, dtype=float))
        if not np.all(np.isfinite(n)) or np.linalg.norm(n) == 0:
            raise ValueError("half-space normal must be finite and nonzero")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def dim(self):
        return self.normal.shape[0]

    def project(self, pts):
        excess = np.maximum(pts @ self.normal - self.offset, 0.0)
        return pts - np.outer(excess / (self.normal @ self.normal), self.normal)

    def witness(self):
        return self.normal * (self.offset - 1.0) / (self.normal @ self.normal)

    def translate(self, v):
        v = np.asarray(v, dtype=float)
        return HalfSpace(self.normal, self.offset + self.normal @ v)

    def normal_cone_contains(self, x, y, tol=ITER_TOL):
        x, y = np.atleast_2d(x), np.atleast_2d(y)
        nn = self.normal / np.linalg.norm(self.normal)
        active = np.abs(x @ self.normal - self.offset) <= tol * (1 + abs(self.offset))
        along = y @ nn
        perp = _norm(y - np.outer(along, nn))
        return np.where(active, (along >= -tol) & (perp <= tol), _norm(y) <= tol)

    def is_interior(self, pt, margin=1e-9):
        return float(np.asarray(pt, dtype=float) @ self.normal) < self.offset - margin

    def to_dict(self):
        return {"kind": "halfspace", "normal": self.normal.tolist(), "offset": self.offset}


@dataclass(frozen=True, eq=False)
class Box(ConvexSet):
    """Coordinate box; bounds may be infinite."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        lo, hi = np.broadcast_arrays(lo, hi)
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo >= hi):
            raise ValueError("box needs lower < upper in every coordinate")
        object.__setattr__(self, "lower", lo.copy())
        object.__setattr__(self, "upper", hi.copy())

    @property
    def dim(self):
        return self.lower.shape[0]

    def project(self, pts):
        return np.minimum(np.maximum(pts, self.lower), self.upper)

    def witness(self):
        lo, hi = self.lower, self.upper
        w = np.zeros_like(lo)
        both = np.isfinite(lo) & np.isfinite(hi)
        w[both] = 0.5 * (lo[both] + hi[both])
        only_lo = np.isfinite(lo) & ~np.isfinite(hi)
        w[only_lo] = lo[only_lo] + 1.0
        only_hi = ~np.isfinite(lo) & np.isfinite(hi)
        w[only_hi] = hi[only_hi] - 1.0
        return w

    def translate(self, v):
        v = np.asarray(v, dtype=float)
        return Box(self.lower + v, self.upper + v)

    def normal_cone_contains(self, x, y, tol=ITER_TOL):
        x, y = np.atleast_2d(x), np.atleast_2d(y)
        at_lo = np.abs(x - self.lower) <= tol * (1 + np.abs(np.where(np.isfinite(self.lower), self.lower, 0)))
        at_hi = np.abs(x - self.upper) <= tol * (1 + np.abs(np.where(np.isfinite(self.upper), self.upper, 0)))
        ok = np.where(at_lo & at_hi, True,
                      np.where(at_lo, y <= tol, np.where(at_hi, y >= -tol, np.abs(y) <= tol)))
        return np.all(ok, axis=1)

    def is_interior(self, pt, margin=1e-9):
        p = np.asarray(pt, dtype=float)
        return bool(np.all(p > self.lower + margin) and np.all(p < self.upper - margin))

    def to_dict(self):
        return {"kind": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}


@dataclass(frozen=True, eq=False)
class Ball(ConvexSet):
    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        if not self.radius > 0 or not math.isfinite(self.radius):
            raise ValueError("ball radius must be positive and finite")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self):
        return self.center.shape[0]

    def project(self, pts):
        v = pts - self.center
        r = _norm(v)
        scale = np.where(r > self.radius, self.radius / np.where(r > 0, r, 1.0), 1.0)
        out = self.center + v * scale[:, None]
        # rounding can leave the rescaled point a few ulp outside; pull it in
        for _ in range(8):
            over = _norm(out - self.center) > self.radius
            if not np.any(over):
                break
            scale = np.where(over, scale * (1 - 2.0 ** -52), scale)
            out = self.center + v * scale[:, None]
        return out

    def witness(self):
        return self.center.copy()

    def translate(self, v):
        return Ball(self.center + np.asarray(v, dtype=float), self.radius)

    def normal_cone_contains(self, x, y, tol=ITER_TOL):
        x, y = np.atleast_2d(x), np.atleast_2d(y)
        v = x - self.center
        r = _norm(v)
        on = np.abs(r - self.radius) <= tol * (1 + self.radius)
        u = v / np.where(r > 0, r, 1.0)[:, None]
        along = np.sum(y * u, axis=1)
        perp = _norm(y - along[:, None] * u)
        return np.where(on, (along >= -tol) & (perp <= tol), _norm(y) <= tol)

    def is_interior(self, pt, margin=1e-9):
        return float(np.linalg.norm(np.asarray(pt, dtype=float) - self.center)) < self.radius - margin

    def to_dict(self):
        return {"kind": "ball", "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True, eq=False)
class Polyhedron(ConvexSet):
    """Intersection of half-spaces ``normals @ x <= offsets``.

    Projection is computed by Dykstra's alternating projections; a strictly
    interior ``witness`` must be supplied.
    """

    normals: np.ndarray
    offsets: np.ndarray
    witness_point: np.ndarray
    max_iter: int = 20000

    def __post_init__(self):
        N = np.atleast_2d(np.asarray(self.normals, dtype=float))
        c = np.atleast_1d(np.asarray(self.offsets, dtype=float))
        w = np.atleast_1d(np.asarray(self.witness_point, dtype=float))
        if N.shape[0] != c.shape[0] or N.shape[1] != w.shape[0]:
            raise ValueError("polyhedron shapes disagree")
        if np.any(np.linalg.norm(N, axis=1) == 0):
            raise ValueError("zero normal in polyhedron")
        if not np.all(N @ w < c):
            raise ValueError("witness point is not strictly interior")
        object.__setattr__(self, "normals", N)
        object.__setattr__(self, "offsets", c)
        object.__setattr__(self, "witness_point", w)

    @property
    def dim(self):
        return self.normals.shape[1]

    def _faces(self):
        return [HalfSpace(n, c) for n, c in zip(self.normals, self.offsets)]

    def project(self, pts):
        faces = self._faces()
        x = pts.copy()
        incr = [np.zeros_like(x) for _ in faces]
        for _ in range(self.max_iter):
            x_prev = x
            for i, f in enumerate(faces):
                y = f.project(x + incr[i])
                incr[i] = x + incr[i] - y
                x = y
            if np.max(np.abs(x - x_prev), initial=0.0) <= 1e-15 * (1 + np.max(np.abs(x), initial=0.0)):
                break
        return x

    def witness(self):
        return self.witness_point.copy()

    def translate(self, v):
        v = np.asarray(v, dtype=float)
        return Polyhedron(self.normals, self.offsets + self.normals @ v, self.witness_point + v, self.max_iter)

    def normal_cone_contains(self, x, y, tol=ITER_TOL):
        # y in N_C(x)  <=>  proj(x + y) == x
        x, y = np.atleast_2d(x), np.atleast_2d(y)
        return _norm(self.project(x + y) - x) <= tol * (1 + _norm(y))

    def is_interior(self, pt, margin=1e-9):
        return bool(np.all(self.normals @ np.asarray(pt, dtype=float) < self.offsets - margin))

    def to_dict(self):
        return {"kind": "polyhedron", "normals": self.normals.tolist(),
                "offsets": self.offsets.tolist(), "witness": self.witness_point.tolist()}


def halfline(lower: float = 0.0) -> Box:
    """The interval ``[lower, inf)`` in one dimension."""
    return Box([lower], [np.inf])


def check_idempotent(C: ConvexSet, pts, tol=EXACT_TOL) -> bool:
    p = C.project(np.atleast_2d(pts))
    return bool(np.all(_norm(C.project(p) - p) <= tol * (1 + _norm(p))))


# ------------------------------------------------------------ convex functions

class ConvexFn:
    """Proper lsc convex function with a proximal oracle."""

    dim: int
    closed_form_prox = True

    def value(self, pts) -> np.ndarray:
        raise NotImplementedError

    def prox(self, pts, alpha):
        """argmin_y f(y) + |y - x|^2 / (2 alpha), row-wise on (n, d)."""
        raise NotImplementedError

    @property
    def domain(self) -> ConvexSet | None:
        return None

    def subdiff_contains(self, x, y, tol=ITER_TOL) -> np.ndarray:
        # y in df(x)  <=>  x = prox_f(x + y)
        x, y = np.atleast_2d(x), np.atleast_2d(y)
        return _norm(self.prox(x + y, 1.0) - x) <= tol * (1 + _norm(y))

    def subdiff_min_norm(self, x) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class AbsNorm(ConvexFn):
    """``weight * |x|`` with the Euclidean norm."""

    weight: float = 1.0
    dim: int = 1

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError("weight must be positive")

    def value(self, pts):
        return self.weight * _norm(np.atleast_2d(pts))

    def prox(self, pts, alpha):
        r = _norm(pts)
        t = alpha * self.weight
        shrink = np.maximum(r - t, 0.0)
        if self.dim == 1:
            return np.sign(pts) * shrink[:, None]
        return pts * (shrink / np.where(r > 0, r, 1.0))[:, None]

    def subdiff_contains(self, x, y, tol=ITER_TOL):
        x, y = np.atleast_2d(x), np.atleast_2d(y)
        r = _norm(x)
        unit = x / np.where(r > 0, r, 1.0)[:, None]
        at0 = r <= tol
        return np.where(at0, _norm(y) <= self.weight + tol,
                        _norm(y - self.weight * unit) <= tol * (1 + self.weight))

    def subdiff_min_norm(self, x):
        x = np.atleast_2d(x)
        r = _norm(x)
        return self.weight * x / np.where(r > 0, r, 1.0)[:, None]

    def to_dict(self):
        return {"kind": "abs", "weight": self.weight, "dim": self.dim}


@dataclass(frozen=True, eq=False)
class Quadratic(ConvexFn):
    """``0.5 <Q x, x>`` with Q symmetric positive semidefinite."""

    Q: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if Q.shape[0] != Q.shape[1] or not np.allclose(Q, Q.T):
            raise ValueError("Q must be square and symmetric")
        if np.min(np.linalg.eigvalsh(Q)) < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        object.__setattr__(self, "Q", Q)

    @property
    def dim(self):
        return self.Q.shape[0]

    def value(self, pts):
        p = np.atleast_2d(pts)
        return 0.5 * np.sum((p @ self.Q) * p, axis=1)

    def prox(self, pts, alpha):
        if self.dim == 1:
            return pts / (1.0 + alpha * self.Q[0, 0])
        M = np.eye(self.dim) + alpha * self.Q
        return np.linalg.solve(M, pts.T).T

    def subdiff_contains(self, x, y, tol=ITER_TOL):
        x, y = np.atleast_2d(x), np.atleast_2d(y)
        g = x @ self.Q
        return _norm(y - g) <= tol * (1 + _norm(g))

    def subdiff_min_norm(self, x):
        return np.atleast_2d(x) @ self.Q

    def to_dict(self):
        return {"kind": "quadratic", "Q": self.Q.tolist()}


@dataclass(frozen=True, eq=False)
class Indicator(ConvexFn):
    """0 on a convex set, +inf outside."""

    set: ConvexSet

    @property
    def dim(self):
        return self.set.dim

    @property
    def domain(self):
        return self.set

    def value(self, pts):
        p = np.atleast_2d(pts)
        return np.where(self.set.distance(p) <= EXACT_TOL, 0.0, np.inf)

    def prox(self, pts, alpha):
        return self.set.project(pts)

    def subdiff_contains(self, x, y, tol=ITER_TOL):
        return self.set.normal_cone_contains(x, y, tol)

    def subdiff_min_norm(self, x):
        return np.zeros_like(np.atleast_2d(x))

    def to_dict(self):
        return {"kind": "indicator", "set": self.set.to_dict()}


@dataclass(frozen=True, eq=False)
class SumFn(ConvexFn):
    """Finite sum of catalogue functions.

    The prox is computed by the Dykstra-like proximal splitting iteration
    (Bauschke-Combettes), nested pairwise for more than two terms.
    """

    terms: tuple
    max_iter: int = 100000
    closed_form_prox = False

    def __post_init__(self):
        terms = tuple(self.terms)
        if len(terms) < 1:
            raise ValueError("empty sum")
        if len({t.dim for t in terms}) != 1:
            raise ValueError("summands have different dimensions")
        sets = [t.domain for t in terms if t.domain is not None]
        if len(sets) > 1:
            raise ValueError("at most one summand may restrict the domain")
        object.__setattr__(self, "terms", terms)

    @property
    def dim(self):
        return self.terms[0].dim

    @property
    def domain(self):
        for t in self.terms:
            if t.domain is not None:
                return t.domain
        return None

    def value(self, pts):
        return sum(t.value(pts) for t in self.terms)

    def prox(self, pts, alpha):
        if len(self.terms) == 1:
            return self.terms[0].prox(pts, alpha)
        f = self.terms[0]
        g = SumFn(self.terms[1:], self.max_iter) if len(self.terms) > 2 else self.terms[1]
        x = pts.copy()
        p = np.zeros_like(x)
        q = np.zeros_like(x)
        for _ in range(self.max_iter):
            y = g.prox(x + p, alpha)
            p_new = x + p - y
            x_new = f.prox(y + q, alpha)
            q_new = y + q - x_new
            # x can stall for a sweep while the dual terms still move
            moved = max(np.max(np.abs(a - b), initial=0.0) for a, b in ((x_new, x), (p_new, p), (q_new, q)))
            scale = 1 + max(np.max(np.abs(a), initial=0.0) for a in (x_new, p_new, q_new))
            x, p, q = x_new, p_new, q_new
            if moved <= 1e-15 * scale:
                break
        return x

    def subdiff_min_norm(self, x):
        # least-norm element of the Minkowski sum of the term subdifferentials
        x = np.atleast_2d(x)
        return np.array([_sum_min_norm(self, xi) for xi in x])

    def to_dict(self):
        return {"kind": "sum", "terms": [t.to_dict() for t in self.terms]}


def _sum_min_norm(fn: SumFn, x):
    d = fn.dim
    free = np.zeros(d)
    pieces = []  # (kind, data)
    for t in fn.terms:
        if isinstance(t, AbsNorm) and np.linalg.norm(x) <= EXACT_TOL:
            pieces.append(("ball", t.weight))
        elif isinstance(t, Indicator):
            pieces.append(("cone", t.set))
        else:
            free = free + t.subdiff_min_norm(x)[0]
    if not pieces:
        return free
    # minimize |free + sum of piece elements| over the pieces, cones via projection
    def project_piece(kind, data, v):
        if kind == "ball":
            r = np.linalg.norm(v)
            return v if r <= data else v * (data / r)
        return _cone_project(data, x, v)

    elems = [np.zeros(d) for _ in pieces]
    for _ in range(5000):
        old = [e.copy() for e in elems]
        for i, (kind, data) in enumerate(pieces):
            rest = free + sum(elems[j] for j in range(len(pieces)) if j != i)
            elems[i] = project_piece(kind, data, -rest)
        if max(np.max(np.abs(e - o)) for e, o in zip(elems, old)) <= 1e-15:
            break
    return free + sum(elems)


def _cone_project(C: ConvexSet, x, v):
    """Projection of v onto the normal cone N_C(x) (Moreau decomposition)."""
    # N_C(x) is the polar of the tangent cone; for small steps
    # proj_C(x + s v) = x + s proj_T(v) on the polyhedral sets of the catalogue.
    s = 1e-6 / (1.0 + np.linalg.norm(v))
    tangent = (C.project((x + s * v)[None, :])[0] - x) / s
    return v - tangent


@dataclass(frozen=True, eq=False)
class Primitive1D(ConvexFn):
    """Convex function on R whose subdifferential is a ``Graph1D``.

    The value is the integral of the graph's selection from the domain
    witness; no closed-form prox is claimed, so Moreau envelopes go through
    golden-section search.
    """

    graph: "Graph1D"
    closed_form_prox = False

    @property
    def dim(self):
        return 1

    @property
    def domain(self):
        return self.graph.domain

    def _anchor(self):
        lo, hi = self.graph.domain_bounds
        return 0.0 if lo <= 0.0 <= hi else float(self.graph.witness()[0])

    def value(self, pts):
        p = np.atleast_2d(pts)[:, 0]
        a = self._anchor()
        return np.array([self.graph.integrate(a, float(v)) for v in p])

    def prox(self, pts, alpha):
        return self.graph.resolvent(pts, alpha)

    def subdiff_contains(self, x, y, tol=ITER_TOL):
        return self.graph.contains(x, y, tol)

    def subdiff_min_norm(self, x):
        return self.graph.minimal_section(x)

    def to_dict(self):
        return {"kind": "primitive1d", "graph": self.graph.to_dict()}


# ------------------------------------------------------------------ operators

class MonotoneOperator:
    """A maximal monotone operator from the catalogue."""

    dim: int

    @property
    def domain(self) -> ConvexSet | None:
        """Closure of D(A); ``None`` means all of R^d."""
        return None

    def witness(self) -> np.ndarray:
        D = self.domain
        return np.zeros(self.dim) if D is None else D.witness()

    def resolvent(self, pts: np.ndarray, alpha: float) -> np.ndarray:
        raise NotImplementedError

    def minimal_section(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def contains(self, x, y, tol=ITER_TOL) -> np.ndarray:
        """Row-wise membership ``y in A(x)``."""
        raise NotImplementedError

    def in_domain(self, pts, tol: float = EXACT_TOL) -> np.ndarray:
        D = self.domain
        p = np.atleast_2d(pts)
        if D is None:
            return np.ones(p.shape[0], dtype=bool)
        return D.distance(p) <= tol

    @property
    def is_cone(self) -> bool:
        """Whether A is a normal cone (so projection schemes apply)."""
        return False

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Zero(MonotoneOperator):
    dim: int = 1

    def resolvent(self, pts, alpha):
        return pts.copy()

    def minimal_section(self, pts):
        return np.zeros_like(pts)

    def contains(self, x, y, tol=ITER_TOL):
        return _norm(np.atleast_2d(y)) <= tol

    @property
    def is_cone(self):
        return True

    def to_dict(self):
        return {"kind": "zero", "dim": self.dim}


@dataclass(frozen=True, eq=False)
class NormalCone(MonotoneOperator):
    set: ConvexSet

    @property
    def dim(self):
        return self.set.dim

    @property
    def domain(self):
        return self.set

    def resolvent(self, pts, alpha):
        return self.set.project(pts)

    def minimal_section(self, pts):
        # 0 always belongs to a normal cone
        return np.zeros_like(pts)

    def contains(self, x, y, tol=ITER_TOL):
        return self.set.normal_cone_contains(x, y, tol) & self.in_domain(x, tol)

    @property
    def is_cone(self):
        return True

    def to_dict(self):
        return {"kind": "normal_cone", "set": self.set.to_dict()}


@dataclass(frozen=True, eq=False)
class SubdiffConvex(MonotoneOperator):
    fn: ConvexFn

    @property
    def dim(self):
        return self.fn.dim

    @property
    def domain(self):
        return self.fn.domain

    def resolvent(self, pts, alpha):
        return self.fn.prox(pts, alpha)

    def minimal_section(self, pts):
        return self.fn.subdiff_min_norm(pts)

    def contains(self, x, y, tol=ITER_TOL):
        return self.fn.subdiff_contains(x, y, tol) & self.in_domain(x, tol)

    @property
    def is_cone(self):
        return isinstance(self.fn, Indicator)

    def to_dict(self):
        return {"kind": "subdiff", "fn": self.fn.to_dict()}


@dataclass(frozen=True, eq=False)
class Graph1D(MonotoneOperator):
    """Maximal monotone graph in R given by a nondecreasing polyline.

    ``vertices`` are (x, y) pairs nondecreasing in both coordinates; repeated
    x values make vertical jumps.  Beyond the end vertices the graph continues
    with ``left_slope``/``right_slope`` (>= 0), or, when the slope is ``None``,
    as a vertical ray, which bounds the domain there.
    """

    vertices: np.ndarray
    left_slope: float | None = 0.0
    right_slope: float | None = 0.0

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vertices, dtype=float))
        if v.shape[1] != 2 or v.shape[0] < 1:
            raise ValueError("vertices must be a (m, 2) array")
        dv = np.diff(v, axis=0)
        if np.any(dv < 0):
            raise ValueError("vertices must be nondecreasing in x and y")
        if np.any(np.all(dv == 0, axis=1)):
            raise ValueError("repeated vertex")
        for s in (self.left_slope, self.right_slope):
            if s is not None and not (s >= 0 and math.isfinite(s)):
                raise ValueError("extension slopes must be finite and >= 0, or None")
        object.__setattr__(self, "vertices", v)

    dim = 1

    @property
    def domain_bounds(self):
        lo = self.vertices[0, 0] if self.left_slope is None else -np.inf
        hi = self.vertices[-1, 0] if self.right_slope is None else np.inf
        return lo, hi

    @property
    def domain(self):
        lo, hi = self.domain_bounds
        if lo == -np.inf and hi == np.inf:
            return None
        if lo == hi:
            raise ValueError("graph has empty interior domain")
        return Box([lo], [hi])

    def resolvent(self, pts, alpha):
        z = pts[:, 0]
        vx, vy = self.vertices[:, 0], self.vertices[:, 1]
        S = vx + alpha * vy
        out = np.empty_like(z)
        left = z < S[0]
        right = z > S[-1]
        mid = ~(left | right)
        if self.left_slope is None:
            out[left] = vx[0]
        else:
            out[left] = vx[0] + (z[left] - S[0]) / (1.0 + alpha * self.left_slope)
        if self.right_slope is None:
            out[right] = vx[-1]
        else:
            out[right] = vx[-1] + (z[right] - S[-1]) / (1.0 + alpha * self.right_slope)
        if len(S) == 1:
            out[mid] = vx[0]
        else:
            zm = z[mid]
            k = np.clip(np.searchsorted(S, zm, side="right") - 1, 0, len(S) - 2)
            dS = S[k + 1] - S[k]
            t = np.where(dS > 0, (zm - S[k]) / np.where(dS > 0, dS, 1.0), 0.0)
            out[mid] = vx[k] + t * (vx[k + 1] - vx[k])
        return out[:, None]

    def interval(self, x: float):
        """``A(x)`` as a closed interval (lo, hi); empty -> DomainError."""
        vx, vy = self.vertices[:, 0], self.vertices[:, 1]
        lo_dom, hi_dom = self.domain_bounds
        if x < lo_dom or x > hi_dom:
            raise DomainError(f"{x} outside the graph domain")
        if x < vx[0]:
            y = vy[0] + self.left_slope * (x - vx[0])
            return y, y
        if x > vx[-1]:
            y = vy[-1] + self.right_slope * (x - vx[-1])
            return y, y
        at = vx == x
        if np.any(at):
            lo, hi = vy[at].min(), vy[at].max()
            if x == vx[0] and self.left_slope is None:
                lo = -np.inf
            if x == vx[-1] and self.right_slope is None:
                hi = np.inf
            return lo, hi
        k = np.searchsorted(vx, x) - 1
        t = (x - vx[k]) / (vx[k + 1] - vx[k])
        y = vy[k] + t * (vy[k + 1] - vy[k])
        return y, y

    def selection(self, x: float) -> float:
        lo, hi = self.interval(x)
        return float(min(max(0.0, lo), hi))

    def minimal_section(self, pts):
        return np.array([[self.selection(float(v))] for v in pts[:, 0]])

    def contains(self, x, y, tol=ITER_TOL):
        x, y = np.atleast_2d(x), np.atleast_2d(y)
        res = []
        for xi, yi in zip(x[:, 0], y[:, 0]):
            try:
                lo, hi = self.interval(float(xi))
            except DomainError:
                res.append(False)
                continue
            res.append(lo - tol * (1 + abs(yi)) <= yi <= hi + tol * (1 + abs(yi)))
        return np.array(res)

    def integrate(self, a: float, b: float) -> float:
        """Integral of the graph selection over [a, b] (+inf off the domain)."""
        lo_dom, hi_dom = self.domain_bounds
        if not (lo_dom <= a <= hi_dom and lo_dom <= b <= hi_dom):
            return np.inf
        sign = 1.0
        if b < a:
            a, b, sign = b, a, -1.0
        knots = np.unique(np.concatenate([[a, b], self.vertices[:, 0]]))
        knots = knots[(knots >= a) & (knots <= b)]
        total = 0.0
        for u, v in zip(knots[:-1], knots[1:]):
            # the selection is affine on (u, v): midpoint rule is exact
            total += self.interval(0.5 * (u + v))[0] * (v - u)
        return sign * total

    def to_dict(self):
        return {"kind": "graph1d", "vertices": self.vertices.tolist(),
                "left_slope": self.left_slope, "right_slope": self.right_slope}


@dataclass(frozen=True, eq=False)
class Scaled(MonotoneOperator):
    """``factor * A``."""

    base: MonotoneOperator
    factor: float

    def __post_init__(self):
        if not self.factor > 0:
            raise ValueError("scale factor must be positive")

    @property
    def dim(self):
        return self.base.dim

    @property
    def domain(self):
        return self.base.domain

    def resolvent(self, pts, alpha):
        return self.base.resolvent(pts, alpha * self.factor)

    def minimal_section(self, pts):
        return self.factor * self.base.minimal_section(pts)

    def contains(self, x, y, tol=ITER_TOL):
        return self.base.contains(x, np.atleast_2d(y) / self.factor, tol)

    @property
    def is_cone(self):
        return self.base.is_cone

    def to_dict(self):
        return {"kind": "scaled", "base": self.base.to_dict(), "factor": self.factor}


@dataclass(frozen=True, eq=False)
class Translated(MonotoneOperator):
    """``x -> A(x - shift)``."""

    base: MonotoneOperator
    shift: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shift", np.atleast_1d(np.asarray(self.shift, dtype=float)))

    @property
    def dim(self):
        return self.base.dim

    @property
    def domain(self):
        D = self.base.domain
        return None if D is None else D.translate(self.shift)

    def resolvent(self, pts, alpha):
        return self.shift + self.base.resolvent(pts - self.shift, alpha)

    def minimal_section(self, pts):
        return self.base.minimal_section(pts - self.shift)

    def contains(self, x, y, tol=ITER_TOL):
        return self.base.contains(np.atleast_2d(x) - self.shift, y, tol)

    @property
    def is_cone(self):
        return self.base.is_cone

    def to_dict(self):
        return {"kind": "translated", "base": self.base.to_dict(), "shift": self.shift.tolist()}


def abs_operator(weight: float = 1.0, dim: int = 1) -> SubdiffConvex:
    """Subdifferential of ``weight * |x|``."""
    return SubdiffConvex(AbsNorm(weight, dim))


# --------------------------------------------------------- public operations

def resolvent(A: MonotoneOperator, alpha: float, x):
    """``(I + alpha A)^{-1} x``."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    pts, restore = _points(x, A.dim)
    return restore(A.resolvent(pts, alpha))


def yosida(A: MonotoneOperator, alpha: float, x):
    """Yosida approximation ``(x - J^alpha x) / alpha``."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    pts, restore = _points(x, A.dim)
    return restore((pts - A.resolvent(pts, alpha)) / alpha)


def minimal_section(A: MonotoneOperator, x):
    """Least-norm element of ``A(x)``; raises DomainError off D(A)."""
    pts, restore = _points(x, A.dim)
    if not np.all(A.in_domain(pts)):
        raise DomainError("point outside the domain of the operator")
    return restore(A.minimal_section(pts))


def moreau_envelope(fn: ConvexFn, alpha: float, x, method: str = "auto"):
    """``inf_y fn(y) + |y - x|^2 / (2 alpha)``.

    Uses the proximal point when ``fn`` has a closed-form prox; otherwise (or
    with ``method="search"``) a golden-section search, one-dimensional only.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    pts, restore = _points(x, fn.dim)
    if method == "auto" and fn.closed_form_prox:
        p = fn.prox(pts, alpha)
        vals = fn.value(p) + np.sum((p - pts) ** 2, axis=1) / (2 * alpha)
    elif fn.dim == 1:
        vals = np.array([_golden_envelope(fn, alpha, float(v)) for v in pts[:, 0]])
    else:
        raise ValueError("search-based envelope is one-dimensional only")
    return float(vals[0]) if np.ndim(x) <= 1 else vals


def _golden_envelope(fn: ConvexFn, alpha: float, x: float) -> float:
    D = fn.domain

    def obj(y):
        v = fn.value(np.array([[y]]))[0]
        return v + (y - x) ** 2 / (2 * alpha)

    start = x if D is None else float(D.project(np.array([[x]]))[0, 0])
    if D is not None:
        lo, hi = float(D.lower[0]), float(D.upper[0])
        # bounded domain: search the feasible interval
        lo = max(lo, start - 1.0 - abs(start))
        hi = min(hi, start + 1.0 + abs(start))
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValueError("unbounded search interval")
        res = optimize.minimize_scalar(obj, bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-12})
        cands = [res.x, lo, hi] if D.lower[0] > -np.inf or D.upper[0] < np.inf else [res.x]
        return float(min(obj(c) for c in cands))
    res = optimize.minimize_scalar(obj, bracket=(start - 1.0, start), method="golden",
                                   tol=1e-12)
    return float(res.fun)


@dataclass
class ConvergenceReport:
    eps: list
    errors: list
    monotone: bool
    flagged: list = field(default_factory=list)

    def to_dict(self):
        return {"eps": list(self.eps), "errors": list(self.errors),
                "monotone": self.monotone, "flagged": list(self.flagged)}


def check_resolvent_convergence(family: Callable[[float], MonotoneOperator], A: MonotoneOperator,
                                alpha: float, test_points, eps_grid: Sequence[float]) -> ConvergenceReport:
    """Sup-error of ``J^alpha_{A_eps}`` against ``J^alpha_A`` over test points."""
    pts, _ = _points(np.asarray(test_points, dtype=float), A.dim) if np.ndim(test_points) > 1 or A.dim > 1 \
        else (np.asarray(test_points, dtype=float).reshape(-1, 1), None)
    if pts.shape[0] == 0 or len(eps_grid) == 0:
        raise ValueError("need nonempty test points and eps grid")
    ref = A.resolvent(pts, alpha)
    errors = []
    for e in eps_grid:
        diff = family(e).resolvent(pts, alpha) - ref
        errors.append(float(np.max(_norm(diff))))
    flagged = [eps_grid[i] for i in range(1, len(errors)) if errors[i] > errors[i - 1] + EXACT_TOL]
    return ConvergenceReport(list(map(float, eps_grid)), errors, not flagged, flagged)


def local_boundedness(family: Callable[[float], MonotoneOperator], eps_grid: Sequence[float],
                      radius: float, n_samples: int = 256, seed: int = 0) -> float:
    """Sampled ``sup |A_eps^0(x)|`` over the ball of given radius around 0.

    Returns +inf when the ball is not inside some D(A_eps); this is a
    diagnostic only.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for e in eps_grid:
        A = family(e)
        u = rng.normal(size=(n_samples, A.dim))
        u *= (radius * rng.uniform(size=(n_samples, 1)) ** (1 / A.dim)) / _norm(u)[:, None]
        if not np.all(A.in_domain(u)):
            return np.inf
        worst = max(worst, float(np.max(_norm(A.minimal_section(u)))))
    return worst


def graph_samples(A: MonotoneOperator, n: int, rng: np.random.Generator, alpha: float = 1.0,
                  scale: float = 3.0):
    """Pairs (x, y) on the graph of A, via ``x = J z``, ``y = A^alpha z``."""
    z = scale * rng.normal(size=(n, A.dim))
    x = A.resolvent(z, alpha)
    return x, (z - x) / alpha
