"""Deterministic skeletons and numerical rate-function minimization.

Controls are piecewise constant on the solver grid.  All skeleton solves go
through the same Euler kernel as the particle simulator (with eps = 0), so a
zero control reproduces the limit ODE bit for bit.  Skeleton solves are
batched: a stack of B controls is integrated as B independent "particles"
sharing the frozen Dirac law of the limit path.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, minimize

from .measure import EmpiricalMeasure
from .monotone import Ball, Box, ConvexSet, HalfSpace, Polyhedron, Zero
from .sde import ConfigurationError, Integrator, SchemeSpec, SdeProblem, SimulationAborted

FD_REL_STEP = 1e-5


@dataclass
class ControlGrid:
    """Piecewise-constant control, ``values[k]`` on ``[k dt, (k+1) dt)``."""

    values: np.ndarray
    dt: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v.reshape(-1, 1)
        if v.ndim != 2 or not np.all(np.isfinite(v)):
            raise ConfigurationError("control values must be a finite (steps, d) array")
        self.values = v

    @classmethod
    def zeros(cls, steps: int, d: int, dt: float) -> "ControlGrid":
        return cls(np.zeros((steps, d)), dt)

    @classmethod
    def constant(cls, c, steps: int, dt: float) -> "ControlGrid":
        c = np.atleast_1d(np.asarray(c, dtype=float))
        return cls(np.tile(c, (steps, 1)), dt)

    @property
    def steps(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def T(self) -> float:
        return self.steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps) * self.dt

    def energy(self) -> float:
        return energy(self)

    def __mul__(self, c: float) -> "ControlGrid":
        return ControlGrid(self.values * c, self.dt)

    __rmul__ = __mul__

    def to_csv(self, path):
        d = self.dim
        data = np.column_stack([self.times, self.values])
        np.savetxt(path, data, fmt="%.17g", delimiter=",", comments="",
                   header=",".join(["time"] + [f"h{i}" for i in range(d)]))


def energy(h: ControlGrid | np.ndarray, dt: float | None = None) -> float:
    """``0.5 * sum_k |h_k|^2 dt``."""
    if isinstance(h, ControlGrid):
        vals, dt = h.values, h.dt
    else:
        vals = np.asarray(h, dtype=float)
    return float(0.5 * np.sum(vals * vals) * dt)


@dataclass
class SkeletonSolution:
    times: np.ndarray
    path: np.ndarray
    K: np.ndarray
    K_tv: np.ndarray
    control: ControlGrid | None = None
    law_path: np.ndarray | None = None
    kind: str = "limit"

    @property
    def terminal(self) -> np.ndarray:
        return self.path[-1]

    def to_csv(self, path):
        d = self.path.shape[1]
        cols = [self.times[:, None], self.path, self.K, self.K_tv[:, None]]
        head = ["time"] + [f"x{i}" for i in range(d)] + [f"k{i}" for i in range(d)] + ["k_tv"]
        if self.control is not None:
            h = np.vstack([self.control.values, np.full((1, d), np.nan)])
            cols.append(h)
            head += [f"h{i}" for i in range(d)]
        np.savetxt(path, np.hstack(cols), fmt="%.17g", delimiter=",", header=",".join(head), comments="")


def _deterministic(problem: SdeProblem, scheme: SchemeSpec) -> Integrator:
    return Integrator(problem.operator(0.0), problem.coefficients(0.0), scheme, 0.0, None)


def _integrate(problem: SdeProblem, scheme: SchemeSpec, controls=None, law_path=None):
    """Batched deterministic Euler integration.

    ``controls`` is (B, steps, d) or None; ``law_path`` (steps+1, d) freezes
    the Dirac law, otherwise the law is the Dirac at the current state.
    Returns path, K (B, steps+1, d) and K_tv (B, steps+1).
    """
    steps = scheme.steps(problem.T)
    integ = _deterministic(problem, scheme)
    x0 = np.atleast_1d(problem.x0)
    if x0.ndim != 1:
        raise ConfigurationError("skeletons need a single initial point")
    d = problem.dim
    B = 1 if controls is None else controls.shape[0]
    if controls is not None and controls.shape[1:] != (steps, d):
        raise ConfigurationError(f"control grid {controls.shape[1:]} does not match {(steps, d)}")
    if law_path is None and B > 1:
        raise ConfigurationError("batched solves need a frozen law path")
    X = np.tile(x0, (B, 1))
    path = np.empty((B, steps + 1, d))
    K = np.zeros((B, steps + 1, d))
    tv = np.zeros((B, steps + 1))
    path[:, 0] = X
    for k in range(steps):
        mu = EmpiricalMeasure.dirac(X[0] if law_path is None else law_path[k])
        hk = None if controls is None else controls[:, k, :]
        X, dK = integ.step(X, mu, k, control=hk)
        if not np.all(np.isfinite(X)):
            raise SimulationAborted(k + 1)
        path[:, k + 1] = X
        K[:, k + 1] = K[:, k] + dK
        tv[:, k + 1] = tv[:, k] + np.sqrt(np.sum(dK * dK, axis=1))
    return path, K, tv


def solve_limit_ode(problem: SdeProblem, scheme: SchemeSpec) -> SkeletonSolution:
    """Euler integration of the noiseless limit with the Dirac law of the current state."""
    path, K, tv = _integrate(problem, scheme)
    times = np.arange(path.shape[1]) * scheme.dt
    return SkeletonSolution(times, path[0], K[0], tv[0], None, path[0].copy(), "limit")


def _law_from(problem, scheme, law_path):
    if law_path is None:
        return solve_limit_ode(problem, scheme).path
    return np.asarray(getattr(law_path, "path", law_path), dtype=float)


def _stack_controls(h, steps, d, dt):
    if isinstance(h, ControlGrid):
        if abs(h.dt - dt) > 1e-12 * dt:
            raise ConfigurationError("control grid differs from the scheme grid")
        return h.values[None], [h]
    if isinstance(h, (list, tuple)) and h and isinstance(h[0], ControlGrid):
        return np.stack([g.values for g in h]), list(h)
    arr = np.asarray(h, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    return arr, None


def solve_skeleton(problem: SdeProblem, h, scheme: SchemeSpec, law_path=None):
    """Controlled skeleton ``dY = b(Y, law) + sigma(Y, law) h - A(Y)``.

    The law is frozen to the Dirac path of the limit ODE.  ``h`` is a
    ControlGrid (returns one SkeletonSolution), or a list / (B, steps, d)
    array (returns a list).
    """
    steps = scheme.steps(problem.T)
    ctrl, grids = _stack_controls(h, steps, problem.dim, scheme.dt)
    law = _law_from(problem, scheme, law_path)
    path, K, tv = _integrate(problem, scheme, ctrl, law)
    times = np.arange(steps + 1) * scheme.dt
    out = [SkeletonSolution(times, path[b], K[b], tv[b],
                            grids[b] if grids else ControlGrid(ctrl[b], scheme.dt), law, "skeleton")
           for b in range(path.shape[0])]
    return out[0] if isinstance(h, ControlGrid) else out


def skeleton_paths(problem: SdeProblem, controls: np.ndarray, scheme: SchemeSpec, law_path: np.ndarray) -> np.ndarray:
    """Fast batched variant returning only the paths, shape (B, steps+1, d)."""
    return _integrate(problem, scheme, controls, law_path)[0]


# ------------------------------------------------------------ MDP skeleton

def tangent_cone(D: ConvexSet | None, x, tol: float = 1e-9) -> ConvexSet | None:
    """Tangent cone of ``D`` at ``x`` (None when it is the whole space)."""
    if D is None:
        return None
    x = np.asarray(x, dtype=float)
    if isinstance(D, Box):
        lo = np.where(np.isfinite(D.lower) & (x - D.lower <= tol), 0.0, -np.inf)
        hi = np.where(np.isfinite(D.upper) & (D.upper - x <= tol), 0.0, np.inf)
        if np.all(np.isinf(lo)) and np.all(np.isinf(hi)):
            return None
        return Box(lo, hi)
    if isinstance(D, HalfSpace):
        return HalfSpace(D.normal, 0.0) if D.offset - x @ D.normal <= tol else None
    if isinstance(D, Ball):
        r = np.linalg.norm(x - D.center)
        return HalfSpace(x - D.center, 0.0) if D.radius - r <= tol else None
    if isinstance(D, Polyhedron):
        act = D.offsets - D.normals @ x <= tol
        if not np.any(act):
            return None
        Na = D.normals[act]
        d = Na.shape[1]
        # strictly interior direction: max s with Na v + s <= 0, |v|_inf <= 1
        res = linprog(np.r_[np.zeros(d), -1.0], A_ub=np.hstack([Na, np.ones((Na.shape[0], 1))]),
                      b_ub=np.zeros(Na.shape[0]), bounds=[(-1, 1)] * d + [(0, 1)])
        return Polyhedron(Na, np.zeros(Na.shape[0]), res.x[:d])
    raise ConfigurationError(f"no tangent cone for {type(D).__name__}")


def _linearized_operator(problem: SdeProblem, x0_path: np.ndarray, scheme: SchemeSpec):
    """How the constraint acts on the linearized fluctuation at each step.

    Cones: projection onto the tangent cone at ``X0_{k+1}``.  Other operators:
    subtract ``J nu dt`` with J the finite-difference Jacobian of the minimal
    section at ``X0_k`` (valid where A is single-valued and smooth along X0).
    """
    A = problem.operator(0.0)
    if isinstance(A, Zero):
        return "none", None
    if A.is_cone:
        return "cone", [tangent_cone(A.domain, x) for x in x0_path]
    d = problem.dim
    jacs = []
    for x in x0_path[:-1]:
        J = np.empty((d, d))
        for j in range(d):
            s = FD_REL_STEP * (1.0 + abs(x[j]))
            e = np.zeros(d)
            e[j] = s
            J[:, j] = (A.minimal_section((x + e)[None]) - A.minimal_section((x - e)[None]))[0] / (2 * s)
        jacs.append(J)
    return "jacobian", jacs


def solve_mdp_skeleton(problem: SdeProblem, psi, X0: SkeletonSolution | None, scheme: SchemeSpec) -> SkeletonSolution:
    """Linearized skeleton ``dnu = grad_b(X0) nu + sigma(X0) psi - (constraint)``, nu(0) = 0."""
    steps = scheme.steps(problem.T)
    if X0 is None:
        X0 = solve_limit_ode(problem, scheme)
    xp = X0.path
    if xp.shape[0] != steps + 1:
        raise ConfigurationError("limit path does not match the grid")
    vals, _ = _stack_controls(psi, steps, problem.dim, scheme.dt)
    vals = vals[0]
    coeffs = problem.coefficients(0.0)
    kind, data = _linearized_operator(problem, xp, scheme)
    d = problem.dim
    dt = scheme.dt
    nu = np.zeros((steps + 1, d))
    K = np.zeros((steps + 1, d))
    tv = np.zeros(steps + 1)
    for k in range(steps):
        x = xp[k][None]
        mu = EmpiricalMeasure.dirac(xp[k])
        G = coeffs.grad_b(x, mu)[0]
        S = coeffs.sigma(x, mu)[0]
        prop = nu[k] + (G @ nu[k] + S @ vals[k]) * dt
        if kind == "cone" and data[k + 1] is not None:
            new = data[k + 1].project(prop[None])[0]
        elif kind == "jacobian":
            new = prop - data[k] @ nu[k] * dt
        else:
            new = prop
        if not np.all(np.isfinite(new)):
            raise SimulationAborted(k + 1)
        dK = prop - new
        nu[k + 1] = new
        K[k + 1] = K[k] + dK
        tv[k + 1] = tv[k] + np.linalg.norm(dK)
    grid = psi if isinstance(psi, ControlGrid) else ControlGrid(vals, dt)
    return SkeletonSolution(X0.times, nu, K, tv, grid, xp, "mdp")


# ----------------------------------------------------------------- targets

@dataclass(frozen=True)
class EndpointHalfSpace:
    """``<normal, Y(T)> >= level``."""

    normal: np.ndarray
    level: float

    def violation(self, paths, ref):
        n = np.atleast_1d(np.asarray(self.normal, dtype=float))
        return np.maximum(0.0, self.level - paths[:, -1, :] @ n)

    def to_dict(self):
        return {"kind": "endpoint_halfspace", "normal": np.atleast_1d(self.normal).tolist(), "level": self.level}


@dataclass(frozen=True)
class EndpointPoint:
    """``|Y(T) - point| <= tol``."""

    point: np.ndarray
    tol: float = 1e-3

    def violation(self, paths, ref):
        g = np.atleast_1d(np.asarray(self.point, dtype=float))
        return np.sqrt(np.sum((paths[:, -1, :] - g) ** 2, axis=1))

    def to_dict(self):
        return {"kind": "endpoint_point", "point": np.atleast_1d(self.point).tolist(), "tol": self.tol}


@dataclass(frozen=True)
class TubeExit:
    """``sup_t |Y_t - X0_t| >= radius``."""

    radius: float

    def violation(self, paths, ref):
        dev = np.sqrt(np.sum((paths - ref[None]) ** 2, axis=2))
        return np.maximum(0.0, self.radius - dev.max(axis=1))

    def to_dict(self):
        return {"kind": "tube_exit", "radius": self.radius}


@dataclass(frozen=True)
class PathMatch:
    """``sup_t |Y_t - g_t| <= tol`` for a target path g on the solver grid."""

    path: np.ndarray
    tol: float = 1e-3

    def violation(self, paths, ref):
        g = np.asarray(self.path, dtype=float)
        dev = np.sqrt(np.sum((paths - g[None]) ** 2, axis=2))
        return dev.max(axis=1)

    def to_dict(self):
        return {"kind": "path_match", "path": np.asarray(self.path).tolist(), "tol": self.tol}


def _target_tol(target) -> float:
    return float(getattr(target, "tol", 0.0))


@dataclass
class OptimizerSettings:
    rho0: float = 10.0
    rho_factor: float = 10.0
    rounds: int = 5
    restarts: int = 4
    restart_scale: float = 1.0
    feas_tol: float = 1e-3
    maxiter: int = 500
    seed: int = 0
    workers: int = 1


@dataclass
class RateProblem:
    problem: SdeProblem
    target: object
    scheme: SchemeSpec
    settings: OptimizerSettings = field(default_factory=OptimizerSettings)

    def __post_init__(self):
        tol = getattr(self.target, "tol", None)
        if tol is not None and not tol > 0:
            raise ConfigurationError("equality-type targets need a positive tolerance")
        self.steps = self.scheme.steps(self.problem.T)

    def feasible(self, viol) -> np.ndarray:
        return np.asarray(viol) <= _target_tol(self.target) + self.settings.feas_tol


@dataclass
class RateResult:
    h: ControlGrid
    I: float
    Y: SkeletonSolution
    feasible: bool
    diagnostics: dict

    def to_dict(self):
        return {"I": self.I if math.isfinite(self.I) else "inf", "feasible": self.feasible,
                "energy": energy(self.h), "terminal": self.Y.terminal.tolist(), "diagnostics": self.diagnostics}


class _Objective:
    """Penalized objective over the stacked control vector with batched FD gradients."""

    def __init__(self, rp: RateProblem, law: np.ndarray):
        self.rp = rp
        self.law = law
        self.d = rp.problem.dim
        self.steps = rp.steps
        self.dt = rp.scheme.dt
        self.tol = _target_tol(rp.target)

    def violations(self, H: np.ndarray) -> np.ndarray:
        paths = skeleton_paths(self.rp.problem, H.reshape(-1, self.steps, self.d), self.rp.scheme, self.law)
        v = self.rp.target.violation(paths, self.law)
        return v

    def penalty_terms(self, H):
        v = self.violations(H)
        return np.maximum(v - self.tol, 0.0) ** 2 if self.tol > 0 else v * v

    def value(self, x, rho) -> float:
        return 0.5 * float(x @ x) * self.dt + rho * float(self.penalty_terms(x[None])[0])

    def grad_penalty(self, x, scale: float = 1.0) -> np.ndarray:
        n = x.size
        steps = FD_REL_STEP * scale * (1.0 + np.abs(x))
        H = np.tile(x, (2 * n, 1))
        idx = np.arange(n)
        H[idx, idx] += steps
        H[n + idx, idx] -= steps
        p = self.penalty_terms(H)
        return (p[:n] - p[n:]) / (2 * steps)

    def value_and_grad(self, x, rho):
        return self.value(x, rho), x * self.dt + rho * self.grad_penalty(x)


def fd_gradient_check(rp: RateProblem, h: np.ndarray, rho: float = 10.0, law=None) -> float:
    """Max relative gap between the FD gradient of the penalized objective
    and its doubled-step Richardson estimate ``(4 g(s) - g(2 s)) / 3``."""
    law = _law_from(rp.problem, rp.scheme, law)
    obj = _Objective(rp, law)
    x = np.asarray(h, dtype=float).ravel()
    g1 = x * obj.dt + rho * obj.grad_penalty(x, 1.0)
    g2 = x * obj.dt + rho * obj.grad_penalty(x, 2.0)
    rich = (4 * g1 - g2) / 3
    return float(np.max(np.abs(g1 - rich)) / max(np.max(np.abs(rich)), 1e-12))


def _descend(obj: _Objective, x0: np.ndarray, st: OptimizerSettings):
    x = x0.copy()
    rho = st.rho0
    nfev = 0
    for _ in range(st.rounds):
        res = minimize(obj.value_and_grad, x, args=(rho,), jac=True, method="L-BFGS-B",
                       options={"maxiter": st.maxiter, "gtol": 1e-10, "ftol": 1e-14})
        x = res.x
        nfev += res.nfev
        rho *= st.rho_factor
    v = float(obj.violations(x[None])[0])
    return x, v, nfev


def minimize_rate(rp: RateProblem) -> RateResult:
    """Penalty-escalation quasi-Newton search for ``inf energy(h)`` over
    controls whose skeleton meets the target.  Returns ``I = inf`` when no
    start reaches feasibility."""
    st = rp.settings
    law = _law_from(rp.problem, rp.scheme, None)
    obj = _Objective(rp, law)
    n = rp.steps * rp.problem.dim
    gen = np.random.default_rng(st.seed)
    starts = [np.zeros(n)] + [gen.normal(scale=st.restart_scale, size=n) for _ in range(st.restarts)]
    if st.workers > 1:
        with ThreadPoolExecutor(st.workers) as pool:
            runs = list(pool.map(lambda s: _descend(obj, s, st), starts))
    else:
        runs = [_descend(obj, s, st) for s in starts]
    records = []
    best = None
    for i, (x, v, nfev) in enumerate(runs):
        e = 0.5 * float(x @ x) * obj.dt
        ok = bool(rp.feasible(v))
        records.append({"start": i, "energy": e, "violation": v, "feasible": ok, "nfev": nfev})
        key = (not ok, e if ok else v)
        if best is None or key < best[0]:
            best = (key, x, e, ok)
    _, x, e, ok = best
    h = ControlGrid(x.reshape(rp.steps, rp.problem.dim), rp.scheme.dt)
    Y = solve_skeleton(rp.problem, h, rp.scheme, law)
    return RateResult(h, e if ok else math.inf, Y, ok, {"starts": records})
