"""Interacting-particle Euler-Maruyama for multivalued McKean-Vlasov SDEs.

The constraint term is handled either by Yosida penalization (subtract
``A^alpha(X) dt``) or by projection onto the closed domain (normal cones only).
The finite-variation process K is read off the scheme: the penalty
increment, or ``proposal - projected`` respectively.

Law dependence uses the same-time empirical measure of all N particles,
computed once per step before particles are advanced (in parallel chunks if
``workers > 1``).  Noise comes from per-particle counter-based streams, so
results do not depend on the chunking.
"""
from __future__ import annotations

import math
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng as rngmod
from .coeffs import MeanFieldCoefficients, PerturbationFamily, batched_matvec, lambda_rule_ok
from .measure import EmpiricalMeasure
from .monotone import Box, HalfSpace, MonotoneOperator, Zero
from .rng import RngSpec


class ConfigurationError(ValueError):
    pass


class SimulationAborted(RuntimeError):
    def __init__(self, step: int, msg: str = "state left the finite range"):
        super().__init__(f"{msg} at step {step}")
        self.step = step


@dataclass(frozen=True, eq=False)
class SdeProblem:
    """Multivalued McKean-Vlasov SDE with noise scale ``eps``.

    ``A_family``, if given, maps eps to the perturbed operator A_eps; by
    default A_eps = A.
    """

    A: MonotoneOperator
    coeffs: MeanFieldCoefficients | PerturbationFamily
    x0: np.ndarray
    T: float = 1.0
    eps: float = 1.0
    A_family: Callable[[float], MonotoneOperator] | None = None

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float)
        if x0.ndim == 0:
            x0 = x0.reshape(1)
        object.__setattr__(self, "x0", x0)
        if not self.T > 0:
            raise ConfigurationError("T must be positive")
        if not 0 <= self.eps <= 1:
            raise ConfigurationError("eps must lie in [0, 1]")
        if self.A.dim != self.coeffs.dim or x0.shape[-1] != self.A.dim:
            raise ConfigurationError("dimensions of A, coefficients and x0 disagree")
        D = self.A.domain
        if D is not None and np.max(D.distance(np.atleast_2d(x0))) > 1e-12:
            raise ConfigurationError("x0 is not in the closure of D(A)")

    @property
    def dim(self) -> int:
        return self.A.dim

    def operator(self, eps: float | None = None) -> MonotoneOperator:
        e = self.eps if eps is None else eps
        return self.A if self.A_family is None or e == 0 else self.A_family(e)

    def coefficients(self, eps: float | None = None) -> MeanFieldCoefficients:
        return self.coeffs.at(self.eps if eps is None else eps)

    def with_eps(self, eps: float) -> "SdeProblem":
        return SdeProblem(self.A, self.coeffs, self.x0, self.T, eps, self.A_family)

    def initial(self, N: int) -> np.ndarray:
        if self.x0.ndim == 1:
            return np.tile(self.x0, (N, 1))
        if self.x0.shape[0] != N:
            raise ConfigurationError("initial cloud size differs from N")
        return self.x0.copy()


@dataclass(frozen=True)
class SchemeSpec:
    """Time stepping for the constraint term.

    ``projection`` (normal cones only) projects the Euler proposal; with
    ``bridge=True`` the crossing of each flat face (half-space, box side)
    inside a step is resolved with the exact Brownian-bridge minimum, which
    removes the discrete-monitoring bias of plain projection.
    ``penalized`` subtracts ``A^alpha(X) dt`` with ``alpha = alpha_factor * dt``.
    """

    method: str = "projection"
    dt: float = 1e-2
    alpha_factor: float = 1.0
    bridge: bool = True

    def __post_init__(self):
        if self.method not in ("projection", "penalized"):
            raise ConfigurationError(f"unknown scheme method {self.method!r}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigurationError("dt must be positive")
        if not self.alpha_factor > 0:
            raise ConfigurationError("alpha_factor must be positive")

    @property
    def alpha(self) -> float:
        return self.alpha_factor * self.dt

    def steps(self, T: float) -> int:
        n = round(T / self.dt)
        if n < 1 or abs(n * self.dt - T) > 1e-9 * max(T, 1.0):
            raise ConfigurationError(f"T={T} is not an integer multiple of dt={self.dt}")
        return n

    def check(self, A: MonotoneOperator):
        if self.method == "projection" and not A.is_cone:
            raise ConfigurationError("projection scheme needs a normal-cone operator")


# ------------------------------------------------------------- step kernel

def _bridge_min(g0, g1, var, u):
    """Minimum of a Brownian bridge from g0 to g1 with variance ``var``."""
    pos = var > 0
    root = np.sqrt(np.maximum((g1 - g0) ** 2 - 2.0 * np.where(pos, var, 0.0) * np.log(u), 0.0))
    m = 0.5 * (g0 + g1 - root)
    return np.where(pos, np.minimum(m, np.minimum(g0, g1)), np.minimum(g0, g1))


class Integrator:
    """One Euler step of ``dX = b dt + sqrt(eps) sigma dW + sigma h dt - dK``."""

    def __init__(self, A: MonotoneOperator, coeffs: MeanFieldCoefficients, scheme: SchemeSpec,
                 eps: float, rng: RngSpec | None):
        scheme.check(A)
        self.A = A
        self.coeffs = coeffs
        self.scheme = scheme
        self.eps = float(eps)
        self.rng = rng
        self.dt = scheme.dt
        self.d = A.dim
        self.domain = A.domain
        self.sqrt_eps = math.sqrt(self.eps)
        self.sqrt_dt = math.sqrt(self.dt)
        if self.eps > 0 and rng is None:
            raise ConfigurationError("noisy integration needs an RngSpec")

    def faces(self) -> int:
        D = self.domain
        if not (self.scheme.method == "projection" and self.scheme.bridge and self.eps > 0):
            return 0
        if isinstance(D, HalfSpace):
            return 1
        if isinstance(D, Box):
            return 2 * D.dim
        return 0

    def increment(self, X, mu, k, particles, control=None, law_ctrl=None, noise_scale=1.0):
        """Free Euler increment and the diffusion matrix used for the noise."""
        dt = self.dt
        incr = self.coeffs.b(X, mu) * dt
        S = None
        if control is not None:
            S = self.coeffs.sigma(X, mu if law_ctrl is None else law_ctrl)
            incr = incr + batched_matvec(S, control) * dt
        if self.eps > 0:
            if S is None or law_ctrl is not None:
                S = self.coeffs.sigma(X, mu)
            dW = rngmod.normals(self.rng, particles, k, self.d) * self.sqrt_dt
            incr = incr + batched_matvec(S, dW) * (self.sqrt_eps * noise_scale)
        return incr, S

    def penalty(self, X):
        a = self.scheme.alpha
        return (X - self.A.resolvent(X, a)) / a

    def constrain(self, prev, prop, S, k, particles):
        """Project ``prop`` (started from ``prev``); returns (new, dK)."""
        D = self.domain
        if D is None:
            return prop, np.zeros_like(prop)
        nf = self.faces()
        if nf == 0 or S is None:
            new = D.project(prop)
            return new, prop - new
        u = rngmod.uniforms(self.rng, particles, k, nf)
        var_scale = self.eps * self.dt
        new = prop.copy()
        if isinstance(D, HalfSpace):
            n = D.normal
            sn = np.zeros((prop.shape[0], S.shape[2]))
            for i in range(self.d):
                sn = sn + S[:, i, :] * n[i]
            var = var_scale * np.sum(sn * sn, axis=1)
            g0 = D.offset - prev @ n
            g1 = D.offset - prop @ n
            push = np.maximum(0.0, -_bridge_min(g0, g1, var, u[:, 0]))
            new = prop - np.outer(push / (n @ n), n)
        else:
            for i in range(self.d):
                var = var_scale * np.sum(S[:, i, :] * S[:, i, :], axis=1)
                lo, hi = D.lower[i], D.upper[i]
                if np.isfinite(lo):
                    m = _bridge_min(prev[:, i] - lo, new[:, i] - lo, var, u[:, 2 * i])
                    new[:, i] = new[:, i] + np.maximum(0.0, -m)
                if np.isfinite(hi):
                    m = _bridge_min(hi - prev[:, i], hi - new[:, i], var, u[:, 2 * i + 1])
                    new[:, i] = new[:, i] - np.maximum(0.0, -m)
        new = D.project(new)
        return new, prop - new

    def step(self, X, mu, k, particles=None, control=None, law_ctrl=None):
        if particles is None:
            particles = np.arange(X.shape[0])
        incr, S = self.increment(X, mu, k, particles, control, law_ctrl)
        if self.scheme.method == "penalized":
            pen = self.penalty(X) * self.dt
            return X + (incr - pen), pen
        return self.constrain(X, X + incr, S, k, particles)


# -------------------------------------------------------------- ensembles

MAGIC = b"MVPE"
VERSION = 1


@dataclass
class PathEnsemble:
    """Recorded trajectories of N particles.

    ``X`` and ``K`` have shape (N, n_rec, d) and ``K_tv`` (N, n_rec), sampled
    at ``times`` (steps ``step_index`` of the uniform solver grid).
    """

    times: np.ndarray
    X: np.ndarray
    K: np.ndarray
    K_tv: np.ndarray
    step_index: np.ndarray
    dt: float
    method: str = "projection"
    seed: int = 0
    stream_offset: int = 0
    sup_dev: np.ndarray | None = None
    max_domain_distance: float = 0.0
    max_penalty: float = 0.0

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[2]

    @property
    def terminal(self) -> np.ndarray:
        return self.X[:, -1, :]

    def law(self, j: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.X[:, j, :])

    def laws(self) -> list:
        return [self.law(j) for j in range(len(self.times))]

    @property
    def is_full(self) -> bool:
        return len(self.step_index) == self.step_index[-1] + 1

    def to_csv(self, path):
        write_csv(self, path)

    def to_binary(self, path):
        write_binary(self, path)


def write_csv(ens: PathEnsemble, path):
    """Columns: time, particle, x0..x{d-1}, k0..k{d-1}, k_tv."""
    N, n, d = ens.X.shape
    t = np.tile(ens.times, N)
    pid = np.repeat(np.arange(N), n)
    cols = [t[:, None], pid[:, None].astype(float), ens.X.reshape(N * n, d),
            ens.K.reshape(N * n, d), ens.K_tv.reshape(N * n, 1)]
    data = np.hstack(cols)
    header = ",".join(["time", "particle"] + [f"x{i}" for i in range(d)] + [f"k{i}" for i in range(d)] + ["k_tv"])
    fmt = ["%.17g", "%d"] + ["%.17g"] * (2 * d + 1)
    np.savetxt(path, data, fmt=fmt, delimiter=",", header=header, comments="")


def write_binary(ens: PathEnsemble, path):
    """Header ``<4sIIQQ`` (magic, version, d, N, n_rec) then little-endian
    float64 blocks: times, X, K (row-major N x n_rec x d), K_tv (N x n_rec)."""
    N, n, d = ens.X.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIQQ", MAGIC, VERSION, d, N, n))
        for arr in (ens.times, ens.X, ens.K, ens.K_tv):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_binary(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, d, N, n = struct.unpack_from("<4sIIQQ", raw)
    if magic != MAGIC or version != VERSION:
        raise ValueError("not an ensemble dump of a supported version")
    off = struct.calcsize("<4sIIQQ")
    out = {}
    for name, shape in (("times", (n,)), ("X", (N, n, d)), ("K", (N, n, d)), ("K_tv", (N, n))):
        cnt = int(np.prod(shape))
        out[name] = np.frombuffer(raw, dtype="<f8", count=cnt, offset=off).reshape(shape)
        off += 8 * cnt
    return out


def _record_indices(record, steps: int) -> np.ndarray:
    if record is None or record == "full":
        return np.arange(steps + 1)
    if record == "terminal":
        return np.array([0, steps])
    if isinstance(record, int):
        idx = np.arange(0, steps + 1, record)
        return idx if idx[-1] == steps else np.append(idx, steps)
    idx = np.unique(np.concatenate([[0, steps], np.asarray(record, dtype=int)]))
    if idx[0] < 0 or idx[-1] > steps:
        raise ConfigurationError("record indices outside the grid")
    return idx


def _chunks(N: int, workers: int):
    workers = max(1, min(int(workers), N))
    edges = np.linspace(0, N, workers + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


class _Recorder:
    def __init__(self, N, d, steps, record, dt, reference_path=None):
        self.idx = _record_indices(record, steps)
        self.slot = {int(k): j for j, k in enumerate(self.idx)}
        n = len(self.idx)
        self.X = np.empty((N, n, d))
        self.K = np.zeros((N, n, d))
        self.K_tv = np.zeros((N, n))
        self.K_cur = np.zeros((N, d))
        self.tv_cur = np.zeros(N)
        self.dt = dt
        self.ref = reference_path
        self.sup_dev = None if reference_path is None else np.zeros(N)

    def observe(self, k, X):
        if self.ref is not None:
            dev = np.sqrt(np.sum((X - self.ref[k]) ** 2, axis=1))
            self.sup_dev = np.maximum(self.sup_dev, dev)
        j = self.slot.get(k)
        if j is not None:
            self.X[:, j] = X
            self.K[:, j] = self.K_cur
            self.K_tv[:, j] = self.tv_cur

    def add_k(self, dK):
        self.K_cur += dK
        self.tv_cur += np.sqrt(np.sum(dK * dK, axis=1))

    def ensemble(self, method, rng, **extra):
        return PathEnsemble(self.idx * self.dt, self.X, self.K, self.K_tv, self.idx, self.dt, method,
                            0 if rng is None else int(rng.seed), 0 if rng is None else rng.stream_offset,
                            self.sup_dev, **extra)


def _run(problem: SdeProblem, scheme: SchemeSpec, N: int, rng: RngSpec | None, *, record=None,
         workers: int = 1, reference_path=None, frozen_law=None, control=None) -> PathEnsemble:
    if N < 1:
        raise ConfigurationError("N must be at least 1")
    steps = scheme.steps(problem.T)
    A = problem.operator()
    integ = Integrator(A, problem.coefficients(), scheme, problem.eps, rng)
    X = problem.initial(N)
    rec = _Recorder(N, problem.dim, steps, record, scheme.dt, reference_path)
    rec.observe(0, X)
    parts = _chunks(N, workers)
    ids = np.arange(N)
    D = A.domain
    max_dist = 0.0
    max_pen = 0.0
    pool = ThreadPoolExecutor(len(parts)) if len(parts) > 1 else None
    try:
        for k in range(steps):
            mu = frozen_law[k] if frozen_law is not None else EmpiricalMeasure(X)
            hk = None if control is None else np.broadcast_to(control[k], X.shape)

            def work(sl):
                c = None if hk is None else hk[sl]
                return integ.step(X[sl], mu, k, ids[sl], c)

            results = list(pool.map(work, parts)) if pool else [work(parts[0])]
            Xn = np.concatenate([r[0] for r in results]) if len(results) > 1 else results[0][0]
            dK = np.concatenate([r[1] for r in results]) if len(results) > 1 else results[0][1]
            if not np.all(np.isfinite(Xn)):
                raise SimulationAborted(k + 1)
            if scheme.method == "penalized":
                max_pen = max(max_pen, float(np.max(np.sqrt(np.sum(dK * dK, axis=1)))) / scheme.dt)
                if D is not None:
                    max_dist = max(max_dist, float(np.max(D.distance(Xn))))
            X = Xn
            rec.add_k(dK)
            rec.observe(k + 1, X)
    finally:
        if pool:
            pool.shutdown()
    return rec.ensemble(scheme.method, rng, max_domain_distance=max_dist, max_penalty=max_pen)


def simulate(problem: SdeProblem, scheme: SchemeSpec, N: int, rng: RngSpec, *, record=None,
             workers: int = 1, reference_path=None) -> PathEnsemble:
    """Simulate N interacting particles with the same-time empirical law.

    ``record``: None/"full" (every step), "terminal", an integer stride, or
    explicit step indices.  ``reference_path`` (steps+1, d) makes the run track
    each particle's sup-distance to it in ``sup_dev``.
    """
    return _run(problem, scheme, N, rng, record=record, workers=workers, reference_path=reference_path)


def _as_laws(frozen_law, steps):
    if isinstance(frozen_law, PathEnsemble):
        if not frozen_law.is_full:
            raise ConfigurationError("frozen law needs a fully recorded ensemble")
        frozen_law = frozen_law.laws()
    laws = list(frozen_law)
    if len(laws) not in (steps, steps + 1):
        raise ConfigurationError(f"frozen law has {len(laws)} entries for {steps} steps")
    return laws


def _control_values(h, steps, d):
    vals = np.asarray(getattr(h, "values", h), dtype=float)
    if vals.ndim == 1:
        vals = vals.reshape(-1, 1) if d == 1 else vals.reshape(1, d).repeat(steps, 0)
    if vals.shape != (steps, d):
        raise ConfigurationError(f"control grid has shape {vals.shape}, expected {(steps, d)}")
    return vals


def simulate_controlled(problem: SdeProblem, frozen_law, h, scheme: SchemeSpec, N: int, rng: RngSpec, *,
                        record=None, workers: int = 1) -> PathEnsemble:
    """Controlled dynamics with a frozen law path and control drift ``sigma h dt``."""
    steps = scheme.steps(problem.T)
    laws = _as_laws(frozen_law, steps)
    grid = getattr(h, "dt", None)
    if grid is not None and abs(grid - scheme.dt) > 1e-12 * scheme.dt:
        raise ConfigurationError("control grid differs from the scheme grid")
    vals = _control_values(h, steps, problem.dim)
    return _run(problem, scheme, N, rng, record=record, workers=workers, frozen_law=laws, control=vals)


# -------------------------------------------------------------------- MDP

def default_lambda(eps: float) -> float:
    return eps ** 0.25


def simulate_mdp(problem: SdeProblem, lam: Callable[[float], float], scheme: SchemeSpec, N: int, rng: RngSpec, *,
                 x0_path=None, psi=None, eps_grid=None, record=None, workers: int = 1) -> PathEnsemble:
    """Simulate ``M = (Xbar - X0) / lambda(eps)`` through its own equation.

    The constraint is enforced on ``Xbar = lambda M + X0`` so that Xbar stays
    in the closed domain; K is reported in M-units.  ``x0_path`` defaults to
    the deterministic limit path on the same grid.
    """
    eps = problem.eps
    if eps <= 0:
        raise ConfigurationError("MDP simulation needs eps > 0")
    grid = eps_grid if eps_grid is not None else [eps]
    if len(grid) > 1 and not lambda_rule_ok(lam, grid):
        warnings.warn("lambda(eps) does not satisfy lambda -> 0, eps/lambda^2 -> 0 on the grid", stacklevel=2)
    elif len(grid) == 1:
        l1 = lam(eps)
        if not (0 < l1 < 1 and eps / l1 ** 2 < 1):
            warnings.warn("lambda(eps) outside the moderate-deviation regime", stacklevel=2)
    steps = scheme.steps(problem.T)
    if x0_path is None:
        from .variational import solve_limit_ode
        x0_path = solve_limit_ode(problem, scheme).path
    x0_path = np.asarray(getattr(x0_path, "path", x0_path), dtype=float)
    if x0_path.shape != (steps + 1, problem.dim):
        raise ConfigurationError("limit path does not match the grid")
    psi_vals = None if psi is None else _control_values(psi, steps, problem.dim)
    l = float(lam(eps))
    base = problem.coefficients(0.0)
    A = problem.operator()
    integ = Integrator(A, problem.coefficients(), scheme, eps, rng)
    d = problem.dim
    M = np.zeros((N, d))
    rec = _Recorder(N, d, steps, record, scheme.dt)
    rec.observe(0, M)
    parts = _chunks(N, workers)
    ids = np.arange(N)
    dt = scheme.dt
    noise_scale = math.sqrt(eps) / l
    pool = ThreadPoolExecutor(len(parts)) if len(parts) > 1 else None
    try:
        for k in range(steps):
            xk = x0_path[k]
            b0 = base.b(xk[None, :], EmpiricalMeasure.dirac(xk))[0]
            Xbar = l * M + xk
            mu = EmpiricalMeasure(Xbar)

            def work(sl):
                Xs = Xbar[sl]
                S = integ.coeffs.sigma(Xs, mu)
                dW = rngmod.normals(rng, ids[sl], k, d) * integ.sqrt_dt
                incr = (integ.coeffs.b(Xs, mu) - b0) * (dt / l) + batched_matvec(S, dW) * noise_scale
                if psi_vals is not None:
                    incr = incr + batched_matvec(S, np.broadcast_to(psi_vals[k], Xs.shape)) * dt
                Mk = M[sl]
                if scheme.method == "penalized":
                    pen = integ.penalty(Xs) * dt / l
                    return Mk + (incr - pen), pen
                prop = Mk + incr
                xb_new, _ = integ.constrain(Xs, l * prop + x0_path[k + 1], S, k, ids[sl])
                Mn = (xb_new - x0_path[k + 1]) / l
                return Mn, prop - Mn

            results = list(pool.map(work, parts)) if pool else [work(parts[0])]
            Mn = np.concatenate([r[0] for r in results]) if len(results) > 1 else results[0][0]
            dK = np.concatenate([r[1] for r in results]) if len(results) > 1 else results[0][1]
            if not np.all(np.isfinite(Mn)):
                raise SimulationAborted(k + 1)
            M = Mn
            rec.add_k(dK)
            rec.observe(k + 1, M)
    finally:
        if pool:
            pool.shutdown()
    return rec.ensemble(scheme.method, rng)


# ------------------------------------------------------- K diagnostics

@dataclass
class KMonotonicityReport:
    worst_margin: float
    tol: float
    violations: int
    sums: np.ndarray = field(repr=False)

    @property
    def ok(self) -> bool:
        return self.violations == 0


def k_monotonicity_diag(ens: PathEnsemble, xs, ys, tol_factor: float = 10.0, flip_k: bool = False):
    """Discrete check of ``sum <X - x, dK - y dt> >= -tol`` over graph samples.

    Projection ensembles pair each increment with the post-step state (where
    the increment lies in the normal cone); penalized ensembles with the
    pre-step state.  ``tol = tol_factor * dt * (1 + max|X|) * (1 + max|y|)``.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    dK = np.diff(ens.K, axis=1)
    if flip_k:
        dK = -dK
    dts = np.diff(ens.times)
    Xp = ens.X[:, 1:, :] if ens.method == "projection" else ens.X[:, :-1, :]
    sums = np.empty((ens.N, xs.shape[0]))
    for j, (x, y) in enumerate(zip(xs, ys)):
        inner = np.sum((Xp - x) * (dK - dts[None, :, None] * y), axis=2)
        sums[:, j] = inner.sum(axis=1)
    scale = (1.0 + float(np.max(np.abs(ens.X)))) * (1.0 + float(np.max(np.abs(ys), initial=0.0)))
    tol = tol_factor * ens.dt * scale
    worst = float(np.min(sums))
    return KMonotonicityReport(-worst, tol, int(np.sum(sums < -tol)), sums)
