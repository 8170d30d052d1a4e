"""Empirical harnesses for small-noise asymptotics.

* ``ldp_sweep`` / ``fit_rate``: plain Monte Carlo estimates of rare-event
  probabilities and their decay ``-eps log p`` against a variational rate.
* ``mdp_sweep``: statistics of the rescaled fluctuation against its
  linearized Gaussian limit.
* LIL pipeline: contraction families, the ``Q_u`` transform, distance to the
  unit-energy skeleton set, and a per-j harness.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats
from scipy.integrate import solve_ivp
from scipy.optimize import minimize

from .coeffs import AffineDrift, LinearDiffusion, MeanFieldCoefficients, lambda_rule_ok
from .measure import EmpiricalMeasure
from .monotone import NormalCone, Zero
from .rng import RngSpec
from .sde import (ConfigurationError, Integrator, PathEnsemble, SchemeSpec, SdeProblem, default_lambda,
                  simulate, simulate_mdp)
from .variational import (ControlGrid, SkeletonSolution, _law_from, energy, skeleton_paths, solve_limit_ode,
                          solve_skeleton, tangent_cone)

REPORT_SCHEMA = "mvlab.report/1"
FD_REL_STEP = 1e-5


# ------------------------------------------------------------------ events

@dataclass(frozen=True)
class RareEvent:
    """Path event: terminal half-space ``<normal, X_T> >= level`` or tube
    exit ``sup_t |X_t - X0_t| >= radius``.  ``complement`` negates it."""

    kind: str = "halfspace"
    normal: tuple = (1.0,)
    level: float = 0.0
    radius: float = 0.0
    complement: bool = False

    def __post_init__(self):
        if self.kind not in ("halfspace", "tube"):
            raise ConfigurationError(f"unknown event kind {self.kind!r}")
        if self.kind == "tube" and not self.radius > 0:
            raise ConfigurationError("tube radius must be positive")

    def negate(self) -> "RareEvent":
        return RareEvent(self.kind, self.normal, self.level, self.radius, not self.complement)

    @property
    def needs_reference(self) -> bool:
        return self.kind == "tube"

    def hits(self, ens: PathEnsemble) -> np.ndarray:
        if self.kind == "halfspace":
            n = np.asarray(self.normal, dtype=float)
            hit = ens.terminal @ n >= self.level
        else:
            if ens.sup_dev is None:
                raise ConfigurationError("tube events need an ensemble simulated with a reference path")
            hit = ens.sup_dev >= self.radius
        return ~hit if self.complement else hit

    def to_dict(self):
        return asdict(self)


def binomial_ci(k: int, n: int, level: float = 0.95):
    """Clopper-Pearson interval; one-sided at the boundaries."""
    a = 1.0 - level
    if k == 0:
        return 0.0, 1.0 - (a / 2) ** (1.0 / n)
    if k == n:
        return (a / 2) ** (1.0 / n), 1.0
    return float(stats.beta.ppf(a / 2, k, n - k + 1)), float(stats.beta.ppf(1 - a / 2, k + 1, n - k))


def _neg_eps_log(eps, p):
    return math.inf if p <= 0 else -eps * math.log(p)


@dataclass
class SweepTable:
    kind: str
    rows: list
    meta: dict = field(default_factory=dict)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path):
        if not self.rows:
            open(path, "w").close()
            return
        keys = list(self.rows[0].keys())
        with open(path, "w") as fh:
            fh.write(",".join(keys) + "\n")
            for r in self.rows:
                fh.write(",".join(_fmt(r[k]) for k in keys) + "\n")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def ldp_sweep(problem: SdeProblem, event: RareEvent, eps_grid, N: int, scheme: SchemeSpec, rng: RngSpec,
              *, workers: int = 1, level: float = 0.95) -> SweepTable:
    """Hit fractions of ``event`` along a decreasing eps grid."""
    eps_grid = [float(e) for e in eps_grid]
    ref = solve_limit_ode(problem.with_eps(0.0), scheme).path if event.needs_reference else None
    rows = []
    for i, eps in enumerate(eps_grid):
        ens = simulate(problem.with_eps(eps), scheme, N, rng, record="terminal", workers=workers,
                       reference_path=ref)
        k = int(np.sum(event.hits(ens)))
        p = k / N
        lo, hi = binomial_ci(k, N, level)
        if i == 0 and k < 20:
            warnings.warn(f"only {k} hits at the largest eps; estimates are unreliable", stacklevel=2)
        rows.append({"eps": eps, "N": N, "hits": k, "p_hat": p, "ci_lo": lo, "ci_hi": hi,
                     "rate": _neg_eps_log(eps, p), "rate_lo": _neg_eps_log(eps, hi),
                     "rate_hi": _neg_eps_log(eps, lo), "usable": k > 0})
    return SweepTable("ldp", rows, {"event": event.to_dict(), "N": N, "dt": scheme.dt})


@dataclass
class RateFit:
    rates: list
    gaps: list
    extrapolated: float | None
    verdict: str

    def to_dict(self):
        return asdict(self)


def fit_rate(table: SweepTable, rate_star: float) -> RateFit:
    """Compare ``-eps log p`` with a variational rate.

    The extrapolation fits ``rate(eps) = r0 + c eps`` on the usable rows
    (exact two-point Richardson when there are two).  The verdict is
    "consistent" when the absolute gap shrinks strictly along the grid.
    """
    rows = [r for r in table.rows if r["usable"]]
    eps = np.array([r["eps"] for r in rows])
    rates = np.array([r["rate"] for r in rows])
    gaps = list(np.abs(rates - rate_star))
    if len(rows) < 2:
        return RateFit(list(rates), gaps, None, "insufficient")
    order = np.argsort(-eps)
    eps, rates = eps[order], rates[order]
    gaps = list(np.abs(rates - rate_star))
    slope, r0 = np.polyfit(eps, rates, 1)
    shrinking = all(b < a for a, b in zip(gaps, gaps[1:]))
    return RateFit(list(rates), gaps, float(r0), "consistent" if shrinking else "inconsistent")


def gaussian_tail_rate(level: float, eps: float, scale: float = 1.0) -> float:
    """Exact ``-eps log P(sqrt(eps) scale Z >= level)``."""
    return -eps * stats.norm.logsf(level / (scale * math.sqrt(eps)))


# --------------------------------------------------------------------- MDP

def variance_ode(problem: SdeProblem, scheme: SchemeSpec, X0: SkeletonSolution | None = None) -> np.ndarray:
    """Terminal covariance of ``dnu = grad_b(X0) nu dt + sigma(X0) dW``."""
    if X0 is None:
        X0 = solve_limit_ode(problem.with_eps(0.0), scheme)
    coeffs = problem.coefficients(0.0)
    d = problem.dim
    tgrid = X0.times
    path = X0.path

    def at(t):
        k = min(int(t / scheme.dt), len(tgrid) - 2)
        x = path[k][None]
        mu = EmpiricalMeasure.dirac(path[k])
        return coeffs.grad_b(x, mu)[0], coeffs.sigma(x, mu)[0]

    def rhs(t, p):
        J, S = at(t)
        P = p.reshape(d, d)
        return (J @ P + P @ J.T + S @ S.T).ravel()

    sol = solve_ivp(rhs, (0.0, problem.T), np.zeros(d * d), rtol=1e-10, atol=1e-12, max_step=scheme.dt)
    return sol.y[:, -1].reshape(d, d)


def constrained_along(problem: SdeProblem, X0: SkeletonSolution) -> bool:
    A = problem.operator(0.0)
    if isinstance(A, Zero) or not A.is_cone:
        return False
    return any(tangent_cone(A.domain, x) is not None for x in X0.path)


def linear_fluctuation_samples(problem: SdeProblem, scheme: SchemeSpec, N: int, rng: RngSpec,
                               X0: SkeletonSolution | None = None) -> np.ndarray:
    """Monte Carlo draws of the linearized fluctuation at T, kept in the
    tangent cone of the domain along the limit path (shape (N, d))."""
    if X0 is None:
        X0 = solve_limit_ode(problem.with_eps(0.0), scheme)
    coeffs = problem.coefficients(0.0)
    A = problem.operator(0.0)
    d = problem.dim
    nu = np.zeros((N, d))
    ids = np.arange(N)
    for k in range(len(X0.times) - 1):
        x = X0.path[k]
        mu = EmpiricalMeasure.dirac(x)
        J = coeffs.grad_b(x[None], mu)[0]
        S = coeffs.sigma(x[None], mu)[0]
        lin = MeanFieldCoefficients(AffineDrift(np.zeros(d), J, np.zeros((d, d)), d),
                                    LinearDiffusion(S, 0.0, 0.0, d))
        cone = tangent_cone(A.domain, X0.path[k + 1]) if A.is_cone else None
        op = Zero(d) if cone is None else NormalCone(cone)
        integ = Integrator(op, lin, scheme, 1.0, rng)
        nu, _ = integ.step(nu, EmpiricalMeasure.dirac(np.zeros(d)), k, ids)
    return nu


def mdp_sweep(problem: SdeProblem, eps_grid, N: int, scheme: SchemeSpec, rng: RngSpec, *, lam=default_lambda,
              statistic: str = "variance", component: int = 0, quantile: float = 0.9, workers: int = 1,
              oracle_N: int = 200000) -> SweepTable:
    """Rescaled-fluctuation statistics against the linearized Gaussian limit.

    Raw statistics of ``M = (X - X0)/lambda`` shrink with ``eps / lambda^2``;
    the table therefore also reports the speed-normalized fluctuation
    ``Z = (lambda / sqrt(eps)) M`` whose law converges to the linearized
    limit, and compares that with the oracle.
    """
    if statistic not in ("variance", "mean", "sup_quantile"):
        raise ConfigurationError(f"unknown statistic {statistic!r}")
    eps_grid = [float(e) for e in eps_grid]
    if len(eps_grid) > 1 and not lambda_rule_ok(lam, eps_grid):
        warnings.warn("lambda(eps) violates the moderate-deviation conditions on the grid", stacklevel=2)
    X0 = solve_limit_ode(problem.with_eps(0.0), scheme)
    oracle_kind, oracle, oracle_se = _mdp_oracle(problem, scheme, X0, statistic, component, quantile, rng, oracle_N)
    rows = []
    for eps in eps_grid:
        l = lam(eps)
        record = None if statistic == "sup_quantile" else "terminal"
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ens = simulate_mdp(problem.with_eps(eps), lam, scheme, N, rng, x0_path=X0.path, record=record,
                               workers=workers)
        scale = l / math.sqrt(eps)
        raw, raw_se = _statistic(ens, statistic, component, quantile, 1.0)
        val, se = _statistic(ens, statistic, component, quantile, scale)
        rel = abs(val - oracle) / abs(oracle) if oracle else abs(val)
        z = (val - oracle) / math.hypot(se, oracle_se) if (se or oracle_se) else 0.0
        rows.append({"eps": eps, "lambda": l, "speed": eps / l ** 2, "raw": raw, "raw_se": raw_se,
                     "normalized": val, "se": se, "oracle": oracle, "rel_err": rel, "z": z})
    return SweepTable("mdp", rows, {"statistic": statistic, "oracle_kind": oracle_kind, "oracle_se": oracle_se,
                                    "N": N, "dt": scheme.dt})


def _statistic(ens, statistic, component, quantile, scale):
    if statistic == "sup_quantile":
        sup = np.sqrt(np.sum(ens.X ** 2, axis=2)).max(axis=1) * scale
        return _quantile_with_se(sup, quantile)
    z = ens.terminal[:, component] * scale
    return _moment(z, statistic)


def _moment(z, statistic):
    n = z.size
    m = z.mean()
    if statistic == "mean":
        return float(m), float(z.std(ddof=1) / math.sqrt(n))
    c = z - m
    var = float(np.mean(c * c) * n / (n - 1))
    m4 = float(np.mean(c ** 4))
    return var, float(math.sqrt(max(m4 - var * var, 0.0) / n))


def _quantile_with_se(x, q):
    n = x.size
    xs = np.sort(x)
    val = float(np.quantile(xs, q))
    half = 1.96 * math.sqrt(q * (1 - q) / n)
    lo = xs[max(int(math.floor((q - half) * n)), 0)]
    hi = xs[min(int(math.ceil((q + half) * n)), n - 1)]
    return val, float((hi - lo) / (2 * 1.96))


def _mdp_oracle(problem, scheme, X0, statistic, component, quantile, rng, oracle_N):
    if statistic != "sup_quantile" and not constrained_along(problem, X0):
        P = variance_ode(problem, scheme, X0)
        return ("variance_ode", float(P[component, component]), 0.0) if statistic == "variance" \
            else ("variance_ode", 0.0, 0.0)
    # constrained or path-functional: Monte Carlo of the linearized process
    orng = rng.spawn(2 ** 40)
    if statistic == "sup_quantile":
        lin = problem.with_eps(1.0)
        samples = _linear_paths_sup(lin, scheme, oracle_N, orng, X0)
        v, se = _quantile_with_se(samples, quantile)
        return "linear_mc", v, se
    nu = linear_fluctuation_samples(problem, scheme, oracle_N, orng, X0)
    v, se = _moment(nu[:, component], statistic)
    return "linear_mc", v, se


def _linear_paths_sup(problem, scheme, N, rng, X0):
    coeffs = problem.coefficients(0.0)
    A = problem.operator(0.0)
    d = problem.dim
    nu = np.zeros((N, d))
    sup = np.zeros(N)
    ids = np.arange(N)
    for k in range(len(X0.times) - 1):
        x = X0.path[k]
        mu = EmpiricalMeasure.dirac(x)
        lin = MeanFieldCoefficients(AffineDrift(np.zeros(d), coeffs.grad_b(x[None], mu)[0], np.zeros((d, d)), d),
                                    LinearDiffusion(coeffs.sigma(x[None], mu)[0], 0.0, 0.0, d))
        cone = tangent_cone(A.domain, X0.path[k + 1]) if A.is_cone else None
        integ = Integrator(Zero(d) if cone is None else NormalCone(cone), lin, scheme, 1.0, rng)
        nu, _ = integ.step(nu, EmpiricalMeasure.dirac(np.zeros(d)), k, ids)
        sup = np.maximum(sup, np.sqrt(np.sum(nu * nu, axis=1)))
    return sup


# --------------------------------------------------------------------- LIL

@dataclass(frozen=True)
class ContractionFamily:
    """Radial contractions ``Gamma_a(y) = center + (y - center) / a``."""

    center: tuple = (0.0,)
    kind: str = "radial"

    def __post_init__(self):
        if self.kind != "radial":
            raise ConfigurationError("only the radial contraction family is implemented")

    @property
    def x(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.center, dtype=float))

    def apply(self, a: float, y):
        if not a > 0:
            raise ValueError("contraction parameter must be positive")
        return self.x + (np.asarray(y, dtype=float) - self.x) / a

    def inverse(self, a: float, y):
        return self.apply(1.0 / a, y)

    def check_axioms(self, rng: np.random.Generator, n: int = 200, slack: float = 1e-12) -> dict:
        """Sampled check of fixed center, ordering, identity/inverse and continuity."""
        d = self.x.size
        y = rng.normal(scale=3.0, size=(n, d)) + self.x
        a = np.exp(rng.uniform(-2, 2, n))
        th = np.exp(rng.uniform(-2, 2, n))
        scale = 1.0 + np.abs(y).max()
        res = {"fixed_center": all(np.max(np.abs(self.apply(ai, self.x) - self.x)) <= slack for ai in a)}
        big, small = np.maximum(a, th), np.minimum(a, th)
        r = lambda c, yy: np.linalg.norm(self.apply(c, yy) - self.x)
        res["ordering"] = all(r(b, yy) <= r(s, yy) + slack * scale for b, s, yy in zip(big, small, y))
        res["identity"] = bool(np.max(np.abs(self.apply(1.0, y) - y)) <= slack * scale)
        res["inverse"] = all(np.max(np.abs(self.apply(ai, self.apply(1 / ai, yy)) - yy)) <= slack * scale
                             for ai, yy in zip(a, y))
        # continuity: |Gamma_a Gamma_theta y - y| = |1 - 1/(a theta)| |y - x| -> 0 as a theta -> 1
        cont = []
        for ai, yy in zip(a, y):
            t = (1.0 + 1e-6) / ai
            comp = self.apply(ai, self.apply(t, yy))
            bound = abs(1 - 1 / (ai * t)) * np.linalg.norm(yy - self.x)
            cont.append(np.linalg.norm(comp - yy) <= bound + slack * scale)
        res["continuity"] = all(cont)
        return res

    def to_dict(self):
        return {"center": list(map(float, self.x)), "kind": self.kind}


def psi_large(u: float) -> float:
    if not u > math.e or math.log(math.log(u)) <= 0:
        raise ConfigurationError(f"large-time scale needs u > e (got {u})")
    return math.sqrt(u * math.log(math.log(u)))


def phi_small(u: float) -> float:
    if not 0 < u < math.exp(-1) or math.log(math.log(1 / u)) <= 0:
        raise ConfigurationError(f"small-time scale needs 0 < u < 1/e (got {u})")
    return math.sqrt(u * math.log(math.log(1 / u)))


@dataclass(frozen=True)
class LilSpec:
    """Regime ``large`` (u = c^j > e) or ``small`` (u = c^-j < 1/e)."""

    regime: str = "large"
    c: float = math.e
    js: tuple = (4, 8)
    T: float = 1.0
    steps: int = 100

    def __post_init__(self):
        if self.regime not in ("large", "small"):
            raise ConfigurationError(f"unknown regime {self.regime!r}")
        if not self.c > 1:
            raise ConfigurationError("c must exceed 1")
        for u in self.u_grid:
            self.scale(u)

    @property
    def u_grid(self) -> np.ndarray:
        sign = 1 if self.regime == "large" else -1
        return np.array([self.c ** (sign * j) for j in self.js])

    def scale(self, u: float) -> float:
        return psi_large(u) if self.regime == "large" else phi_small(u)

    def noise_scale(self, u: float) -> float:
        """``sqrt(u) / scale(u) = 1 / sqrt(log log)`` of the transformed equation."""
        return math.sqrt(u) / self.scale(u)


def lil_transform(times, path, u: float, spec: LilSpec, family: ContractionFamily, out_times=None) -> np.ndarray:
    """``Q_u(t) = Gamma_{scale(u)}(Y_{u t})`` on ``out_times`` (default: the LilSpec grid on [0, T]).

    ``path`` is (n, d) or (N, n, d) sampled at ``times``; values at ``u t``
    are linearly interpolated.
    """
    a = spec.scale(u)
    times = np.asarray(times, dtype=float)
    Y = np.asarray(path, dtype=float)
    single = Y.ndim == 2
    if single:
        Y = Y[None]
    t = np.linspace(0.0, spec.T, spec.steps + 1) if out_times is None else np.asarray(out_times, dtype=float)
    s = u * t
    if s[-1] > times[-1] * (1 + 1e-12) or s[0] < times[0]:
        raise ConfigurationError("input path does not cover [0, u T]")
    j = np.clip(np.searchsorted(times, s, side="right") - 1, 0, len(times) - 2)
    w = np.clip((s - times[j]) / (times[j + 1] - times[j]), 0.0, 1.0)
    Ys = Y[:, j, :] * (1 - w)[None, :, None] + Y[:, j + 1, :] * w[None, :, None]
    Q = family.apply(a, Ys)
    return Q[0] if single else Q


class _RadialDrift:
    def __init__(self, base, family, a, factor):
        self.base, self.family, self.a, self.factor = base, family, a, factor
        self.dim = base.dim

    def __call__(self, X, mu):
        return self.factor * self.base(self.family.inverse(self.a, X), mu.pushforward(lambda p: self.family.inverse(self.a, p)))

    def grad(self, X, mu):
        g = self.base.grad(self.family.inverse(self.a, X), mu.pushforward(lambda p: self.family.inverse(self.a, p)))
        return None if g is None else g * (self.factor * self.a)


class _RadialDiffusion:
    def __init__(self, base, family, a):
        self.base, self.family, self.a = base, family, a
        self.dim = base.dim

    def __call__(self, X, mu):
        return self.base(self.family.inverse(self.a, X), mu.pushforward(lambda p: self.family.inverse(self.a, p)))


class _RadialOperator:
    """``factor * A(Gamma_a^{-1} q)``: resolvents via the base resolvent."""

    def __init__(self, base, family, a, factor):
        self.base, self.family, self.a, self.factor = base, family, a, factor
        self.dim = base.dim

    @property
    def domain(self):
        D = self.base.domain
        if D is None:
            return None
        from .monotone import Ball, Box, HalfSpace
        x, a = self.family.x, self.a
        if isinstance(D, HalfSpace):
            return HalfSpace(D.normal, x @ D.normal + (D.offset - x @ D.normal) / a)
        if isinstance(D, Box):
            return Box(x + (D.lower - x) / a, x + (D.upper - x) / a)
        if isinstance(D, Ball):
            return Ball(x + (D.center - x) / a, D.radius / a)
        raise ConfigurationError("transformed domain only for half-spaces, boxes and balls")

    @property
    def is_cone(self):
        return self.base.is_cone

    def resolvent(self, pts, alpha):
        # q + alpha f A(G^{-1} q) = p  <=>  y + (alpha f a) A(y) = G^{-1} p with y = G^{-1} q
        y = self.base.resolvent(self.family.inverse(self.a, pts), alpha * self.factor * self.a)
        return self.family.apply(self.a, y)

    def minimal_section(self, pts):
        return self.factor * self.base.minimal_section(self.family.inverse(self.a, pts))

    def in_domain(self, pts, tol=1e-12):
        return self.base.in_domain(self.family.inverse(self.a, pts), tol * self.a)


def transformed_problem(problem: SdeProblem, u: float, spec: LilSpec, family: ContractionFamily):
    """SDE solved by ``Q_u`` for the radial family: drift ``(u/a) b(G^-1 q)``,
    diffusion ``sigma(G^-1 q)``, operator ``(u/a) A(G^-1 q)``, noise scale
    ``1/log log`` and start ``Gamma_a(x0)``.  Returns (problem, eps_u)."""
    a = spec.scale(u)
    f = u / a
    coeffs = problem.coefficients()
    drift = _RadialDrift(coeffs.drift, family, a, f)
    diff = _RadialDiffusion(coeffs.diffusion, family, a)
    A = problem.operator()
    op = A if isinstance(A, Zero) else _RadialOperator(A, family, a, f)
    eps_u = spec.noise_scale(u) ** 2
    tp = SdeProblem(op, MeanFieldCoefficients(drift, diff), family.apply(a, problem.x0), spec.T, eps_u)
    return tp, eps_u


@dataclass
class LimitSetDistance:
    distance: float
    witness: SkeletonSolution
    approximate: bool
    energy: float


def _initial_guess(q, problem, scheme, law, budget):
    """Control that reproduces q's increments for the frozen-law skeleton, scaled to the budget."""
    coeffs = problem.coefficients(0.0)
    dt = scheme.dt
    dq = np.diff(q, axis=0) / dt
    h = np.empty_like(dq)
    for k in range(dq.shape[0]):
        mu = EmpiricalMeasure.dirac(law[k])
        x = q[k][None]
        S = coeffs.sigma(x, mu)[0]
        h[k] = np.linalg.lstsq(S, dq[k] - coeffs.b(x, mu)[0], rcond=None)[0]
    e = energy(h, dt)
    return h * math.sqrt(budget / e) if e > budget else h


def limit_set_distance(q, problem: SdeProblem, scheme: SchemeSpec, budget: float = 1.0, *,
                       maxiter: int = 300, tol: float = 1e-9) -> LimitSetDistance:
    """``min { sup_t |q_t - Y^h_t| : energy(h) <= budget }``.

    Solved as an epigraph problem in (h, s) with SLSQP: minimize s subject to
    ``s >= +-(q - Y^h)`` coordinatewise (1-D) or ``s^2 >= |q - Y^h|^2``, and
    the energy budget.  Jacobians of the skeleton come from batched central
    differences.  Starts: zero control and the budget-scaled increment fit.
    """
    steps = scheme.steps(problem.T)
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        q = q[:, None]
    if q.shape != (steps + 1, problem.dim):
        raise ConfigurationError("q must live on the solver grid")
    law = _law_from(problem, scheme, None)
    d = problem.dim
    n = steps * d
    dt = scheme.dt

    def paths(H):
        return skeleton_paths(problem, H.reshape(-1, steps, d), scheme, law)

    def jac_paths(h):
        st = FD_REL_STEP * (1.0 + np.abs(h))
        H = np.tile(h, (2 * n, 1))
        idx = np.arange(n)
        H[idx, idx] += st
        H[n + idx, idx] -= st
        P = paths(H)
        return ((P[:n] - P[n:]) / (2 * st)[:, None, None]).reshape(n, -1).T  # (n_out, n)

    one_d = d == 1

    def cons(z):
        h, s = z[:n], z[n]
        diff = (q[None] - paths(h[None]))[0].ravel()
        if one_d:
            return np.concatenate([s - diff, s + diff])
        r2 = np.sum(diff.reshape(-1, d) ** 2, axis=1)
        return s * s - r2

    def cons_jac(z):
        h, s = z[:n], z[n]
        Jy = jac_paths(h)
        if one_d:
            ones = np.ones((Jy.shape[0], 1))
            return np.vstack([np.hstack([Jy, ones]), np.hstack([-Jy, ones])])
        diff = (q[None] - paths(h[None]))[0]
        Jr = 2 * np.einsum("ki,kin->kn", diff, Jy.reshape(steps + 1, d, n))
        return np.hstack([Jr, 2 * s * np.ones((steps + 1, 1))])

    constraints = [
        {"type": "ineq", "fun": cons, "jac": cons_jac},
        {"type": "ineq", "fun": lambda z: budget - 0.5 * float(z[:n] @ z[:n]) * dt,
         "jac": lambda z: np.r_[-z[:n] * dt, 0.0]},
    ]
    best = None
    for h0 in (np.zeros(n), _initial_guess(q, problem, scheme, law, budget).ravel()):
        y = paths(h0[None])[0]
        s0 = float(np.max(np.sqrt(np.sum((q - y) ** 2, axis=1))))
        res = minimize(lambda z: z[n], np.r_[h0, s0], jac=lambda z: np.r_[np.zeros(n), 1.0],
                       constraints=constraints, method="SLSQP", bounds=[(None, None)] * n + [(0, None)],
                       options={"maxiter": maxiter, "ftol": tol})
        h = res.x[:n]
        e = 0.5 * float(h @ h) * dt
        if e > budget:
            h = h * math.sqrt(budget / e)
        y = paths(h[None])[0]
        dist = float(np.max(np.sqrt(np.sum((q - y) ** 2, axis=1))))
        if best is None or dist < best[0]:
            best = (dist, h, not res.success)
    dist, h, approx = best
    grid = ControlGrid(h.reshape(steps, d), dt)
    return LimitSetDistance(dist, solve_skeleton(problem, grid, scheme, law), approx, energy(grid))


def is_brownian_configuration(problem: SdeProblem, family: ContractionFamily) -> bool:
    coeffs = problem.coefficients()
    d = problem.dim
    if not isinstance(problem.operator(), Zero):
        return False
    x = np.random.default_rng(0).normal(size=(4, d))
    mu = EmpiricalMeasure(x)
    b = coeffs.b(x, mu)
    S = coeffs.sigma(x, mu)
    return bool(np.allclose(b, 0) and np.allclose(S, np.eye(d)) and np.allclose(problem.x0, family.x))


def lil_harness(problem: SdeProblem, spec: LilSpec, family: ContractionFamily, N: int, rng: RngSpec, *,
                dt_factor: float = 1.0, n_distance: int = 20, workers: int = 1, component: int = 0) -> SweepTable:
    """Simulate long paths once, transform them at each ``u = c^j`` and report
    per-j statistics: Var(Q_u(1)) (with the 1/log log u oracle for the
    Brownian configuration), max |Q_u(1)|, quantiles of d(Q_u, Lambda) over a subsample of paths."""
    us = spec.u_grid
    std_t = np.linspace(0.0, spec.T, spec.steps + 1)
    dt_std = spec.T / spec.steps
    u_min, u_max = float(us.min()), float(us.max())
    dt = dt_factor * u_min * dt_std
    total = u_max * spec.T
    steps = int(math.ceil(total / dt - 1e-9))
    base = SdeProblem(problem.A, problem.coeffs, problem.x0, steps * dt, problem.eps, problem.A_family)
    scheme = SchemeSpec("projection" if base.operator().is_cone else "penalized", dt)
    need = set()
    for u in us:
        pos = u * std_t / dt
        need.update(np.floor(pos).astype(int).tolist())
        need.update(np.minimum(np.ceil(pos).astype(int), steps).tolist())
    ens = simulate(base, scheme, N, rng, record=sorted(need), workers=workers)
    brownian = is_brownian_configuration(problem, family)
    skel_problem = SdeProblem(Zero(problem.dim), problem.coeffs, family.x, spec.T, 0.0) if brownian else None
    skel_scheme = SchemeSpec("projection", dt_std)
    rows = []
    per_path_max = np.zeros(N)
    for j, u in zip(spec.js, us):
        Q = lil_transform(ens.times, ens.X, u, spec, family, std_t)
        q1 = Q[:, -1, component]
        var, se = _moment(q1, "variance")
        oracle = 1.0 / math.log(math.log(u)) if spec.regime == "large" else 1.0 / math.log(math.log(1 / u))
        row = {"j": j, "u": float(u), "var_q1": var, "var_se": se,
               "var_oracle": oracle if brownian else float("nan"),
               "var_z": (var - oracle) / se if brownian else float("nan"),
               "max_abs_q1": float(np.max(np.sqrt(np.sum(Q[:, -1, :] ** 2, axis=1))))}
        per_path_max = np.maximum(per_path_max, np.sqrt(np.sum(Q[:, -1, :] ** 2, axis=1)))
        if skel_problem is not None and n_distance > 0:
            ds = [limit_set_distance(Q[i], skel_problem, skel_scheme).distance for i in range(min(n_distance, N))]
            row.update({"dist_q50": float(np.quantile(ds, 0.5)), "dist_q90": float(np.quantile(ds, 0.9)),
                        "dist_min": float(np.min(ds))})
        rows.append(row)
    bound = math.sqrt(2.0) * 1.25
    exceed = float(np.mean(per_path_max > bound))
    return SweepTable("lil", rows, {"regime": spec.regime, "c": spec.c, "N": N, "dt": dt,
                                    "brownian": brownian, "gated": ["var_z"],
                                    "soft_bound": bound, "soft_bound_exceed_fraction": exceed,
                                    "soft_bound_flag": exceed > 0,
                                    "note": "distance-to-limit-set convergence in j is reported, not gated"})


# ----------------------------------------------------------------- reports

def _clean(v):
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else ("inf" if f > 0 else "-inf" if f < 0 else "nan")
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    return v


def make_report(sweep_id: str, cfg_hash: str, table: SweepTable | None = None, *, rows=None, oracle=None,
                verdicts=None, extra=None) -> dict:
    rep = {"schema": REPORT_SCHEMA, "sweep_id": sweep_id, "config_hash": cfg_hash,
           "kind": table.kind if table is not None else sweep_id,
           "rows": table.rows if table is not None else (rows or []),
           "meta": table.meta if table is not None else {},
           "oracle": oracle or {}, "verdicts": verdicts or {}}
    if extra:
        rep.update(extra)
    return _clean(rep)


REQUIRED_KEYS = {"schema": str, "sweep_id": str, "config_hash": str, "kind": str, "rows": list,
                 "oracle": dict, "verdicts": dict}


def validate_report(rep: dict) -> dict:
    for k, t in REQUIRED_KEYS.items():
        if k not in rep:
            raise ValueError(f"report is missing {k!r}")
        if not isinstance(rep[k], t):
            raise ValueError(f"report field {k!r} should be {t.__name__}")
    if rep["schema"] != REPORT_SCHEMA:
        raise ValueError(f"unsupported report schema {rep['schema']!r}")
    if not all(isinstance(r, dict) for r in rep["rows"]):
        raise ValueError("report rows must be objects")
    return rep


def write_report(rep: dict, path):
    with open(path, "w") as fh:
        json.dump(validate_report(rep), fh, indent=2, sort_keys=True)


def load_report(path) -> dict:
    with open(path) as fh:
        return validate_report(json.load(fh))
