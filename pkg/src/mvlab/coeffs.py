"""Mean-field drift/diffusion descriptors and sampled hypothesis diagnostics.

Drifts map ``(X, mu)`` with X of shape (n, d) to (n, d); diffusions map to
(n, d, d).  ``mu`` is an :class:`~mvlab.measure.EmpiricalMeasure`.  Matrix
products are written as explicit column loops so each row's result is
independent of how many rows are evaluated together.
"""
from __future__ import annotations

import importlib
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measure import EmpiricalMeasure, wasserstein2


def _rows_matvec(M: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Row-wise ``M @ x`` for X of shape (n, d)."""
    out = np.zeros((X.shape[0], M.shape[0]))
    for j in range(M.shape[1]):
        out = out + X[:, j:j + 1] * M[:, j]
    return out


def batched_matvec(S: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``S[i] @ v[i]`` for S (n, d, k), v (n, k); column loop, no BLAS."""
    out = np.zeros(S.shape[:2])
    for j in range(S.shape[2]):
        out = out + S[:, :, j] * v[:, j:j + 1]
    return out


def resolve_callable(path: str) -> Callable:
    """Import ``"package.module:function"``."""
    mod, _, name = path.partition(":")
    if not name:
        raise ValueError(f"callback path {path!r} must look like 'module:function'")
    return getattr(importlib.import_module(mod), name)


# ----------------------------------------------------------------- modulus

@dataclass(frozen=True)
class Modulus:
    """Concave modulus of continuity.

    ``linear``: ``L u``.  ``log``: ``u log(1/u)`` up to ``eta``, then linear
    with the left derivative at ``eta``.  ``loglog``: ``u log(1/u) log log(1/u)``
    up to ``eta``, continued the same way.
    """

    kind: str = "linear"
    L: float = 1.0
    eta: float = 1e-2

    def __post_init__(self):
        if self.kind not in ("linear", "log", "loglog"):
            raise ValueError(f"unknown modulus kind {self.kind!r}")
        if self.kind == "log" and not 0 < self.eta < math.exp(-1):
            raise ValueError("log modulus needs 0 < eta < 1/e")
        if self.kind == "loglog" and not 0 < self.eta < math.exp(-math.e):
            raise ValueError("loglog modulus needs 0 < eta < exp(-e)")
        if self.L <= 0:
            raise ValueError("L must be positive")

    def _core(self, u):
        lg = -np.log(u)
        if self.kind == "log":
            return u * lg
        return u * lg * np.log(lg)

    def left_derivative(self) -> float:
        lg = math.log(1.0 / self.eta)
        if self.kind == "log":
            return lg - 1.0
        llg = math.log(lg)
        return lg * llg - llg - 1.0

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        if np.any(u < 0):
            raise ValueError("modulus argument must be nonnegative")
        if self.kind == "linear":
            return self.L * u
        eta = self.eta
        small = (u > 0) & (u <= eta)
        safe = np.where(small, u, eta)
        val = np.where(u > eta, float(self._core(eta)) + self.left_derivative() * (u - eta),
                       np.where(small, self._core(safe), 0.0))
        return val if val.ndim else float(val)


def eval_modulus(rho: Modulus, u):
    return rho(u)


# ------------------------------------------------------------- descriptors

class Drift:
    dim: int

    def __call__(self, X, mu: EmpiricalMeasure) -> np.ndarray:
        raise NotImplementedError

    def grad(self, X, mu: EmpiricalMeasure) -> np.ndarray | None:
        """Spatial Jacobian (n, d, d), or None if unavailable."""
        return None

    def to_dict(self) -> dict:
        raise NotImplementedError


class Diffusion:
    dim: int

    def __call__(self, X, mu: EmpiricalMeasure) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


def _mat(a, d):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return a * np.eye(d)
    return np.atleast_2d(a).reshape(d, d)


@dataclass(frozen=True, eq=False)
class AffineDrift(Drift):
    """``b(x, mu) = B0 + B1 x + B2 mean(mu)``; scalars mean multiples of I."""

    B0: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    dim: int = 1

    def __post_init__(self):
        d = self.dim
        B0 = np.broadcast_to(np.asarray(self.B0, dtype=float), (d,)).copy()
        object.__setattr__(self, "B0", B0)
        object.__setattr__(self, "B1", _mat(self.B1, d))
        object.__setattr__(self, "B2", _mat(self.B2, d))

    def __call__(self, X, mu):
        m = self.B2 @ mu.mean if np.any(self.B2) else np.zeros(self.dim)
        return (self.B0 + m) + _rows_matvec(self.B1, X)

    def grad(self, X, mu):
        return np.broadcast_to(self.B1, (X.shape[0], self.dim, self.dim))

    def to_dict(self):
        return {"kind": "affine", "dim": self.dim, "B0": self.B0.tolist(),
                "B1": self.B1.tolist(), "B2": self.B2.tolist()}


@dataclass(frozen=True, eq=False)
class CallbackDrift(Drift):
    """User drift ``fn(X, mu) -> (n, d)``; ``path`` names it for configs."""

    fn: Callable
    dim: int = 1
    grad_fn: Callable | None = None
    path: str | None = None
    grad_path: str | None = None

    @classmethod
    def from_path(cls, path: str, dim: int, grad_path: str | None = None):
        return cls(resolve_callable(path), dim, resolve_callable(grad_path) if grad_path else None, path, grad_path)

    def __call__(self, X, mu):
        return np.asarray(self.fn(X, mu), dtype=float).reshape(X.shape[0], self.dim)

    def grad(self, X, mu):
        if self.grad_fn is None:
            return None
        return np.asarray(self.grad_fn(X, mu), dtype=float).reshape(X.shape[0], self.dim, self.dim)

    def to_dict(self):
        if self.path is None:
            raise ValueError("callback drift without an import path cannot be serialized")
        out = {"kind": "callback", "dim": self.dim, "path": self.path}
        if self.grad_path is not None:
            out["grad_path"] = self.grad_path
        return out


@dataclass(frozen=True, eq=False)
class LinearDiffusion(Diffusion):
    """``sigma(x, mu) = S0 + s1 diag(x) + s2 diag(mean(mu))``."""

    S0: np.ndarray
    s1: float = 0.0
    s2: float = 0.0
    dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "S0", _mat(self.S0, self.dim))

    def __call__(self, X, mu):
        n, d = X.shape
        out = np.broadcast_to(self.S0, (n, d, d)).copy()
        idx = np.arange(d)
        if self.s1:
            out[:, idx, idx] += self.s1 * X
        if self.s2:
            out[:, idx, idx] += self.s2 * mu.mean
        return out

    @property
    def is_constant(self) -> bool:
        return self.s1 == 0 and self.s2 == 0

    def to_dict(self):
        return {"kind": "linear", "dim": self.dim, "S0": self.S0.tolist(), "s1": self.s1, "s2": self.s2}


@dataclass(frozen=True, eq=False)
class CallbackDiffusion(Diffusion):
    fn: Callable
    dim: int = 1
    path: str | None = None

    @classmethod
    def from_path(cls, path: str, dim: int):
        return cls(resolve_callable(path), dim, path)

    def __call__(self, X, mu):
        return np.asarray(self.fn(X, mu), dtype=float).reshape(X.shape[0], self.dim, self.dim)

    def to_dict(self):
        if self.path is None:
            raise ValueError("callback diffusion without an import path cannot be serialized")
        return {"kind": "callback", "dim": self.dim, "path": self.path}


FD_REL_STEP = 1e-5


def fd_jacobian(f: Callable, X: np.ndarray, mu: EmpiricalMeasure, rel_step: float = FD_REL_STEP) -> np.ndarray:
    """Central-difference spatial Jacobian with step ``rel_step * (1 + |x|)``."""
    n, d = X.shape
    h = rel_step * (1.0 + np.sqrt(np.sum(X * X, axis=1)))
    J = np.empty((n, d, d))
    for j in range(d):
        E = np.zeros_like(X)
        E[:, j] = h
        J[:, :, j] = (f(X + E, mu) - f(X - E, mu)) / (2 * h)[:, None]
    return J


@dataclass(frozen=True, eq=False)
class MeanFieldCoefficients:
    drift: Drift
    diffusion: Diffusion

    def __post_init__(self):
        if self.drift.dim != self.diffusion.dim:
            raise ValueError("drift and diffusion dimensions differ")

    @property
    def dim(self) -> int:
        return self.drift.dim

    def b(self, X, mu):
        return self.drift(X, mu)

    def sigma(self, X, mu):
        return self.diffusion(X, mu)

    def grad_b(self, X, mu):
        g = self.drift.grad(X, mu)
        return fd_jacobian(self.drift, X, mu) if g is None else g

    def at(self, eps: float) -> "MeanFieldCoefficients":
        return self

    def to_dict(self):
        return {"drift": self.drift.to_dict(), "diffusion": self.diffusion.to_dict()}


@dataclass(frozen=True, eq=False)
class _ShiftedDrift(Drift):
    base: Drift
    shift: np.ndarray

    @property
    def dim(self):
        return self.base.dim

    def __call__(self, X, mu):
        return self.base(X, mu) + self.shift

    def grad(self, X, mu):
        return self.base.grad(X, mu)


@dataclass(frozen=True, eq=False)
class _ShiftedDiffusion(Diffusion):
    base: Diffusion
    shift: np.ndarray

    @property
    def dim(self):
        return self.base.dim

    def __call__(self, X, mu):
        return self.base(X, mu) + self.shift


@dataclass(frozen=True, eq=False)
class PerturbationFamily:
    """``b_eps = b + rho_b(eps) u``, ``sigma_eps = sigma + rho_sigma(eps) S``.

    ``u`` is a unit vector and ``S`` a matrix with unit Hilbert-Schmidt norm,
    so the declared deviations ``rho_b(eps) = cb * eps**pb`` and
    ``rho_sigma(eps) = cs * eps**ps`` are attained exactly.
    """

    base: MeanFieldCoefficients
    drift_direction: np.ndarray | None = None
    cb: float = 0.0
    pb: float = 1.0
    diffusion_direction: np.ndarray | None = None
    cs: float = 0.0
    ps: float = 1.0

    def __post_init__(self):
        d = self.base.dim
        u = np.ones(d) if self.drift_direction is None else np.asarray(self.drift_direction, dtype=float)
        S = np.eye(d) if self.diffusion_direction is None else _mat(self.diffusion_direction, d)
        if np.linalg.norm(u) == 0 or np.linalg.norm(S) == 0:
            raise ValueError("perturbation directions must be nonzero")
        object.__setattr__(self, "drift_direction", u / np.linalg.norm(u))
        object.__setattr__(self, "diffusion_direction", S / np.linalg.norm(S))
        if self.cb < 0 or self.cs < 0 or self.pb <= 0 or self.ps <= 0:
            raise ValueError("perturbation rates need c >= 0 and p > 0")

    @property
    def dim(self):
        return self.base.dim

    def rho_b(self, eps: float) -> float:
        return self.cb * eps ** self.pb

    def rho_sigma(self, eps: float) -> float:
        return self.cs * eps ** self.ps

    def at(self, eps: float) -> MeanFieldCoefficients:
        if eps == 0 or (self.cb == 0 and self.cs == 0):
            return self.base
        return MeanFieldCoefficients(_ShiftedDrift(self.base.drift, self.rho_b(eps) * self.drift_direction),
                                     _ShiftedDiffusion(self.base.diffusion,
                                                       self.rho_sigma(eps) * self.diffusion_direction))

    def b(self, X, mu):
        return self.base.b(X, mu)

    def sigma(self, X, mu):
        return self.base.sigma(X, mu)

    def grad_b(self, X, mu):
        return self.base.grad_b(X, mu)

    def to_dict(self):
        out = self.base.to_dict()
        out["perturbation"] = {"drift_direction": self.drift_direction.tolist(), "cb": self.cb, "pb": self.pb,
                               "diffusion_direction": self.diffusion_direction.tolist(),
                               "cs": self.cs, "ps": self.ps}
        return out


# ------------------------------------------------------------- diagnostics

@dataclass
class ConditionResult:
    worst_margin: float = -np.inf
    violations: int = 0
    checked: int = 0

    def update(self, margins, tol):
        margins = np.atleast_1d(margins)
        self.worst_margin = max(self.worst_margin, float(np.max(margins)))
        self.violations += int(np.sum(margins > tol))
        self.checked += margins.size


@dataclass
class HypothesisReport:
    results: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(r.violations == 0 for r in self.results.values())

    def violated(self) -> list:
        return [k for k, r in self.results.items() if r.violations]

    def to_dict(self):
        return {k: {"worst_margin": r.worst_margin, "violations": r.violations, "checked": r.checked}
                for k, r in self.results.items()}


def sample_tuples(dim: int, n: int, rng: np.random.Generator, n_particles: int = 5, scale: float = 3.0):
    """Random (x, x', mu, nu) tuples for the hypothesis checks."""
    out = []
    for _ in range(n):
        x = scale * rng.uniform(-1, 1, size=dim)
        xp = scale * rng.uniform(-1, 1, size=dim)
        mu = EmpiricalMeasure(scale * rng.uniform(-1, 1, size=(n_particles, dim)))
        nu = EmpiricalMeasure(scale * rng.uniform(-1, 1, size=(n_particles, dim)))
        out.append((x, xp, mu, nu))
    return out


def _hs2(S):
    return float(np.sum(S * S))


def check_hypotheses(coeffs, rho: Modulus, L: float, samples, which=("H1", "H2"),
                     eps_grid=(), q: float = 0.0, tol: float = 1e-10, warn: bool = True) -> HypothesisReport:
    """Evaluate the sampled inequalities and report the worst margins.

    A margin is ``lhs - rhs``; positive margins beyond ``tol`` count as
    violations.  For a :class:`PerturbationFamily` the checks also run on
    each ``at(eps)`` for ``eps`` in ``eps_grid``, and the declared deviation
    bounds are compared with the sampled sup-deviation.
    """
    if not samples:
        raise ValueError("no samples")
    members = [coeffs.at(0.0) if isinstance(coeffs, PerturbationFamily) else coeffs]
    if isinstance(coeffs, PerturbationFamily):
        members += [coeffs.at(e) for e in eps_grid]
    rep = HypothesisReport()
    R = rep.results
    for which_name in which:
        if which_name not in ("H1", "H2", "B0", "B3"):
            raise ValueError(f"unknown hypothesis {which_name!r}")
    for x, xp, mu, nu in samples:
        X, Xp = x[None, :], xp[None, :]
        dx2 = float(np.sum((x - xp) ** 2))
        w2 = wasserstein2(mu, nu)
        rhs_mod = L * (rho(dx2) + rho(w2 * w2))
        m2mu = mu.second_moment
        for c in members:
            bx, bxp = c.b(X, mu)[0], c.b(Xp, nu)[0]
            sx, sxp = c.sigma(X, mu)[0], c.sigma(Xp, nu)[0]
            if "H1" in which:
                R.setdefault("H1.dissipativity", ConditionResult()).update(
                    float((x - xp) @ (bx - bxp)) - rhs_mod, tol)
                R.setdefault("H1.growth", ConditionResult()).update(
                    float(np.linalg.norm(bx)) - L * (1 + np.linalg.norm(x) + math.sqrt(m2mu)), tol)
            if "H2" in which:
                R.setdefault("H2.continuity", ConditionResult()).update(_hs2(sx - sxp) - rhs_mod, tol)
                R.setdefault("H2.growth", ConditionResult()).update(
                    _hs2(sx) - L * (1 + float(x @ x) + m2mu), tol)
            if "B0" in which:
                bxp_mu = c.b(Xp, mu)[0]
                R.setdefault("B0.one_sided", ConditionResult()).update(
                    float((x - xp) @ (bx - bxp_mu)) - L * dx2, tol)
                R.setdefault("B0.measure_lipschitz", ConditionResult()).update(
                    float(np.linalg.norm(bx - c.b(X, nu)[0])) - L * w2, tol)
                R.setdefault("B0.growth", ConditionResult()).update(
                    float(np.linalg.norm(bx)) - L * (1 + np.linalg.norm(x) + math.sqrt(m2mu)), tol)
                g1, g2 = c.grad_b(X, mu)[0], c.grad_b(Xp, mu)[0]
                nx, nxp = np.linalg.norm(x), np.linalg.norm(xp)
                R.setdefault("B0.grad_lipschitz", ConditionResult()).update(
                    math.sqrt(_hs2(g1 - g2)) - L * (1 + nx ** q + nxp ** q) * math.sqrt(dx2), 1e-6)
            if "B3" in which:
                R.setdefault("B3.lipschitz", ConditionResult()).update(_hs2(sx - sxp) - L * (dx2 + w2 * w2), tol)
                R.setdefault("B3.growth", ConditionResult()).update(
                    _hs2(sx) - L * (1 + float(x @ x) + m2mu), tol)
        if isinstance(coeffs, PerturbationFamily):
            base = coeffs.base
            for e in eps_grid:
                ce = coeffs.at(e)
                db = float(np.linalg.norm(ce.b(X, mu)[0] - base.b(X, mu)[0]))
                ds = math.sqrt(_hs2(ce.sigma(X, mu)[0] - base.sigma(X, mu)[0]))
                R.setdefault("perturbation.drift", ConditionResult()).update(
                    db - coeffs.rho_b(e) * (1 + 1e-6), tol)
                R.setdefault("perturbation.diffusion", ConditionResult()).update(
                    ds - coeffs.rho_sigma(e) * (1 + 1e-6), tol)
    if warn and not rep.ok:
        warnings.warn(f"sampled hypothesis violations: {rep.violated()}", stacklevel=2)
    return rep


def check_b1(coeffs, x0_path: np.ndarray, dt: float, L_grad: float):
    """``int_0^T ||grad b(X0_t, delta_{X0_t})|| dt < L_grad`` along a limit path.

    Returns ``(integral, ok)``; left-point rule on the solver grid.
    """
    total = 0.0
    for x in x0_path[:-1]:
        mu = EmpiricalMeasure.dirac(x)
        G = coeffs.grad_b(np.atleast_2d(x), mu)[0]
        total += math.sqrt(_hs2(G)) * dt
    return total, total < L_grad


def lambda_rule_ok(lam: Callable[[float], float], eps_grid) -> bool:
    """Sampled check that lambda -> 0 and eps / lambda^2 -> 0 along the grid."""
    eps = sorted(eps_grid, reverse=True)
    lv = [lam(e) for e in eps]
    ratio = [e / l ** 2 for e, l in zip(eps, lv)]
    if any(l <= 0 for l in lv):
        return False
    dec = all(b < a for a, b in zip(lv, lv[1:])) and all(b < a for a, b in zip(ratio, ratio[1:]))
    return dec and lv[-1] < 1 and ratio[-1] < 1
