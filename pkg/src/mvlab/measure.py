"""Equal-weight empirical measures and exact W2 between them."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.optimize import linear_sum_assignment

EXHAUSTIVE_MAX_N = 8


class UnsupportedCase(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Uniform measure on the rows of ``points`` (shape (N, d))."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim == 1:
            p = p.reshape(-1, 1)
        if p.ndim != 2 or p.shape[0] < 1:
            raise ValueError("need at least one point")
        if not np.all(np.isfinite(p)):
            raise ValueError("points must be finite")
        object.__setattr__(self, "points", p)

    @classmethod
    def dirac(cls, x) -> "EmpiricalMeasure":
        return cls(np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @cached_property
    def mean(self) -> np.ndarray:
        # column sums on a contiguous transpose: pairwise summation, layout-independent
        cols = np.ascontiguousarray(self.points.T)
        return cols.sum(axis=1) / self.n

    @cached_property
    def second_moment(self) -> float:
        """``(1/N) sum |x_i|^2``, i.e. the squared 2-norm of the measure."""
        sq = np.ascontiguousarray((self.points * self.points).sum(axis=1))
        return float(sq.sum() / self.n)

    def shifted(self, v) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.points + np.asarray(v, dtype=float))

    def pushforward(self, f) -> "EmpiricalMeasure":
        return EmpiricalMeasure(f(self.points))


def second_moment(mu: EmpiricalMeasure) -> float:
    return mu.second_moment


def _cost(x, y):
    diff = x[:, None, :] - y[None, :, :]
    return np.sum(diff * diff, axis=2)


def _w2_exhaustive(x, y) -> float:
    C = _cost(x, y)
    n = x.shape[0]
    # fsum is order independent, which keeps W2 exactly symmetric
    idx = np.arange(n)
    best = min(math.fsum(C[idx, p]) for p in itertools.permutations(range(n)))
    return float(np.sqrt(max(best, 0.0) / n))


def wasserstein2(mu: EmpiricalMeasure, nu: EmpiricalMeasure, method: str = "auto") -> float:
    """Exact W2 between equal-size uniform clouds.

    1-D: sorted pairing.  Higher dimensions: exhaustive permutation search for
    N <= 8, otherwise an optimal assignment (Hungarian-type solver).
    ``method`` may force ``"sort"``, ``"exhaustive"`` or ``"assignment"``.
    """
    if mu.n != nu.n:
        raise UnsupportedCase(f"W2 only for equal particle counts ({mu.n} != {nu.n})")
    if mu.dim != nu.dim:
        raise ValueError("dimension mismatch")
    x, y = mu.points, nu.points
    if method == "auto":
        method = "sort" if mu.dim == 1 else ("exhaustive" if mu.n <= EXHAUSTIVE_MAX_N else "assignment")
    if method == "sort":
        if mu.dim != 1:
            raise UnsupportedCase("sorted pairing is one-dimensional")
        d = np.sort(x[:, 0]) - np.sort(y[:, 0])
        return float(np.sqrt(math.fsum(d * d) / mu.n))
    if method == "exhaustive":
        return _w2_exhaustive(x, y)
    if method == "assignment":
        C = _cost(x, y)
        r, c = linear_sum_assignment(C)
        return float(np.sqrt(max(math.fsum(C[r, c]), 0.0) / mu.n))
    raise ValueError(f"unknown method {method!r}")


@dataclass
class CouplingBoundReport:
    w2: float
    bound: float
    ok: bool


def w2_coupling_bound_check(X, Y, slack: float = 1e-10) -> CouplingBoundReport:
    """Check ``W2(emp X, emp Y) <= sqrt(mean |X_i - Y_i|^2)`` for paired samples."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape != Y.shape:
        raise ValueError("paired samples must have equal shapes")
    mu, nu = EmpiricalMeasure(X), EmpiricalMeasure(Y)
    w = wasserstein2(mu, nu)
    diff = mu.points - nu.points
    bound = float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))
    return CouplingBoundReport(w, bound, w <= bound + slack)
