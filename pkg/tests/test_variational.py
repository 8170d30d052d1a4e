import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import affine, brownian, reflected
from mvlab.monotone import Box, HalfSpace, NormalCone, Zero, halfline
from mvlab.sde import ConfigurationError, SchemeSpec, SdeProblem
from mvlab.variational import (ControlGrid, EndpointHalfSpace, EndpointPoint, OptimizerSettings, PathMatch,
                               RateProblem, TubeExit, energy, fd_gradient_check, minimize_rate, solve_limit_ode,
                               solve_mdp_skeleton, solve_skeleton, tangent_cone)

SCH = SchemeSpec("projection", 0.01)
FAST = OptimizerSettings(restarts=1)


def test_limit_ode_examples():
    sol = solve_limit_ode(brownian(x0=np.array([0.7])), SCH)
    assert np.all(sol.path == 0.7)
    prob = SdeProblem(Zero(1), affine(B1=-1.0, B2=0.5), [2.0], T=2.0)
    assert solve_limit_ode(prob, SCH).terminal[0] == pytest.approx(2 * math.exp(-1.0), abs=2 * SCH.dt)
    prob = reflected(x0=0.5, coeffs=affine(B0=-1.0))
    sol = solve_limit_ode(prob, SCH)
    assert sol.K_tv[-1] == pytest.approx(0.5, abs=SCH.dt)
    hit = sol.times[np.argmax(sol.path[:, 0] <= 0)]
    assert hit == pytest.approx(0.5, abs=SCH.dt)
    assert np.all(sol.path[sol.times >= 0.5 + 1e-9] == 0)


def test_skeleton_examples():
    prob = reflected(x0=0.4, coeffs=affine(B0=-0.3, B1=0.2))
    h0 = ControlGrid.zeros(100, 1, SCH.dt)
    ref = solve_limit_ode(prob, SCH)
    sk = solve_skeleton(prob, h0, SCH)
    assert np.array_equal(sk.path, ref.path) and np.array_equal(sk.K, ref.K)
    # integral of the control
    vals = np.sin(np.arange(100) * 0.1)[:, None]
    sk = solve_skeleton(brownian(), ControlGrid(vals, SCH.dt), SCH)
    assert np.allclose(sk.path[1:, 0], np.cumsum(vals[:, 0]) * SCH.dt, atol=1e-12)
    # push down then up against the barrier
    vals = np.r_[-2 * np.ones(50), 2 * np.ones(50)][:, None]
    sk = solve_skeleton(reflected(), ControlGrid(vals, SCH.dt), SCH)
    assert np.all(sk.path[:51] == 0)
    assert sk.terminal[0] == pytest.approx(1.0, abs=1e-12)
    assert sk.K_tv[50] == pytest.approx(1.0, abs=1e-12) and sk.K_tv[-1] == sk.K_tv[50]


def test_mdp_skeleton_examples():
    prob = SdeProblem(Zero(1), affine(B1=-1.0), [0.0])
    assert np.all(solve_mdp_skeleton(prob, ControlGrid.zeros(100, 1, SCH.dt), None, SCH).path == 0)
    c = 1.5
    nu = solve_mdp_skeleton(prob, ControlGrid.constant(c, 100, SCH.dt), None, SCH)
    assert nu.terminal[0] == pytest.approx(c * (1 - math.exp(-1)), abs=c * SCH.dt)
    # fluctuation pushed into the barrier while X0 sits on it
    prob = reflected(x0=0.0)
    nu = solve_mdp_skeleton(prob, ControlGrid.constant(-1.0, 100, SCH.dt), None, SCH)
    assert np.all(nu.path == 0) and nu.K_tv[-1] == pytest.approx(1.0)


def test_energy_examples():
    assert energy(ControlGrid.zeros(10, 1, 0.1)) == 0
    assert energy(ControlGrid.constant(1.0, 100, 0.01)) == pytest.approx(0.5)
    assert energy(ControlGrid.constant([1.0, 1.0], 200, 0.01)) == pytest.approx(2.0)


def test_rate_endpoint_point():
    rp = RateProblem(brownian(), EndpointPoint([1.0], tol=1e-4), SchemeSpec("projection", 0.02), FAST)
    res = minimize_rate(rp)
    assert res.feasible and res.I == pytest.approx(0.5, rel=0.02)
    assert np.allclose(res.h.values, 1.0, atol=0.05)
    assert energy(res.h) >= res.I - 1e-9


def test_rate_halfspace_and_upper_bound():
    a = 1.3
    rp = RateProblem(brownian(), EndpointHalfSpace([1.0], a), SchemeSpec("projection", 0.02), FAST)
    res = minimize_rate(rp)
    assert res.I == pytest.approx(a * a / 2, rel=0.02)
    # probe controls that reach the target never beat I*
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = rng.normal(size=(50, 1)) + a
        sk = solve_skeleton(rp.problem, ControlGrid(v, 0.02), rp.scheme)
        if sk.terminal[0] >= a:
            assert energy(ControlGrid(v, 0.02)) >= res.I - 1e-3


def test_rate_infeasible_returns_inf():
    # a box confines the state, so the endpoint target cannot be reached
    prob = SdeProblem(NormalCone(Box([-1.0], [1.0])), affine(), [0.0])
    st_ = OptimizerSettings(restarts=0, rounds=2, maxiter=50)
    res = minimize_rate(RateProblem(prob, EndpointHalfSpace([1.0], 2.0), SchemeSpec("projection", 0.05), st_))
    assert not res.feasible and res.I == math.inf
    assert res.diagnostics["starts"]


def test_rate_problem_validation():
    with pytest.raises(ConfigurationError):
        RateProblem(brownian(), EndpointPoint([1.0], tol=0.0), SCH)


def test_targets():
    paths = np.array([[[0.0], [0.5], [1.0]], [[0.0], [-0.2], [0.1]]])
    ref = np.zeros((3, 1))
    assert np.allclose(EndpointHalfSpace([1.0], 0.5).violation(paths, ref), [0.0, 0.4])
    assert np.allclose(TubeExit(0.6).violation(paths, ref), [0.0, 0.4])
    assert np.allclose(PathMatch(paths[0], 1e-3).violation(paths, ref), [0.0, 0.9])


def test_fd_gradient_matches_richardson():
    rp = RateProblem(brownian(), EndpointHalfSpace([1.0], 1.0), SchemeSpec("projection", 0.05))
    h = np.random.default_rng(1).normal(scale=0.3, size=20)
    assert fd_gradient_check(rp, h) < 1e-4


def test_grid_refinement_changes_rate_little():
    a = 1.0
    vals = []
    for dt in (0.02, 0.01):
        rp = RateProblem(reflected(x0=0.5), EndpointHalfSpace([1.0], 0.5 + a), SchemeSpec("projection", dt), FAST)
        vals.append(minimize_rate(rp).I)
    assert abs(vals[1] - vals[0]) < 0.02 * vals[0]


@settings(max_examples=25, deadline=None)
@given(c=st.floats(-3, 3), scale=st.floats(0.1, 4))
def test_mdp_skeleton_homogeneous(c, scale):
    prob = SdeProblem(Zero(2), affine(B1=[[-1.0, 0.3], [0.1, -0.5]], S0=[[1.0, 0.2], [0.0, 1.0]], d=2), [0.3, 0.1])
    vals = np.column_stack([np.linspace(-1, 1, 50) * c, np.ones(50) * c])
    one = solve_mdp_skeleton(prob, ControlGrid(vals, 0.02), None, SchemeSpec("projection", 0.02))
    two = solve_mdp_skeleton(prob, ControlGrid(vals * scale, 0.02), None, SchemeSpec("projection", 0.02))
    assert np.allclose(two.path, scale * one.path, atol=1e-10, rtol=0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_skeleton_stays_in_domain(seed):
    vals = np.random.default_rng(seed).normal(scale=3, size=(100, 2))
    D = Box([0.0, -1.0], [2.0, 1.0])
    prob = SdeProblem(NormalCone(D), affine(B1=-0.3, d=2), [0.5, 0.0])
    sk = solve_skeleton(prob, ControlGrid(vals, SCH.dt), SCH)
    assert np.max(D.distance(sk.path)) == 0
    assert np.all(np.diff(sk.K_tv) >= 0)


def test_tangent_cones():
    D = Box([0.0, -1.0], [2.0, 1.0])
    assert tangent_cone(D, np.array([1.0, 0.0])) is None
    T = tangent_cone(D, np.array([0.0, 1.0]))
    assert np.allclose(T.project(np.array([[-1.0, 1.0], [1.0, -1.0]])), [[0.0, 0.0], [1.0, -1.0]])
    H = HalfSpace([1.0, 1.0], 1.0)
    assert tangent_cone(H, np.array([0.5, 0.5])).offset == 0.0
    assert tangent_cone(halfline(), np.array([3.0])) is None
