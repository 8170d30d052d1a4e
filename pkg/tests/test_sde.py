import math

import numpy as np
import pytest
from scipy import stats

from conftest import affine, brownian, reflected
from mvlab.coeffs import AffineDrift, LinearDiffusion, MeanFieldCoefficients
from mvlab.monotone import Ball, Box, NormalCone, Zero, abs_operator, halfline
from mvlab.rng import RngSpec
from mvlab.sde import (ConfigurationError, SchemeSpec, SdeProblem, SimulationAborted, default_lambda,
                       k_monotonicity_diag, read_binary, simulate, simulate_controlled, simulate_mdp)
from mvlab.variational import ControlGrid, solve_limit_ode, solve_skeleton

PROJ = SchemeSpec("projection", 0.01)
PEN = SchemeSpec("penalized", 0.01)


def test_brownian_terminal_variance():
    N = 10_000
    ens = simulate(brownian(), PROJ, N, RngSpec(1), record="terminal")
    v = ens.terminal[:, 0].var(ddof=1)
    se = math.sqrt(2 / (N - 1))
    assert abs(v - 1) < 4 * se


def test_reflected_folded_normal():
    N = 10_000
    ens = simulate(reflected(), PROJ, N, RngSpec(2), record="terminal")
    frac = np.mean(ens.terminal[:, 0] <= 1.0)
    p = 2 * stats.norm.cdf(1.0) - 1
    assert abs(frac - p) < 4 * math.sqrt(p * (1 - p) / N)
    assert np.all(ens.terminal >= 0)


@pytest.mark.parametrize("scheme", [PROJ, SchemeSpec("projection", 0.001), PEN])
def test_mean_ode(scheme):
    coeffs = affine(B1=-1.0, B2=0.5, S0=0.0)
    prob = SdeProblem(Zero(1), coeffs, [1.0], eps=0.3)
    ens = simulate(prob, scheme, 50, RngSpec(3), record="terminal")
    assert np.allclose(ens.terminal, math.exp(-0.5), atol=scheme.dt)


def test_controlled_zero_control_bit_identical():
    prob = reflected(eps=0.5, coeffs=affine(B1=-1.0, B2=0.3, S0=1.0, s1=0.2))
    N = 200
    base = simulate(prob, PROJ, N, RngSpec(4))
    h = ControlGrid.zeros(100, 1, PROJ.dt)
    ctrl = simulate_controlled(prob, base, h, PROJ, N, RngSpec(4))
    # frozen law equals the law the first run generated, so the dynamics coincide
    assert np.array_equal(base.X, ctrl.X)
    assert np.array_equal(base.K, ctrl.K)


def test_controlled_constant_control_brownian():
    prob = brownian(eps=0.0, x0=np.array([0.5]))
    steps = 100
    ens0 = simulate(prob, PROJ, 3, RngSpec(0))
    ens = simulate_controlled(prob, ens0, ControlGrid.constant(2.0, steps, PROJ.dt), PROJ, 3, RngSpec(0))
    assert np.allclose(ens.terminal, 2.5, atol=1e-12)


def test_controlled_pushing_into_barrier():
    prob = reflected(eps=0.0)
    ens0 = simulate(prob, PROJ, 1, RngSpec(0))
    ens = simulate_controlled(prob, ens0, ControlGrid.constant(-1.0, 100, PROJ.dt), PROJ, 1, RngSpec(0))
    assert np.all(ens.X == 0)
    assert ens.K_tv[0, -1] == pytest.approx(1.0, abs=PROJ.dt)
    assert np.all(np.diff(ens.K_tv, axis=1) >= 0)


def test_controlled_grid_mismatch():
    prob = reflected(eps=0.0)
    ens0 = simulate(prob, PROJ, 1, RngSpec(0))
    with pytest.raises(ConfigurationError):
        simulate_controlled(prob, ens0, ControlGrid.zeros(50, 1, 0.02), PROJ, 1, RngSpec(0))
    with pytest.raises(ConfigurationError):
        simulate_controlled(prob, ens0.laws()[:10], ControlGrid.zeros(100, 1, 0.01), PROJ, 1, RngSpec(0))


def test_projection_requires_cone():
    prob = SdeProblem(abs_operator(), affine(), [0.0])
    with pytest.raises(ConfigurationError):
        simulate(prob, PROJ, 10, RngSpec(0))
    simulate(prob, PEN, 10, RngSpec(0))


def test_problem_validation():
    with pytest.raises(ConfigurationError):
        reflected(x0=-1.0)
    with pytest.raises(ConfigurationError):
        brownian(T=0.0)
    with pytest.raises(ConfigurationError):
        brownian(eps=1.5)
    with pytest.raises(ConfigurationError):
        SchemeSpec("projection", 0.3).steps(1.0)
    with pytest.raises(ConfigurationError):
        SchemeSpec("implicit", 0.1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_aborts_on_blowup():
    coeffs = MeanFieldCoefficients(AffineDrift(0.0, 1e6, 0.0), LinearDiffusion(1.0))
    prob = SdeProblem(Zero(1), coeffs, [1.0], T=100.0)
    with pytest.raises(SimulationAborted) as exc:
        simulate(prob, SchemeSpec("projection", 1.0), 4, RngSpec(0))
    assert exc.value.step > 0


def test_mdp_lambda_examples():
    prob = SdeProblem(Zero(1), affine(B1=-1.0), [0.0], eps=1e-3)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        simulate_mdp(prob, default_lambda, PROJ, 10, RngSpec(0), eps_grid=[1e-2, 1e-3, 1e-4])
    with pytest.warns(UserWarning):
        ens = simulate_mdp(prob, lambda e: e ** 0.75, PROJ, 10, RngSpec(0), eps_grid=[1e-2, 1e-3, 1e-4])
    assert np.all(np.isfinite(ens.X))


def test_mdp_variance_linear():
    prob = SdeProblem(Zero(1), affine(B1=-1.0), [0.0], eps=1e-4)
    N = 20_000
    ens = simulate_mdp(prob, default_lambda, PROJ, N, RngSpec(5), record="terminal")
    z = ens.terminal[:, 0] * default_lambda(1e-4) / math.sqrt(1e-4)
    target = (1 - math.exp(-2)) / 2
    assert abs(z.var(ddof=1) - target) < 0.05 * target


# ------------------------------------------------------------- invariants

def _workers_problem():
    coeffs = affine(B1=-0.5, B2=0.4, S0=[[1.0, 0.2], [0.0, 0.8]], d=2, s1=0.1)
    return SdeProblem(NormalCone(Box([0.0, -1.0], [2.0, 1.0])), coeffs, [0.5, 0.0], eps=0.7)


@pytest.mark.parametrize("scheme", [PROJ, PEN])
def test_determinism_across_workers(scheme):
    prob = _workers_problem()
    runs = [simulate(prob, scheme, 64, RngSpec(9), workers=w) for w in (1, 4, 16)]
    for r in runs[1:]:
        assert np.array_equal(runs[0].X, r.X)
        assert np.array_equal(runs[0].K, r.K)
        assert np.array_equal(runs[0].K_tv, r.K_tv)
    again = simulate(prob, scheme, 64, RngSpec(9))
    assert np.array_equal(runs[0].X, again.X)


def test_mdp_determinism_across_workers():
    prob = reflected(eps=1e-3, x0=0.2, coeffs=affine(B1=-1.0))
    runs = [simulate_mdp(prob, default_lambda, PROJ, 40, RngSpec(3), workers=w) for w in (1, 4, 16)]
    for r in runs[1:]:
        assert np.array_equal(runs[0].X, r.X)


@pytest.mark.parametrize("A", [NormalCone(halfline()), NormalCone(Box([0.0, -1.0], [2.0, 1.0])),
                               NormalCone(Ball([0.0, 0.0], 1.0))], ids=["halfline", "box", "ball"])
def test_projection_confinement(A):
    d = A.dim
    x0 = np.zeros(d)
    prob = SdeProblem(A, affine(B0=0.5, d=d), x0)
    ens = simulate(prob, PROJ, 300, RngSpec(6))
    X = ens.X.reshape(-1, d)
    assert np.max(A.domain.distance(X)) == 0
    assert np.all(ens.K[:, 0] == 0)
    assert np.all(np.diff(ens.K_tv, axis=1) >= 0)


def test_penalized_distance_reported():
    prob = reflected(coeffs=affine(B0=-1.0))
    ens = simulate(prob, PEN, 300, RngSpec(6))
    dist = np.max(halfline().distance(ens.X.reshape(-1, 1)))
    assert dist == pytest.approx(ens.max_domain_distance)
    assert dist <= PEN.alpha * ens.max_penalty + 1e-12
    assert np.all(np.diff(ens.K_tv, axis=1) >= 0)


@pytest.mark.parametrize("scheme", [PROJ, PEN])
def test_zero_noise_matches_limit_solver(scheme):
    prob = reflected(eps=0.0, x0=1.0, coeffs=affine(B0=-2.0, B1=0.3, B2=0.2))
    ens = simulate(prob, scheme, 1, RngSpec(0))
    ref = solve_limit_ode(prob, scheme)
    assert np.max(np.abs(ens.X[0] - ref.path)) <= 1e-12
    assert np.max(np.abs(ens.K[0] - ref.K)) <= 1e-12


def test_sup_moment_stable_under_n_doubling():
    prob = reflected(coeffs=affine(B1=-1.0, B2=0.5))
    m = []
    for N in (2000, 4000):
        ens = simulate(prob, PROJ, N, RngSpec(7))
        m.append(np.mean(np.max(ens.X[:, :, 0] ** 2, axis=1)))
    assert np.isfinite(m).all()
    assert 0.5 <= m[1] / m[0] <= 2


def test_mean_estimator_variance_halves():
    prob = brownian()
    var = []
    for N in (200, 400):
        means = [simulate(prob, PROJ, N, RngSpec(100 + r), record="terminal").terminal.mean() for r in range(200)]
        var.append(np.var(means, ddof=1))
    assert 1 / 3 <= var[0] / var[1] / 2 <= 3


def test_k_monotonicity_examples():
    ens = simulate(brownian(), PROJ, 50, RngSpec(8))
    rep = k_monotonicity_diag(ens, [[0.3]], [[0.0]])
    assert np.all(rep.sums == 0) and rep.ok
    refl = simulate(reflected(), SchemeSpec("projection", 0.001), 500, RngSpec(8))
    assert k_monotonicity_diag(refl, [[1.0]], [[0.0]]).ok
    bad = k_monotonicity_diag(refl, [[1.0]], [[0.0]], flip_k=True)
    assert not bad.ok and bad.worst_margin > bad.tol


def test_k_monotonicity_penalized_graph_samples():
    A = abs_operator()
    prob = SdeProblem(A, affine(), [0.0])
    ens = simulate(prob, PEN, 200, RngSpec(8))
    xs = np.array([[-1.0], [0.0], [0.0], [2.0]])
    ys = np.array([[-1.0], [0.5], [-0.5], [1.0]])
    assert k_monotonicity_diag(ens, xs, ys).ok


def test_record_options():
    prob = brownian()
    full = simulate(prob, PROJ, 5, RngSpec(1))
    stride = simulate(prob, PROJ, 5, RngSpec(1), record=10)
    term = simulate(prob, PROJ, 5, RngSpec(1), record="terminal")
    assert full.X.shape == (5, 101, 1)
    assert np.array_equal(stride.X, full.X[:, ::10])
    assert np.array_equal(term.terminal, full.terminal)
    assert np.array_equal(stride.times, full.times[::10])


def test_exports(tmp_path):
    prob = _workers_problem()
    ens = simulate(prob, PROJ, 3, RngSpec(2), record=25)
    ens.to_csv(tmp_path / "e.csv")
    ens.to_binary(tmp_path / "e.bin")
    rows = np.loadtxt(tmp_path / "e.csv", delimiter=",", skiprows=1)
    head = (tmp_path / "e.csv").read_text().splitlines()[0].split(",")
    assert head == ["time", "particle", "x0", "x1", "k0", "k1", "k_tv"]
    assert rows.shape == (3 * 5, 7)
    back = read_binary(tmp_path / "e.bin")
    assert back["X"].shape == (3, 5, 2)
    assert np.array_equal(back["X"], ens.X)
    raw = (tmp_path / "e.bin").read_bytes()
    assert raw[:4] == b"MVPE"
