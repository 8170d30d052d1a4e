import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import affine, brownian, reflected
from mvlab.asymptotics import (ContractionFamily, LilSpec, RareEvent, SweepTable, binomial_ci, fit_rate,
                               gaussian_tail_rate, is_brownian_configuration, ldp_sweep, lil_harness, lil_transform,
                               limit_set_distance, load_report, make_report, mdp_sweep, phi_small, psi_large,
                               transformed_problem, validate_report, write_report)
from mvlab.monotone import Zero
from mvlab.rng import RngSpec
from mvlab.sde import ConfigurationError, SchemeSpec, SdeProblem, simulate
from mvlab.variational import ControlGrid, solve_skeleton

SCH = SchemeSpec("projection", 0.01)
COARSE = SchemeSpec("projection", 0.05)


# --------------------------------------------------------------------- LDP

def test_gaussian_tail_oracle_values():
    from scipy.stats import norm
    assert math.exp(-gaussian_tail_rate(1.0, 0.25) / 0.25) == pytest.approx(norm.sf(2.0), rel=1e-12)
    assert math.exp(-gaussian_tail_rate(1.0, 0.1) / 0.1) == pytest.approx(7.83e-4, rel=2e-3)


def test_ldp_sweep_gaussian_within_ci():
    N = 40_000
    tab = ldp_sweep(brownian(), RareEvent("halfspace", (1.0,), 1.0), [0.25], N, SCH, RngSpec(1))
    r = tab.rows[0]
    from scipy.stats import norm
    assert r["ci_lo"] <= norm.sf(2.0) <= r["ci_hi"]
    assert r["rate_lo"] <= gaussian_tail_rate(1.0, 0.25) <= r["rate_hi"]


def test_ldp_non_rare_event():
    tab = ldp_sweep(brownian(), RareEvent("halfspace", (1.0,), -5.0), [0.25, 0.1], 2000, SCH, RngSpec(2))
    assert np.allclose(tab.column("rate"), 0.0)


def test_ldp_complement_sums_to_one():
    ev = RareEvent("halfspace", (1.0,), 0.3)
    a = ldp_sweep(reflected(x0=0.1), ev, [0.5, 0.2], 3000, SCH, RngSpec(3))
    b = ldp_sweep(reflected(x0=0.1), ev.negate(), [0.5, 0.2], 3000, SCH, RngSpec(3))
    for ra, rb in zip(a.rows, b.rows):
        assert ra["hits"] + rb["hits"] == ra["N"]
        assert ra["p_hat"] + rb["p_hat"] == 1.0


def test_ldp_tube_event_complement():
    ev = RareEvent("tube", radius=0.3)
    a = ldp_sweep(reflected(x0=0.5), ev, [0.2], 2000, SCH, RngSpec(4))
    b = ldp_sweep(reflected(x0=0.5), ev.negate(), [0.2], 2000, SCH, RngSpec(4))
    assert a.rows[0]["p_hat"] + b.rows[0]["p_hat"] == 1.0
    assert 0 < a.rows[0]["p_hat"] < 1


def test_ldp_zero_hits_is_unusable():
    with pytest.warns(UserWarning):
        tab = ldp_sweep(brownian(), RareEvent("halfspace", (1.0,), 10.0), [0.1], 500, SCH, RngSpec(5))
    r = tab.rows[0]
    assert r["p_hat"] == 0 and r["ci_lo"] == 0 and r["ci_hi"] > 0 and not r["usable"]
    assert r["rate"] == math.inf


def _table(rows):
    return SweepTable("ldp", [dict(eps=e, rate=r, usable=True) for e, r in rows])


def test_fit_rate_examples():
    rates = [(e, gaussian_tail_rate(1.0, e)) for e in (0.25, 0.1, 0.05)]
    fit = fit_rate(_table(rates), 0.5)
    assert fit.verdict == "consistent" and fit.extrapolated == pytest.approx(0.5, abs=0.1)
    single = fit_rate(_table(rates[:1]), 0.5)
    assert single.extrapolated is None and single.gaps[0] == pytest.approx(abs(rates[0][1] - 0.5))
    p = 0.3
    flat = fit_rate(_table([(e, -e * math.log(p)) for e in (0.25, 0.1, 0.05)]), 0.5)
    assert flat.verdict == "inconsistent"


def test_binomial_ci():
    lo, hi = binomial_ci(50, 100)
    assert lo < 0.5 < hi
    assert binomial_ci(0, 100)[0] == 0 and binomial_ci(100, 100)[1] == 1


# --------------------------------------------------------------------- MDP

def test_mdp_sweep_pure_brownian_unit_variance():
    tab = mdp_sweep(brownian(), [1e-2, 1e-3], 5000, SCH, RngSpec(6), oracle_N=1000)
    for r in tab.rows:
        assert r["oracle"] == pytest.approx(1.0, abs=1e-12)
        assert abs(r["z"]) < 4


def test_mdp_sweep_linear_drift():
    prob = SdeProblem(Zero(1), affine(B1=-1.0), [0.0])
    tab = mdp_sweep(prob, [1e-4], 10_000, SCH, RngSpec(7))
    r = tab.rows[0]
    assert r["oracle"] == pytest.approx((1 - math.exp(-2)) / 2, rel=0.01)
    assert r["rel_err"] < 0.05


def test_mdp_sweep_reflected_mean():
    tab = mdp_sweep(reflected(), [1e-4], 10_000, SCH, RngSpec(8), statistic="mean", oracle_N=20_000)
    r = tab.rows[0]
    assert abs(r["normalized"] - math.sqrt(2 / math.pi)) < 4 * r["se"] + 0.01
    assert abs(r["z"]) < 4


def test_mdp_sweep_rejects_unknown_statistic():
    with pytest.raises(ConfigurationError):
        mdp_sweep(brownian(), [1e-3], 10, SCH, RngSpec(0), statistic="kurtosis")


# --------------------------------------------------------------------- LIL

def test_scales_and_guards():
    assert psi_large(math.e ** 4) == pytest.approx(math.sqrt(math.e ** 4 * math.log(4)))
    assert phi_small(math.e ** -4) == pytest.approx(math.sqrt(math.e ** -4 * math.log(4)))
    for bad in (math.e, 2.0, 0.5):
        with pytest.raises(ConfigurationError):
            psi_large(bad)
    for bad in (math.exp(-1), 0.5, 0.0):
        with pytest.raises(ConfigurationError):
            phi_small(bad)
    grid = np.exp(np.linspace(2.01, 20, 200))
    vals = [psi_large(u) for u in grid]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ConfigurationError):
        LilSpec("large", c=math.e, js=(1,))


@pytest.mark.parametrize("center", [(0.0,), (1.0, -2.0), (0.5, 0.5, 0.5)])
def test_contraction_axioms(center):
    res = ContractionFamily(center).check_axioms(np.random.default_rng(0), n=300)
    assert all(res.values()), res


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0.01, 100), y=st.lists(st.floats(-100, 100), min_size=2, max_size=2))
def test_contraction_inverse(a, y):
    fam = ContractionFamily((0.3, -0.7))
    back = fam.apply(a, fam.inverse(a, np.array(y)))
    assert np.allclose(back, y, atol=1e-12 * (1 + max(map(abs, y))) * max(a, 1 / a))


def test_lil_transform_examples():
    spec = LilSpec("large", c=math.e, js=(4,), steps=50)
    u = math.e ** 4
    times = np.linspace(0, 60, 6001)
    Y = np.full((times.size, 2), 1.5)
    fam = ContractionFamily((1.5, 1.5))
    assert np.allclose(lil_transform(times, Y, u, spec, fam), 1.5, atol=1e-15)
    # linear path: Q(t) = u t / psi(u)
    Y = times[:, None] * np.ones((1, 1))
    Q = lil_transform(times, Y, u, spec, ContractionFamily((0.0,)))
    t = np.linspace(0, 1, 51)
    assert np.allclose(Q[:, 0], u * t / psi_large(u), atol=1e-12)
    with pytest.raises(ConfigurationError):
        lil_transform(times[:100], Y[:100], u, spec, ContractionFamily((0.0,)))
    with pytest.raises(ConfigurationError):
        lil_transform(times, Y, math.e, spec, ContractionFamily((0.0,)))


def test_lil_transform_brownian_variance():
    u = math.e ** 4
    spec = LilSpec("large", c=math.e, js=(4,), steps=10)
    prob = brownian(T=u)
    ens = simulate(prob, SchemeSpec("projection", u / 100), 20_000, RngSpec(9), record=10)
    Q = lil_transform(ens.times, ens.X, u, spec, ContractionFamily((0.0,)))
    v = Q[:, -1, 0].var(ddof=1)
    target = 1 / math.log(4)
    assert abs(v - target) < 4 * target * math.sqrt(2 / 20_000)


def test_transformed_problem_brownian_noise():
    u = math.e ** 4
    spec = LilSpec("large", c=math.e, js=(4,))
    tp, eps_u = transformed_problem(brownian(), u, spec, ContractionFamily((0.0,)))
    assert eps_u == pytest.approx(1 / math.log(4)) and tp.eps == eps_u
    ens = simulate(tp, SCH, 20_000, RngSpec(11), record="terminal")
    v = ens.terminal[:, 0].var(ddof=1)
    assert abs(v - eps_u) < 4 * eps_u * math.sqrt(2 / 20_000)
    assert is_brownian_configuration(brownian(), ContractionFamily((0.0,)))
    assert not is_brownian_configuration(reflected(), ContractionFamily((0.0,)))


def test_limit_set_distance_examples():
    prob = brownian()
    h0 = ControlGrid(np.ones((20, 1)), COARSE.dt)
    q = solve_skeleton(prob, h0, COARSE).path
    assert limit_set_distance(q, prob, COARSE).distance <= 1e-3
    t = np.linspace(0, 1, 21)[:, None]
    res = limit_set_distance(2 * t, prob, COARSE)
    assert res.distance == pytest.approx(2 - math.sqrt(2), rel=0.03)
    assert res.energy <= 1 + 1e-6
    assert limit_set_distance(np.zeros((21, 1)), prob, COARSE).distance <= 1e-9


def test_limit_set_distance_two_dims():
    prob = brownian(d=2)
    t = np.linspace(0, 1, 21)[:, None]
    q = np.hstack([t, -t])
    # energy of the straight line to (1, -1) is 1: a member
    assert limit_set_distance(q, prob, COARSE).distance <= 1e-3
    res = limit_set_distance(2 * q, prob, COARSE)
    assert res.distance == pytest.approx(2 * math.sqrt(2) - math.sqrt(2), rel=0.03)


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 10**6), amp=st.floats(0.01, 0.3))
def test_limit_set_distance_lipschitz(seed, amp):
    prob = brownian()
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 1, 21)
    q1 = (1.2 + rng.normal()) * t
    q2 = q1 + amp * np.sin(rng.uniform(1, 6) * t)
    d1 = limit_set_distance(q1[:, None], prob, COARSE).distance
    d2 = limit_set_distance(q2[:, None], prob, COARSE).distance
    assert abs(d1 - d2) <= np.max(np.abs(q1 - q2)) + 1e-3


def test_lil_harness_small_run():
    spec = LilSpec("large", c=math.e, js=(3, 4), steps=20)
    tab = lil_harness(brownian(), spec, ContractionFamily((0.0,)), 2000, RngSpec(10), n_distance=2)
    for r in tab.rows:
        assert abs(r["var_z"]) < 4
        assert r["var_oracle"] == pytest.approx(1 / math.log(r["j"]))
        assert r["dist_min"] >= 0
    assert tab.meta["gated"] == ["var_z"]
    assert 0 <= tab.meta["soft_bound_exceed_fraction"] <= 1


# ----------------------------------------------------------------- reports

def test_report_roundtrip(tmp_path):
    tab = SweepTable("ldp", [{"eps": 0.1, "rate": math.inf, "hits": np.int64(3), "ok": np.bool_(True)}])
    rep = make_report("ldp-sweep", "abcd" * 4, tab, oracle={"I": 0.5}, verdicts={"fit": "consistent"})
    write_report(rep, tmp_path / "r.json")
    back = load_report(tmp_path / "r.json")
    assert back == rep
    assert back["rows"][0]["rate"] == "inf"
    with pytest.raises(ValueError):
        validate_report({**rep, "schema": "other/9"})
    with pytest.raises(ValueError):
        validate_report({k: v for k, v in rep.items() if k != "rows"})
