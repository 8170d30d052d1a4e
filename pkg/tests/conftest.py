import numpy as np
import pytest
from hypothesis import settings

from mvlab.coeffs import AffineDrift, LinearDiffusion, MeanFieldCoefficients
from mvlab.monotone import NormalCone, Zero, halfline
from mvlab.sde import SdeProblem

# property runs are repeatable: same examples every time
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


def affine(B0=0.0, B1=0.0, B2=0.0, S0=1.0, d=1, s1=0.0, s2=0.0):
    return MeanFieldCoefficients(AffineDrift(B0, B1, B2, dim=d), LinearDiffusion(S0, s1=s1, s2=s2, dim=d))


def brownian(d=1, eps=1.0, x0=None, T=1.0):
    return SdeProblem(Zero(d), affine(d=d), np.zeros(d) if x0 is None else x0, T=T, eps=eps)


def reflected(eps=1.0, x0=0.0, T=1.0, coeffs=None):
    return SdeProblem(NormalCone(halfline()), coeffs or affine(), [x0], T=T, eps=eps)


@pytest.fixture
def rng_seed():
    return 20261016


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
