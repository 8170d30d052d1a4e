"""Minimized rate vs closed forms: Brownian endpoint targets and the reflected tube exit."""
import argparse

import numpy as np

from mvlab import coeffs as cf
from mvlab.monotone import NormalCone, Zero, halfline
from mvlab.sde import SchemeSpec, SdeProblem
from mvlab.variational import EndpointHalfSpace, OptimizerSettings, RateProblem, TubeExit, minimize_rate


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dt", type=float, default=0.01)
    ap.add_argument("--restarts", type=int, default=4)
    args = ap.parse_args()

    scheme = SchemeSpec("projection", args.dt)
    st = OptimizerSettings(restarts=args.restarts)
    coeffs = cf.MeanFieldCoefficients(cf.AffineDrift(0.0, 0.0, 0.0), cf.LinearDiffusion(1.0))
    bm = SdeProblem(Zero(1), coeffs, [0.0], eps=0.0)
    for a in (0.5, 1.0, 2.0):
        res = minimize_rate(RateProblem(bm, EndpointHalfSpace(np.array([1.0]), a), scheme, st))
        print(f"endpoint >= {a}: I* = {res.I:.6f}  closed form {a * a / 2:.6f}")
    refl = SdeProblem(NormalCone(halfline()), coeffs, [0.5], eps=0.0)
    res = minimize_rate(RateProblem(refl, TubeExit(0.25), scheme, st))
    print(f"reflected tube exit 0.25: I* = {res.I:.6f}  straight-line value {0.25 ** 2 / 2:.6f}")


if __name__ == "__main__":
    main()
