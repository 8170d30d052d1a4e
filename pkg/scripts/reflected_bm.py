"""Reflected Brownian motion: terminal CDF vs the folded normal, with and
without the bridge correction on the projection scheme."""
import argparse
import math

import numpy as np
from scipy import stats

from mvlab import coeffs as cf
from mvlab.monotone import NormalCone, halfline
from mvlab.rng import RngSpec
from mvlab.sde import SchemeSpec, SdeProblem, simulate


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--N", type=int, default=100_000)
    ap.add_argument("--dt", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    coeffs = cf.MeanFieldCoefficients(cf.AffineDrift(0.0, 0.0, 0.0), cf.LinearDiffusion(1.0))
    prob = SdeProblem(NormalCone(halfline()), coeffs, [0.0])
    for bridge in (True, False):
        ens = simulate(prob, SchemeSpec("projection", args.dt, bridge=bridge), args.N, RngSpec(args.seed),
                       record="terminal", workers=args.threads)
        XT = ens.terminal[:, 0]
        print(f"bridge={bridge}")
        for a in (0.5, 1.0, 2.0):
            p = 2 * stats.norm.cdf(a) - 1
            phat = np.mean(XT <= a)
            z = (phat - p) / math.sqrt(p * (1 - p) / args.N)
            print(f"  a={a}: empirical {phat:.5f}  exact {p:.5f}  z={z:+.2f}")


if __name__ == "__main__":
    main()
