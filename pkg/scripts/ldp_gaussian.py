"""-eps log P(X_T >= a) for Brownian motion against the exact Gaussian tail."""
import argparse

from mvlab import coeffs as cf
from mvlab.asymptotics import RareEvent, fit_rate, gaussian_tail_rate, ldp_sweep
from mvlab.monotone import Zero
from mvlab.rng import RngSpec
from mvlab.sde import SchemeSpec, SdeProblem


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--N", type=int, default=200_000)
    ap.add_argument("--level", type=float, default=1.0)
    ap.add_argument("--eps", type=float, nargs="+", default=[0.25, 0.1, 0.05])
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    coeffs = cf.MeanFieldCoefficients(cf.AffineDrift(0.0, 0.0, 0.0), cf.LinearDiffusion(1.0))
    prob = SdeProblem(Zero(1), coeffs, [0.0])
    tab = ldp_sweep(prob, RareEvent("halfspace", (1.0,), args.level), args.eps, args.N,
                    SchemeSpec("projection", 0.01), RngSpec(1), workers=args.threads)
    for r in tab.rows:
        exact = gaussian_tail_rate(args.level, r["eps"])
        print(f"eps={r['eps']:<6} hits={r['hits']:<7} rate={r['rate']:.4f} "
              f"CI=[{r['rate_lo']:.4f}, {r['rate_hi']:.4f}] exact={exact:.4f}")
    fit = fit_rate(tab, args.level ** 2 / 2)
    print(f"extrapolated {fit.extrapolated}, verdict {fit.verdict}")


if __name__ == "__main__":
    main()
