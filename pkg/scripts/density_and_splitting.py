"""Blurred-density convergence on OU and the splitting/localization checks.

Usage: python scripts/density_and_splitting.py [--samples 1000000]
"""

import argparse

import numpy as np

from tvboost.order_params import GridSpec, OrderParams
from tvboost.scheme import SchemeSemigroup, gaussian_noise, ou_oracle, ou_scheme
from tvboost.splitting import build_split, localization_bounds, localization_probabilities, convolved_density


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=10**6)
    ap.add_argument("--theta", type=float, default=1.0)
    args = ap.parse_args()
    y = np.linspace(-2, 2, 81)
    exact = ou_oracle(1.0, 1.0, 1.0, 1.0, "density_at", y)
    print("nu,n,sup_error,argmax_y,stderr_at_argmax")
    for nu in (1, 2):
        for n in (2, 4, 8):
            p = OrderParams(1, 2, nu, GridSpec(1.0, n))
            sg = SchemeSemigroup(ou_scheme(), gaussian_noise(1), p.grid)
            est = convolved_density(sg, args.theta, [1.0], 1.0, y, args.samples, 40 + n, params=p)
            err = np.abs(est.mean - exact)
            j = int(err.argmax())
            print(f"{nu},{n},{err[j]:.4f},{y[j]:.2f},{est.stderr[j]:.1e}")
    print("steps,P_not_lambda,bound,P_theta_zero,bound")
    for k in (8, 16, 32, 64):
        split = build_split(gaussian_noise(1), [0.0], 1.0, 1.0 / k)
        b = localization_bounds(split, 1.0)
        e = localization_probabilities(split, 1.0, min(args.samples, 200_000), seed=k)
        print(f"{k},{e['not_lambda']:.4f},{b['not_lambda']:.4f},{e['theta_zero']:.4f},{b['theta_zero']:.4f}")


if __name__ == "__main__":
    main()
