"""Odds that the nu=2, n=8 row of the OU x^2 study spoils the fitted slope.

The exact boosted value comes from the OU Euler scheme restricted to
polynomials of degree <= 2 (a 3x3 linear family), so the bias is exact. The
standard error is measured at a pilot size and scaled to the target size. A row
counts as usable when stderr < error/2; the script integrates over the Gaussian
estimator error to get the probability that the slope leaves [1.5, 2.6].

Usage: python scripts/usable_row_odds.py [--samples 10000000] [--pilot 200000]
"""

import argparse
import math

import numpy as np
from scipy import stats

from tvboost.expansion import qhat_matrix
from tvboost.matrix import MatrixSemigroup
from tvboost.order_params import GridSpec, OrderParams
from tvboost.random_grid import estimate_qhat
from tvboost.report import fit_slope
from tvboost.scheme import SchemeSemigroup, gaussian_noise, make_test_function, ou_exact_for, ou_scheme


def polynomial_backend():
    G = np.array([[0.0, 0.0, 1.0], [0.0, -1.0, 0.0], [0.0, 0.0, -2.0]])
    base = lambda d, t: np.array([[1.0, 0.0, d], [0.0, 1 - d, 0.0], [0.0, 0.0, (1 - d) ** 2]])
    return MatrixSemigroup(G, base_step=base, check=False)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=10**7)
    ap.add_argument("--pilot", type=int, default=200_000)
    ap.add_argument("--draws", type=int, default=200_000)
    args = ap.parse_args()
    oracle = ou_exact_for("x2", 1, 1, 1.0, 1.0)
    f = make_test_function("x2")
    bias, se = {}, {}
    for n in (2, 4, 8):
        p = OrderParams(1, 2, 2, GridSpec(1.0, n))
        bias[n] = float(np.array([1.0, 1.0, 1.0]) @ qhat_matrix(p, polynomial_backend()) @ [0.0, 0.0, 1.0]) - oracle
        pilot = estimate_qhat(p, SchemeSemigroup(ou_scheme(), gaussian_noise(1), p.grid), [1.0], f, args.pilot, n)
        se[n] = pilot.stderr * math.sqrt(args.pilot / args.samples)
        print(f"n={n}: exact bias {bias[n]:.3e}, stderr at {args.samples:.0e} samples {se[n]:.2e}")
    rng = np.random.default_rng(0)
    fails = 0
    for _ in range(args.draws):
        rows = []
        for n in (2, 4, 8):
            err = abs(bias[n] + se[n] * rng.standard_normal())
            if se[n] < err / 2:
                rows.append((n, err))
        if len(rows) < 2:
            fails += 1
            continue
        s, _ = fit_slope(rows)
        fails += not (1.5 <= s <= 2.6)
    p = fails / args.draws
    print(f"P(slope outside [1.5, 2.6]) ~ {p:.3f} +- {math.sqrt(p * (1 - p) / args.draws):.3f}")
    print(f"P(n=8 row usable) ~ {stats.norm.sf((2 * se[8] - bias[8]) / se[8]) + stats.norm.cdf((-2 * se[8] - bias[8]) / se[8]):.3f}")


if __name__ == "__main__":
    main()
