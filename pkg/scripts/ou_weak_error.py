"""Weak error of boosted Euler on the OU process, against closed-form oracles.

Runs nu in {1, 2} over n in {2, 4, 8} and prints the convergence report,
the fitted slope and the work per sample.

Usage: python scripts/ou_weak_error.py [--function x2|cos|indicator:0] [--samples 1000000] [--seed 20]
"""

import argparse

from tvboost.order_params import GridSpec, OrderParams
from tvboost.random_grid import weak_error_study
from tvboost.report import work_accounting
from tvboost.scheme import gaussian_noise, make_test_function, ou_exact_for, ou_scheme


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--function", default="x2")
    ap.add_argument("--samples", type=int, default=10**6)
    ap.add_argument("--seed", type=int, default=20)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    f = make_test_function(args.function)
    exact = ou_exact_for(args.function, 1.0, 1.0, 1.0, 1.0)
    print(f"# f={args.function} oracle={exact:.6f} samples={args.samples}")
    print("nu,n,estimate,stderr,abs_error,usable,work_per_sample")
    for nu in (1, 2):
        rep = weak_error_study(OrderParams(1, 2, nu, GridSpec(1.0, 2)), ou_scheme(), gaussian_noise(1), [1.0], f,
                               exact, [2, 4, 8], args.samples, args.seed, args.workers)
        for r in rep.rows:
            print(f"{nu},{r.n},{r.estimate:.6f},{r.stderr:.2e},{r.error:.3e},{int(r.usable)},{r.work_per_sample:.2f}")
        growth = [row["growth"] for row in work_accounting(rep)[1:]]
        print(f"# nu={nu} slope {rep.slope:.3f} +- {rep.slope_ci:.3f}, work growth per doubling {growth}")


if __name__ == "__main__":
    main()
