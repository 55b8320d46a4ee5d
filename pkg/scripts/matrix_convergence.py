"""Total-variation error of boosted Euler on finite-state chains, exact arithmetic.

Usage: python scripts/matrix_convergence.py [--states 3] [--seed 0]
"""

import argparse

import numpy as np

from tvboost.expansion import qhat_matrix
from tvboost.matrix import MatrixSemigroup, expm, random_generator, tv_distance_matrix
from tvboost.order_params import GridSpec, OrderParams
from tvboost.report import fit_slope


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--states", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    gens = {
        "2-state": np.array([[-1.0, 1.0], [1.0, -1.0]]),
        f"random {args.states}-state": random_generator(args.states, np.random.default_rng(args.seed)),
    }
    for name, A in gens.items():
        exact = expm(A)
        print(f"# {name}")
        print("nu,n,tv_error")
        for nu in (1, 2, 3):
            errs = []
            for n in (2, 4, 8, 16):
                Q = qhat_matrix(OrderParams(1, 2, nu, GridSpec(1.0, n)), MatrixSemigroup(A))
                errs.append((n, tv_distance_matrix(exact, Q)))
                print(f"{nu},{n},{errs[-1][1]:.6e}")
            print(f"# nu={nu} fitted slope {fit_slope(errs)[0]:.3f}")


if __name__ == "__main__":
    main()
