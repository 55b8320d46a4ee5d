"""Unbiased Monte Carlo for the boosted operator on simulable schemes.

Each sample runs the fine base path plus one randomly drawn grid tuple per
correction stratum ``i``; the tuple is uniform over the ``C(n, i)`` choices and
carries the weight ``C(n, i)``. At every correction time the particle is
duplicated: one copy takes the boosted step (simulated recursively on the next
grid), the other a single fine step with its weight negated. Copies share the
path up to the split and draw independent noise afterwards.

A realization is a weighted particle set ``(x, w, owner)``; the sample value is
``sum_{owner} w f(x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import sparse

from .mc import BLOCK_SIZE, MCEstimate, run_blocks
from .order_params import OrderParams, _q_formula, m_steps
from .report import ConvergenceReport, ConvergenceRow
from .scheme import NoiseLaw, SchemeFunction, SchemeSemigroup, step

MAX_NU = 3


@dataclass
class GridDraw:
    i: int
    times: tuple
    weight: int


def sample_grid(M: int, i: int, rng: np.random.Generator) -> GridDraw:
    """Uniform ``i``-subset of the fine indices ``1..M`` with weight ``C(M, i)``."""
    if not 0 <= i <= M:
        raise ValueError(f"cannot draw {i} grid times out of {M}")
    times = tuple(sorted(int(t) + 1 for t in rng.choice(M, size=i, replace=False)))
    return GridDraw(i, times, math.comb(M, i))


def sample_tuples(M: int, i: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` independent uniform ``i``-subsets of ``1..M``, rows sorted."""
    keys = rng.random((count, M))
    picks = np.argsort(keys, axis=1)[:, :i] + 1
    return np.sort(picks, axis=1)


class QhatSimulator:
    """Particle propagation through the boosted operator for one sample block."""

    def __init__(self, params: OrderParams, sg: SchemeSemigroup, rng, trace: list | None = None):
        self.params = params
        self.sg = sg
        self.rng = rng
        self.work = 0
        self.trace = trace

    def fine(self, x, level, steps):
        delta = self.params.grid.step(level)
        for _ in range(steps):
            x = step(self.sg, x, self.sg.noise.sample(self.rng, x.shape[0]), delta, self.rng)
        self.work += x.shape[0] * steps
        return x

    def apply(self, nu, level, x, w, owner):
        """Particles of ``Qhat^{nu, delta_level}`` over one level step, applied to ``x``."""
        n = self.params.n
        alpha = self.params.alpha
        parts = [(self.fine(x, level + 1, n), w, owner)]
        for i in range(1, m_steps(level, nu, alpha)):
            q = _q_formula(i, level, nu, alpha)
            weight = float(math.comb(n, i))
            tuples = sample_tuples(n, i, x.shape[0], self.rng)
            codes = (tuples * (n + 1) ** np.arange(i)).sum(axis=1)
            order = np.argsort(codes, kind="stable")
            uniq, starts = np.unique(codes[order], return_index=True)
            bounds = list(starts[1:]) + [len(order)]
            for s0, s1 in zip(starts, bounds):
                idx = order[s0:s1]
                times = tuples[idx[0]]
                group = [(x[idx], w[idx] * weight, owner[idx])]
                prev = 0
                for tj in times:
                    gap = int(tj) - 1 - prev
                    group = [(self.fine(px, level + 1, gap), pw, po) for px, pw, po in group]
                    nxt = []
                    for px, pw, po in group:
                        if self.trace is not None:
                            self.trace.append(dict(level=level + 1, time=int(tj), owner=po.copy(), state=px.copy()))
                        nxt.append(self.apply(q, level + 1, px, pw, po))
                        nxt.append((self.fine(px, level + 1, 1), -pw, po))
                    group = nxt
                    prev = int(tj)
                tail = n - prev
                parts.extend((self.fine(px, level + 1, tail), pw, po) for px, pw, po in group)
        xs = np.concatenate([p[0] for p in parts])
        ws = np.concatenate([p[1] for p in parts])
        os = np.concatenate([p[2] for p in parts])
        return xs, ws, os


_F_CHUNK = 1 << 16


def _per_owner(f, xs, w, owner, size, rng=None):
    """``sum_{owner} w f(x)`` per sample, evaluating ``f`` on row chunks."""
    out = None
    for s0 in range(0, xs.shape[0], _F_CHUNK):
        sl = slice(s0, s0 + _F_CHUNK)
        vals = np.asarray(f(xs[sl], rng) if rng is not None else f(xs[sl]), dtype=float)
        k = vals.shape[0]
        agg = sparse.csr_matrix((w[sl], (owner[sl], np.arange(k))), shape=(size, k))
        part = agg @ vals
        out = part if out is None else out + part
    return np.asarray(out)


def _check_consistent(params: OrderParams, sg: SchemeSemigroup):
    if params.n != sg.grid.n or not math.isclose(params.T, sg.grid.horizon_T):
        raise ValueError("order parameters and scheme grid disagree on (T, n)")


def estimate_qhat(
    params: OrderParams,
    sg: SchemeSemigroup,
    x0,
    f: Callable,
    n_samples: int,
    seed: int,
    workers: int = 1,
    block_size: int = BLOCK_SIZE,
    trace: list | None = None,
    with_rng: bool = False,
) -> MCEstimate:
    """Unbiased estimate of ``(Qhat^{nu, T} f)(x0)`` with ``work`` = scheme steps used.

    ``f`` maps ``(K, d)`` states to ``(K,)`` or ``(K, m)``; with ``with_rng`` it
    is called as ``f(x, rng)`` with the block generator. ``trace``, if given,
    collects one record per split (level, fine index, owners, state).
    """
    if params.nu > MAX_NU:
        raise ValueError(f"nu={params.nu} exceeds the supported cap {MAX_NU}")
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    _check_consistent(params, sg)
    x0 = np.asarray(x0, dtype=float).reshape(1, sg.scheme.dim_x)

    def block(rng, size, _b):
        sim = QhatSimulator(params, sg, rng, trace)
        x = np.repeat(x0, size, axis=0)
        xs, ws, os = sim.apply(params.nu, 0, x, np.ones(size), np.arange(size))
        return _per_owner(f, xs, ws, os, size, rng if with_rng else None), sim.work

    # same stream as plain Monte Carlo: for nu <= 1 both consume identical draws
    return run_blocks(block, n_samples, seed, stream=0, workers=workers, block_size=block_size)


def weak_error_study(
    params: OrderParams,
    scheme: SchemeFunction,
    noise: NoiseLaw,
    x0,
    f: Callable,
    exact: float,
    n_list,
    samples,
    seed: int,
    workers: int = 1,
) -> ConvergenceReport:
    """Estimate at each ``n``, compare with the exact value and fit the rate.

    ``exact`` is a number or a callable ``n -> value``; ``samples`` is an int
    or a mapping ``n -> count``. Rows whose standard error exceeds half their
    error are marked unusable and left out of the fit.
    """
    n_list = sorted(set(int(n) for n in n_list))
    if len(n_list) < 2:
        raise ValueError("need at least two n values")
    rows = []
    for n in n_list:
        p = params.with_n(n)
        sg = SchemeSemigroup(scheme, noise, p.grid)
        count = samples[n] if isinstance(samples, dict) else samples
        est = estimate_qhat(p, sg, x0, f, count, seed + n, workers=workers)
        ref = exact(n) if callable(exact) else exact
        rows.append(ConvergenceRow(n, params.nu, est.mean, est.stderr, ref, est.work_per_sample))
    return ConvergenceReport(rows).fit()
