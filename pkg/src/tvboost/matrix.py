"""Finite-state semigroups: generators, Euler one-step matrices, exp(tA), TV distance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

# Taylor degree used after scaling so that ||A||_1 / 2**s <= 1/2; the
# truncation error is then below 0.5**19 / 19! ~ 1.6e-23 relative.
EXPM_TAYLOR_DEGREE = 18
EXPM_SCALED_NORM = 0.5


def expm(A: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a degree-18 Taylor core."""
    A = np.asarray(A, dtype=float)
    norm = np.abs(A).sum(axis=0).max() if A.size else 0.0
    s = 0
    if norm > EXPM_SCALED_NORM:
        s = int(math.ceil(math.log2(norm / EXPM_SCALED_NORM)))
    X = A / 2.0**s
    E = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, EXPM_TAYLOR_DEGREE + 1):
        term = term @ X / k
        E = E + term
    for _ in range(s):
        E = E @ E
    return E


def euler_step(A: np.ndarray, delta: float) -> np.ndarray:
    return np.eye(A.shape[0]) + delta * A


def check_generator(A: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"generator must be square, got shape {A.shape}")
    off = A - np.diag(np.diag(A))
    if (off < -tol).any():
        raise ValueError("generator has negative off-diagonal entries")
    if np.abs(A.sum(axis=1)).max() > tol * max(1.0, np.abs(A).max()):
        raise ValueError("generator rows must sum to zero")
    return A


def random_generator(states: int, rng: np.random.Generator, max_rate: float = 1.0) -> np.ndarray:
    """Dense generator with off-diagonal rates uniform in ``[0.1, max_rate]``."""
    R = rng.uniform(0.1, max_rate, size=(states, states))
    np.fill_diagonal(R, 0.0)
    return R - np.diag(R.sum(axis=1))


@dataclass
class MatrixSemigroup:
    """A finite-state Markov semigroup with a one-step base scheme.

    ``base_step(delta, t)`` returns the one-step matrix of the base scheme on
    the interval ``[t, t + delta]``; the default is the Euler matrix
    ``I + delta A``. A base step that ignores ``t`` makes the family time
    homogeneous, which lets boosted operators be cached by ``(order, level)``.
    """

    generator: np.ndarray
    base_step: Optional[Callable[[float, float], np.ndarray]] = None
    homogeneous: bool = True
    check: bool = True
    _power_cache: dict = field(default_factory=dict, repr=False)
    _boost_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.check:
            self.generator = check_generator(self.generator)
        else:
            # any linear finite-dimensional family, e.g. a Markov semigroup
            # restricted to an invariant polynomial space
            self.generator = np.asarray(self.generator, dtype=float)
        if self.base_step is None:
            A = self.generator
            self.base_step = lambda delta, t: euler_step(A, delta)

    @property
    def states(self) -> int:
        return self.generator.shape[0]

    def one_step(self, delta: float, t: float = 0.0) -> np.ndarray:
        M = np.asarray(self.base_step(delta, t), dtype=float)
        if M.shape != (self.states, self.states):
            raise ValueError(f"base step has shape {M.shape}, expected {(self.states,) * 2}")
        return M

    def check_stochastic(self, delta: float, tol: float = 1e-12) -> None:
        M = self.one_step(delta)
        if (M < -tol).any():
            raise ValueError(f"base step at delta={delta} has negative entries")
        if np.abs(M.sum(axis=1) - 1.0).max() > tol:
            raise ValueError(f"base step at delta={delta} is not row-stochastic")

    def base_power(self, delta: float, k: int, t0: float = 0.0) -> np.ndarray:
        """Composition of ``k`` base steps of size ``delta`` starting at ``t0``."""
        if k < 0:
            raise ValueError("negative step count")
        if not self.homogeneous:
            M = np.eye(self.states)
            for j in range(k):
                M = M @ self.one_step(delta, t0 + j * delta)
            return M
        key = (delta, k)
        hit = self._power_cache.get(key)
        if hit is None:
            hit = np.linalg.matrix_power(self.one_step(delta), k)
            self._power_cache[key] = hit
        return hit

    def exact(self, t: float) -> np.ndarray:
        return exact_semigroup_matrix(self, t)


def exact_semigroup_matrix(backend: MatrixSemigroup, t: float) -> np.ndarray:
    """``exp(t A)``: the transition matrix of the continuous-time chain."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if not backend.homogeneous:
        raise ValueError("exact semigroup requires a time-homogeneous backend")
    return expm(t * backend.generator)


def tv_distance_matrix(p: np.ndarray, q: np.ndarray) -> float:
    """``sup_{|f| <= 1} ||(p - q) f||_inf``, i.e. the max row L1 distance."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    return float(np.abs(p - q).sum(axis=1).max())
