"""Nested time grids and the combinatorial parameters of the boosting recursion.

All quantities are integers except the grid times, which are derived on demand
from integer indices so that grid membership never depends on accumulated
floating point sums.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field


class GridTooCoarseError(ValueError):
    """Raised when the refinement factor is too small for the requested order."""


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _check_alpha(alpha: int) -> None:
    if isinstance(alpha, float) or int(alpha) != alpha:
        raise TypeError(f"base weak order alpha must be an integer, got {alpha!r}")
    if alpha < 1:
        raise ValueError(f"base weak order alpha must be >= 1, got {alpha}")


@dataclass(frozen=True)
class GridSpec:
    """The grid family ``k * T / n**l``; ``level`` is the default level."""

    horizon_T: float
    n: int
    level: int = 0

    def __post_init__(self):
        if not self.horizon_T > 0:
            raise ValueError("horizon_T must be positive")
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"refinement factor n must be an integer >= 2, got {self.n}")
        if self.level < 0:
            raise ValueError("level must be >= 0")

    def step(self, level: int | None = None) -> float:
        level = self.level if level is None else level
        return self.horizon_T / self.n**level

    def steps_in_horizon(self, level: int | None = None) -> int:
        level = self.level if level is None else level
        return self.n**level

    def time(self, k: int, level: int | None = None) -> float:
        """Real time of grid index ``k`` on the level grid."""
        level = self.level if level is None else level
        return k * self.horizon_T / self.n**level

    def points(self, level: int | None = None) -> list[float]:
        level = self.level if level is None else level
        return [self.time(k, level) for k in range(self.n**level + 1)]

    def index_of(self, t: float, level: int | None = None, tol: float = 1e-9) -> int:
        """Grid index of ``t`` on the level grid; raises if ``t`` is off-grid."""
        level = self.level if level is None else level
        x = t * self.n**level / self.horizon_T
        k = round(x)
        if abs(x - k) > tol * max(1.0, abs(x)):
            raise ValueError(f"time {t} is not on the grid of level {level}")
        return int(k)


def m_steps(l: int, nu: int, alpha: int) -> int:
    """Number of correction strata plus one, ``ceil(nu / ((1 + alpha) l + alpha))``."""
    _check_alpha(alpha)
    if l < 0 or nu < 0:
        raise ValueError("level and order must be nonnegative")
    return _ceil_div(nu, (1 + alpha) * l + alpha)


def _q_formula(i: int, l: int, nu: int, alpha: int) -> int:
    # the inner ceiling acts on an integer
    return nu + i - (1 + alpha) * (l + 1) * (i - 1)


def q_order(i: int, l: int, nu: int, alpha: int) -> int:
    """Target order of the boosted factors in the ``i``-th correction stratum."""
    m = m_steps(l, nu, alpha)
    if not 1 <= i <= m - 1:
        raise ValueError(f"correction index i={i} outside [1, {m - 1}] for (l={l}, nu={nu})")
    return _q_formula(i, l, nu, alpha)


@functools.lru_cache(maxsize=None)
def _kappa_cached(l: int, nu: int, alpha: int, beta: int) -> int:
    return _kappa_plain(l, nu, alpha, beta, _kappa_cached)


def _kappa_plain(l, nu, alpha, beta, recurse=None):
    recurse = recurse or (lambda *a: _kappa_plain(*a))
    m = m_steps(l, nu, alpha)
    best = beta * m
    for i in range(1, m):
        best = max(best, i * recurse(l + 1, _q_formula(i, l, nu, alpha), alpha, beta))
    return best


def kappa(l: int, nu: int, alpha: int, beta: int, memo: bool = True) -> int:
    """Derivative count needed by the order-``nu`` boosted operator at level ``l``.

    With ``m(l, nu) = 1`` the inner max is empty and the result is ``beta``;
    with ``nu = 0`` it is 0.
    """
    _check_alpha(alpha)
    if beta < 1:
        raise ValueError("beta must be >= 1")
    if memo:
        return _kappa_cached(l, nu, alpha, beta)
    return _kappa_plain(l, nu, alpha, beta)


def l_max(nu: int, alpha: int) -> int:
    """Deepest grid level touched by the order-``nu`` construction."""
    _check_alpha(alpha)
    return _ceil_div(nu, alpha)


def q_nu(nu: int, alpha: int, beta: int) -> int:
    """Regularization order required by the total variation estimate.

    The stratum order is evaluated at level 0, and the index runs up to
    ``m(0, nu)`` inclusive, so the last index uses the order formula one past
    the correction range.
    """
    if nu < 1:
        raise ValueError("q_nu is defined for nu >= 1")
    m = m_steps(0, nu, alpha)
    return max(
        i * max(beta, kappa(1, _q_formula(i, 0, nu, alpha), alpha, beta))
        for i in range(1, m + 1)
    )


def t_nu(T: float, n: int, nu: int, alpha: int) -> float:
    """First point of the level-1 grid at or after ``T (n - m) / (n (m + 1))``."""
    m = m_steps(0, nu, alpha)
    if n <= m:
        raise GridTooCoarseError(f"grid too coarse for order nu={nu}: need n > {m}, got n={n}")
    # threshold measured in level-1 steps T/n is (n - m) / (m + 1)
    k = _ceil_div(n - m, m + 1)
    return k * T / n


@dataclass(frozen=True)
class OrderParams:
    """Base order ``alpha``, derivative count ``beta``, target ``nu`` and grid."""

    alpha: int
    beta: int
    nu: int
    grid: GridSpec = field(default_factory=lambda: GridSpec(1.0, 2))

    def __post_init__(self):
        _check_alpha(self.alpha)
        if self.beta < 1:
            raise ValueError("beta must be >= 1")
        if self.nu < 0:
            raise ValueError("nu must be >= 0")

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def T(self) -> float:
        return self.grid.horizon_T

    def m(self, l: int = 0, nu: int | None = None) -> int:
        return m_steps(l, self.nu if nu is None else nu, self.alpha)

    def q(self, i: int, l: int = 0, nu: int | None = None) -> int:
        return q_order(i, l, self.nu if nu is None else nu, self.alpha)

    def kappa(self, l: int = 0, nu: int | None = None) -> int:
        return kappa(l, self.nu if nu is None else nu, self.alpha, self.beta)

    @property
    def l_max(self) -> int:
        return l_max(self.nu, self.alpha)

    @property
    def q_nu(self) -> int:
        return q_nu(self.nu, self.alpha, self.beta)

    def t_nu(self) -> float:
        return t_nu(self.T, self.n, self.nu, self.alpha)

    def with_n(self, n: int) -> "OrderParams":
        return OrderParams(self.alpha, self.beta, self.nu, GridSpec(self.T, n, self.grid.level))

    def with_nu(self, nu: int) -> "OrderParams":
        return OrderParams(self.alpha, self.beta, nu, self.grid)


def recursion_table(nu: int, alpha: int, beta: int) -> list[dict]:
    """Every ``(level, order)`` node reached by the recursion, depth first.

    One row per correction index ``i`` (``i = 0`` marks a node with no
    corrections) with ``m``, ``q_i`` and ``kappa`` of that node.
    """
    rows: list[dict] = []
    seen = set()

    def visit(l, v):
        if (l, v) in seen:
            return
        seen.add((l, v))
        m = m_steps(l, v, alpha)
        k = kappa(l, v, alpha, beta)
        if m <= 1:
            rows.append(dict(level=l, nu=v, i=0, m=m, q_i=None, kappa=k))
            return
        for i in range(1, m):
            q = q_order(i, l, v, alpha)
            rows.append(dict(level=l, nu=v, i=i, m=m, q_i=q, kappa=k))
        for i in range(1, m):
            visit(l + 1, q_order(i, l, v, alpha))

    visit(0, nu)
    return rows


def deepest_grid_level(nu: int, alpha: int) -> int:
    """Finest grid level whose base steps appear in the fully expanded operator."""
    deepest = 0

    def visit(l, v):
        nonlocal deepest
        deepest = max(deepest, l + 1)
        for i in range(1, m_steps(l, v, alpha)):
            visit(l + 1, _q_formula(i, l, v, alpha))

    visit(0, nu)
    return deepest if nu > 0 else 1


def binomial(M: int, i: int) -> int:
    return math.comb(M, i)
