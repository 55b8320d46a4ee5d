"""Noise splitting under a local Lebesgue lower bound, localization and blurring.

If the noise density is at least ``eps_star`` on the ball ``B(z_star, r_star)``,
the scaled noise ``sqrt(delta) Z`` has the same law as ``chi U + (1 - chi) V``
with ``chi ~ Bernoulli(m_star)``, ``U`` a bump-shaped law around
``sqrt(delta) z_star`` and ``V`` the normalized residual. The localization
weight ``Theta`` keeps paths on which ``chi`` fired often enough and the raw
noise stayed moderate.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, stats

from .errors import InvariantViolation
from .mc import MCEstimate, run_blocks
from .order_params import OrderParams
from .scheme import NoiseLaw, SchemeSemigroup, step

LOWER_BOUND_MARGIN = 1e-9  # relative safety margin on the fitted density floor
_MAX_REJECTION_ROUNDS = 10_000


class NotLowerBounded(ValueError):
    pass


def bump(v: float, z, axis: int | None = None):
    """``phi_v``: 1 on ``|z| <= v``, ``exp(1 - v^2/(v^2 - (|z|-v)^2))`` up to ``2v``, then 0.

    With ``axis`` given, ``|z|`` is the Euclidean norm along that axis.
    """
    if not v > 0:
        raise ValueError("bump radius must be positive")
    r = np.abs(np.asarray(z, dtype=float)) if axis is None else np.linalg.norm(z, axis=axis)
    u = r - v
    inner = (r > v) & (r < 2 * v)
    uu = np.where(inner, u, 0.0)
    with np.errstate(divide="ignore", over="ignore"):
        mid = np.exp(1.0 - v * v / (v * v - uu * uu))
    out = np.where(r <= v, 1.0, np.where(inner, mid, 0.0))
    return float(out) if np.ndim(out) == 0 else out


def bump_log_derivative(v: float, z, q: int):
    """``d^q/dz^q ln phi_v`` for scalar ``z``; zero on the plateau and outside ``(v, 2v)``.

    On ``(v, 2v)`` with ``u = |z| - v``,
    ``ln phi_v = 1 - (v/2)(1/(v-u) + 1/(v+u))``.
    """
    if q < 1:
        raise ValueError("derivative order must be >= 1")
    z = np.asarray(z, dtype=float)
    r = np.abs(z)
    inner = (r > v) & (r < 2 * v)
    u = np.where(inner, r - v, 0.0)
    fq = math.factorial(q)
    du = -(v / 2) * (fq / (v - u) ** (q + 1) + (-1) ** q * fq / (v + u) ** (q + 1))
    out = np.where(inner, du * np.sign(z) ** q, 0.0)
    return float(out) if out.ndim == 0 else out


def bump_integral(v: float, dim: int) -> float:
    """``int_{R^dim} phi_v``, by radial quadrature (the bump is radial)."""
    sphere = 2 * math.pi ** (dim / 2) / math.gamma(dim / 2)
    tail, _ = integrate.quad(lambda r: bump(v, r) * r ** (dim - 1), v, 2 * v, epsabs=1e-13, epsrel=1e-12)
    return sphere * (v**dim / dim + tail)


def _ball_grid(z_star, r_star: float, per_axis: int = 41) -> np.ndarray:
    """Deterministic points of the closed ball: a cube grid clipped to the ball,
    plus the radial projections of its points onto the shell."""
    z_star = np.atleast_1d(np.asarray(z_star, dtype=float))
    N = z_star.shape[0]
    axis = np.linspace(-r_star, r_star, per_axis)
    pts = np.array(list(itertools.product(axis, repeat=N)))
    norms = np.linalg.norm(pts, axis=1)
    inside = pts[norms <= r_star * (1 + 1e-12)]
    nz = pts[norms > 0]
    shell = r_star * nz / np.linalg.norm(nz, axis=1, keepdims=True)
    return z_star + np.vstack([inside, shell])


def fit_lower_bound(noise: NoiseLaw, z_star, r_star: float, margin: float = LOWER_BOUND_MARGIN) -> float:
    """Largest ``eps`` (up to the relative margin) with ``density >= eps`` on the ball grid."""
    if noise.density is None:
        raise NotLowerBounded(f"noise not Lebesgue lower bounded at ({z_star}, {r_star}): no density")
    if not r_star > 0:
        raise ValueError("r_star must be positive")
    z_star = np.atleast_1d(np.asarray(z_star, dtype=float))
    if z_star.shape[0] != noise.dim:
        raise ValueError("z_star dimension does not match the noise")
    dens = np.asarray(noise.density(_ball_grid(z_star, r_star)), dtype=float)
    low = float(dens.min()) * (1 - margin)
    if not low > 0:
        raise NotLowerBounded(f"noise not Lebesgue lower bounded at ({z_star}, {r_star})")
    return low


@dataclass
class SplitNoise:
    base: NoiseLaw
    z_star: np.ndarray
    r_star: float
    eps_star: float
    m_star: float
    delta: float
    tol: float = 1e-12
    stats: dict = field(default_factory=lambda: {"v_proposals": 0, "v_min_accept": 1.0}, repr=False)

    @property
    def dim(self) -> int:
        return self.base.dim

    def residual_acceptance(self, z) -> np.ndarray:
        """Acceptance ``1 - eps phi_{r/2}(z - z*) / p(z)`` for raw proposals ``z``."""
        z = np.atleast_2d(z)
        p = np.asarray(self.base.density(z), dtype=float)
        phi = bump(self.r_star / 2, z - self.z_star, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(phi > 0, self.eps_star * phi / p, 0.0)
        acc = 1.0 - ratio
        if not np.isfinite(acc).all() or acc.min() < -self.tol or acc.max() > 1 + self.tol:
            raise InvariantViolation(
                f"residual acceptance left [0, 1]: min {np.nanmin(acc):.3g}, max {np.nanmax(acc):.3g}"
            )
        self.stats["v_proposals"] += z.shape[0]
        self.stats["v_min_accept"] = min(self.stats["v_min_accept"], float(acc.min()))
        return np.clip(acc, 0.0, 1.0)

    def _raw_u(self, rng, size):
        """Raw-scale draws ``w + z*``, ``w`` with density proportional to ``phi_{r/2}``."""
        out = np.empty((size, self.dim))
        filled = 0
        for _ in range(_MAX_REJECTION_ROUNDS):
            if filled == size:
                return out
            k = max(2 * (size - filled), 16)
            g = rng.standard_normal((k, self.dim))
            g /= np.linalg.norm(g, axis=1, keepdims=True)
            rad = self.r_star * rng.random(k) ** (1.0 / self.dim)
            w = g * rad[:, None]
            keep = w[rng.random(k) < bump(self.r_star / 2, w, axis=1)]
            take = min(len(keep), size - filled)
            out[filled:filled + take] = keep[:take]
            filled += take
        raise InvariantViolation("U rejection sampler did not terminate")

    def _raw_v(self, rng, size):
        out = np.empty((size, self.dim))
        filled = 0
        for _ in range(_MAX_REJECTION_ROUNDS):
            if filled == size:
                return out
            k = max(2 * (size - filled), 16)
            z = self.base.sample(rng, k)
            keep = z[rng.random(k) < self.residual_acceptance(z)]
            take = min(len(keep), size - filled)
            out[filled:filled + take] = keep[:take]
            filled += take
        raise InvariantViolation("V rejection sampler did not terminate")

    def sample_u(self, rng, size):
        return math.sqrt(self.delta) * (self.z_star + self._raw_u(rng, size))

    def sample_v(self, rng, size):
        return math.sqrt(self.delta) * self._raw_v(rng, size)

    def sample_chi(self, rng, size):
        return rng.random(size) < self.m_star

    def sample(self, rng, size):
        """``(chi, y)`` with ``y = chi U + (1 - chi) V`` distributed as ``sqrt(delta) Z``."""
        chi = self.sample_chi(rng, size)
        y = np.empty((size, self.dim))
        k = int(chi.sum())
        y[chi] = self.sample_u(rng, k)
        y[~chi] = self.sample_v(rng, size - k)
        return chi, y

    def with_delta(self, delta: float) -> "SplitNoise":
        return SplitNoise(self.base, self.z_star, self.r_star, self.eps_star, self.m_star, delta, self.tol)


def build_split(noise: NoiseLaw, z_star, r_star: float, delta: float) -> SplitNoise:
    if not delta > 0:
        raise ValueError("delta must be positive")
    z_star = np.atleast_1d(np.asarray(z_star, dtype=float))
    eps = fit_lower_bound(noise, z_star, r_star)
    m_star = eps * bump_integral(r_star / 2, noise.dim)
    if not 0 < m_star < 1:
        raise InvariantViolation(f"splitting mass m*={m_star} outside (0, 1)")
    return SplitNoise(noise, z_star, float(r_star), eps, m_star, float(delta))


def ks_two_sample(a, b) -> tuple[float, float]:
    """Max over coordinates of the two-sample KS statistic, and its 1% critical value."""
    a, b = np.atleast_2d(a.T).T, np.atleast_2d(b.T).T
    stat = max(stats.ks_2samp(a[:, j], b[:, j]).statistic for j in range(a.shape[1]))
    n, m = len(a), len(b)
    crit = math.sqrt(-0.5 * math.log(0.01 / 2)) * math.sqrt((n + m) / (n * m))
    return float(stat), crit


def localization_radius(delta: float) -> float:
    return delta ** (-0.25) / 2


def theta_weight(split: SplitNoise, chi_path, z_path, t: float, localize: bool = True) -> np.ndarray:
    """``Theta = 1_Lambda prod_s phi_{delta^{-1/4}/2}(Z_s)`` over the ``floor(t/delta)`` steps in ``(0, t]``.

    ``chi_path`` is ``(K, steps)``, ``z_path`` is ``(K, steps, N)`` of raw draws.
    ``Lambda`` asks the fraction of fired ``chi`` to be at least ``m*/2``.
    """
    chi_path = np.atleast_2d(np.asarray(chi_path))
    z_path = np.asarray(z_path, dtype=float)
    if z_path.ndim == 2:
        z_path = z_path[:, :, None]
    k = int(math.floor(t / split.delta + 1e-9))
    if k < 1 or k > chi_path.shape[1]:
        raise ValueError(f"paths hold {chi_path.shape[1]} steps, need {k}")
    if not localize:
        return np.ones(chi_path.shape[0])
    freq = chi_path[:, :k].mean(axis=1)
    lam = freq >= split.m_star / 2
    phis = bump(localization_radius(split.delta), z_path[:, :k], axis=2)
    return lam * np.prod(phis, axis=1)


def localization_bounds(split: SplitNoise, t: float, tail_prob: float | None = None) -> dict:
    """Hoeffding bound on ``P(not Lambda)`` and the union bound on ``P(Theta = 0)``.

    ``tail_prob`` is ``P(|Z| >= delta^{-1/4})``; for Gaussian noise it is exact.
    """
    k = int(math.floor(t / split.delta + 1e-9))
    lam = math.exp(-split.m_star**2 * k / 2)
    if tail_prob is None:
        tail_prob = gaussian_tail(split.dim, split.delta ** (-0.25)) if split.base.name == "gaussian" else float("nan")
    return dict(steps=k, not_lambda=lam, theta_zero=lam + k * tail_prob, tail_prob=tail_prob)


def gaussian_tail(dim: int, radius: float) -> float:
    """``P(|G| >= radius)`` for a standard Gaussian in ``dim`` dimensions."""
    return float(stats.chi2.sf(radius**2, dim))


def localization_probabilities(split: SplitNoise, t: float, n_samples: int, seed: int, workers: int = 1) -> dict:
    """Empirical ``P(not Lambda)`` and ``P(Theta = 0)`` with their standard errors."""
    k = int(math.floor(t / split.delta + 1e-9))

    def block(rng, size, _b):
        chi = np.empty((size, k), dtype=bool)
        z = np.empty((size, k, split.dim))
        for s in range(k):
            c, y = split.sample(rng, size)
            chi[:, s], z[:, s] = c, y / math.sqrt(split.delta)
        not_lam = chi.mean(axis=1) < split.m_star / 2
        zero = theta_weight(split, chi, z, t) == 0
        return np.stack([not_lam, zero], axis=1).astype(float), size * k

    est = run_blocks(block, n_samples, seed, stream=11, workers=workers)
    return dict(
        steps=k,
        not_lambda=float(est.mean[0]),
        not_lambda_se=float(est.stderr[0]),
        theta_zero=float(est.mean[1]),
        theta_zero_se=float(est.stderr[1]),
    )


@dataclass
class RegularizedEstimate(MCEstimate):
    theta_mean: float = float("nan")
    theta_stderr: float = float("nan")


def regularized_expectation(
    sg: SchemeSemigroup,
    split: SplitNoise,
    x0,
    t: float,
    f: Callable,
    n_samples: int,
    seed: int,
    workers: int = 1,
    localize: bool = True,
) -> RegularizedEstimate:
    """Self-normalized ``sum Theta f(X_t) / sum Theta`` with noise drawn by splitting.

    The step is ``split.delta``; the standard error is the delta-method one.
    ``localize=False`` forces ``Theta = 1``.
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    k = int(round(t / split.delta))
    if k < 1 or abs(k * split.delta - t) > 1e-9 * max(1.0, t):
        raise ValueError(f"t={t} is not a multiple of delta={split.delta}")
    x0 = np.asarray(x0, dtype=float).reshape(1, sg.scheme.dim_x)
    sq = math.sqrt(split.delta)

    def block(rng, size, _b):
        x = np.repeat(x0, size, axis=0)
        chi = np.empty((size, k), dtype=bool)
        z = np.empty((size, k, split.dim))
        for s in range(k):
            c, y = split.sample(rng, size)
            chi[:, s], z[:, s] = c, y / sq
            x = step(sg, x, z[:, s], split.delta, rng)
        th = theta_weight(split, chi, z, t, localize)
        fx = np.asarray(f(x), dtype=float)
        tf = th * fx
        return np.stack([tf, th, tf * tf, tf * th, th * th], axis=1), size * k

    est = run_blocks(block, n_samples, seed, stream=12, workers=workers)
    a, b, aa, ab, bb = (float(v) for v in est.mean)
    if b == 0:
        raise InvariantViolation("localization annihilated the sample")
    ratio = a / b
    n = est.n_samples
    resid = max(aa - 2 * ratio * ab + ratio**2 * bb, 0.0)
    se = math.sqrt(resid / n) / b
    return RegularizedEstimate(ratio, se, n, est.work, b, float(est.stderr[1]))


def _blur_scale(delta: float, theta_exp: float) -> float:
    if not theta_exp > 0:
        raise ValueError("blur exponent theta must be positive")
    return delta**theta_exp


def gaussian_kernel(y_grid, x, scale: float) -> np.ndarray:
    """Density of ``x + scale G`` at each ``y``: shape ``(K, m)``."""
    y = np.asarray(y_grid, dtype=float)
    x = np.atleast_2d(x)
    d = x.shape[1]
    if y.ndim == 1:
        y = y[:, None] if d == 1 else y[None, :]
    sq = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-sq / (2 * scale**2)) / (2 * math.pi * scale**2) ** (d / 2)


def _nominal_delta(sg, params):
    return params.grid.step(1) if params is not None else sg.grid.step()


def _plain_or_boosted(sg, x0, t, fn, n_samples, seed, workers, params, with_rng):
    from .random_grid import estimate_qhat

    if params is not None:
        if not math.isclose(t, params.T):
            raise ValueError("boosted estimates are taken at the horizon T")
        return estimate_qhat(params, sg, x0, fn, n_samples, seed, workers=workers, with_rng=with_rng)
    delta = sg.grid.step()
    steps = sg.grid.index_of(t)
    x0 = np.asarray(x0, dtype=float).reshape(1, sg.scheme.dim_x)

    def block(rng, size, _b):
        x = np.repeat(x0, size, axis=0)
        for _ in range(steps):
            x = step(sg, x, sg.noise.sample(rng, size), delta, rng)
        vals = fn(x, rng) if with_rng else fn(x)
        return np.asarray(vals, dtype=float), size * steps

    return run_blocks(block, n_samples, seed, stream=13, workers=workers)


def convolved_expectation(
    sg: SchemeSemigroup,
    theta_exp: float,
    x0,
    t: float,
    f: Callable,
    n_samples: int,
    seed: int,
    workers: int = 1,
    params: OrderParams | None = None,
) -> MCEstimate:
    """``E f(delta^theta G + X_t)``, with ``X`` the scheme on its working level,
    or the boosted scheme when ``params`` is given (then ``delta = T/n``)."""
    scale = _blur_scale(_nominal_delta(sg, params), theta_exp)

    def blurred(x, rng):
        return f(x + scale * rng.standard_normal(x.shape))

    return _plain_or_boosted(sg, x0, t, blurred, n_samples, seed, workers, params, True)


def convolved_density(
    sg: SchemeSemigroup,
    theta_exp: float,
    x0,
    t: float,
    y_grid,
    n_samples: int,
    seed: int,
    workers: int = 1,
    params: OrderParams | None = None,
) -> MCEstimate:
    """Density of ``delta^theta G + X_t`` on ``y_grid`` through the exact Gaussian kernel."""
    scale = _blur_scale(_nominal_delta(sg, params), theta_exp)
    return _plain_or_boosted(
        sg, x0, t, lambda x: gaussian_kernel(y_grid, x, scale), n_samples, seed, workers, params, False
    )


def bump_scaling_slopes(radii=(0.25, 0.5, 1.0, 2.0), orders=(1, 2), powers=(1, 2), points: int = 20001) -> dict:
    """Log-log slope in ``v`` of ``max_z phi_v |d^q ln phi_v|^p``; expected ``-p q``."""
    from .report import fit_slope

    out = {}
    for q in orders:
        for p in powers:
            rows = []
            for v in radii:
                z = np.linspace(v, 2 * v, points)[1:-1]
                val = bump(v, z) * np.abs(bump_log_derivative(v, z, q)) ** p
                rows.append((v, float(val.max())))
            # fit_slope negates, so a v^{-pq} law reads as +pq
            slope, _ = fit_slope(rows)
            out[(q, p)] = -slope
    return out
