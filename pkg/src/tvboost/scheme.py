"""One-step recursions ``X_{t+d} = psi(kappa, X_t, sqrt(d) Z, d)`` and their diagnostics.

Batched conventions: ``x`` has shape ``(K, d)``, ``z`` shape ``(K, N)``,
``kappa`` shape ``(K,)``; ``delta`` is a float or a ``(K,)`` array.
Test functions map ``(K, d)`` states to ``(K,)`` or ``(K, m)`` values.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .errors import InvariantViolation
from .mc import MCEstimate, run_blocks
from .order_params import GridSpec


class NonFiniteStateError(InvariantViolation):
    pass


def _delta_col(delta, K):
    d = np.asarray(delta, dtype=float)
    if d.ndim == 0:
        return d
    return d.reshape(K, 1)


@dataclass
class SchemeFunction:
    """A smooth one-step map with ``psi(kappa, x, 0, 0) = x``.

    ``partial(ax, bz, c, kappa, x, z, delta)`` may return the analytic mixed
    derivative ``d_x^ax d_z^bz d_delta^c psi`` or ``None`` to fall back on
    central finite differences (step ``fd_step`` for first order, widened as
    ``fd_step**(1/order)`` for higher orders to keep roundoff bounded).
    """

    dim_x: int
    dim_z: int
    psi: Callable
    partial: Optional[Callable] = None
    fd_step: float = 1e-5
    name: str = "scheme"

    def __call__(self, kappa, x, z, delta):
        return self.psi(kappa, x, z, delta)

    def derivative(self, ax, bz, c, kappa, x, z, delta) -> np.ndarray:
        ax, bz = tuple(ax), tuple(bz)
        if self.partial is not None:
            out = self.partial(ax, bz, c, kappa, x, z, delta)
            if out is not None:
                return out
        return self._fd_derivative(ax, bz, c, kappa, x, z, delta)

    def _fd_derivative(self, ax, bz, c, kappa, x, z, delta):
        d, N = self.dim_x, self.dim_z
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        K = x.shape[0]
        delta = np.broadcast_to(np.asarray(delta, dtype=float), (K,)).copy()
        order = sum(ax) + sum(bz) + c
        if order == 0:
            return self.psi(kappa, x, z, delta)
        h = self.fd_step ** (1.0 / order)
        # list of coordinate directions, with multiplicity
        dirs = [("x", i) for i, k in enumerate(ax) for _ in range(k)]
        dirs += [("z", i) for i, k in enumerate(bz) for _ in range(k)]
        dirs += [("t", 0)] * c
        total = 0.0
        for signs in itertools.product((1.0, -1.0), repeat=order):
            xs, zs, ts = x.copy(), z.copy(), delta.copy()
            for (kind, i), s in zip(dirs, signs):
                if kind == "x":
                    xs[:, i] += s * h
                elif kind == "z":
                    zs[:, i] += s * h
                else:
                    ts += s * h
            total = total + np.prod(signs) * self.psi(kappa, xs, zs, ts)
        return total / (2.0 * h) ** order

    def dz_at_origin(self, kappa, x) -> np.ndarray:
        """Jacobian ``d_z psi(kappa, x, 0, 0)`` with shape ``(K, d, N)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        K = x.shape[0]
        z0 = np.zeros((K, self.dim_z))
        cols = []
        for i in range(self.dim_z):
            bz = tuple(int(j == i) for j in range(self.dim_z))
            cols.append(self.derivative((0,) * self.dim_x, bz, 0, kappa, x, z0, 0.0))
        return np.stack(cols, axis=-1)


def _fd_partial_x(fn, ax, x, h0=1e-5):
    """Mixed x-derivative of a batched field ``fn(x)`` by central differences."""
    order = sum(ax)
    if order == 0:
        return fn(x)
    h = h0 ** (1.0 / order)
    dirs = [i for i, k in enumerate(ax) for _ in range(k)]
    total = 0.0
    for signs in itertools.product((1.0, -1.0), repeat=order):
        xs = x.copy()
        for i, s in zip(dirs, signs):
            xs[:, i] += s * h
        total = total + np.prod(signs) * fn(xs)
    return total / (2.0 * h) ** order


def make_euler(b: Callable, sigma: Callable, dim_x: int, dim_z: int, name: str = "euler") -> SchemeFunction:
    """``psi(kappa, x, z, delta) = x + delta b(x) + sigma(x) z``.

    ``b`` maps ``(K, d) -> (K, d)`` and ``sigma`` maps ``(K, d) -> (K, d, N)``.
    The map is affine in ``(z, delta)``, so every mixed derivative with two or
    more ``z``/``delta`` orders vanishes; the remaining ones are x-derivatives
    of ``sigma`` columns and of ``b``.
    """
    probe = np.zeros((1, dim_x))
    if np.shape(b(probe)) != (1, dim_x):
        raise ValueError(f"drift must map (K, {dim_x}) -> (K, {dim_x})")
    if np.shape(sigma(probe)) != (1, dim_x, dim_z):
        raise ValueError(f"diffusion must map (K, {dim_x}) -> (K, {dim_x}, {dim_z})")

    def psi(kappa, x, z, delta):
        x = np.asarray(x, dtype=float)
        dt = _delta_col(delta, x.shape[0])
        return x + dt * b(x) + np.einsum("kij,kj->ki", sigma(x), z)

    def partial(ax, bz, c, kappa, x, z, delta):
        x = np.asarray(x, dtype=float)
        nz = sum(bz)
        if nz + c >= 2:
            return np.zeros_like(x)
        if nz == 1:
            i = bz.index(1)
            return _fd_partial_x(lambda y: sigma(y)[:, :, i], ax, x)
        if c == 1:
            return _fd_partial_x(b, ax, x)
        return None

    return SchemeFunction(dim_x, dim_z, psi, partial, name=name)


def brownian_scheme(dim: int = 1) -> SchemeFunction:
    eye = np.eye(dim)
    return make_euler(
        lambda x: np.zeros_like(x),
        lambda x: np.broadcast_to(eye, (x.shape[0], dim, dim)),
        dim,
        dim,
        name="brownian",
    )


def ou_scheme(a: float = 1.0, sigma: float = 1.0) -> SchemeFunction:
    """Euler scheme of ``dX = -a X dt + sigma dW`` in one dimension."""
    return make_euler(
        lambda x: -a * x,
        lambda x: np.full((x.shape[0], 1, 1), float(sigma)),
        1,
        1,
        name="ou",
    )


@dataclass
class NoiseLaw:
    """Centered noise with a seeded sampler and optionally an explicit density."""

    dim: int
    sampler: Callable[[np.random.Generator, int], np.ndarray]
    density: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "noise"
    _moments: dict = field(default_factory=dict, repr=False)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.asarray(self.sampler(rng, size), dtype=float).reshape(size, self.dim)


def gaussian_noise(dim: int = 1) -> NoiseLaw:
    norm_const = (2 * math.pi) ** (-dim / 2)
    return NoiseLaw(
        dim,
        lambda rng, k: rng.standard_normal((k, dim)),
        lambda z: norm_const * np.exp(-0.5 * (np.atleast_2d(z) ** 2).sum(axis=1)),
        name="gaussian",
    )


def uniform_noise(dim: int = 1, half_width: float = 1.0) -> NoiseLaw:
    vol = (2 * half_width) ** dim

    def density(z):
        z = np.atleast_2d(z)
        return np.where((np.abs(z) <= half_width).all(axis=1), 1.0 / vol, 0.0)

    return NoiseLaw(dim, lambda rng, k: rng.uniform(-half_width, half_width, (k, dim)), density, "uniform")


def rademacher_noise(dim: int = 1) -> NoiseLaw:
    return NoiseLaw(dim, lambda rng, k: rng.choice((-1.0, 1.0), size=(k, dim)), None, "rademacher")


def make_chain_scheme(A: np.ndarray) -> tuple[SchemeFunction, NoiseLaw]:
    """Embed the Euler chain ``I + delta A`` on states ``0..S-1`` as a scheme.

    The noise is uniform on ``[-1/2, 1/2]``; the map recovers the uniform
    ``u = w / sqrt(delta) + 1/2`` and inverts the cumulative row of the state.
    """
    A = np.asarray(A, dtype=float)
    S = A.shape[0]
    cache: dict = {}

    def cum_rows(delta):
        hit = cache.get(delta)
        if hit is None:
            M = np.eye(S) + delta * A
            if (M < -1e-12).any():
                raise ValueError(f"Euler chain not stochastic at delta={delta}")
            hit = np.cumsum(M, axis=1)
            hit[:, -1] = 1.0
            cache[delta] = hit
        return hit

    def psi(kappa, x, w, delta):
        x = np.asarray(x, dtype=float)
        delta = float(np.asarray(delta).ravel()[0]) if np.ndim(delta) else float(delta)
        if delta == 0.0:
            return x.copy()
        u = w[:, 0] / math.sqrt(delta) + 0.5
        states = x[:, 0].astype(np.int64)
        cum = cum_rows(delta)[states]
        nxt = (u[:, None] > cum).sum(axis=1)
        return np.minimum(nxt, S - 1).astype(float)[:, None]

    return SchemeFunction(1, 1, psi, name="chain"), uniform_noise(1, 0.5)


def constant_kappa(value: float = 0.0):
    return lambda rng, k: np.full(k, value)


@dataclass
class SchemeSemigroup:
    scheme: SchemeFunction
    noise: NoiseLaw
    grid: GridSpec
    kappa_law: Optional[Callable] = None

    def __post_init__(self):
        if self.noise.dim != self.scheme.dim_z:
            raise ValueError("noise dimension does not match the scheme")

    def draw_kappa(self, rng, k):
        if self.kappa_law is None:
            return np.zeros(k)
        return np.asarray(self.kappa_law(rng, k), dtype=float)


def step(sg: SchemeSemigroup, x, z, delta: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """One step ``psi(kappa, x, sqrt(delta) z, delta)`` with a fresh ``kappa``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    kappa = sg.draw_kappa(rng, x.shape[0]) if sg.kappa_law is not None else np.zeros(x.shape[0])
    out = sg.scheme(kappa, x, math.sqrt(delta) * z, delta)
    bad = ~np.isfinite(out).all(axis=1)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise NonFiniteStateError(
            f"non-finite state from x={x[k]}, z={z[k]}, delta={delta}, kappa={kappa[k]}"
        )
    return out


def simulate(sg: SchemeSemigroup, x: np.ndarray, delta: float, steps: int, rng) -> np.ndarray:
    for _ in range(steps):
        x = step(sg, x, sg.noise.sample(rng, x.shape[0]), delta, rng)
    return x


def _as_values(v, K):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        v = np.full(K, float(v))
    return v


def weak_expectation(
    sg: SchemeSemigroup,
    x0,
    t: float,
    f: Callable,
    n_samples: int,
    seed: int,
    workers: int = 1,
) -> MCEstimate:
    """Plain Monte Carlo of ``E f(X^delta_t)`` from ``x0`` on the grid of ``sg``."""
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    delta = sg.grid.step()
    steps = sg.grid.index_of(t)
    x0 = np.asarray(x0, dtype=float).reshape(1, sg.scheme.dim_x)

    def block(rng, size, _b):
        x = simulate(sg, np.repeat(x0, size, axis=0), delta, steps, rng)
        return _as_values(f(x), size), size * steps

    return run_blocks(block, n_samples, seed, workers=workers)


def ou_moments(a: float, sigma: float, x0: float, T: float) -> tuple[float, float]:
    if not a > 0:
        raise ValueError("OU rate must be positive")
    mean = x0 * math.exp(-a * T)
    var = sigma**2 * (1 - math.exp(-2 * a * T)) / (2 * a)
    return mean, var


def ou_euler_moments(a: float, sigma: float, x0: float, T: float, n: int) -> tuple[float, float]:
    """Mean and variance of the Gaussian-noise Euler chain after ``n`` steps of ``T/n``."""
    d = T / n
    r = 1 - a * d
    mean = x0 * r**n
    if r * r == 1.0:
        var = sigma**2 * d * n
    else:
        var = sigma**2 * d * (1 - r ** (2 * n)) / (1 - r * r)
    return mean, var


def ou_oracle(a: float, sigma: float, x0: float, T: float, functional: str, arg: float | None = None):
    """Exact Gaussian functionals of the OU marginal at time ``T``.

    ``functional`` is one of ``mean``, ``second_moment``, ``cos`` (E cos X),
    ``cdf_at`` and ``density_at``; the last two take ``arg``. A string like
    ``"cdf_at(0.5)"`` is also accepted.
    """
    if "(" in functional:
        functional, rest = functional.split("(", 1)
        arg = float(rest.rstrip(")"))
    mean, var = ou_moments(a, sigma, x0, T)
    if functional == "mean":
        return mean
    if functional == "second_moment":
        return var + mean**2
    if functional == "cos":
        return math.cos(mean) * math.exp(-var / 2)
    if functional == "cdf_at":
        return float(stats.norm.cdf(arg, loc=mean, scale=math.sqrt(var)))
    if functional == "density_at":
        y = np.asarray(arg, dtype=float)
        out = np.exp(-((y - mean) ** 2) / (2 * var)) / math.sqrt(2 * math.pi * var)
        return float(out) if out.ndim == 0 else out
    raise ValueError(f"unknown functional {functional!r}")


@dataclass
class Cloud:
    """Evaluation points for sup-norm estimates over a finite sample."""

    kappa: np.ndarray
    x: np.ndarray
    z: np.ndarray
    delta: np.ndarray

    def __len__(self):
        return self.x.shape[0]


def random_cloud(scheme: SchemeFunction, size: int, seed: int = 0, radius: float = 2.0, max_delta: float = 0.5) -> Cloud:
    rng = np.random.default_rng(seed)
    return Cloud(
        kappa=rng.uniform(-1, 1, size),
        x=rng.uniform(-radius, radius, (size, scheme.dim_x)),
        z=rng.uniform(-radius, radius, (size, scheme.dim_z)),
        delta=rng.uniform(0, max_delta, size),
    )


def _multi_indices(dim: int, order: int):
    """All multi-indices in ``dim`` variables with total ``order``."""
    for combo in itertools.combinations_with_replacement(range(dim), order):
        idx = [0] * dim
        for c in combo:
            idx[c] += 1
        yield tuple(idx)


def psi_norm(scheme: SchemeFunction, r: int, cloud: Cloud) -> float:
    """Lower estimate of ``1 v sum ||d_x^a d_z^b d_delta^c psi||_inf``, the sum over
    ``|a| <= r`` and ``1 <= |b| + c <= r - |a|``, sup taken over the cloud."""
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    d, N = scheme.dim_x, scheme.dim_z
    total = 0.0
    for na in range(r + 1):
        for nbc in range(1, r - na + 1):
            for c in range(nbc + 1):
                for ax in _multi_indices(d, na):
                    for bz in _multi_indices(N, nbc - c):
                        D = scheme.derivative(ax, bz, c, cloud.kappa, cloud.x, cloud.z, cloud.delta)
                        total += float(np.abs(D).max())
    return max(1.0, total)


def psi_norm_estimate(scheme: SchemeFunction, r: int, cloud: Cloud) -> tuple[float, float]:
    """``(||psi||_{1,r,inf}, K_r)`` with ``K_r = (1 + ||psi||_{1,r}) exp(||psi||_{1,3}^2)``."""
    norm_r = psi_norm(scheme, r, cloud)
    norm_3 = norm_r if r == 3 else psi_norm(scheme, 3, cloud)
    return norm_r, (1.0 + norm_r) * math.exp(norm_3**2)


def ellipticity_floor(scheme: SchemeFunction, cloud: Cloud) -> float:
    """Smallest eigenvalue of ``J J^T`` over the cloud, ``J = d_z psi(kappa, x, 0, 0)``."""
    J = scheme.dz_at_origin(cloud.kappa, cloud.x)
    G = np.einsum("kij,klj->kil", J, J)
    lam = np.linalg.eigvalsh(G).min()
    return max(float(lam), 0.0)


def moment_estimate(noise: NoiseLaw, p: float, n_samples: int, seed: int) -> MCEstimate:
    """``1 v E|Z|^p`` by Monte Carlo; the standard error is that of the raw mean."""
    if p < 1:
        raise ValueError("p must be >= 1")

    def block(rng, size, _b):
        z = noise.sample(rng, size)
        return np.linalg.norm(z, axis=1) ** p, 0

    est = run_blocks(block, n_samples, seed, stream=7)
    return MCEstimate(max(1.0, est.mean), est.stderr, est.n_samples, 0)


def make_test_function(spec: str) -> Callable:
    """``x`` (identity), ``poly``/``x2`` (square), ``cos``, ``indicator:K`` (x <= K)."""
    if spec == "x":
        return lambda X: X[:, 0].copy()
    if spec in ("poly", "x2"):
        return lambda X: X[:, 0] ** 2
    if spec == "cos":
        return lambda X: np.cos(X[:, 0])
    if spec.startswith("indicator"):
        K = float(spec.split(":", 1)[1]) if ":" in spec else 0.0
        return lambda X: (X[:, 0] <= K).astype(float)
    raise ValueError(f"unknown test function {spec!r}")


def ou_exact_for(spec: str, a: float, sigma: float, x0: float, T: float) -> float:
    """Exact OU value matching :func:`make_test_function`."""
    if spec == "x":
        return ou_oracle(a, sigma, x0, T, "mean")
    if spec in ("poly", "x2"):
        return ou_oracle(a, sigma, x0, T, "second_moment")
    if spec == "cos":
        return ou_oracle(a, sigma, x0, T, "cos")
    if spec.startswith("indicator"):
        K = float(spec.split(":", 1)[1]) if ":" in spec else 0.0
        return ou_oracle(a, sigma, x0, T, "cdf_at", K)
    raise ValueError(f"unknown test function {spec!r}")
