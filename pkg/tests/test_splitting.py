import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tvboost.errors import InvariantViolation
from tvboost.order_params import GridSpec
from tvboost.scheme import (
    SchemeSemigroup,
    brownian_scheme,
    gaussian_noise,
    make_test_function,
    ou_scheme,
    rademacher_noise,
    uniform_noise,
    weak_expectation,
)
from tvboost.splitting import (
    NotLowerBounded,
    build_split,
    bump,
    bump_integral,
    bump_log_derivative,
    bump_scaling_slopes,
    convolved_density,
    convolved_expectation,
    fit_lower_bound,
    gaussian_kernel,
    ks_two_sample,
    localization_bounds,
    localization_probabilities,
    regularized_expectation,
    theta_weight,
)

GAUSS_FLOOR = math.exp(-0.5) / math.sqrt(2 * math.pi)


def trapezoid_bump_mass(v, points=400_001):
    """Independent oracle: 1-D trapezoid rule on the explicit bump formula."""
    z = np.linspace(-2 * v, 2 * v, points)
    r = np.abs(z)
    val = np.ones_like(z)
    mid = (r > v) & (r < 2 * v)
    val[mid] = np.exp(1 - v * v / (v * v - (r[mid] - v) ** 2))
    val[r >= 2 * v] = 0.0
    return float(np.sum((val[1:] + val[:-1]) / 2 * np.diff(z)))


def test_bump_examples():
    assert bump(1.0, 0.5) == 1.0
    assert bump(1.0, 1.5) == pytest.approx(math.exp(-1 / 3), abs=1e-12)
    assert bump(1.0, 1.5) == pytest.approx(0.71653, abs=1e-5)
    assert bump(1.0, 2.0) == 0.0 and bump(1.0, -3.0) == 0.0
    with pytest.raises(ValueError):
        bump(0.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 5.0), st.floats(0.0, 3.0))
def test_bump_range_and_symmetry(v, s):
    z = s * v
    b = bump(v, z)
    assert 0.0 <= b <= 1.0
    assert bump(v, -z) == b
    if s <= 1:
        assert b == 1.0
    if s >= 2:
        assert b == 0.0


def test_bump_continuity_at_edges():
    for v in (0.3, 1.0, 2.5):
        assert bump(v, v * (1 + 1e-9)) == pytest.approx(1.0, abs=1e-6)
        assert bump(v, 2 * v * (1 - 1e-6)) < 1e-100


def test_bump_log_derivative_matches_finite_differences():
    v, z, h = 1.0, np.array([1.2, 1.5, -1.7]), 1e-5
    lg = lambda y: np.log(bump(v, y))
    fd1 = (lg(z + h) - lg(z - h)) / (2 * h)
    fd2 = (lg(z + h) - 2 * lg(z) + lg(z - h)) / h**2
    assert np.allclose(bump_log_derivative(v, z, 1), fd1, rtol=1e-6)
    assert np.allclose(bump_log_derivative(v, z, 2), fd2, rtol=1e-4)
    assert bump_log_derivative(v, 0.5, 1) == 0.0


def test_bump_integral_against_trapezoid():
    for v in (0.25, 0.5, 1.0):
        assert bump_integral(v, 1) == pytest.approx(trapezoid_bump_mass(v), abs=1e-9)


def test_bump_integral_two_dims_against_grid():
    v = 0.5
    g = np.linspace(-2 * v, 2 * v, 2001)
    X, Y = np.meshgrid(g, g)
    h = g[1] - g[0]
    grid = float(bump(v, np.stack([X.ravel(), Y.ravel()], 1), axis=1).sum() * h * h)
    assert bump_integral(v, 2) == pytest.approx(grid, rel=1e-4)


def test_fit_lower_bound_examples():
    assert fit_lower_bound(gaussian_noise(1), [0.0], 1.0) == pytest.approx(GAUSS_FLOOR, rel=1e-8)
    assert fit_lower_bound(gaussian_noise(1), [0.0], 1.0) == pytest.approx(0.241971, abs=1e-6)
    assert fit_lower_bound(uniform_noise(1, 1.0), [0.0], 0.5) == pytest.approx(0.5, rel=1e-8)
    with pytest.raises(NotLowerBounded, match="not Lebesgue lower bounded"):
        fit_lower_bound(rademacher_noise(1), [0.0], 1.0)
    with pytest.raises(NotLowerBounded):
        fit_lower_bound(uniform_noise(1, 1.0), [0.0], 2.0)


def test_split_mass():
    split = build_split(gaussian_noise(1), [0.0], 1.0, 0.1)
    oracle = GAUSS_FLOOR * trapezoid_bump_mass(0.5)
    assert abs(split.m_star - oracle) < 1e-3
    assert split.m_star == pytest.approx(0.388, abs=1e-3)


def test_u_law_centered():
    split = build_split(gaussian_noise(1), [0.0], 1.0, 0.25)
    u = split.sample_u(np.random.default_rng(0), 100_000)
    assert np.abs(u).max() <= math.sqrt(0.25) * 1.0 + 1e-12
    assert abs(u.mean()) < 4 * u.std() / math.sqrt(len(u))


@pytest.mark.parametrize("seed", [0, 1])
def test_split_law_equals_noise(seed):
    delta = 0.04
    split = build_split(gaussian_noise(1), [0.0], 1.0, delta)
    rng = np.random.default_rng(seed)
    chi, y = split.sample(rng, 100_000)
    ref = math.sqrt(delta) * gaussian_noise(1).sample(rng, 100_000)
    stat, crit = ks_two_sample(y, ref)
    assert stat < crit
    assert abs(chi.mean() - split.m_star) < 4 * math.sqrt(split.m_star * (1 - split.m_star) / 1e5)


def test_residual_acceptance_in_unit_interval():
    split = build_split(gaussian_noise(1), [0.0], 1.0, 0.1)
    z = gaussian_noise(1).sample(np.random.default_rng(3), 10**6)
    acc = split.residual_acceptance(z)
    assert acc.min() >= 0 and acc.max() <= 1
    assert split.stats["v_min_accept"] >= -split.tol


def test_residual_acceptance_violation_raises():
    split = build_split(gaussian_noise(1), [0.0], 1.0, 0.1)
    split.eps_star *= 2
    with pytest.raises(InvariantViolation):
        split.residual_acceptance(np.array([[0.4]]))


def test_theta_weight_examples():
    split = build_split(gaussian_noise(1), [0.0], 1.0, 0.125)
    chi = np.array([[True] * 8, [False] * 8, [True] * 8])
    z = np.zeros((3, 8))
    z[2, 3] = 10.0
    th = theta_weight(split, chi, z, 1.0)
    assert list(th) == [1.0, 0.0, 0.0]
    assert list(theta_weight(split, chi, z, 1.0, localize=False)) == [1.0, 1.0, 1.0]
    with pytest.raises(ValueError):
        theta_weight(split, chi, z, 2.0)


def test_localization_bounds_and_probabilities():
    for k in (8, 16, 32):
        split = build_split(gaussian_noise(1), [0.0], 1.0, 1.0 / k)
        b = localization_bounds(split, 1.0)
        assert b["steps"] == k
        assert b["not_lambda"] == pytest.approx(math.exp(-split.m_star**2 * k / 2))
        emp = localization_probabilities(split, 1.0, 20_000, seed=k)
        assert emp["not_lambda"] <= b["not_lambda"] + 3 * emp["not_lambda_se"]
        assert emp["theta_zero"] <= b["theta_zero"] + 3 * emp["theta_zero_se"]


def test_regularized_constant_is_exactly_one():
    sg = SchemeSemigroup(ou_scheme(), gaussian_noise(1), GridSpec(1.0, 8, 1))
    split = build_split(gaussian_noise(1), [0.0], 1.0, 1 / 8)
    est = regularized_expectation(sg, split, [1.0], 1.0, lambda X: np.ones(len(X)), 5000, 0)
    assert est.mean == 1.0


def test_unlocalized_matches_plain():
    sg = SchemeSemigroup(ou_scheme(), gaussian_noise(1), GridSpec(1.0, 8, 1))
    split = build_split(gaussian_noise(1), [0.0], 1.0, 1 / 8)
    f = make_test_function("x2")
    reg = regularized_expectation(sg, split, [1.0], 1.0, f, 100_000, 1, localize=False)
    plain = weak_expectation(sg, [1.0], 1.0, f, 100_000, 2)
    assert abs(reg.mean - plain.mean) < 3 * math.hypot(reg.stderr, plain.stderr)
    assert reg.theta_mean == 1.0


def test_regularized_rejects_off_grid():
    sg = SchemeSemigroup(ou_scheme(), gaussian_noise(1), GridSpec(1.0, 8, 1))
    split = build_split(gaussian_noise(1), [0.0], 1.0, 1 / 8)
    with pytest.raises(ValueError):
        regularized_expectation(sg, split, [1.0], 0.3, make_test_function("x"), 10, 0)


def test_gaussian_kernel_integrates_to_one():
    y = np.linspace(-8, 8, 4001)
    K = gaussian_kernel(y, np.array([[0.3], [-1.0]]), 0.7)
    assert np.allclose(K.sum(axis=1) * (y[1] - y[0]), 1.0, atol=1e-10)


def test_convolved_linear_matches_plain():
    sg = SchemeSemigroup(ou_scheme(), gaussian_noise(1), GridSpec(1.0, 4, 1))
    f = make_test_function("x")
    conv = convolved_expectation(sg, 1.0, [1.0], 1.0, f, 100_000, 0)
    plain = weak_expectation(sg, [1.0], 1.0, f, 100_000, 1)
    assert abs(conv.mean - plain.mean) < 4 * math.hypot(conv.stderr, plain.stderr)


def test_brownian_density_spot_check():
    # Euler for Brownian motion is exact: X_1 + delta G is N(0, 1 + delta^2)
    sg = SchemeSemigroup(brownian_scheme(), gaussian_noise(1), GridSpec(1.0, 4, 1))
    y = np.array([-1.0, 0.0, 0.5])
    est = convolved_density(sg, 1.0, [0.0], 1.0, y, 200_000, 0)
    var = 1 + 0.25**2
    exact = np.exp(-(y**2) / (2 * var)) / math.sqrt(2 * math.pi * var)
    assert np.all(np.abs(est.mean - exact) < 4 * est.stderr)


def test_blur_exponent_must_be_positive():
    sg = SchemeSemigroup(brownian_scheme(), gaussian_noise(1), GridSpec(1.0, 4, 1))
    with pytest.raises(ValueError):
        convolved_density(sg, 0.0, [0.0], 1.0, [0.0], 10, 0)


def test_bump_scaling_slopes():
    slopes = bump_scaling_slopes()
    for (q, p), s in slopes.items():
        assert abs(s - (-p * q)) <= 0.05
