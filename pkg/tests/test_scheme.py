import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tvboost.errors import InvariantViolation
from tvboost.mc import BLOCK_SIZE, Moments, block_sizes, run_blocks
from tvboost.order_params import GridSpec
from tvboost.report import fit_slope
from tvboost.scheme import (
    Cloud,
    NonFiniteStateError,
    SchemeFunction,
    SchemeSemigroup,
    brownian_scheme,
    ellipticity_floor,
    gaussian_noise,
    make_euler,
    make_test_function,
    moment_estimate,
    ou_euler_moments,
    ou_exact_for,
    ou_oracle,
    ou_scheme,
    psi_norm,
    psi_norm_estimate,
    random_cloud,
    step,
    uniform_noise,
    weak_expectation,
)


def sg_for(scheme, n, T=1.0, noise=None):
    return SchemeSemigroup(scheme, noise or gaussian_noise(scheme.dim_z), GridSpec(T, n, 1))


def test_ou_step_examples():
    sg = sg_for(ou_scheme(), 4)
    assert step(sg, [[1.0]], [[2.0]], 0.25)[0, 0] == pytest.approx(1.75)
    assert step(sg, [[1.0]], [[0.0]], 0.5)[0, 0] == pytest.approx(0.5)
    assert step(sg, [[0.3]], [[0.0]], 0.0)[0, 0] == 0.3


def test_psi_fixes_x_at_origin():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1000, 2))
    kappa = rng.normal(size=1000)
    b = lambda y: np.sin(y)
    sig = lambda y: np.stack([np.stack([1 + y[:, 0] ** 2, y[:, 1]], 1), np.stack([0 * y[:, 0], np.ones(len(y))], 1)], 1)
    s = make_euler(b, sig, 2, 2)
    assert np.abs(s(kappa, x, np.zeros((1000, 2)), 0.0) - x).max() <= 1e-14
    J = s.dz_at_origin(kappa, x)
    assert np.allclose(J, sig(x), atol=1e-9)


def test_make_euler_dimension_check():
    with pytest.raises(ValueError):
        make_euler(lambda x: x, lambda x: np.ones((x.shape[0], 1, 2)), 2, 2)


def test_nonfinite_state_reported():
    s = SchemeFunction(1, 1, lambda k, x, z, d: x / 0.0 * z)
    sg = SchemeSemigroup(s, gaussian_noise(1), GridSpec(1.0, 2, 1))
    with np.errstate(all="ignore"), pytest.raises(NonFiniteStateError) as err:
        step(sg, [[1.0]], [[0.0]], 0.5)
    assert isinstance(err.value, InvariantViolation)
    assert "x=" in str(err.value)


def test_brownian_variance():
    sg = sg_for(brownian_scheme(), 8, T=2.0)
    est = weak_expectation(sg, [0.0], 2.0, lambda X: X[:, 0] ** 2, 200_000, 1)
    assert abs(est.mean - 2.0) < 4 * est.stderr


def test_constant_function_zero_stderr():
    est = weak_expectation(sg_for(ou_scheme(), 4), [1.0], 1.0, lambda X: np.ones(len(X)), 1000, 0)
    assert est.mean == 1.0 and est.stderr == 0.0


def test_weak_expectation_rejects_zero_samples():
    with pytest.raises(ValueError):
        weak_expectation(sg_for(ou_scheme(), 4), [1.0], 1.0, make_test_function("x"), 0, 0)


def test_weak_expectation_off_grid():
    with pytest.raises(ValueError):
        weak_expectation(sg_for(ou_scheme(), 4), [1.0], 0.3, make_test_function("x"), 10, 0)


def test_ou_oracle_examples():
    assert ou_oracle(1, 1, 1.0, 1.0, "mean") == pytest.approx(0.367879, abs=1e-6)
    assert ou_oracle(1, 1, 1.0, 1.0, "second_moment") == pytest.approx(0.567668, abs=1e-6)
    assert ou_oracle(2.0, 0.5, 0.0, 3.0, "cdf_at", 0.0) == pytest.approx(0.5)
    assert ou_oracle(1, 1, 0.0, 1.0, "cdf_at(0)") == pytest.approx(0.5)
    mean, var = (math.exp(-1), (1 - math.exp(-2)) / 2)
    assert ou_oracle(1, 1, 1.0, 1.0, "density_at", mean) == pytest.approx(1 / math.sqrt(2 * math.pi * var))
    with pytest.raises(ValueError):
        ou_oracle(0.0, 1, 1.0, 1.0, "mean")


def test_ou_euler_moments_match_simulation():
    m, v = ou_euler_moments(1, 1, 1.0, 1.0, 4)
    est = weak_expectation(sg_for(ou_scheme(), 4), [1.0], 1.0, make_test_function("x2"), 200_000, 3)
    assert abs(est.mean - (v + m * m)) < 4 * est.stderr


def test_test_functions_and_oracles():
    X = np.array([[-1.0], [0.5]])
    assert np.allclose(make_test_function("indicator:0")(X), [1.0, 0.0])
    assert np.allclose(make_test_function("x2")(X), [1.0, 0.25])
    assert ou_exact_for("cos", 1, 1, 1.0, 1.0) == pytest.approx(ou_oracle(1, 1, 1.0, 1.0, "cos"))
    with pytest.raises(ValueError):
        make_test_function("nope")


def test_noise_centered():
    for noise in (gaussian_noise(2), uniform_noise(1, 0.5)):
        est = run_blocks(lambda rng, k, b: (noise.sample(rng, k), 0), 10**6, 4)
        assert np.all(np.abs(est.mean) < 4 * est.stderr)


def test_brownian_norm_is_one():
    s = brownian_scheme(1)
    assert psi_norm(s, 2, random_cloud(s, 100)) == 1.0


def test_ou_norm_higher_derivatives_vanish():
    s = ou_scheme(1.0, 1.0)
    cloud = random_cloud(s, 50, seed=2)
    for ax in (0, 1, 2):
        for bz, c in ((2, 0), (1, 1), (0, 2), (3, 0)):
            D = s.derivative((ax,), (bz,), c, cloud.kappa, cloud.x, cloud.z, cloud.delta)
            assert np.abs(D).max() == 0
    # remaining terms: d_z psi = sigma, d_delta psi = -a x, d_x d_delta psi = -a
    assert np.allclose(s.derivative((0,), (1,), 0, cloud.kappa, cloud.x, cloud.z, cloud.delta), 1.0)
    assert np.allclose(s.derivative((1,), (0,), 1, cloud.kappa, cloud.x, cloud.z, cloud.delta), -1.0, atol=1e-6)


def test_norm_constant_monotone():
    s = ou_scheme()
    norm, K = psi_norm_estimate(s, 3, random_cloud(s, 64))
    assert norm >= 1 and K >= 2 * math.e


def test_empty_cloud():
    s = brownian_scheme()
    with pytest.raises(ValueError):
        psi_norm(s, 2, Cloud(np.zeros(0), np.zeros((0, 1)), np.zeros((0, 1)), np.zeros(0)))


def test_fd_matches_analytic():
    s = ou_scheme(0.7, 1.3)
    fd = SchemeFunction(1, 1, s.psi)
    cloud = random_cloud(s, 20, seed=5)
    for ax, bz, c in (((1,), (0,), 1), ((0,), (1,), 0), ((0,), (0,), 1)):
        a = s.derivative(ax, bz, c, cloud.kappa, cloud.x, cloud.z, cloud.delta)
        b = fd.derivative(ax, bz, c, cloud.kappa, cloud.x, cloud.z, cloud.delta)
        assert np.allclose(a, b, atol=1e-4)


def test_ellipticity_examples():
    cloud = random_cloud(ou_scheme(), 30)
    assert ellipticity_floor(ou_scheme(), cloud) == pytest.approx(1.0)
    diag = make_euler(lambda x: 0 * x, lambda x: np.broadcast_to(np.diag([1.0, 2.0]), (len(x), 2, 2)), 2, 2)
    assert ellipticity_floor(diag, random_cloud(diag, 30)) == pytest.approx(1.0)
    flat = make_euler(lambda x: -x, lambda x: np.zeros((len(x), 1, 1)), 1, 1)
    assert ellipticity_floor(flat, random_cloud(flat, 30)) == 0.0


def test_moment_examples():
    g = gaussian_noise(1)
    assert moment_estimate(g, 2, 10**5, 0).mean >= 1.0
    m4 = moment_estimate(g, 4, 10**6, 1)
    assert abs(m4.mean - 3.0) < 4 * m4.stderr
    assert moment_estimate(uniform_noise(1, 0.5), 3, 10**4, 0).mean == 1.0
    with pytest.raises(ValueError):
        moment_estimate(g, 0.5, 10, 0)


def test_one_step_consistency_rate():
    """|E f(X_delta) - f(x) - delta L f(x)| = O(delta^2) for the OU Euler step."""
    s = ou_scheme()
    nodes, weights = np.polynomial.hermite_e.hermegauss(20)
    weights = weights / weights.sum()
    x, rows = 1.0, []
    for n in (8, 16, 32):
        d = 1.0 / n
        k = len(nodes)
        # f = x^4, expectation over the step by Gauss-Hermite quadrature
        xs = s(np.zeros(k), np.full((k, 1), x), math.sqrt(d) * nodes[:, None], d)[:, 0]
        ef = float(weights @ xs**4)
        lf = -x * 4 * x**3 + 0.5 * 12 * x**2
        rows.append((n, abs(ef - x**4 - d * lf)))
    assert fit_slope(rows)[0] >= 1.7


def test_workers_do_not_change_result():
    sg = sg_for(ou_scheme(), 4)
    f = make_test_function("cos")
    a = weak_expectation(sg, [1.0], 1.0, f, 3 * BLOCK_SIZE + 17, 9, workers=1)
    b = weak_expectation(sg, [1.0], 1.0, f, 3 * BLOCK_SIZE + 17, 9, workers=3)
    assert (a.mean, a.stderr) == (b.mean, b.stderr)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50), min_size=1, max_size=6))
def test_chan_merge_matches_direct(blocks):
    acc = Moments()
    for b in blocks:
        acc.add_block(np.array(b))
    allv = np.concatenate([np.array(b) for b in blocks])
    if len(allv) < 2:
        return
    est = acc.estimate()
    assert est.mean == pytest.approx(allv.mean(), abs=1e-9)
    assert est.stderr == pytest.approx(allv.std(ddof=1) / math.sqrt(len(allv)), rel=1e-7, abs=1e-9)


def test_block_sizes():
    assert block_sizes(10, 4) == [4, 4, 2]
    assert sum(block_sizes(10**6)) == 10**6
