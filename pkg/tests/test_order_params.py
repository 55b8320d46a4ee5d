import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tvboost.order_params import (
    GridSpec,
    GridTooCoarseError,
    OrderParams,
    _kappa_plain,
    deepest_grid_level,
    kappa,
    l_max,
    m_steps,
    q_nu,
    q_order,
    recursion_table,
    t_nu,
)


@pytest.mark.parametrize("l,nu,alpha,expected", [(0, 2, 1, 2), (1, 3, 1, 1), (0, 0, 1, 0)])
def test_m_steps_examples(l, nu, alpha, expected):
    assert m_steps(l, nu, alpha) == expected


def test_m_steps_rejects_zero_alpha():
    with pytest.raises(ValueError):
        m_steps(0, 2, 0)


@pytest.mark.parametrize("i,l,nu,alpha,expected", [(1, 0, 3, 1, 4), (2, 0, 3, 1, 3), (3, 0, 4, 1, 3)])
def test_q_order_examples(i, l, nu, alpha, expected):
    assert q_order(i, l, nu, alpha) == expected


@pytest.mark.parametrize("i", [0, 3, 5])
def test_q_order_rejects_out_of_range(i):
    # m(0, 3, 1) = 3, so only i in {1, 2} is admissible
    with pytest.raises(ValueError):
        q_order(i, 0, 3, 1)


def test_kappa_examples():
    assert kappa(1, 3, 1, 2) == 2
    assert kappa(0, 2, 1, 2) == 4
    assert kappa(0, 0, 1, 2) == 0


def test_l_max_examples():
    assert l_max(2, 1) == 2
    assert l_max(3, 2) == 2
    assert l_max(0, 1) == 0


def test_q_nu_examples():
    assert q_nu(2, 1, 2) == 4
    assert q_nu(1, 1, 2) == 2
    assert q_nu(1, 1, 1) == 1


def test_t_nu_examples():
    assert t_nu(1.0, 4, 2, 1) == pytest.approx(0.25)
    assert t_nu(1.0, 100, 1, 1) == pytest.approx(0.50)
    assert t_nu(2.0, 2, 0, 1) == pytest.approx(2.0)


def test_t_nu_too_coarse():
    with pytest.raises(GridTooCoarseError):
        t_nu(1.0, 2, 2, 1)


def test_grid_points_and_steps():
    g = GridSpec(3.0, 4)
    for l in range(4):
        pts = g.points(l)
        assert len(pts) == 4**l + 1
        assert g.step(l + 1) * 4 == pytest.approx(g.step(l), rel=1e-15)
        assert pts[-1] == pytest.approx(3.0)
    assert g.index_of(1.5, 1) == 2
    with pytest.raises(ValueError):
        g.index_of(0.1, 1)


def test_grid_rejects_small_n():
    with pytest.raises(ValueError):
        GridSpec(1.0, 1)


@pytest.mark.parametrize("alpha", [1, 2])
@pytest.mark.parametrize("beta", [1, 2, 3])
@pytest.mark.parametrize("nu", range(0, 7))
def test_recursion_measure_decreases(nu, alpha, beta):
    """Every correction order stays below nu + i alpha l_max, on the whole tree."""
    lm = l_max(nu, alpha)
    for row in recursion_table(nu, alpha, beta):
        if row["i"] == 0:
            continue
        assert row["q_i"] < row["nu"] + row["i"] * alpha * max(lm, 1)
        assert row["level"] <= lm
    assert kappa(0, nu, alpha, beta) == kappa(0, nu, alpha, beta, memo=False)


@given(st.integers(0, 12), st.integers(0, 4), st.integers(1, 3), st.integers(1, 3))
def test_m_invariants(nu, l, alpha, beta):
    m = m_steps(l, nu, alpha)
    assert m >= 0
    assert (m == 0) == (nu == 0)
    if 0 < nu <= (1 + alpha) * l + alpha:
        assert m == 1
    assert kappa(l, nu, alpha, beta) == _kappa_plain(l, nu, alpha, beta)


@given(st.integers(1, 12), st.integers(0, 3), st.integers(1, 3))
def test_q_decreasing_in_i(nu, l, alpha):
    m = m_steps(l, nu, alpha)
    qs = [q_order(i, l, nu, alpha) for i in range(1, m)]
    assert all(b < a for a, b in zip(qs, qs[1:]))


@given(st.integers(1, 8), st.integers(1, 2))
def test_deepest_level_matches_l_max(nu, alpha):
    assert deepest_grid_level(nu, alpha) == l_max(nu, alpha)


@given(st.floats(0.1, 10.0), st.integers(2, 50), st.integers(0, 4))
def test_t_nu_on_grid_and_above_threshold(T, n, nu):
    m = m_steps(0, nu, 1)
    if n <= m:
        return
    t = t_nu(T, n, nu, 1)
    thr = T * (n - m) / (n * (m + 1))
    k = round(t * n / T)
    assert math.isclose(k * T / n, t)
    assert t >= thr - 1e-12
    assert (k - 1) * T / n < thr


def test_order_params_accessors():
    p = OrderParams(1, 2, 2, GridSpec(1.0, 4))
    assert (p.m(), p.q(1), p.kappa(), p.q_nu, p.l_max) == (2, 3, 4, 4, 2)
    assert p.with_n(8).n == 8 and p.with_nu(3).nu == 3
    with pytest.raises(TypeError):
        OrderParams(1.0, 2, 2)
    with pytest.raises(ValueError):
        OrderParams(1, 0, 2)


@settings(max_examples=30)
@given(st.integers(0, 5), st.integers(1, 2), st.integers(1, 3))
def test_kappa_at_least_beta_times_m(nu, alpha, beta):
    assert kappa(0, nu, alpha, beta) >= beta * m_steps(0, nu, alpha)
