import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles as O
from bqo.acquisition import (Discretization, _log_f_neg, degenerate_posterior, ei, h_batch,
                             h_batch_log, h_exact, kg,
                             voi_discretized, voi_discretized_batch, voi_grad_samples, voi_mc,
                             voi_mc_samples)
from bqo.domain import Box, FiniteSet
from bqo.gp import History, fit
from bqo.kernels import FAMILIES, HyperParams
from bqo.optimize import InnerMaximizer
from bqo.quadrature import Measure, QuadPosterior
from conftest import DATA, random_theta
from scenarios import (X1, X2, two_decision_ei, random_candidate, random_finite_state,
                       two_decision_state)

FROZEN = json.loads((DATA / "frozen_oracles.json").read_text())

vectors = st.integers(1, 9).flatmap(lambda n: st.tuples(
    st.lists(st.floats(-3, 3), min_size=n, max_size=n),
    st.lists(st.floats(-2, 2), min_size=n, max_size=n)))


def test_h_matches_frozen_quadrature():
    for c in FROZEN["h"]:
        assert h_exact(c["a"], c["b"]).value == pytest.approx(c["value"], rel=1e-9, abs=1e-13)
        assert h_batch(np.array(c["a"]), np.array(c["b"]))[0][0] == pytest.approx(c["value"], rel=1e-9,
                                                                                   abs=1e-13)


@given(vectors)
def test_h_matches_live_quadrature(ab):
    a, b = map(np.array, ab)
    assert h_exact(a, b).value == pytest.approx(O.h_integral(a, b), rel=1e-8, abs=1e-10)


@given(vectors, st.floats(-5, 5), st.floats(-2, 2), st.floats(0.1, 10))
def test_h_invariances(ab, shift, slope, scale):
    a, b = map(np.array, ab)
    v = h_exact(a, b).value
    assert v >= 0.0
    assert h_exact(a + shift, b).value == pytest.approx(v, rel=1e-9, abs=1e-12)
    # a common slope adds a mean-zero term
    assert h_exact(a, b + slope).value == pytest.approx(v, rel=1e-7, abs=1e-9)
    assert h_exact(scale * a, scale * b).value == pytest.approx(scale * v, rel=1e-9, abs=1e-12)


def test_h_edge_cases():
    assert h_exact([1.0], [3.0]).value == 0.0
    r = h_exact([0.0, 2.0, 1.0], [1.0, 1.0, 1.0])
    assert r.value == 0.0 and list(r.indices) == [1]
    # two lines crossing at zero: E[max(0, Z)] = 1/sqrt(2 pi)
    assert h_exact([0.0, 0.0], [0.0, 1.0]).value == pytest.approx(1 / np.sqrt(2 * np.pi), rel=1e-14)
    # dominated lines do not contribute
    assert h_exact([0.0, 0.0, -50.0], [0.0, 1.0, 0.5]).value == pytest.approx(1 / np.sqrt(2 * np.pi))


@given(vectors)
def test_log_h_matches_h(ab):
    a, b = map(np.array, ab)
    v = h_batch(a, b)[0][0]
    lv = h_batch_log(a, b)[0]
    tiny = np.finfo(float).tiny
    if v >= tiny:
        assert lv == pytest.approx(np.log(v), rel=1e-9, abs=1e-12)
    elif np.all(b == b[0]):
        assert lv == -np.inf
    else:
        # plain h is subnormal or zero here and no longer a usable reference
        assert lv < np.log(tiny)


@pytest.mark.parametrize("a1", [0.59375, 1.0])
def test_log_h_below_double_range_matches_high_precision(a1):
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 60
    a, b = np.array([0.0, a1]), np.array([0.0, 0.015625])
    t = mpmath.mpf(a1) / b[1]
    ref = float(mpmath.log(b[1] * (mpmath.npdf(t) - t * mpmath.ncdf(-t))))
    assert h_batch_log(a, b)[0] == pytest.approx(ref, rel=1e-12)


def test_log_f_far_tail_matches_high_precision():
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 60
    for t in [0.0, 0.7, 5.0, 37.0, 45.0, 300.0, 999.0, 1001.0, 5e4]:
        ref = float(mpmath.log(mpmath.npdf(t) - t * mpmath.ncdf(-t)))
        assert _log_f_neg(t) == pytest.approx(ref, rel=1e-11)


def test_log_h_orders_values_that_underflow():
    # crossings at z = 40 and z = 45: both values are below the double range
    lines = np.array([0.0, -40.0, -45.0])
    B = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert np.all(h_batch(lines, B)[0] == 0.0)
    near, far = h_batch_log(lines, B)
    assert np.isfinite(far) and near > far
    assert near == pytest.approx(float(_log_f_neg(40.0)), rel=1e-12)


def test_h_breakpoints_increase(rng):
    for _ in range(50):
        r = h_exact(rng.normal(size=8), rng.normal(size=8))
        assert np.all(np.diff(r.breakpoints) > 0)


def test_h_agrees_with_monte_carlo(rng):
    z = rng.standard_normal(200_000)
    for _ in range(10):
        a, b = rng.normal(size=6), rng.normal(size=6)
        mean, se = O.h_monte_carlo(a, b, z)
        assert abs(h_exact(a, b).value - mean) < 4 * se


def test_h_gradient_finite_differences(rng):
    for _ in range(30):
        a = rng.normal(size=7)
        B = rng.normal(size=(7, 3))
        _, om = h_batch(a, B, grad=True)
        for i in range(7):
            e = np.zeros((7, 3))
            e[i] = 1e-6
            fd = (h_batch(a, B + e)[0] - h_batch(a, B - e)[0]) / 2e-6
            np.testing.assert_allclose(om[i], fd, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("family", FAMILIES)
def test_voi_discretized_is_h_of_posterior_terms(family, rng):
    qp, grid = random_finite_state(family, rng)
    cand = random_candidate(qp, rng)
    v, _ = voi_discretized(qp, cand, grid, 0.03)
    a = qp.a_n(grid)
    b = qp.sigma_tilde(grid, cand[None], 0.03)[:, 0]
    assert v == pytest.approx(O.h_integral(a, b), rel=1e-8, abs=1e-12)


@pytest.mark.parametrize("family", FAMILIES)
def test_voi_discretized_gradient_finite_differences(family, rng):
    h = 1e-6
    for _ in range(10):
        qp, grid = random_finite_state(family, rng, d=2)
        cand = random_candidate(qp, rng, d=2)
        _, g = voi_discretized(qp, cand, grid, 0.05)
        cont = 2 if qp.task else cand.size
        for i in range(cont):
            e = np.zeros_like(cand)
            e[i] = h
            fd = (voi_discretized(qp, cand + e, grid, 0.05)[0]
                  - voi_discretized(qp, cand - e, grid, 0.05)[0]) / (2 * h)
            assert g[i] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_voi_batch_equals_single(rng):
    qp, grid = random_finite_state("sq_exp", rng)
    C = np.stack([random_candidate(qp, rng) for _ in range(5)])
    vals, grads = voi_discretized_batch(qp, C, Discretization(grid), 0.02)
    for c, v, g in zip(C, vals, grads):
        v1, g1 = voi_discretized(qp, c, grid, 0.02)
        assert v == pytest.approx(v1, rel=1e-12)
        np.testing.assert_allclose(g, g1, rtol=1e-10, atol=1e-14)


def test_voi_mc_agrees_with_discretized_on_finite_domain(rng):
    for family in FAMILIES:
        qp, grid = random_finite_state(family, rng)
        inner = InnerMaximizer(FiniteSet(grid))
        cand = random_candidate(qp, rng)
        exact, _ = voi_discretized(qp, cand, grid, 0.05)
        mean, se = voi_mc(qp, cand, 50_000, rng, 0.05, inner, return_se=True)
        assert abs(mean - exact) < 4 * se + 1e-12


def test_voi_mc_common_random_numbers_are_reproducible(rng):
    qp, grid = random_finite_state("matern52", rng)
    inner = InnerMaximizer(FiniteSet(grid))
    C = np.stack([random_candidate(qp, rng) for _ in range(3)])
    Z = rng.standard_normal(500)
    a = voi_mc_samples(qp, C, Z, 0.1, inner)
    b = voi_mc_samples(qp, C, Z, 0.1, inner)
    np.testing.assert_array_equal(a, b)


def test_stochastic_gradient_is_unbiased_on_small_problem(rng):
    qp, grid = random_finite_state("sq_exp", rng, d=1)
    box = Box([0.0], [1.0])
    inner = InnerMaximizer(box, rng=np.random.default_rng(1), iters=60)
    cand = random_candidate(qp, rng)
    Z = rng.standard_normal(40_000)
    _, g, _ = voi_grad_samples(qp, cand, Z, 0.05, inner, idx=np.zeros(Z.size, dtype=np.intp),
                               wrt="all")
    h = 1e-4
    e = np.zeros_like(cand)
    e[0] = h
    diff = (voi_mc_samples(qp, cand + e, Z, 0.05, inner)[0]
            - voi_mc_samples(qp, cand - e, Z, 0.05, inner)[0]) / (2 * h)
    se = np.sqrt(np.var(g[:, 0]) / Z.size + np.var(diff) / Z.size)
    assert abs(g[:, 0].mean() - diff.mean()) < 4 * se + 1e-6


def test_noiseless_duplicate_has_zero_voi(rng):
    qp, grid = random_finite_state("sq_exp", rng, noisy=False)
    dup = qp.state.history.points[0]
    assert voi_discretized(qp, dup, grid, 0.0)[0] == 0.0
    # F is already known there, whatever noise a repeat would carry
    assert voi_discretized(qp, dup, grid, 0.1)[0] == pytest.approx(0.0, abs=1e-12)
    assert voi_discretized(qp, dup + 0.05, grid, 0.0)[0] > 0.0


@given(st.integers(0, 2 ** 32 - 1))
def test_kg_equals_bqo_with_single_atom(seed):
    rng = np.random.default_rng(seed)
    theta = random_theta("matern52", rng, 2, 0)
    X = rng.random((6, 2))
    state = fit("matern52", History(X, rng.normal(size=6), rng.uniform(0.01, 0.2, 6)), theta)
    grid = rng.random((20, 2))
    cand = rng.random((4, 2))
    kv, kgrad = kg(degenerate_posterior(state), cand, disc=grid, lam=0.05)
    qp = QuadPosterior(state, Measure.single_atom(0))
    for c, v, g in zip(cand, kv, kgrad):
        bv, bg = voi_discretized(qp, c, grid, 0.05)
        assert abs(v - bv) <= 1e-10
        np.testing.assert_allclose(g, bg, atol=1e-10)


def test_kg_rejects_multi_atom_measure(rng):
    qp, grid = random_finite_state("sq_exp", rng)
    with pytest.raises(ValueError):
        kg(qp, grid[:1], disc=grid)


def test_ei_matches_frozen_closed_form():
    for c in FROZEN["ei"]:
        th = HyperParams(sigma0_sq=c["sd"] ** 2, alpha_x=[1.0], alpha_w=np.zeros(0), mu0=c["mean"])
        qp = QuadPosterior(fit("sq_exp", History.empty(1), th), Measure.single_atom(0))
        assert ei(qp, [[0.3]], best=c["best"])[0] == pytest.approx(c["value"], rel=1e-12, abs=1e-15)


def test_ei_matches_live_closed_form_and_gradient(rng):
    for family in ("sq_exp", "matern52"):
        qp, grid = random_finite_state(family, rng, d=2)
        X = rng.random((8, 2))
        vals, grads = ei(qp, X, grad=True)
        best = qp.a_n(qp.state.history.points[:, :2]).max()
        for x, v in zip(X, vals):
            ref = O.ei_closed_form(qp.a_n(x[None])[0], np.sqrt(qp.var_G(x[None])[0]), best)
            assert v == pytest.approx(ref, rel=1e-10, abs=1e-14)
        for i in range(2):
            e = np.zeros_like(X)
            e[:, i] = 1e-6
            fd = (ei(qp, X + e) - ei(qp, X - e)) / 2e-6
            np.testing.assert_allclose(grads[:, i], fd, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("L", [3.0, 5.0, 10.0])
def test_two_decision_construction(L):
    M, v2 = 10, 2.0
    qp = two_decision_state(M, v2, L)
    disc = np.array([[X1], [X2]])
    v21 = voi_discretized(qp, [X2, 0.0], disc)[0]
    for i in range(1, M):
        assert v21 > voi_discretized(qp, [X1, float(i)], disc)[0]
    # the sufficient condition: a wider spread of sigma_tilde across decisions
    s21 = qp.sigma_tilde(disc, [[X2, 0.0]], 0.0)[:, 0]
    s1i = qp.sigma_tilde(disc, [[X1, 1.0]], 0.0)[:, 0]
    assert abs(s21[0] - s21[1]) > abs(s1i[0] - s1i[1])
    e1, e2 = ei(qp, disc)
    assert e1 > e2
    ref1, ref2 = two_decision_ei(M, v2, L, unit_variance=False)
    assert (e1, e2) == pytest.approx((ref1, ref2), rel=1e-6)
