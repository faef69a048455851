import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles as O
from bqo.errors import ConfigurationError, UnsupportedOperationError
from bqo.kernels import (FAMILIES, HyperParams, default_theta, get_kernel, kernel_eval,
                         kernel_grad, kernel_hyper_grad)
from conftest import DATA, random_points, random_theta

FD_STEP = 1e-5


def rel_err(a, b, floor=1e-3):
    return np.max(np.abs(np.asarray(a) - np.asarray(b)) / np.maximum(np.abs(b), floor))


def test_se_hand_values():
    th = HyperParams(sigma0_sq=1.0, alpha_x=[1.0])
    assert kernel_eval(th, np.array([0.0]), np.array([0.0]), "sq_exp") == 1.0
    assert kernel_eval(th, np.array([0.0]), np.array([1.0]), "sq_exp") == pytest.approx(0.367879, abs=1e-6)
    g = kernel_grad(th, np.array([1.0]), np.array([0.0]), "sq_exp")
    assert g[0] == pytest.approx(-0.735759, abs=1e-6)


def test_zero_distance_identities(rng):
    for _ in range(10):
        th = random_theta("matern52", rng, 2, 1)
        a = rng.random(3)
        assert kernel_eval(th, a, a, "matern52") == pytest.approx(th.sigma0_sq, rel=1e-14)
        th = random_theta("sq_exp", rng, 2, 1)
        np.testing.assert_array_equal(kernel_grad(th, a, a, "sq_exp"), 0.0)
    th = random_theta("task_matern52", rng, 1, m=3)
    T = th.task_cov()
    for t in range(3):
        a = np.array([0.3, t])
        assert kernel_eval(th, a, a, "task_matern52") == pytest.approx(T[t, t])


@pytest.mark.parametrize("family", FAMILIES)
def test_values_match_loop_oracle(family, rng):
    for _ in range(30):
        th = random_theta(family, rng, 2, 1)
        a, b = random_points(family, rng, 2, 2, 1)
        assert kernel_eval(th, a, b, family) == pytest.approx(O.kernel_fn(family, th)(a, b), rel=1e-13)


@pytest.mark.parametrize("family", FAMILIES)
def test_x_gradient_finite_differences(family, rng):
    worst = 0.0
    for _ in range(100):
        th = random_theta(family, rng, 2, 1)
        a, b = random_points(family, rng, 2, 2, 1)
        g = kernel_grad(th, a, b, family, wrt="x")
        for i in range(2):
            e = np.zeros_like(a)
            e[i] = FD_STEP
            fd = (kernel_eval(th, a + e, b, family) - kernel_eval(th, a - e, b, family)) / (2 * FD_STEP)
            worst = max(worst, rel_err(g[i], fd))
    assert worst < 1e-6


@pytest.mark.parametrize("family", ["sq_exp", "matern52"])
def test_w_gradient_finite_differences(family, rng):
    for _ in range(50):
        th = random_theta(family, rng, 1, 2)
        a, b = rng.random((2, 3))
        g = kernel_grad(th, a, b, family)
        for i in range(3):
            e = np.zeros(3)
            e[i] = FD_STEP
            fd = (kernel_eval(th, a + e, b, family) - kernel_eval(th, a - e, b, family)) / (2 * FD_STEP)
            assert rel_err(g[i], fd) < 1e-6


def test_task_kernel_refuses_w_gradient(rng):
    th = random_theta("task_matern52", rng, 1)
    with pytest.raises(UnsupportedOperationError):
        kernel_grad(th, np.array([0.1, 0.0]), np.array([0.4, 1.0]), "task_matern52")


def _perturb(th, group, idx, h):
    val = np.array(getattr(th, group), dtype=float, copy=True)
    if np.ndim(val) == 0:
        return th.replace(**{group: float(val) + h})
    val[idx] += h
    return th.replace(**{group: val})


@pytest.mark.parametrize("family", FAMILIES)
def test_hyper_gradient_finite_differences(family, rng):
    worst = 0.0
    for _ in range(100):
        th = random_theta(family, rng, 2, 1)
        a, b = random_points(family, rng, 2, 2, 1)
        g = kernel_hyper_grad(th, a, b, family)
        for group, val in g.items():
            val = np.asarray(val)
            for idx in np.ndindex(val.shape):
                if group == "task_chol" and idx[1] > idx[0]:
                    continue
                up = kernel_eval(_perturb(th, group, idx, FD_STEP), a, b, family)
                dn = kernel_eval(_perturb(th, group, idx, -FD_STEP), a, b, family)
                worst = max(worst, rel_err(val[idx], (up - dn) / (2 * FD_STEP)))
    assert worst < 1e-6


def test_sigma_gradient_is_value_over_sigma(rng):
    th = random_theta("sq_exp", rng, 1, 1)
    a, b = rng.random((2, 2))
    g = kernel_hyper_grad(th, a, b, "sq_exp")["sigma0_sq"]
    assert g == pytest.approx(kernel_eval(th, a, b, "sq_exp") / th.sigma0_sq, rel=1e-14)


def test_dimension_mismatch_is_configuration_error():
    th = default_theta("sq_exp", 2, 1)
    with pytest.raises(ConfigurationError):
        kernel_eval(th, np.zeros(2), np.zeros(2), "sq_exp")
    with pytest.raises(ConfigurationError):
        get_kernel("rbf")


def test_invalid_hyperparameters_rejected():
    with pytest.raises(ConfigurationError):
        HyperParams(sigma0_sq=-1.0)
    with pytest.raises(ConfigurationError):
        HyperParams(alpha_x=[0.0])
    with pytest.raises(ConfigurationError):
        HyperParams(task_chol=[[1.0, 0.0], [0.5, -1.0]])


def test_task_index_out_of_range(rng):
    th = random_theta("task_matern52", rng, 1, m=3)
    with pytest.raises(ConfigurationError):
        kernel_eval(th, np.array([0.1, 3.0]), np.array([0.1, 0.0]), "task_matern52")


def test_frozen_posterior_instances_use_matching_kernels():
    cases = json.loads((DATA / "frozen_oracles.json").read_text())["posterior"]
    assert {c["family"] for c in cases} == set(FAMILIES)


@st.composite
def kernel_case(draw):
    family = draw(st.sampled_from(FAMILIES))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    return family, np.random.default_rng(seed)


@given(kernel_case())
def test_symmetry(case):
    family, rng = case
    th = random_theta(family, rng, 2, 1)
    a, b = random_points(family, rng, 2, 2, 1)
    assert kernel_eval(th, a, b, family) == pytest.approx(kernel_eval(th, b, a, family), rel=1e-14)


@given(kernel_case())
def test_gram_is_psd(case):
    family, rng = case
    th = random_theta(family, rng, 2, 1)
    X = random_points(family, rng, 10, 2, 1)
    K = get_kernel(family).cov(th, X, X)
    assert np.linalg.eigvalsh(K).min() >= -1e-8 * th.prior_scale()


@given(kernel_case())
def test_stationarity_of_gradient(case):
    family, rng = case
    th = random_theta(family, rng, 2, 1)
    a, b = random_points(family, rng, 2, 2, 1)
    k = get_kernel(family)
    ga = k.grad_x(th, a, b)[1]
    gb = k.grad_x(th, b, a)[1]
    np.testing.assert_allclose(ga, -gb, atol=1e-14)
