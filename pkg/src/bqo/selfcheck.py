"""Fast numerical self-checks run by ``bqo selfcheck``."""

from __future__ import annotations

import time

import numpy as np

from . import acquisition
from .gp import History, fit, posterior_cov, posterior_mean
from .kernels import FAMILIES, HyperParams, default_theta, get_kernel
from .quadrature import Measure, QuadPosterior


def _random_theta(family, d, p, m, rng, noise_var=None):
    th = default_theta(family, d, p, m, noise_var)
    kw = {"alpha_x": rng.uniform(0.5, 3.0, d), "mu0": rng.normal()}
    if family == "task_matern52":
        kw["task_chol"] = np.tril(rng.normal(size=(m, m)), -1) + np.diag(rng.uniform(0.5, 1.5, m))
    else:
        kw["sigma0_sq"] = rng.uniform(0.5, 2.0)
        kw["alpha_w"] = rng.uniform(0.5, 3.0, p)
    return th.replace(**kw)


def _random_points(family, n, d, p, m, rng):
    if family == "task_matern52":
        return np.concatenate([rng.random((n, d)), rng.integers(0, m, (n, 1))], axis=1)
    return rng.random((n, d + p))


def check_kernel_gradients(rng, trials=20):
    """Analytic x-gradients against central differences."""
    worst = 0.0
    h = 1e-5
    for family in FAMILIES:
        k = get_kernel(family)
        for _ in range(trials):
            th = _random_theta(family, 2, 1, 3, rng)
            a, b = _random_points(family, 2, 2, 1, 3, rng)
            g = k.grad_x(th, a, b)[1]
            for i in range(2):
                e = np.zeros_like(a)
                e[i] = h
                fd = (k.value(th, a + e, b) - k.value(th, a - e, b)) / (2 * h)
                worst = max(worst, abs(fd - g[i]) / max(abs(g[i]), 1e-3))
    return worst < 1e-6, f"max relative error {worst:.2e}"


def check_dense_oracle(rng, trials=10):
    """Cholesky posterior against explicit inverses of the Gram matrix."""
    worst = 0.0
    for t in range(trials):
        family = FAMILIES[t % 3]
        k = get_kernel(family)
        th = _random_theta(family, 2, 1, 3, rng)
        n = int(rng.integers(1, 10))
        X = _random_points(family, n, 2, 1, 3, rng)
        lam = rng.uniform(0.01, 0.5, n) * (t % 2)
        y = rng.normal(size=n)
        st = fit(k, History(X, y, lam), th)
        A = k.cov(th, X, X) + np.diag(lam) + st.jitter * np.eye(n)
        Ainv = np.linalg.inv(A)
        Q = _random_points(family, 5, 2, 1, 3, rng)
        Kq = k.cov(th, Q, X)
        mu = th.mu0 + Kq @ Ainv @ (y - th.mu0)
        cov = k.cov(th, Q, Q) - Kq @ Ainv @ Kq.T
        scale = th.prior_scale()
        worst = max(worst, np.max(np.abs(posterior_mean(st, Q) - mu)) / max(1.0, np.abs(mu).max()),
                    np.max(np.abs(posterior_cov(st, Q, Q) - cov)) / scale)
    return worst < 1e-8, f"max relative error {worst:.2e}"


def check_h_monte_carlo(rng, trials=5, draws=100_000):
    """Envelope value of ``h`` against a Monte Carlo mean of the maximum."""
    worst = 0.0
    for _ in range(trials):
        a = rng.normal(size=6)
        b = rng.normal(size=6)
        val = acquisition.h_exact(a, b).value
        z = rng.standard_normal(draws)
        s = np.max(a[:, None] + b[:, None] * z[None, :], axis=0) - a.max()
        se = s.std(ddof=1) / np.sqrt(draws)
        worst = max(worst, abs(s.mean() - val) / se)
    return worst < 4.0, f"max deviation {worst:.2f} SE"


def check_sigma_tilde_variance(rng, trials=10):
    """``sigma_tilde^2`` equals the drop in ``Var_n G(x)`` after observing the candidate."""
    worst = 0.0
    meas = Measure.finite(rng.random((4, 1)), rng.dirichlet(np.ones(4)))
    for _ in range(trials):
        th = _random_theta("sq_exp", 1, 1, 0, rng)
        n = int(rng.integers(1, 6))
        X = rng.random((n, 2))
        lam = rng.uniform(0.01, 0.3, n)
        hist = History(X, rng.normal(size=n), lam)
        qp = QuadPosterior(fit("sq_exp", hist, th), meas)
        c = rng.random((1, 2))
        lc = float(rng.uniform(0.01, 0.3))
        x = rng.random((6, 1))
        s = qp.sigma_tilde(x, c, lc)[:, 0]
        qp1 = QuadPosterior(fit("sq_exp", hist.append(c[0], 0.0, lc), th), meas)
        drop = qp.var_G(x) - qp1.var_G(x)
        worst = max(worst, np.max(np.abs(s * s - drop)) / th.sigma0_sq)
    return worst < 1e-8, f"max error {worst:.2e}"


CHECKS = (
    ("kernel gradients vs finite differences", check_kernel_gradients),
    ("GP posterior vs dense inverse", check_dense_oracle),
    ("h exact vs Monte Carlo (1e5 draws)", check_h_monte_carlo),
    ("sigma_tilde variance identity", check_sigma_tilde_variance),
)


def run_checks(seed=20240611, log=print):
    """Run every check; print one pass/fail line each and return overall success."""
    ok_all = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn(np.random.default_rng(seed))
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= ok
        log(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t0:.1f}s)")
    return ok_all
