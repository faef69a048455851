import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from bqo.gp import JITTER_START, History, fit
from bqo.kernels import HyperParams
from bqo.quadrature import Measure, QuadPosterior

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

DATA = Path(__file__).parent / "data"


def random_theta(family, rng, d=1, p=1, m=3, noise_var=None, alpha=(0.5, 3.0)):
    if family == "task_matern52":
        L = np.tril(rng.normal(scale=0.5, size=(m, m)), -1) + np.diag(rng.uniform(0.6, 1.4, m))
        return HyperParams(alpha_x=rng.uniform(*alpha, d), alpha_w=np.zeros(0), task_chol=L,
                           mu0=rng.normal(), noise_var=noise_var)
    return HyperParams(sigma0_sq=rng.uniform(0.5, 2.0), alpha_x=rng.uniform(*alpha, d),
                       alpha_w=rng.uniform(*alpha, p), mu0=rng.normal(), noise_var=noise_var)


def random_points(family, rng, n, d=1, p=1, m=3):
    if family == "task_matern52":
        return np.concatenate([rng.random((n, d)), rng.integers(0, m, (n, 1)).astype(float)], 1)
    return rng.random((n, d + p))


def random_measure(family, rng, p=1, m=3, atoms=4):
    if family == "task_matern52":
        return Measure.finite(np.arange(m, dtype=float)[:, None], rng.dirichlet(np.ones(m)))
    return Measure.finite(rng.random((atoms, p)), rng.dirichlet(np.ones(atoms)))


def random_qp(family, rng, n=5, d=1, p=1, m=3, noisy=True, measure=None):
    """A fitted posterior of ``G`` on a random history."""
    theta = random_theta(family, rng, d, p, m)
    X = random_points(family, rng, n, d, p, m)
    lam = rng.uniform(0.01, 0.2, n) if noisy else np.zeros(n)
    hist = History(X, rng.normal(size=n), lam)
    meas = measure if measure is not None else random_measure(family, rng, p, m)
    return QuadPosterior(fit(family, hist, theta), meas)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def jitter_for(theta):
    return JITTER_START * theta.prior_scale()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
